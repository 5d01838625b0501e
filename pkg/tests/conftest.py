import numpy as np
import pytest

from gpmh import forward_model as fm
from gpmh.posterior import PosteriorContext, estimate_sigma_e

# The standard two-region test case used across the sampler and acceptance
# suites: 20x20 grid split into left/right halves, a stimulus block spanning
# the interface so both regions are probed immediately, four circular leads,
# and 10 dB noise.  Both marginals end up comparably informative, which the
# isotropic proposal needs.
STANDARD = dict(
    nx=20, ny=20, h=1.0, rows=1, cols=2,
    stim_origin=(8, 8), stim_block=(4, 4),
    n_leads=4, d=0.3, dt=0.1, t_end=16.0, store_every=8,
    theta_true=(0.15, 0.2), snr_db=10.0,
)


def make_standard_context(noise_seed=123, theta_true=None, snr_db=None, n_leads=None):
    p = STANDARD
    theta_true = np.asarray(theta_true if theta_true is not None else p["theta_true"])
    snr_db = snr_db if snr_db is not None else p["snr_db"]
    n_leads = n_leads if n_leads is not None else p["n_leads"]
    geometry = fm.build_grid(p["nx"], p["ny"], p["h"])
    partition = fm.partition_grid(geometry, p["rows"], p["cols"])
    stimulus = fm.block_stimulus(geometry, p["stim_origin"], p["stim_block"])
    lead_field = fm.build_lead_field(geometry, fm.circle_electrodes(geometry, n_leads))
    a_field = fm.expand_parameters(theta_true, partition)
    sim = fm.simulate_ap(
        geometry, fm.APParams(a_field=a_field, d=p["d"]), stimulus,
        p["dt"], p["t_end"], p["store_every"],
    )
    clean = fm.measure_ecg(sim, lead_field)
    noisy = fm.add_noise(clean, snr_db, seed=noise_seed)
    sigma_e = estimate_sigma_e(noisy, snr_db)
    return PosteriorContext(
        geometry, partition, stimulus, lead_field, noisy, sigma_e,
        dt=p["dt"], t_end=p["t_end"], store_every=p["store_every"],
        ap_constants={"d": p["d"]},
    )


@pytest.fixture(scope="session")
def standard_ctx():
    return make_standard_context()
