import numpy as np
import pytest

from gpmh import forward_model as fm
from gpmh.posterior import (
    CallablePosterior,
    EvaluationError,
    PosteriorContext,
    estimate_sigma_e,
    log_prior,
)


def tiny_context(theta_true=(0.3,), snr_db=None, noise_seed=5):
    """One-region 8x8 case, cheap enough for grid scans."""
    geometry = fm.build_grid(8, 8, 1.0)
    partition = fm.partition_grid(geometry, 1, 1)
    stimulus = fm.block_stimulus(geometry, (3, 3), (2, 2))
    lead_field = fm.build_lead_field(geometry, fm.circle_electrodes(geometry, 2))
    a_field = fm.expand_parameters(np.asarray(theta_true), partition)
    sim = fm.simulate_ap(
        geometry, fm.APParams(a_field=a_field, d=0.3), stimulus, 0.1, 8.0, 4
    )
    obs = fm.measure_ecg(sim, lead_field)
    if snr_db is not None:
        obs = fm.add_noise(obs, snr_db, seed=noise_seed)
        sigma_e = estimate_sigma_e(obs, snr_db)
    else:
        sigma_e = 1.0
    return PosteriorContext(
        geometry, partition, stimulus, lead_field, obs, sigma_e,
        dt=0.1, t_end=8.0, store_every=4, ap_constants={"d": 0.3},
    )


class TestLogPrior:
    def test_paper_values_inside(self):
        assert log_prior(np.array([0.15, 0.5])) == 0.0

    def test_outside_upper_bound(self):
        assert log_prior(np.array([0.53])) == -np.inf

    def test_boundary_inclusive(self):
        assert log_prior(np.array([0.0])) == 0.0
        assert log_prior(np.array([0.52])) == 0.0

    def test_any_coordinate_outside_kills(self):
        assert log_prior(np.array([0.1, -0.01, 0.2])) == -np.inf

    def test_custom_bounds(self):
        assert log_prior(np.array([2.0]), bounds=(-3.0, 3.0)) == 0.0
        assert log_prior(np.array([4.0]), bounds=(-3.0, 3.0)) == -np.inf


class TestEstimateSigmaE:
    def test_unit_power_20db(self):
        Y = np.ones((4, 25))
        assert np.isclose(estimate_sigma_e(Y, 20.0), 0.1)

    def test_infinite_snr_limit(self):
        Y = np.ones((2, 2))
        assert estimate_sigma_e(Y, np.inf) == 0.0
        assert estimate_sigma_e(Y, 200.0) < 1e-9

    def test_scaling_homogeneity(self):
        rng = np.random.default_rng(0)
        Y = rng.normal(size=(3, 7))
        c = 3.5
        assert np.isclose(estimate_sigma_e(c * Y, 13.0), c * estimate_sigma_e(Y, 13.0))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            estimate_sigma_e(np.empty((0, 4)), 20.0)


class TestLogLikelihood:
    def test_zero_residual_is_maximum(self):
        ctx = tiny_context()
        assert ctx.log_likelihood(np.array([0.3])) == 0.0

    def test_quadratic_in_residual(self):
        ctx = tiny_context()
        ll = ctx.log_likelihood(np.array([0.2]))
        r2 = np.sum((ctx.Y_obs - ctx.forward(np.array([0.2]))) ** 2)
        assert np.isclose(ll, -r2 / 2.0)

    def test_sigma_scaling_identity(self):
        ctx1 = tiny_context()
        ctx2 = tiny_context()
        ctx2.sigma_e = 2.0
        theta = np.array([0.22])
        assert np.isclose(ctx2.log_likelihood(theta), ctx1.log_likelihood(theta) / 4.0)

    def test_monotone_in_residual(self):
        ctx = tiny_context()
        lps = [ctx.log_likelihood(np.array([t])) for t in (0.3, 0.32, 0.36, 0.42)]
        assert all(a > b for a, b in zip(lps, lps[1:]))

    def test_counter_increments(self):
        ctx = tiny_context()
        before = ctx.eval_count
        ctx.log_likelihood(np.array([0.25]))
        assert ctx.eval_count == before + 1


class TestLogPosterior:
    def test_short_circuit_skips_forward_model(self):
        ctx = tiny_context()
        before = ctx.eval_count
        assert ctx.log_posterior(np.array([0.6])) == -np.inf
        assert ctx.log_posterior(np.array([-0.1])) == -np.inf
        assert ctx.eval_count == before

    def test_zero_residual_composition(self):
        ctx = tiny_context()
        assert ctx.log_posterior(np.array([0.3])) == 0.0

    def test_determinism_bit_identical(self):
        ctx = tiny_context(snr_db=10.0)
        theta = np.array([0.27])
        a = ctx.log_posterior(theta)
        b = ctx.log_posterior(theta)
        assert a == b

    def test_grid_scan_oracle_noiseless(self):
        # brute-force scan: the generating value maximizes the posterior
        ctx = tiny_context(theta_true=(0.3,))
        grid = np.round(np.arange(0.05, 0.52, 0.025), 10)
        values = [ctx.log_posterior(np.array([t])) for t in grid]
        assert np.isclose(grid[int(np.argmax(values))], 0.3)

    def test_grid_scan_oracle_noisy(self):
        ctx = tiny_context(theta_true=(0.3,), snr_db=20.0)
        grid = np.round(np.arange(0.1, 0.52, 0.05), 10)
        values = [ctx.log_posterior(np.array([t])) for t in grid]
        assert np.isclose(grid[int(np.argmax(values))], 0.3)

    def test_evaluation_error_carries_theta(self):
        ctx = tiny_context()
        ctx.dt = 5.0  # violates the stability bound at d=0.3 -> rejected up front
        with pytest.raises(EvaluationError) as err:
            ctx.log_likelihood(np.array([0.3]))
        assert np.allclose(err.value.theta, [0.3])


class TestCallablePosterior:
    def test_wraps_function_with_box_prior(self):
        target = CallablePosterior(lambda th: -np.sum(th**2), bounds=(-1.0, 1.0), n_params=2)
        assert target.log_posterior(np.array([0.5, 0.5])) == -0.5
        assert target.log_posterior(np.array([1.5, 0.0])) == -np.inf

    def test_counter_only_counts_finite_prior(self):
        target = CallablePosterior(lambda th: 0.0, bounds=(0.0, 1.0), n_params=1)
        target.log_posterior(np.array([2.0]))
        assert target.eval_count == 0
        target.log_posterior(np.array([0.5]))
        assert target.eval_count == 1
