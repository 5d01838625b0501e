"""Unnormalized log-posterior of region excitability parameters given lead data.

Log-space throughout: the box-uniform prior contributes 0 inside its support
and -inf outside, and the Gaussian likelihood contributes
``-||Y_obs - F(theta)||_F^2 / (2 sigma_e^2)`` where F runs the forward
simulation and measurement pipeline.
"""

from __future__ import annotations

import threading

import numpy as np

from . import forward_model as fm

DEFAULT_BOUNDS = (fm.A_MIN, fm.A_MAX)


class EvaluationError(RuntimeError):
    """Forward evaluation failed; carries the offending parameter vector."""

    def __init__(self, theta, cause: Exception):
        self.theta = np.asarray(theta, dtype=float)
        self.cause = cause
        super().__init__(f"forward evaluation failed at theta={self.theta}: {cause}")


def log_prior(theta, bounds=DEFAULT_BOUNDS) -> float:
    """0 inside the closed box [lo, hi]^R, -inf outside (unnormalized)."""
    theta = np.asarray(theta, dtype=float)
    lo, hi = bounds
    if np.all(theta >= lo) and np.all(theta <= hi):
        return 0.0
    return -np.inf


def estimate_sigma_e(Y_obs, snr_db: float) -> float:
    """Noise std implied by an observation's power at the given SNR."""
    Y = np.asarray(Y_obs.Y if isinstance(Y_obs, fm.Observation) else Y_obs, dtype=float)
    if Y.size == 0:
        raise ValueError("observation is empty")
    return float(np.sqrt(np.mean(Y**2) * 10.0 ** (-snr_db / 10.0)))


class PosteriorContext:
    """Bundles the forward pipeline, the observed data, and the noise model.

    Parameters
    ----------
    geometry, partition : grid and region layout for the simulation.
    stimulus : pacing protocol.
    lead_field : measurement operator.
    y_obs : Observation or (L, T) array of observed lead voltages.
    sigma_e : likelihood noise std (> 0).
    dt, t_end, store_every : integration controls; stored steps must match
        the observation's time axis.
    ap_constants : optional dict overriding k/d/e0/mu1/mu2.
    bounds : prior box, default [0, 0.52] per dimension.

    ``eval_count`` tracks exact forward evaluations; it increments exactly
    once per log-posterior evaluation whose prior is finite, and never on the
    prior short-circuit.  The counter update is lock-protected so chains may
    evaluate concurrently.
    """

    def __init__(
        self,
        geometry: fm.GridGeometry,
        partition: fm.RegionPartition,
        stimulus: fm.StimulusProtocol,
        lead_field: fm.LeadField,
        y_obs,
        sigma_e: float,
        dt: float,
        t_end: float,
        store_every: int = 1,
        ap_constants: dict | None = None,
        bounds=DEFAULT_BOUNDS,
    ):
        if not sigma_e > 0:
            raise ValueError("sigma_e must be positive")
        lo, hi = bounds
        if not lo < hi:
            raise ValueError("invalid prior bounds")
        self.geometry = geometry
        self.partition = partition
        self.stimulus = stimulus
        self.lead_field = lead_field
        self.Y_obs = np.asarray(y_obs.Y if isinstance(y_obs, fm.Observation) else y_obs, dtype=float)
        self.sigma_e = float(sigma_e)
        self.dt = float(dt)
        self.t_end = float(t_end)
        self.store_every = int(store_every)
        self.ap_constants = {
            "k": fm.DEFAULT_K,
            "d": fm.DEFAULT_D,
            "e0": fm.DEFAULT_E0,
            "mu1": fm.DEFAULT_MU1,
            "mu2": fm.DEFAULT_MU2,
        }
        if ap_constants:
            self.ap_constants.update(ap_constants)
        self.bounds = (float(lo), float(hi))
        self._eval_count = 0
        self._lock = threading.Lock()

    @property
    def n_params(self) -> int:
        return self.partition.n_regions

    @property
    def eval_count(self) -> int:
        return self._eval_count

    def forward(self, theta) -> np.ndarray:
        """Run the full pipeline F(theta): simulate, then measure.  (L, T)."""
        a_field = fm.expand_parameters(theta, self.partition)
        params = fm.APParams(a_field=a_field, **self.ap_constants)
        sim = fm.simulate_ap(
            self.geometry, params, self.stimulus, self.dt, self.t_end, self.store_every
        )
        return fm.measure_ecg(sim, self.lead_field).Y

    def log_prior(self, theta) -> float:
        return log_prior(theta, self.bounds)

    def log_likelihood(self, theta) -> float:
        """Gaussian log-likelihood; counts one exact evaluation.

        The caller is expected to have checked the prior; calling this with an
        out-of-box theta raises through the forward model's validation.
        """
        try:
            Y = self.forward(theta)
        except (ValueError, fm.SimulationBlowupError) as exc:
            raise EvaluationError(theta, exc) from exc
        with self._lock:
            self._eval_count += 1
        r = self.Y_obs - Y
        return float(-(r * r).sum() / (2.0 * self.sigma_e**2))

    def log_posterior(self, theta) -> float:
        lp = self.log_prior(theta)
        if lp == -np.inf:
            return -np.inf
        return lp + self.log_likelihood(theta)


class CallablePosterior:
    """Adapter giving an analytic log-density the PosteriorContext surface.

    Useful for driving the surrogate builder and samplers with cheap test
    targets: the box prior and the evaluation counter behave exactly as in
    PosteriorContext.
    """

    def __init__(self, fn, bounds, n_params: int):
        self.fn = fn
        lo, hi = bounds
        self.bounds = (float(lo), float(hi))
        self.n_params = int(n_params)
        self._eval_count = 0
        self._lock = threading.Lock()

    @property
    def eval_count(self) -> int:
        return self._eval_count

    def log_prior(self, theta) -> float:
        return log_prior(theta, self.bounds)

    def log_likelihood(self, theta) -> float:
        with self._lock:
            self._eval_count += 1
        return float(self.fn(np.asarray(theta, dtype=float)))

    def log_posterior(self, theta) -> float:
        lp = self.log_prior(theta)
        if lp == -np.inf:
            return -np.inf
        return lp + self.log_likelihood(theta)
