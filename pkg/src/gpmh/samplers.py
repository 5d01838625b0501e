"""Metropolis-Hastings samplers: native, surrogate-filtered two-stage, and helpers.

The two-stage kernel screens each proposal against the cheap surrogate first
(stage 1) and evaluates the exact log-posterior only for survivors (stage 2):

    stage 1:  accept-to-continue with  min(1, exp(l*(th') - l*(th_n)))
    stage 2:  accept with  min(1, exp[(l(th') - l(th_n)) - (l*(th') - l*(th_n))])

A stage-1 rejection repeats the current state in the chain, which preserves
the exact posterior as the stationary distribution.  Proposals are isotropic
Gaussian, so the q-ratio cancels in both stages.

Every step consumes the same amount of randomness (R normals plus two
uniforms) regardless of which branch runs, so exact-target and two-stage runs
with the same seed see identical proposal streams and can be compared
pathwise when the surrogate equals the exact density.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from .gp_surrogate import GPModel, predict_mean
from .posterior import log_prior


@dataclass
class ProposalConfig:
    """Isotropic Gaussian random-walk proposal."""

    sigma_p: float
    acceptance_rate: float | None = None
    bracketed: bool = True

    def __post_init__(self):
        if not self.sigma_p > 0:
            raise ValueError("sigma_p must be positive")


@dataclass
class ChainState:
    """Current position with cached log-density values."""

    theta: np.ndarray
    log_post_exact: float | None = None
    log_post_surr: float | None = None


@dataclass
class StepInfo:
    accepted: bool
    stage1_passed: bool
    exact_evaluated: bool


@dataclass
class MarkovChain:
    """One chain's trajectory (row 0 is the initial state) and its counters."""

    samples: np.ndarray
    log_posts: np.ndarray
    stage1_pass: np.ndarray
    stats: dict
    seed: object
    mode: str


@dataclass
class MixtureInit:
    """Gaussian-mixture summary of surrogate samples; means seed the chains."""

    means: np.ndarray
    weights: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        if not np.isclose(np.sum(self.weights), 1.0):
            raise ValueError("mixture weights must sum to 1")


def stage1_log_accept(delta_surr: float) -> float:
    """log of the stage-1 probability min(1, exp(l*(th') - l*(th_n)))."""
    return min(0.0, delta_surr)


def stage2_log_accept(delta_exact: float, delta_surr: float) -> float:
    """log of the stage-2 probability min(1, exp(dl_exact - dl_surr))."""
    return min(0.0, delta_exact - delta_surr)


def _surrogate_fn(surrogate):
    if isinstance(surrogate, GPModel):
        return lambda th: predict_mean(surrogate, th)
    return surrogate


def _draw(rng, dim):
    """One step's worth of randomness: proposal increment and two log-uniforms."""
    z = rng.standard_normal(dim)
    log_u = np.log(rng.random(2))
    return z, log_u


def mh_step(state: ChainState, target, prop: ProposalConfig, rng) -> tuple:
    """Native MH update; returns (new_state, StepInfo).

    The q-ratio cancels for the symmetric Gaussian proposal, leaving
    min(1, exp(l(th') - l(th_n))).
    """
    theta = state.theta
    z, log_u = _draw(rng, theta.size)
    theta_prop = theta + prop.sigma_p * z
    lp_prop = float(target(theta_prop))
    if np.isnan(lp_prop):
        raise RuntimeError(f"target returned NaN at {theta_prop}")
    lp_cur = state.log_post_exact
    delta = lp_prop - lp_cur
    if log_u[0] < stage1_log_accept(delta):
        new = ChainState(theta=theta_prop, log_post_exact=lp_prop)
        return new, StepInfo(True, lp_prop > -np.inf, lp_prop > -np.inf)
    return state, StepInfo(False, lp_prop > -np.inf, lp_prop > -np.inf)


def two_stage_step(
    state: ChainState, exact, surrogate, prop: ProposalConfig, rng, bounds
) -> tuple:
    """Surrogate-filtered MH update; returns (new_state, StepInfo).

    Out-of-box proposals are rejected in stage 1 without touching either
    density.  The exact log-posterior runs only when stage 1 passes.
    """
    surr = _surrogate_fn(surrogate)
    theta = state.theta
    z, log_u = _draw(rng, theta.size)
    theta_prop = theta + prop.sigma_p * z

    if log_prior(theta_prop, bounds) == -np.inf:
        return state, StepInfo(False, False, False)

    ls_prop = float(surr(theta_prop))
    ls_cur = state.log_post_surr
    if np.isnan(ls_prop):
        raise RuntimeError(f"surrogate returned NaN at {theta_prop}")
    delta_surr = ls_prop - ls_cur
    if log_u[0] >= stage1_log_accept(delta_surr):
        return state, StepInfo(False, False, False)

    lp_prop = float(exact(theta_prop))
    if np.isnan(lp_prop):
        raise RuntimeError(f"target returned NaN at {theta_prop}")
    delta_exact = lp_prop - state.log_post_exact
    if log_u[1] < stage2_log_accept(delta_exact, delta_surr):
        new = ChainState(theta=theta_prop, log_post_exact=lp_prop, log_post_surr=ls_prop)
        return new, StepInfo(True, True, True)
    return state, StepInfo(False, True, True)


def slice_sample_surrogate(
    gp, bounds, n: int, rng=None, burn_in: int = 500, width_frac: float = 0.25
) -> np.ndarray:
    """Coordinate-wise slice sampling of exp(l*) restricted to the box.

    Stepping-out with shrinkage (initial bracket width = width_frac * box
    width per axis); one sample is emitted per full coordinate sweep after
    `burn_in` sweeps.  Deterministic given the rng seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng)
    surr = _surrogate_fn(gp)
    lo, hi = _box_arrays(bounds)
    dim = lo.size
    widths = width_frac * (hi - lo)
    x = 0.5 * (lo + hi)
    logf = float(surr(x))
    out = np.empty((n, dim))
    for sweep in range(burn_in + n):
        for d in range(dim):
            level = logf + np.log(rng.random())
            w = widths[d]
            left = x[d] - rng.random() * w
            right = left + w
            left = max(left, lo[d])
            right = min(right, hi[d])
            # stepping out, clamped to the box
            xl = x.copy()
            while left > lo[d]:
                xl[d] = left
                if float(surr(xl)) <= level:
                    break
                left = max(left - w, lo[d])
            xr = x.copy()
            while right < hi[d]:
                xr[d] = right
                if float(surr(xr)) <= level:
                    break
                right = min(right + w, hi[d])
            # shrinkage
            while True:
                cand = left + rng.random() * (right - left)
                xc = x.copy()
                xc[d] = cand
                cand_logf = float(surr(xc))
                if cand_logf > level:
                    x = xc
                    logf = cand_logf
                    break
                if cand < x[d]:
                    left = cand
                else:
                    right = cand
        if sweep >= burn_in:
            out[sweep - burn_in] = x
    return out


def _box_arrays(bounds):
    lo, hi = bounds
    return (
        np.atleast_1d(np.asarray(lo, dtype=float)),
        np.atleast_1d(np.asarray(hi, dtype=float)),
    )


def fit_mixture(samples, k: int, rng=None) -> MixtureInit:
    """Diagonal-covariance Gaussian mixture of the samples via EM.

    Backed by scikit-learn (k-means++ initialization, 200 EM iterations,
    tolerance 1e-6); the component means seed the parallel chains.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] < 10 * k:
        raise ValueError(f"need at least {10 * k} samples to fit {k} components")
    rng = np.random.default_rng(rng)
    gm = GaussianMixture(
        n_components=k,
        covariance_type="diag",
        init_params="k-means++",
        max_iter=200,
        tol=1e-6,
        reg_covar=1e-10,
        random_state=int(rng.integers(2**31 - 1)),
    )
    with warnings.catch_warnings():
        # stopping at max_iter is an accepted outcome, not a failure
        warnings.simplefilter("ignore", ConvergenceWarning)
        gm.fit(samples)
    return MixtureInit(means=gm.means_, weights=gm.weights_, covariances=gm.covariances_)


def tune_proposal(
    gp,
    bounds,
    start,
    target_range=(0.3, 0.4),
    rng=None,
    pilot_steps: int = 2000,
    max_iters: int = 20,
    initial_sigma: float | None = None,
) -> ProposalConfig:
    """Tune sigma_p so pilot chains on the surrogate accept in target_range.

    Doubles or halves sigma_p until the rate range is bracketed, then bisects
    geometrically.  If the range is not hit within `max_iters` pilot runs the
    closest candidate is returned with ``bracketed=False``.
    """
    rng = np.random.default_rng(rng)
    surr = _surrogate_fn(gp)
    lo, hi = _box_arrays(bounds)
    start = np.asarray(start, dtype=float)
    r_lo, r_hi = target_range

    def boxed(th):
        if log_prior(th, (lo, hi)) == -np.inf:
            return -np.inf
        return float(surr(th))

    def measure(sigma):
        state = ChainState(theta=start.copy(), log_post_exact=boxed(start))
        accepted = 0
        prop = ProposalConfig(sigma_p=sigma)
        for _ in range(pilot_steps):
            state, info = mh_step(state, boxed, prop, rng)
            accepted += info.accepted
        return accepted / pilot_steps

    sigma = initial_sigma if initial_sigma is not None else 0.1 * float(np.mean(hi - lo))
    too_small = None  # rate above range
    too_big = None  # rate below range
    best = None
    for _ in range(max_iters):
        rate = measure(sigma)
        if best is None or _range_distance(rate, target_range) < _range_distance(
            best.acceptance_rate, target_range
        ):
            best = ProposalConfig(sigma_p=sigma, acceptance_rate=rate)
        if r_lo <= rate <= r_hi:
            return ProposalConfig(sigma_p=sigma, acceptance_rate=rate, bracketed=True)
        if rate > r_hi:
            too_small = sigma
            sigma = np.sqrt(sigma * too_big) if too_big is not None else sigma * 2.0
        else:
            too_big = sigma
            sigma = np.sqrt(sigma * too_small) if too_small is not None else sigma / 2.0
    best.bracketed = False
    return best


def _range_distance(rate, target_range):
    lo, hi = target_range
    if rate < lo:
        return lo - rate
    if rate > hi:
        return rate - hi
    return 0.0


def run_chains(
    ctx,
    gp,
    inits: MixtureInit,
    prop: ProposalConfig,
    n_steps: int,
    mode: str,
    seeds,
) -> list:
    """Run one chain per mixture mean; returns a list of MarkovChain.

    mode selects the target: "exact" (native MH on the exact posterior),
    "two_stage" (surrogate-filtered), or "surrogate_only" (MH on the
    box-restricted surrogate, zero exact evaluations).  Per-chain RNG streams
    derive from (master seed, chain id), so results do not depend on
    execution order.
    """
    if mode not in ("exact", "two_stage", "surrogate_only"):
        raise ValueError(f"unknown mode {mode!r}")
    starts = inits.means
    k = starts.shape[0]
    chain_seeds = _chain_seeds(seeds, k)
    bounds = ctx.bounds
    surr = _surrogate_fn(gp) if gp is not None else None
    if mode in ("two_stage", "surrogate_only") and surr is None:
        raise ValueError(f"mode {mode!r} needs a surrogate")

    chains = []
    for cid in range(k):
        rng = np.random.default_rng(chain_seeds[cid])
        theta0 = np.asarray(starts[cid], dtype=float)
        if log_prior(theta0, bounds) == -np.inf:
            raise ValueError(f"chain {cid} starts outside the prior box at {theta0}")
        try:
            chains.append(
                _run_single_chain(
                    ctx, surr, theta0, prop, n_steps, mode, rng, chain_seeds[cid], bounds
                )
            )
        except Exception as exc:
            raise RuntimeError(f"chain {cid} failed: {exc}") from exc
    return chains


def _chain_seeds(seeds, k):
    if np.isscalar(seeds):
        return [np.random.SeedSequence(entropy=int(seeds), spawn_key=(cid,)) for cid in range(k)]
    seeds = list(seeds)
    if len(seeds) != k:
        raise ValueError(f"got {len(seeds)} seeds for {k} chains")
    return seeds


def _run_single_chain(ctx, surr, theta0, prop, n_steps, mode, rng, seed, bounds):
    dim = theta0.size
    samples = np.empty((n_steps + 1, dim))
    log_posts = np.empty(n_steps + 1)
    stage1 = np.zeros(n_steps, dtype=bool)
    samples[0] = theta0

    stats = {"proposed": n_steps, "surrogate_rejected": 0, "exact_tested": 0, "exact_accepted": 0}

    if mode == "surrogate_only":
        def target(th):
            if log_prior(th, bounds) == -np.inf:
                return -np.inf
            return float(surr(th))

        state = ChainState(theta=theta0, log_post_exact=target(theta0))
        log_posts[0] = state.log_post_exact
        for step in range(n_steps):
            state, info = mh_step(state, target, prop, rng)
            samples[step + 1] = state.theta
            log_posts[step + 1] = state.log_post_exact
            stage1[step] = True
            stats["exact_accepted"] += info.accepted
    elif mode == "exact":
        target = ctx.log_posterior
        state = ChainState(theta=theta0, log_post_exact=target(theta0))
        log_posts[0] = state.log_post_exact
        for step in range(n_steps):
            state, info = mh_step(state, target, prop, rng)
            samples[step + 1] = state.theta
            log_posts[step + 1] = state.log_post_exact
            stage1[step] = info.stage1_passed
            stats["exact_tested"] += info.exact_evaluated
            stats["exact_accepted"] += info.accepted
    else:  # two_stage
        exact = ctx.log_posterior
        state = ChainState(
            theta=theta0, log_post_exact=exact(theta0), log_post_surr=float(surr(theta0))
        )
        log_posts[0] = state.log_post_exact
        for step in range(n_steps):
            state, info = two_stage_step(state, exact, surr, prop, rng, bounds)
            samples[step + 1] = state.theta
            log_posts[step + 1] = state.log_post_exact
            stage1[step] = info.stage1_passed
            stats["exact_tested"] += info.exact_evaluated
            stats["surrogate_rejected"] += not info.stage1_passed
            stats["exact_accepted"] += info.accepted

    return MarkovChain(
        samples=samples,
        log_posts=log_posts,
        stage1_pass=stage1,
        stats=stats,
        seed=seed,
        mode=mode,
    )


def postprocess(chains, burn_in_frac: float = 0.25, thin: int = 2) -> np.ndarray:
    """Drop per-chain burn-in, thin, and pool across chains."""
    if not 0 <= burn_in_frac < 1:
        raise ValueError("burn_in_frac must be in [0, 1)")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    parts = []
    for chain in chains:
        arr = chain.samples if isinstance(chain, MarkovChain) else np.asarray(chain)
        n_burn = int(np.floor(burn_in_frac * arr.shape[0]))
        kept = arr[n_burn::thin]
        if kept.size:
            parts.append(kept)
    if not parts:
        raise ValueError("postprocess produced no samples")
    return np.concatenate(parts, axis=0)
