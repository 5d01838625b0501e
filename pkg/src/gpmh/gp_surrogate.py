"""Gaussian-process surrogate of the log-posterior with UCB-driven acquisition.

The surrogate regresses the *log* posterior with a zero-mean GP (after
subtracting the training-target mean) under an anisotropic Matern 5/2 kernel

    kappa(x1, x2) = amplitude2 * (1 + s + s^2/3) * exp(-s),
    s = sqrt(5 * d2),   d2 = sum_i (x1_i - x2_i)^2 / lengthscale_i^2.

Training points are chosen by maximizing the upper confidence bound
``mu + sqrt(beta) * sigma`` over the prior box with a multistart
derivative-free bound-constrained optimizer, and the kernel hyperparameters
are refit periodically by maximizing the marginal likelihood.  Factorizations
use a full Cholesky refit; at the training-set sizes used here that is cheap
and numerically safer than low-rank updates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.stats import qmc

DUPLICATE_TOL = 1e-12
JITTER_CEILING = 1e-4


class GPFitError(RuntimeError):
    """Kernel matrix could not be factorized even at the jitter ceiling."""


@dataclass
class KernelHyper:
    """Per-dimension lengthscales, signal variance, and diagonal regularizer."""

    lengthscales: np.ndarray
    amplitude2: float
    jitter: float = 1e-8

    def __post_init__(self):
        self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if np.any(self.lengthscales <= 0) or not self.amplitude2 > 0:
            raise ValueError("lengthscales and amplitude2 must be positive")
        if self.jitter < 1e-10:
            raise ValueError("jitter must be >= 1e-10")


@dataclass
class TrainingSet:
    """Inputs X (M, R), targets y (M,), and the subtracted centering constant."""

    X: np.ndarray
    y: np.ndarray
    y_mean: float

    @classmethod
    def from_data(cls, X, y) -> "TrainingSet":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y disagree on the number of points")
        if not np.all(np.isfinite(y)):
            raise ValueError("targets must be finite")
        for m in range(1, X.shape[0]):
            if _nearest_distance(X[m], X[:m]) <= DUPLICATE_TOL:
                raise ValueError("duplicate training inputs")
        return cls(X=X, y=y, y_mean=float(np.mean(y)))

    @property
    def size(self) -> int:
        return self.X.shape[0]

    def contains(self, x) -> bool:
        return _nearest_distance(np.asarray(x, dtype=float), self.X) <= DUPLICATE_TOL

    def with_point(self, x, y_val: float) -> "TrainingSet":
        """Extended copy.  The centering constant is kept fixed so that
        far-away additions cannot shift predictions near existing points."""
        if not np.isfinite(y_val):
            raise ValueError("targets must be finite")
        if self.contains(x):
            raise ValueError("duplicate training inputs")
        X = np.vstack([self.X, np.asarray(x, dtype=float)])
        y = np.append(self.y, float(y_val))
        return TrainingSet(X=X, y=y, y_mean=self.y_mean)


def _nearest_distance(x, X) -> float:
    """Max-norm distance from x to its nearest row of X."""
    return float(np.min(np.max(np.abs(X - x), axis=1)))


@dataclass
class GPModel:
    """Fitted surrogate: training data, hyperparameters, cached factorization."""

    training: TrainingSet
    hyper: KernelHyper
    chol: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    build_info: dict | None = None


@dataclass
class AcquisitionConfig:
    """Controls for the acquisition loop.

    beta may be a float or a callable mapping the acquired-point count to a
    float.  budget_max caps the total training-set size (initial design plus
    acquired points); stall_tol is the movement threshold, relative to the
    box diagonal, below which the last three acquisitions count as stalled.
    """

    beta: float = 4.0
    budget_max: int = 60
    stall_tol: float = 0.01
    hyperopt_every: int = 5
    restarts: int = 4

    def __post_init__(self):
        if not callable(self.beta) and self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not self.stall_tol > 0:
            raise ValueError("stall_tol must be positive")
        if self.hyperopt_every < 1 or self.restarts < 1:
            raise ValueError("hyperopt_every and restarts must be >= 1")

    def beta_at(self, n_acquired: int) -> float:
        return float(self.beta(n_acquired)) if callable(self.beta) else float(self.beta)


def _scaled_sqdist(X1, X2, lengthscales) -> np.ndarray:
    # difference-based, not the expanded |x1|^2 - 2 x1.x2 + |x2|^2 form: the
    # differences make the kernel exactly symmetric under argument swap
    X1 = np.atleast_2d(np.asarray(X1, dtype=float)) / lengthscales
    X2 = np.atleast_2d(np.asarray(X2, dtype=float)) / lengthscales
    diff = X1[:, None, :] - X2[None, :, :]
    return (diff * diff).sum(axis=2)


def kernel_matrix(X1, X2, hyper: KernelHyper) -> np.ndarray:
    """Matern 5/2 cross-covariance between two point sets."""
    s = np.sqrt(5.0 * _scaled_sqdist(X1, X2, hyper.lengthscales))
    return hyper.amplitude2 * (1.0 + s + s**2 / 3.0) * np.exp(-s)


def matern52(x1, x2, hyper: KernelHyper) -> float:
    """Kernel value for a single pair of points."""
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x1.shape != x2.shape or x1.size != hyper.lengthscales.size:
        raise ValueError("dimension mismatch")
    return float(kernel_matrix(x1[None, :], x2[None, :], hyper)[0, 0])


def fit_gp(training: TrainingSet, hyper: KernelHyper) -> GPModel:
    """Factorize K + jitter*I and cache the weight vector.

    A failed Cholesky escalates the jitter by 10x up to 1e-4 before raising.
    """
    if training.size < 1:
        raise ValueError("need at least one training point")
    K = kernel_matrix(training.X, training.X, hyper)
    jitter = hyper.jitter
    while True:
        try:
            L = cholesky(K + jitter * np.eye(training.size), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > JITTER_CEILING:
                raise GPFitError(
                    f"kernel factorization failed up to jitter={JITTER_CEILING}"
                ) from None
    if jitter != hyper.jitter:
        hyper = replace(hyper, jitter=jitter)
    weights = cho_solve((L, True), training.y - training.y_mean)
    return GPModel(training=training, hyper=hyper, chol=L, weights=weights)


def predict(gp: GPModel, theta) -> tuple:
    """Posterior mean and std at one point (R,) or a batch (P, R)."""
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    pts = np.atleast_2d(theta)
    if not np.all(np.isfinite(pts)):
        raise ValueError("prediction point has non-finite entries")
    Ks = kernel_matrix(pts, gp.training.X, gp.hyper)
    mu = gp.training.y_mean + Ks @ gp.weights
    V = solve_triangular(gp.chol, Ks.T, lower=True)
    var = np.maximum(gp.hyper.amplitude2 - (V**2).sum(axis=0), 0.0)
    sigma = np.sqrt(var)
    if single:
        return float(mu[0]), float(sigma[0])
    return mu, sigma


def predict_mean(gp: GPModel, theta):
    """Posterior mean only (cheaper: skips the variance solve)."""
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    pts = np.atleast_2d(theta)
    Ks = kernel_matrix(pts, gp.training.X, gp.hyper)
    mu = gp.training.y_mean + Ks @ gp.weights
    return float(mu[0]) if single else mu


def ucb(gp: GPModel, theta, beta: float):
    """Upper confidence bound mu + sqrt(beta) * sigma."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    mu, sigma = predict(gp, theta)
    return mu + np.sqrt(beta) * sigma


def log_marginal_likelihood(training: TrainingSet, hyper: KernelHyper) -> float:
    """Gaussian log-evidence of the centered targets; -inf if not factorizable."""
    K = kernel_matrix(training.X, training.X, hyper)
    try:
        L = cholesky(K + hyper.jitter * np.eye(training.size), lower=True)
    except np.linalg.LinAlgError:
        return -np.inf
    yc = training.y - training.y_mean
    alpha = cho_solve((L, True), yc)
    return float(
        -0.5 * yc @ alpha
        - np.sum(np.log(np.diag(L)))
        - 0.5 * training.size * np.log(2.0 * np.pi)
    )


def optimize_hypers(
    training: TrainingSet,
    current: KernelHyper,
    restarts: int = 8,
    rng=None,
) -> KernelHyper:
    """Multistart derivative-free marginal-likelihood maximization.

    Searches log-lengthscales and log-amplitude within a factor of 1e3 of the
    current values; the result never has lower marginal likelihood than
    `current` because `current` is always a candidate.
    """
    if training.size < 3:
        raise ValueError("need at least 3 training points to optimize hyperparameters")
    rng = np.random.default_rng(rng)
    r = current.lengthscales.size
    center = np.log(np.append(current.lengthscales, current.amplitude2))
    lo = center - np.log(1e3)
    hi = center + np.log(1e3)

    def unpack(z):
        return KernelHyper(
            lengthscales=np.exp(z[:r]), amplitude2=float(np.exp(z[r])), jitter=current.jitter
        )

    def neg_lml(z):
        val = log_marginal_likelihood(training, unpack(z))
        return -val if np.isfinite(val) else 1e300

    starts = [center]
    if restarts > 1:
        sampler = qmc.LatinHypercube(d=r + 1, seed=rng)
        starts.extend(lo + sampler.random(restarts - 1) * (hi - lo))
    best_z, best_val = center, neg_lml(center)
    # the 1e300 not-factorizable sentinel can overflow Powell's internal
    # parabolic fits; such candidates lose the ranking below anyway
    with np.errstate(over="ignore", invalid="ignore"):
        for z0 in starts:
            try:
                res = optimize.minimize(
                    neg_lml,
                    z0,
                    method="Powell",
                    bounds=optimize.Bounds(lo, hi),
                    options={"maxfev": 400, "xtol": 1e-3, "ftol": 1e-6},
                )
                cand, cand_val = res.x, res.fun
            except Exception:
                cand, cand_val = z0, neg_lml(z0)
            if cand_val < best_val:
                best_z, best_val = cand, cand_val
    if best_val >= 1e300:
        return current
    return unpack(np.clip(best_z, lo, hi))


def acquire_next(gp: GPModel, bounds, cfg: AcquisitionConfig, rng=None, beta=None) -> np.ndarray:
    """Approximate argmax of the UCB over the box.

    Multistart local optimization from Latin-hypercube starts; the returned
    point lies inside the box and its UCB is at least that of every start.
    """
    rng = np.random.default_rng(rng)
    lo, hi = _as_box(bounds)
    if np.all(hi == lo):
        return lo.copy()
    if beta is None:
        beta = cfg.beta_at(0)
    sampler = qmc.LatinHypercube(d=lo.size, seed=rng)
    starts = lo + sampler.random(cfg.restarts) * (hi - lo)

    def neg_ucb(x):
        return -ucb(gp, np.clip(x, lo, hi), beta)

    candidates = [np.asarray(s) for s in starts]
    # UCB magnitudes at box corners can overflow Powell's internal parabolic
    # fits; those candidates are still returned and ranked below
    with np.errstate(over="ignore", invalid="ignore"):
        for x0 in starts:
            try:
                res = optimize.minimize(
                    neg_ucb,
                    x0,
                    method="Powell",
                    bounds=optimize.Bounds(lo, hi),
                    options={"maxfev": 200 * lo.size, "xtol": 1e-4},
                )
                candidates.append(np.clip(res.x, lo, hi))
            except Exception:
                pass
    values = [ucb(gp, c, beta) for c in candidates]
    return candidates[int(np.argmax(values))]


def build_surrogate(
    target,
    bounds,
    cfg: AcquisitionConfig,
    init_design_size: int,
    rng=None,
) -> GPModel:
    """Fit the surrogate with a Latin-hypercube design plus UCB acquisitions.

    `target` is either a posterior context (its ``log_posterior`` is used) or
    a plain callable returning the exact log-posterior.  Acquisition stops at
    the total budget or once the last three acquired points each moved less
    than ``stall_tol`` (relative to the box diagonal) from their nearest
    existing training point.  ``build_info`` on the returned model records the
    exact-evaluation count and whether the loop stalled.

    The box-constrained optimizer cannot propose points outside the prior
    support, so every evaluated target value is finite.
    """
    rng = np.random.default_rng(rng)
    fn = target.log_posterior if hasattr(target, "log_posterior") else target
    lo, hi = _as_box(bounds)
    r = lo.size
    init_design_size = int(init_design_size)
    if init_design_size < r + 1:
        raise ValueError(f"init_design_size must be >= R+1 = {r + 1}")
    if cfg.budget_max < r + 2:
        raise ValueError(f"budget_max must be >= R+2 = {r + 2}")
    if cfg.budget_max < init_design_size:
        raise ValueError("budget_max must cover the initial design")

    sampler = qmc.LatinHypercube(d=r, seed=rng)
    X0 = lo + sampler.random(init_design_size) * (hi - lo)
    y0 = np.array([_finite_eval(fn, x) for x in X0])
    training = TrainingSet.from_data(X0, y0)

    y_spread = float(np.var(training.y))
    hyper = KernelHyper(
        lengthscales=0.3 * np.maximum(hi - lo, 1e-12),
        amplitude2=max(y_spread, 1e-6),
        jitter=1e-8,
    )
    gp = fit_gp(training, hyper)

    diag = float(np.linalg.norm(hi - lo))
    moves: list[float] = []
    n_acquired = 0
    stalled = False
    while training.size < cfg.budget_max:
        x = acquire_next(gp, bounds, cfg, rng, beta=cfg.beta_at(n_acquired))
        assert np.all(x >= lo) and np.all(x <= hi)
        moves.append(_nearest_euclidean(x, training.X) / diag)
        if not training.contains(x):
            training = training.with_point(x, _finite_eval(fn, x))
            n_acquired += 1
            if n_acquired % cfg.hyperopt_every == 0:
                hyper = optimize_hypers(training, gp.hyper, cfg.restarts, rng)
            gp = fit_gp(training, hyper)
        if len(moves) >= 3 and all(m < cfg.stall_tol for m in moves[-3:]):
            stalled = True
            break

    gp.build_info = {
        "n_exact_evals": init_design_size + n_acquired,
        "init_design_size": init_design_size,
        "n_acquired": n_acquired,
        "stalled": stalled,
    }
    return gp


def _finite_eval(fn, x) -> float:
    val = float(fn(np.asarray(x, dtype=float)))
    if not np.isfinite(val):
        raise ValueError(f"log-posterior is non-finite inside the box at {x}")
    return val


def _nearest_euclidean(x, X) -> float:
    return float(np.min(np.linalg.norm(X - x, axis=1)))


def _as_box(bounds):
    lo, hi = bounds
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or np.any(hi < lo):
        raise ValueError("invalid bounds box")
    return lo, hi


def save_checkpoint(gp: GPModel, path) -> None:
    """Serialize training data and hyperparameters to JSON."""
    payload = {
        "X": gp.training.X.tolist(),
        "y": gp.training.y.tolist(),
        "lengthscales": gp.hyper.lengthscales.tolist(),
        "amplitude2": gp.hyper.amplitude2,
        "jitter": gp.hyper.jitter,
        "build_info": gp.build_info,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_checkpoint(path) -> GPModel:
    """Rebuild a surrogate from a checkpoint; predictions match bit-for-bit."""
    with open(path) as fh:
        payload = json.load(fh)
    training = TrainingSet.from_data(np.array(payload["X"]), np.array(payload["y"]))
    hyper = KernelHyper(
        lengthscales=np.array(payload["lengthscales"]),
        amplitude2=payload["amplitude2"],
        jitter=payload["jitter"],
    )
    gp = fit_gp(training, hyper)
    gp.build_info = payload.get("build_info")
    return gp
