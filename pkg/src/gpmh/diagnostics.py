"""Convergence diagnostics and posterior summaries for the sampled chains.

Geweke z-scores compare early/late segment means with batch-mean variance
estimates; the potential scale reduction factor is computed over split halves
of the supplied (post-burn-in) chains; effective sample size uses the
initial-positive-sequence truncation of the autocorrelation sum.  Summaries
report per-parameter mean, std, and a KDE-based marginal mode, pushed through
the region partition to per-node maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import gaussian_kde

N_ACF_LAGS = 50
_ESS_MAX_LAG = 2000  # beyond this the remaining mass is negligible at our chain lengths


def geweke(chain, frac_a: float = 0.1, frac_b: float = 0.5, n_batches: int = 20) -> np.ndarray:
    """Per-parameter z-score comparing the first frac_a vs. last frac_b means.

    Segment mean variances are estimated from non-overlapping batch means.
    Both segments having zero variance yields z = 0.
    """
    x = _as_chain(chain)
    n = x.shape[0]
    if n < 100:
        raise ValueError("geweke needs a chain of length >= 100")
    seg_a = x[: int(frac_a * n)]
    seg_b = x[-int(frac_b * n):]
    mean_a, se2_a = _batch_mean_se2(seg_a, n_batches)
    mean_b, se2_b = _batch_mean_se2(seg_b, n_batches)
    denom = np.sqrt(se2_a + se2_b)
    z = np.zeros(x.shape[1])
    # value-range check, not variance: a constant segment has exactly zero
    # spread even when accumulated means carry rounding noise
    ok = ((_spread(seg_a) > 0) | (_spread(seg_b) > 0)) & (denom > 0)
    z[ok] = (mean_a[ok] - mean_b[ok]) / denom[ok]
    return z


def _spread(segment) -> np.ndarray:
    return segment.max(axis=0) - segment.min(axis=0)


def _batch_mean_se2(segment, n_batches):
    means = segment.mean(axis=0)
    batch_means = np.array([b.mean(axis=0) for b in np.array_split(segment, n_batches)])
    se2 = batch_means.var(axis=0, ddof=1) / n_batches
    return means, se2


def gelman_rubin(chains) -> np.ndarray:
    """Split-half potential scale reduction factor, per parameter.

    With within-chain variance W and between-chain variance B over the split
    sequences, R-hat = sqrt(((n-1)/n * W + B/n) / W).  Degenerate cases:
    W = 0 with B = 0 gives 1, W = 0 with B > 0 gives +inf.
    """
    arrs = [_as_chain(c) for c in chains]
    if len(arrs) < 2:
        raise ValueError("gelman_rubin needs at least 2 chains")
    n = arrs[0].shape[0]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError("chains must share a common shape")
    if n < 10:
        raise ValueError("chains must have length >= 10")
    half = n // 2
    seqs = []
    for a in arrs:
        seqs.append(a[:half])
        seqs.append(a[-half:])
    seqs = np.array(seqs)  # (2k, half, R)
    seq_means = seqs.mean(axis=1)
    W = seqs.var(axis=1, ddof=1).mean(axis=0)
    B = half * seq_means.var(axis=0, ddof=1)
    # degeneracy by value range: constant sequences mean W = 0 exactly
    all_const = np.all(seqs.max(axis=1) == seqs.min(axis=1), axis=0)
    means_equal = seq_means.max(axis=0) == seq_means.min(axis=0)
    rhat = np.empty(W.shape)
    ok = ~all_const
    rhat[ok] = np.sqrt(((half - 1) / half * W[ok] + B[ok] / half) / W[ok])
    rhat[all_const] = np.where(means_equal[all_const], 1.0, np.inf)
    return rhat


def autocorr_ess(chain) -> tuple:
    """Autocorrelation (first 50 lags) and effective sample size per parameter.

    ESS = n / (1 + 2 * sum(rho_k)) with the sum truncated at the first
    negative autocorrelation, capped to [1, n].  A zero-variance chain
    reports perfect correlation and ESS = 1.
    """
    x = _as_chain(chain)
    n = x.shape[0]
    if n < 100:
        raise ValueError("autocorr_ess needs a chain of length >= 100")
    n_params = x.shape[1]
    acf = np.empty((n_params, N_ACF_LAGS + 1))
    ess = np.empty(n_params)
    for p in range(n_params):
        if x[:, p].max() == x[:, p].min():
            acf[p] = 1.0
            ess[p] = 1.0
            continue
        xc = x[:, p] - x[:, p].mean()
        denom = xc @ xc
        acf[p, 0] = 1.0
        acc = 0.0
        truncated = False
        max_lag = min(n - 1, _ESS_MAX_LAG)
        for k in range(1, max_lag + 1):
            rho = (xc[:-k] @ xc[k:]) / denom
            if k <= N_ACF_LAGS:
                acf[p, k] = rho
            if not truncated and rho < 0.0:
                truncated = True
            if not truncated:
                acc += rho
            if truncated and k >= N_ACF_LAGS:
                break
        ess[p] = min(max(n / (1.0 + 2.0 * acc), 1.0), float(n))
    return acf, ess


@dataclass
class PosteriorSummary:
    """Per-parameter moments plus per-node maps over the partition."""

    mean: np.ndarray
    mode: np.ndarray
    std: np.ndarray
    bimodal: np.ndarray
    correlation: np.ndarray
    mean_map: np.ndarray | None = None
    mode_map: np.ndarray | None = None
    std_map: np.ndarray | None = None


def summarize(pooled, partition=None, bounds=(0.0, 0.52), grid_size: int = 512) -> PosteriorSummary:
    """Mean, KDE mode, std, and bimodality flags of the pooled samples.

    The marginal mode is the argmax of a Gaussian KDE (Silverman bandwidth)
    on a 512-point grid over the prior box, clipped into the sample range.
    A second KDE peak at >= 0.5x the height of the first raises that
    parameter's bimodality flag.  If a partition is supplied the summary
    vectors are expanded to per-node maps.
    """
    x = _as_chain(pooled)
    if x.shape[0] < 100:
        raise ValueError("summarize needs at least 100 pooled samples")
    n_params = x.shape[1]
    degenerate = x.max(axis=0) == x.min(axis=0)
    mean = x.mean(axis=0)
    std = np.where(degenerate, 0.0, x.std(axis=0, ddof=1))
    mode = np.empty(n_params)
    bimodal = np.zeros(n_params, dtype=bool)
    grid = np.linspace(bounds[0], bounds[1], grid_size)
    for p in range(n_params):
        col = x[:, p]
        if degenerate[p]:
            mode[p] = col[0]
            mean[p] = col[0]
            continue
        dens = gaussian_kde(col, bw_method="silverman")(grid)
        peaks = _peak_heights(dens)
        mode[p] = np.clip(grid[int(np.argmax(dens))], col.min(), col.max())
        if peaks.size >= 2 and peaks[1] >= 0.5 * peaks[0]:
            bimodal[p] = True

    if np.any(degenerate):
        correlation = np.eye(n_params)
        ok = ~degenerate
        if ok.sum() >= 2:
            correlation[np.ix_(ok, ok)] = np.corrcoef(x[:, ok], rowvar=False)
    else:
        correlation = np.atleast_2d(np.corrcoef(x, rowvar=False))

    summary = PosteriorSummary(
        mean=mean, mode=mode, std=std, bimodal=bimodal, correlation=correlation
    )
    if partition is not None:
        region = partition.region_of_node
        summary.mean_map = mean[region]
        summary.mode_map = mode[region]
        summary.std_map = std[region]
    return summary


def _peak_heights(dens) -> np.ndarray:
    """Heights of local maxima (boundaries included), tallest first."""
    peaks = []
    n = dens.size
    for i in range(n):
        left = dens[i - 1] if i > 0 else -np.inf
        right = dens[i + 1] if i < n - 1 else -np.inf
        if dens[i] > left and dens[i] >= right:
            peaks.append(dens[i])
    return np.sort(np.array(peaks))[::-1]


def switching_score(chain, param_i: int, param_j: int) -> float:
    """Sample correlation between two parameter traces (0 if degenerate).

    A strongly negative score together with both parameters' bimodality flags
    is the reported non-identifiability ("switching") indicator.
    """
    x = _as_chain(chain)
    a, b = x[:, param_i], x[:, param_j]
    if a.max() == a.min() or b.max() == b.min():
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


@dataclass
class DiagnosticsReport:
    """Per-parameter convergence diagnostics and the overall flag."""

    geweke_z: np.ndarray
    rhat: np.ndarray
    ess: np.ndarray
    acf: np.ndarray
    converged: bool

    def to_dict(self) -> dict:
        return {
            "geweke_z": self.geweke_z.tolist(),
            "rhat": self.rhat.tolist(),
            "ess": self.ess.tolist(),
            "acf": self.acf.tolist(),
            "converged": bool(self.converged),
        }


def make_report(chains) -> DiagnosticsReport:
    """Diagnostics over a set of (post-burn-in) chains.

    geweke_z combines the per-chain z-scores Stouffer-style (sum / sqrt(k),
    again standard normal under stationarity), ess sums the per-chain values,
    and acf averages across chains.  The converged flag requires every
    |z| < 2 and every R-hat < 1.1.
    """
    arrs = [_as_chain(c) for c in chains]
    zs = np.array([geweke(a) for a in arrs])
    combined = zs.sum(axis=0) / np.sqrt(len(arrs))
    rhat = gelman_rubin(arrs)
    acfs, esss = zip(*[autocorr_ess(a) for a in arrs])
    ess = np.sum(esss, axis=0)
    acf = np.mean(acfs, axis=0)
    converged = bool(np.all(np.abs(combined) < 2.0) and np.all(rhat < 1.1))
    return DiagnosticsReport(geweke_z=combined, rhat=rhat, ess=ess, acf=acf, converged=converged)


def _as_chain(chain) -> np.ndarray:
    arr = getattr(chain, "samples", chain)
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr
