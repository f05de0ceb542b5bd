"""Convergence diagnostics, posterior summaries and evaluation metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .alignment import SignedPermutation, best_signed_permutation

__all__ = [
    "DegenerateChainWarning",
    "rhat",
    "rhat_array",
    "LoadingSummary",
    "summarize_loadings",
    "summarize_draws",
    "prediction_metrics",
    "factor_recovery_mae",
    "align_to_truth",
    "permute_correlation",
    "max_rhat_report",
    "RHAT_CUTOFF",
]

RHAT_CUTOFF = 1.2
QUANTILES = (0.025, 0.5, 0.975)


class DegenerateChainWarning(UserWarning):
    """Every chain is constant, so the scale reduction is undefined."""


def _split(chains):
    half = chains.shape[1] // 2
    return np.concatenate([chains[:, :half], chains[:, chains.shape[1] - half:]], axis=0)


def rhat_array(chains, split: bool = False):
    """Potential scale reduction for every trailing index of ``(m, n, ...)``.

    Uses ``W`` = mean within-chain variance (ddof 1), ``B / n`` = variance
    of the chain means (ddof 1) and ``sqrt(((n - 1) / n * W + B / n) / W)``.
    Entries where ``W == 0`` are returned as 1.0; the second return value
    marks them.  ``split`` halves every chain first.
    """
    chains = np.asarray(chains, dtype=float)
    if split:
        chains = _split(chains)
    m, n = chains.shape[:2]
    if m < 2 or n < 2:
        raise ValueError("need at least 2 chains of length >= 2")
    within = chains.var(axis=1, ddof=1).mean(axis=0)
    between_n = chains.mean(axis=1).var(axis=0, ddof=1)
    degenerate = within <= 0
    safe = np.where(degenerate, 1.0, within)
    var_plus = (n - 1) / n * safe + between_n
    out = np.sqrt(var_plus / safe)
    return np.where(degenerate, 1.0, out), degenerate


def rhat(chains, split: bool = False) -> float:
    """Gelman-Rubin scale reduction of one scalar from ``m >= 2`` chains.

    Returns 1.0 with a :class:`DegenerateChainWarning` when every chain
    is constant.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2 or chains.shape[1] < 4:
        raise ValueError("need at least 2 chains of length >= 4")
    val, degenerate = rhat_array(chains, split)
    if degenerate:
        warnings.warn("zero within-chain variance; Rhat set to 1", DegenerateChainWarning,
                      stacklevel=2)
    return float(val)


@dataclass
class LoadingSummary:
    """Per-loading summary; zeroed entries have ``value == 0`` and no Rhat."""

    inclusion: np.ndarray
    zeroed: np.ndarray
    value: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    significant: np.ndarray
    rhat: np.ndarray

    @property
    def n_significant(self) -> np.ndarray:
        """Significant loadings per factor."""
        return self.significant.sum(axis=0)

    @property
    def max_rhat(self) -> float:
        vals = self.rhat[~self.zeroed]
        return float(np.max(vals)) if vals.size else 1.0

    def rows(self, gene_names=None):
        """Flat records ``(gene, factor, inclusion, value, lower, upper, significant, rhat)``."""
        p, k = self.value.shape
        names = gene_names or [f"g{g}" for g in range(p)]
        for g in range(p):
            for a in range(k):
                yield (names[g], a + 1, float(self.inclusion[g, a]), float(self.value[g, a]),
                       float(self.lower[g, a]), float(self.upper[g, a]),
                       bool(self.significant[g, a]), float(self.rhat[g, a]))


def summarize_loadings(a_chains, z_chains, zero_threshold: float = 0.5) -> LoadingSummary:
    """Summaries of ``l_ga`` from aligned chains ``(m, R, p, k)`` of ``A`` and ``Z``.

    A loading is summarized as 0 when its proportion of ``Z = 0`` exceeds
    ``zero_threshold`` in every chain.  Otherwise the draws of ``A`` give
    the median, the 95% interval and the Rhat; a loading is significant
    when the interval excludes 0.
    """
    a = np.asarray(a_chains, dtype=float)
    z = np.asarray(z_chains, dtype=float)
    if a.ndim == 3:
        a, z = a[None], z[None]
    if a.shape != z.shape or a.ndim != 4:
        raise ValueError("A and Z chains must both be (m, R, p, k)")
    zero_prop = 1.0 - z.mean(axis=1)                  # (m, p, k)
    zeroed = np.all(zero_prop > zero_threshold, axis=0)
    pooled = a.reshape(-1, *a.shape[2:])
    lo, med, hi = np.quantile(pooled, QUANTILES, axis=0)
    if a.shape[0] >= 2 and a.shape[1] >= 2:
        rh = rhat_array(a)[0]
    else:
        rh = np.full(a.shape[2:], np.nan)
    keep = ~zeroed
    value = np.where(keep, med, 0.0)
    lower = np.where(keep, lo, 0.0)
    upper = np.where(keep, hi, 0.0)
    significant = keep & ((lower > 0) | (upper < 0))
    return LoadingSummary(
        inclusion=z.mean(axis=(0, 1)), zeroed=zeroed, value=value, lower=lower,
        upper=upper, significant=significant, rhat=np.where(keep, rh, np.nan),
    )


def summarize_draws(chains):
    """Median, 2.5% and 97.5% quantiles and Rhat of ``(m, R, ...)`` draws."""
    chains = np.asarray(chains, dtype=float)
    lo, med, hi = np.quantile(chains.reshape(-1, *chains.shape[2:]), QUANTILES, axis=0)
    return {"median": med, "lower": lo, "upper": hi, "rhat": rhat_array(chains)[0]}


def prediction_metrics(draws, truth):
    """``(MAE_X, MWI_X, PWI_X)`` of predictive draws ``(R, ...)`` against ``truth``.

    MAE uses the draw median; MWI is the mean width of the 2.5%-97.5%
    interval; PWI is the share of cells with truth strictly inside it.
    Quantiles interpolate linearly between order statistics.
    """
    draws = np.asarray(draws, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if draws.shape[1:] != truth.shape:
        raise ValueError(f"draws {draws.shape} do not match truth {truth.shape}")
    lo, med, hi = np.quantile(draws, QUANTILES, axis=0)
    mae = float(np.mean(np.abs(med - truth)))
    mwi = float(np.mean(hi - lo))
    pwi = float(np.mean((truth > lo) & (truth < hi)))
    return mae, mwi, pwi


def factor_recovery_mae(y_draws, truth, rescale=None) -> float:
    """Mean absolute difference between posterior-median scores and truth.

    ``y_draws`` is ``(R, n, k, u)`` and ``truth`` ``(n, k, u)``.  With
    ``rescale`` (per-factor standard deviations) the truth is divided by it
    first, putting it on the unit scale of the estimated scores.
    """
    y_draws = np.asarray(y_draws, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if rescale is not None:
        truth = truth / np.asarray(rescale, dtype=float)[None, :, None]
    med = np.median(y_draws, axis=0)
    if med.shape != truth.shape:
        raise ValueError(f"medians {med.shape} do not match truth {truth.shape}")
    return float(np.mean(np.abs(med - truth)))


def align_to_truth(est_loadings, true_loadings) -> SignedPermutation:
    """Signed permutation matching estimated factors to the true ones.

    Columns are normalized first so the match depends on which genes load
    on a factor, not on the arbitrary scale split between loadings and
    scores.
    """
    def unit(m):
        m = np.asarray(m, dtype=float)
        norms = np.linalg.norm(m, axis=0)
        return m / np.where(norms > 0, norms, 1.0)

    return best_signed_permutation(unit(est_loadings), unit(true_loadings))


def permute_correlation(corr, tr: SignedPermutation) -> np.ndarray:
    """Correlation matrix of the transformed factors."""
    corr = np.asarray(corr)
    return corr[np.ix_(tr.perm, tr.perm)] * np.outer(tr.sign, tr.sign)


def max_rhat_report(classes: dict, cutoff: float = RHAT_CUTOFF) -> dict:
    """Maximum Rhat per variable class and the classes above ``cutoff``.

    ``classes`` maps a name to an array of Rhat values (NaN entries are
    skipped).
    """
    out = {}
    for name, vals in classes.items():
        vals = np.asarray(vals, dtype=float)
        vals = vals[np.isfinite(vals)]
        out[name] = float(vals.max()) if vals.size else None
    flagged = [n for n, v in out.items() if v is not None and v > cutoff]
    return {"max_rhat": out, "cutoff": cutoff, "above_cutoff": flagged}
