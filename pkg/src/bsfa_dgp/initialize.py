"""Starting values for MCEM from a truncated SVD of within-subject centered data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .gibbs import Hyperparams, ModelState
from .kcf import DgpParams
from .mle import MleOptions, MleReport, SampleBank, fit_mle

__all__ = [
    "InitResult",
    "center_within_subject",
    "init_factors",
    "init_theta",
    "shared_sign_guess",
    "varimax",
    "VARIANCE_FLOOR",
]

VARIANCE_FLOOR = 1e-4


@dataclass
class InitResult:
    """``y0`` is ``(n, k, q)`` on the pooled grid; unobserved times hold 0."""

    y0: np.ndarray
    loadings: np.ndarray
    state: ModelState
    singular_values: np.ndarray


def center_within_subject(data: Dataset) -> Dataset:
    """Subtract each subject-gene mean over that subject's observed times."""
    return data.with_x([xi - xi.mean(axis=1, keepdims=True) for xi in data.x])


def varimax(loadings, max_iter: int = 500, tol: float = 1e-10) -> np.ndarray:
    """Orthogonal ``(k, k)`` rotation maximizing the varimax criterion of ``loadings @ R``."""
    loadings = np.asarray(loadings, dtype=float)
    p, k = loadings.shape
    rot = np.eye(k)
    crit = 0.0
    for _ in range(max_iter):
        lr = loadings @ rot
        u, s, vt = np.linalg.svd(loadings.T @ (lr**3 - lr * (lr**2).sum(axis=0) / p))
        rot = u @ vt
        crit_old, crit = crit, s.sum()
        if crit_old and crit < crit_old * (1 + tol):
            break
    return rot


def init_factors(data: Dataset, k: int, hyper: Hyperparams | None = None,
                 sparsity: float = 0.1, rank_tol: float = 1e-10,
                 rotation: str | None = "varimax") -> InitResult:
    """Rank-``k`` SVD start for factor scores, loadings and the full state.

    ``data`` is centered within subject first (a no-op on centered input).
    Scores are the leading right singular vectors scaled to unit mean
    square; loadings carry the singular values so that ``L0 @ Y0`` is the
    best rank-``k`` approximation of the centered data.  With
    ``rotation="varimax"`` both are then rotated orthogonally towards
    sparse loadings, which leaves ``L0 @ Y0`` and the score variances
    unchanged; ``rotation=None`` keeps the raw singular vectors.  ``Z0``
    keeps the top ``sparsity`` fraction of ``|L0|`` in each column.
    """
    if rotation not in (None, "varimax"):
        raise ValueError(f"unknown rotation {rotation!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    centered = center_within_subject(data)
    lay = centered.layout
    xc = lay.x
    p, n_cols = xc.shape
    if k > min(p, n_cols):
        raise ValueError(f"k={k} exceeds min(p, observed columns)={min(p, n_cols)}")
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    rank = int(np.sum(s > rank_tol * max(s[0], 1e-300)))
    if k > rank:
        raise ValueError(f"k={k} exceeds the numerical rank {rank} of the centered data")

    scale = np.sqrt(n_cols)
    scores = vt[:k] * scale                     # (k, N)
    loadings = u[:, :k] * (s[:k] / scale)       # (p, k)
    if rotation == "varimax" and k > 1:
        rot = varimax(loadings)
        loadings = loadings @ rot
        scores = rot.T @ scores
    y0 = np.zeros((data.n, k, data.q))
    y0[lay.col_subject, :, lay.col_time] = scores.T

    thresh = np.quantile(np.abs(loadings), 1.0 - sparsity, axis=0)
    z0 = (np.abs(loadings) >= thresh[None, :]).astype(float)
    included = np.maximum(z0.sum(axis=0), 1.0)
    rho2 = np.maximum(np.sum(z0 * loadings**2, axis=0) / included, VARIANCE_FLOOR)

    resid = xc - loadings @ scores
    resid_var = np.maximum(resid.var(axis=1), VARIANCE_FLOOR)
    hyper = hyper or Hyperparams.default(data, sparsity)
    pi0 = np.full(k, hyper.c0 / (hyper.c0 + hyper.d0))
    mu0 = np.stack([xi.mean(axis=1) for xi in data.x])
    state = ModelState(
        y=y0.copy(), mu=mu0, a=loadings.copy(), z=z0, pi=pi0, rho2=rho2,
        sigma2=resid_var.copy(), phi2=resid_var.copy(),
    )
    return InitResult(y0, loadings, state, s[:k].copy())


def shared_sign_guess(y: np.ndarray) -> np.ndarray:
    """Signs of the leading eigenvector of the lag-0 factor correlation of ``y``.

    ``y`` is ``(n, k, q)`` or ``(R, n, k, q)``.
    """
    cols = np.moveaxis(np.asarray(y), -2, -1).reshape(-1, y.shape[-2])
    corr = np.corrcoef(cols, rowvar=False) if cols.shape[1] > 1 else np.ones((1, 1))
    lead = np.linalg.eigh(np.atleast_2d(corr))[1][:, -1]
    sign = np.sign(lead)
    sign[sign == 0] = 1.0
    return sign * (1.0 if sign[0] > 0 else -1.0)


def init_theta(y0: np.ndarray, times, independent: bool = False,
               opts: MleOptions | None = None, observed=None) -> MleReport:
    """Fit DGP hyperparameters to the single-draw bank ``{y0}``.

    ``observed`` optionally restricts the fit to a subset of pooled-grid
    positions (useful when ``y0`` has zero-filled unobserved times).
    """
    y0 = np.asarray(y0, dtype=float)
    times = np.asarray(times, dtype=float)
    if observed is not None:
        y0 = y0[..., observed]
        times = times[observed]
    k = y0.shape[-2]
    spacing = float(np.median(np.diff(times))) if times.size > 1 else 1.0
    start = DgpParams.default(k, spacing=spacing, independent=independent,
                              shared_sign=None if independent else shared_sign_guess(y0))
    return fit_mle(SampleBank(y0, times), start, opts)
