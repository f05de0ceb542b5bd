"""Maximum-likelihood fitting of DGP hyperparameters to factor-score draws."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

from .kcf import (
    DgpParams,
    NumericalDegeneracyError,
    build_sigma_y,
    loglik_gradient_terms,
)

__all__ = [
    "SampleBank",
    "MleOptions",
    "MleReport",
    "dgp_loglik",
    "per_draw_loglik",
    "dgp_loglik_and_grad",
    "fit_mle",
]

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class SampleBank:
    """Aligned factor-score draws on a common time grid.

    ``y`` has shape ``(R, n, k, q)``: draw, subject, factor, time.
    """

    y: np.ndarray
    times: np.ndarray
    iteration: int = 0
    chain: int = 0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 3:
            y = y[None]
        if y.ndim != 4 or y.shape[0] == 0:
            raise ValueError("bank must have shape (R, n, k, q) with R >= 1")
        if not np.all(np.isfinite(y)):
            raise ValueError("bank contains non-finite values")
        times = np.asarray(self.times, dtype=float).ravel()
        if times.size != y.shape[3]:
            raise ValueError("times do not match the last axis of the bank")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "times", times)

    @property
    def n_draws(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.y.shape[2]

    def vectors(self) -> np.ndarray:
        """Factor-major vec(Y_i^T) for every (draw, subject): ``(R*n, k*q)``."""
        r, n, k, q = self.y.shape
        return self.y.reshape(r * n, k * q)

    def scatter(self) -> np.ndarray:
        v = self.vectors()
        return v.T @ v


def _check(params: DgpParams, bank: SampleBank):
    if params.k != bank.k:
        raise ValueError(f"params have k={params.k} but bank has k={bank.k}")


def per_draw_loglik(params: DgpParams, bank: SampleBank) -> np.ndarray:
    """``sum_i log MVN(vec(Y_i^r); 0, Sigma_Y)`` for each draw ``r``."""
    _check(params, bank)
    cov = build_sigma_y(params, bank.times)
    chol = cov.chol
    r, n, k, q = bank.y.shape
    dim = k * q
    sol = sla.solve_triangular(chol, bank.vectors().T, lower=True)
    quad = np.sum(sol**2, axis=0).reshape(r, n).sum(axis=1)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * n * (dim * LOG_2PI + logdet) - 0.5 * quad


def dgp_loglik(params: DgpParams, bank: SampleBank) -> float:
    """Summed log-density of all draws and subjects under ``params``."""
    return float(np.sum(per_draw_loglik(params, bank)))


def dgp_loglik_and_grad(params: DgpParams, times, scatter, count):
    """Log-likelihood and gradient from sufficient statistics.

    ``scatter`` is ``sum v v^T`` over ``count`` factor-major vectors.  The
    gradient is with respect to ``params.to_vector()``.
    """
    cov = build_sigma_y(params, times)
    chol = cov.chol
    dim = chol.shape[0]
    inv = sla.cho_solve((chol, True), np.eye(dim))
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    inv_s = inv @ scatter
    ll = -0.5 * count * (dim * LOG_2PI + logdet) - 0.5 * np.trace(inv_s)
    weight = inv_s @ inv - count * inv
    weight = 0.5 * (weight + weight.T)
    grad = loglik_gradient_terms(params, np.asarray(times, dtype=float), weight)
    return float(ll), grad


@dataclass
class MleOptions:
    """Optimizer settings; log-scale parameters live in ``log_bounds``."""

    max_iter: int = 500
    log_bounds: tuple = (-10.0, 10.0)
    shared_bound: float = float(np.exp(5.0))
    restarts: int = 5
    restart_scale: float = 0.5
    tol: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        self.log_bounds = tuple(float(b) for b in self.log_bounds)


@dataclass
class MleReport:
    params: DgpParams
    objective: float
    initial_objective: float
    n_iter: int
    converged: bool
    grad_norm: float
    message: str = ""


def _bounds(params: DgpParams, opts: MleOptions):
    k = params.k
    lo, hi = opts.log_bounds
    b = []
    if not params.independent:
        b += [(-opts.shared_bound, opts.shared_bound)] * k
    b += [(lo, hi)] * (3 * k + 1)
    return b


def fit_mle(bank: SampleBank, init: DgpParams, opts: MleOptions | None = None) -> MleReport:
    """Maximize the DGP log-likelihood of ``bank`` starting from ``init``.

    Runs L-BFGS-B on the packed parameter vector with analytic gradients.
    When the first run does not converge, up to ``opts.restarts`` jittered
    restarts are tried and the best point is kept.  The returned objective
    is never below the objective at ``init``.
    """
    opts = opts or MleOptions()
    _check(init, bank)
    k, indep = init.k, init.independent
    times = bank.times
    scatter = bank.scatter()
    count = bank.vectors().shape[0]
    bounds = _bounds(init, opts)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def unpack(x):
        return DgpParams.from_vector(x, k, independent=indep)

    def objective(x):
        try:
            ll, g = dgp_loglik_and_grad(unpack(x), times, scatter, count)
        except (NumericalDegeneracyError, ValueError, FloatingPointError):
            return 1e10, np.zeros_like(x)
        if not np.isfinite(ll):
            return 1e10, np.zeros_like(x)
        return -ll / count, -g / count

    x0 = np.clip(init.to_vector(), lo, hi)
    f0 = objective(x0)[0]
    init_obj = dgp_loglik_and_grad(init, times, scatter, count)[0]

    def run(start):
        return minimize(
            objective, start, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": opts.max_iter, "ftol": opts.tol, "gtol": 1e-6},
        )

    res = run(x0)
    best = res
    if not res.success and opts.restarts > 0:
        log.info("MLE did not converge (%s); trying %d restarts", res.message, opts.restarts)
        rng = np.random.default_rng(opts.seed)
        for _ in range(opts.restarts):
            start = np.clip(res.x + rng.normal(scale=opts.restart_scale, size=x0.size), lo, hi)
            cand = run(start)
            if cand.fun < best.fun - 1e-12 or (cand.success and not best.success
                                               and cand.fun <= best.fun + 1e-12):
                best = cand
            if best.success:
                break

    x_best = best.x if best.fun <= f0 else x0
    params = unpack(x_best)
    obj, grad = dgp_loglik_and_grad(params, times, scatter, count)
    if obj < init_obj:
        params, obj = init, init_obj
        grad = dgp_loglik_and_grad(init, times, scatter, count)[1]
    return MleReport(
        params=params,
        objective=obj,
        initial_objective=init_obj,
        n_iter=int(best.nit),
        converged=bool(best.success),
        grad_norm=float(np.linalg.norm(grad)),
        message=str(best.message),
    )
