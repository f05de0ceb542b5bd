"""Blocked Gibbs sampler for the sparse factor model with GP factor scores.

The model for subject ``i`` observed at ``q_i`` times is::

    X_i = mu_i 1^T + (A o Z) Y_i,obs + E_i,    E_i[g, j] ~ N(0, phi_g^2)
    vec(Y_i^T) ~ MVN(0, Sigma_Y)

with spike-and-slab loadings ``Z_ga ~ Bern(pi_a)``, ``A_ga ~ N(0, rho_a^2)``
and conjugate Beta / Inverse-Gamma priors on ``pi``, ``rho^2``,
``sigma^2`` and ``phi^2``.  ``Sigma_Y`` is fixed (a correlation matrix).

Every ``update_*`` function modifies ``state`` in place and returns it.
Rows of ``Z`` and ``A`` are conditionally independent given the factor
scores, so the per-row updates are evaluated for all genes at once.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .data import Dataset
from .kcf import CovMatrix, cholesky_with_jitter, sub_cov

__all__ = [
    "Hyperparams",
    "ModelState",
    "FactorPrior",
    "PredictionPrior",
    "GibbsError",
    "update_y",
    "z_row_log_probs",
    "update_z_row",
    "update_z",
    "a_row_posterior",
    "update_a_row",
    "update_a",
    "update_mu",
    "update_pi",
    "update_variances",
    "predict_x",
    "GibbsSampler",
    "ChainResult",
    "run_chain",
    "retained_iterations",
    "collect",
    "variance_posteriors",
    "MAX_ENUMERATION_K",
]

MAX_ENUMERATION_K = 12


class GibbsError(RuntimeError):
    """An update failed; ``iteration`` records the sweep it happened in."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class Hyperparams:
    """Prior constants.  ``mu_g`` is the fixed prior mean of each gene."""

    c0: float
    d0: float
    mu_g: np.ndarray
    c1: float = 1e-2
    d1: float = 1e-2
    c2: float = 1e-2
    d2: float = 1e-2
    c3: float = 1e-2
    d3: float = 1e-2

    def __post_init__(self):
        for name in ("c0", "d0", "c1", "d1", "c2", "d2", "c3", "d3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        mu = np.asarray(self.mu_g, dtype=float).ravel()
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu_g must be finite")
        object.__setattr__(self, "mu_g", mu)

    @classmethod
    def default(cls, data: Dataset, sparsity: float = 0.1, **kw):
        """``c0 = sparsity * p``, ``d0 = (1 - sparsity) * p``; 1e-2 elsewhere."""
        p = data.p
        return cls(c0=sparsity * p, d0=(1 - sparsity) * p, mu_g=data.gene_means, **kw)


@dataclass
class ModelState:
    """One draw of all sampled quantities.

    Shapes: ``y (n, k, q)`` on the pooled grid, ``mu (n, p)``,
    ``a`` and ``z (p, k)``, ``pi`` and ``rho2 (k,)``, ``sigma2`` and
    ``phi2 (p,)``.
    """

    y: np.ndarray
    mu: np.ndarray
    a: np.ndarray
    z: np.ndarray
    pi: np.ndarray
    rho2: np.ndarray
    sigma2: np.ndarray
    phi2: np.ndarray

    @property
    def loadings(self) -> np.ndarray:
        return self.a * self.z

    @property
    def k(self) -> int:
        return self.a.shape[1]

    def copy(self) -> "ModelState":
        return ModelState(**{f: np.array(getattr(self, f), copy=True)
                             for f in self.__dataclass_fields__})


def _inv_gamma(rng, shape, rate):
    return 1.0 / rng.gamma(shape, 1.0 / np.asarray(rate))


def _psd_factor(cov):
    """Some ``F`` with ``F F^T = cov`` for a PSD (possibly singular) matrix."""
    if cov.size == 0:
        return cov
    try:
        return cholesky_with_jitter(cov)[0]
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class _PatternPrior:
    obs: np.ndarray           # factor-major rows of observed times
    miss: np.ndarray          # factor-major rows of unobserved pooled times
    prec_obs: np.ndarray      # Sigma_obs^-1
    cond: np.ndarray          # Sigma_mo Sigma_oo^-1
    cond_factor: np.ndarray   # factor of the conditional covariance


@dataclass(frozen=True)
class FactorPrior:
    """Per-pattern pieces of ``Sigma_Y`` reused by every Y update."""

    sigma_y: CovMatrix
    patterns: tuple

    @classmethod
    def prepare(cls, sigma_y: CovMatrix, data: Dataset) -> "FactorPrior":
        if not sigma_y.is_correlation:
            raise ValueError("the sampler needs Sigma_Y in correlation form")
        if sigma_y.q != data.q:
            raise ValueError("Sigma_Y grid does not match the pooled grid")
        q = data.q
        out = []
        for pat in data.layout.patterns:
            obs_t = pat.times
            miss_t = np.setdiff1d(np.arange(q), obs_t)
            s_oo = sub_cov(sigma_y, obs_t, obs_t)
            chol = cholesky_with_jitter(s_oo)[0]
            prec = sla.cho_solve((chol, True), np.eye(s_oo.shape[0]))
            prec = 0.5 * (prec + prec.T)
            if miss_t.size:
                s_mo = sub_cov(sigma_y, miss_t, obs_t)
                s_mm = sub_cov(sigma_y, miss_t, miss_t)
                cond = sla.cho_solve((chol, True), s_mo.T).T
                ccov = s_mm - cond @ s_mo.T
                factor = _psd_factor(0.5 * (ccov + ccov.T))
            else:
                cond = np.zeros((0, s_oo.shape[0]))
                factor = np.zeros((0, 0))
            out.append(_PatternPrior(sigma_y.index(obs_t), sigma_y.index(miss_t),
                                     prec, cond, factor))
        return cls(sigma_y, tuple(out))


@dataclass(frozen=True)
class PredictionPrior:
    """Conditional of factor scores at new times given the pooled grid."""

    new_index: np.ndarray
    cond: np.ndarray
    cond_factor: np.ndarray
    k: int

    @classmethod
    def prepare(cls, sigma_y_ext: CovMatrix, new_index) -> "PredictionPrior":
        new_index = np.asarray(new_index, dtype=int).ravel()
        base = np.setdiff1d(np.arange(sigma_y_ext.q), new_index)
        s_bb = sub_cov(sigma_y_ext, base, base)
        s_nb = sub_cov(sigma_y_ext, new_index, base)
        s_nn = sub_cov(sigma_y_ext, new_index, new_index)
        chol = cholesky_with_jitter(s_bb)[0]
        cond = sla.cho_solve((chol, True), s_nb.T).T
        ccov = s_nn - cond @ s_nb.T
        return cls(new_index, cond, _psd_factor(0.5 * (ccov + ccov.T)), sigma_y_ext.k)


def _columns_y(state: ModelState, data: Dataset) -> np.ndarray:
    lay = data.layout
    return state.y[lay.col_subject, :, lay.col_time]  # (N, k)


def update_y(state: ModelState, data: Dataset, prior, rng) -> ModelState:
    """Draw every subject's factor scores, observed times then the rest.

    ``prior`` is a :class:`FactorPrior` or a correlation-form
    :class:`CovMatrix` over the pooled grid.
    """
    if isinstance(prior, CovMatrix):
        prior = FactorPrior.prepare(prior, data)
    lay = data.layout
    k, q = state.k, data.q
    load = state.loadings
    lt_phi = load.T / state.phi2                        # (k, p)
    gram = lt_phi @ load                                 # (k, k)
    resid = lay.x - state.mu.T[:, lay.col_subject]       # (p, N)
    proj = lt_phi @ resid                                # (k, N)
    for pat, pp in zip(lay.patterns, prior.patterns):
        n_s, q_s = pat.cols.shape
        rhs = proj[:, pat.cols].transpose(1, 0, 2).reshape(n_s, k * q_s)
        prec = np.kron(gram, np.eye(q_s)) + pp.prec_obs
        try:
            upper = np.linalg.cholesky(prec).T
        except np.linalg.LinAlgError:
            upper = cholesky_with_jitter(prec)[0].T
        mean = sla.cho_solve((upper, False), rhs.T)
        noise = rng.standard_normal(mean.shape)
        y_obs = (mean + sla.solve_triangular(upper, noise, lower=False)).T
        y_full = np.empty((n_s, k * q))
        y_full[:, pp.obs] = y_obs
        if pp.miss.size:
            noise = rng.standard_normal((n_s, pp.miss.size))
            y_full[:, pp.miss] = y_obs @ pp.cond.T + noise @ pp.cond_factor.T
        state.y[pat.subjects] = y_full.reshape(n_s, k, q)
    return state


def _z_configs(k):
    if k > MAX_ENUMERATION_K:
        raise ValueError(
            f"row-wise enumeration of Z supports k <= {MAX_ENUMERATION_K}, got {k}")
    return np.array(list(itertools.product((0, 1), repeat=k)), dtype=float)


def _row_stats(state: ModelState, data: Dataset):
    lay = data.layout
    yc = _columns_y(state, data)
    resid = lay.x - state.mu.T[:, lay.col_subject]
    return yc.T @ yc, resid @ yc  # (k, k), (p, k)


def _config_log_probs(a, phi2, pi, gram, cross, configs):
    # a (p,k) cross (p,k) -> (p, 2^k)
    lv = configs[None, :, :] * a[:, None, :]                 # (p, C, k)
    quad = np.einsum("pck,kl,pcl->pc", lv, gram, lv)
    lin = np.einsum("pck,pk->pc", lv, cross)
    with np.errstate(divide="ignore"):
        log_prior = configs @ np.log(pi) + (1 - configs) @ np.log1p(-pi)
    return -(quad - 2 * lin) / (2 * phi2[:, None]) + log_prior[None, :]


def z_row_log_probs(state: ModelState, g: int, data: Dataset) -> np.ndarray:
    """Normalized log-probabilities of all ``2^k`` configurations of row ``g``.

    Configurations are ordered as ``itertools.product((0, 1), repeat=k)``.
    """
    configs = _z_configs(state.k)
    gram, cross = _row_stats(state, data)
    lp = _config_log_probs(state.a[g:g + 1], state.phi2[g:g + 1], state.pi,
                           gram, cross[g:g + 1], configs)[0]
    return lp - np.logaddexp.reduce(lp)


def _sample_configs(log_probs, configs, rng):
    lp = log_probs - np.max(log_probs, axis=1, keepdims=True)
    prob = np.exp(lp)
    cum = np.cumsum(prob, axis=1)
    u = rng.random(prob.shape[0]) * cum[:, -1]
    pick = np.minimum((cum < u[:, None]).sum(axis=1), configs.shape[0] - 1)
    return configs[pick]


def update_z_row(state: ModelState, g: int, data: Dataset, rng) -> ModelState:
    configs = _z_configs(state.k)
    lp = z_row_log_probs(state, g, data)
    state.z[g] = _sample_configs(lp[None, :], configs, rng)[0]
    return state


def update_z(state: ModelState, data: Dataset, rng) -> ModelState:
    """Block-update every row of ``Z`` by enumerating its ``2^k`` values."""
    configs = _z_configs(state.k)
    gram, cross = _row_stats(state, data)
    lp = _config_log_probs(state.a, state.phi2, state.pi, gram, cross, configs)
    state.z[:] = _sample_configs(lp, configs, rng)
    return state


def _a_precision(state: ModelState, gram, cross):
    z = state.z.astype(float)
    prec = (z[:, :, None] * gram[None] * z[:, None, :]) / state.phi2[:, None, None]
    idx = np.arange(state.k)
    prec[:, idx, idx] += 1.0 / state.rho2
    rhs = z * cross / state.phi2[:, None]
    return prec, rhs


def a_row_posterior(state: ModelState, g: int, data: Dataset):
    """Mean and covariance of the Gaussian full conditional of ``A[g]``."""
    gram, cross = _row_stats(state, data)
    prec, rhs = _a_precision(state, gram, cross)
    cov = np.linalg.inv(prec[g])
    return cov @ rhs[g], cov


def _draw_a(prec, rhs, rng):
    chol = np.linalg.cholesky(prec)                               # (p, k, k)
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    noise = rng.standard_normal(rhs.shape)
    dev = np.linalg.solve(np.swapaxes(chol, 1, 2), noise[..., None])[..., 0]
    return mean + dev


def update_a_row(state: ModelState, g: int, data: Dataset, rng) -> ModelState:
    gram, cross = _row_stats(state, data)
    prec, rhs = _a_precision(state, gram, cross)
    state.a[g] = _draw_a(prec[g:g + 1], rhs[g:g + 1], rng)[0]
    return state


def update_a(state: ModelState, data: Dataset, rng) -> ModelState:
    """Draw every row of ``A``; excluded coefficients fall back to their prior."""
    gram, cross = _row_stats(state, data)
    prec, rhs = _a_precision(state, gram, cross)
    state.a[:] = _draw_a(prec, rhs, rng)
    return state


def update_mu(state: ModelState, data: Dataset, hyper: Hyperparams, rng) -> ModelState:
    lay = data.layout
    yc = _columns_y(state, data)
    resid = lay.x - state.loadings @ yc.T                  # (p, N)
    sums = (resid @ lay.indicator).T                        # (n, p)
    var = 1.0 / (1.0 / state.sigma2[None, :] + lay.q_obs[:, None] / state.phi2[None, :])
    mean = var * (hyper.mu_g[None, :] / state.sigma2[None, :] + sums / state.phi2[None, :])
    state.mu[:] = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
    return state


def update_pi(state: ModelState, hyper: Hyperparams, rng) -> ModelState:
    p = state.z.shape[0]
    s = state.z.sum(axis=0)
    state.pi[:] = rng.beta(hyper.c0 + s, hyper.d0 + p - s)
    return state


def variance_posteriors(state: ModelState, data: Dataset, hyper: Hyperparams):
    """Inverse-Gamma ``(shape, rate)`` pairs for rho^2, sigma^2 and phi^2."""
    lay = data.layout
    p, n = state.a.shape[0], state.mu.shape[0]
    rho = (hyper.c1 + p / 2, hyper.d1 + 0.5 * np.sum(state.a**2, axis=0))
    sig = (hyper.c2 + n / 2, hyper.d2 + 0.5 * np.sum((state.mu - hyper.mu_g[None, :])**2, axis=0))
    yc = _columns_y(state, data)
    resid = lay.x - state.mu.T[:, lay.col_subject] - state.loadings @ yc.T
    phi = (hyper.c3 + lay.n_cols / 2, hyper.d3 + 0.5 * np.sum(resid**2, axis=1))
    return rho, sig, phi


def update_variances(state: ModelState, data: Dataset, hyper: Hyperparams, rng,
                     which=("rho", "sigma", "phi")) -> ModelState:
    rho, sig, phi = None, None, None
    if "rho" in which:
        rho = variance_posteriors(state, data, hyper)[0]
        state.rho2[:] = _inv_gamma(rng, *rho)
    if "sigma" in which:
        sig = variance_posteriors(state, data, hyper)[1]
        state.sigma2[:] = _inv_gamma(rng, *sig)
    if "phi" in which:
        phi = variance_posteriors(state, data, hyper)[2]
        state.phi2[:] = _inv_gamma(rng, *phi)
    return state


def predict_x(state: ModelState, sigma_y_ext, new_times, rng, return_y=False):
    """Draw expression at new times for every subject.

    ``sigma_y_ext`` covers the pooled grid followed by the new times (a
    :class:`CovMatrix`) or is an already prepared :class:`PredictionPrior`;
    ``new_times`` indexes the new times inside it.  Returns ``(n, p, u)``.
    """
    if isinstance(sigma_y_ext, PredictionPrior):
        prior = sigma_y_ext
    else:
        prior = PredictionPrior.prepare(sigma_y_ext, new_times)
    n, k, q = state.y.shape
    u = prior.new_index.size
    base = state.y.reshape(n, k * q)
    noise = rng.standard_normal((n, k * u))
    y_new = (base @ prior.cond.T + noise @ prior.cond_factor.T).reshape(n, k, u)
    mean = state.mu[:, :, None] + np.einsum("pk,nku->npu", state.loadings, y_new)
    x_new = mean + np.sqrt(state.phi2)[None, :, None] * rng.standard_normal(mean.shape)
    return (x_new, y_new) if return_y else x_new


class GibbsSampler:
    """One chain: holds the state, the generator and the prepared prior.

    Sweep order is Y, Z, A, mu, pi, rho^2, sigma^2, phi^2.
    """

    def __init__(self, data: Dataset, hyper: Hyperparams, sigma_y: CovMatrix,
                 init: ModelState, rng, sigma_y_ext=None, new_index=None):
        self.data = data
        self.hyper = hyper
        self.prior = FactorPrior.prepare(sigma_y, data)
        self.state = init.copy()
        self.rng = rng
        self.iteration = 0
        self.prediction = None
        if sigma_y_ext is not None:
            self.prediction = PredictionPrior.prepare(sigma_y_ext, new_index)

    def sweep(self):
        st, data, rng = self.state, self.data, self.rng
        try:
            update_y(st, data, self.prior, rng)
            update_z(st, data, rng)
            update_a(st, data, rng)
            update_mu(st, data, self.hyper, rng)
            update_pi(st, self.hyper, rng)
            self._variances()
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            raise GibbsError(f"sweep {self.iteration + 1} failed: {exc}",
                             self.iteration + 1) from exc
        self.iteration += 1
        return st

    def _variances(self):
        st, data, hyper, rng = self.state, self.data, self.hyper, self.rng
        p, n = st.a.shape[0], st.mu.shape[0]
        st.rho2[:] = _inv_gamma(rng, hyper.c1 + p / 2,
                                hyper.d1 + 0.5 * np.sum(st.a**2, axis=0))
        st.sigma2[:] = _inv_gamma(rng, hyper.c2 + n / 2,
                                  hyper.d2 + 0.5 * np.sum((st.mu - hyper.mu_g)**2, axis=0))
        lay = data.layout
        resid = lay.x - st.mu.T[:, lay.col_subject] - st.loadings @ _columns_y(st, data).T
        st.phi2[:] = _inv_gamma(rng, hyper.c3 + lay.n_cols / 2,
                                hyper.d3 + 0.5 * np.sum(resid**2, axis=1))

    def predict(self):
        if self.prediction is None:
            raise ValueError("sampler was built without prediction times")
        return predict_x(self.state, self.prediction, None, self.rng)


@dataclass
class ChainResult:
    """Retained draws of one chain, stacked along axis 0."""

    y: np.ndarray
    a: np.ndarray
    z: np.ndarray
    mu: np.ndarray
    pi: np.ndarray
    rho2: np.ndarray
    sigma2: np.ndarray
    phi2: np.ndarray
    iterations: np.ndarray
    x_new: np.ndarray | None = None
    final_state: ModelState | None = field(default=None, repr=False)

    @property
    def n_draws(self) -> int:
        return self.y.shape[0]

    @property
    def loadings(self) -> np.ndarray:
        return self.a * self.z

    def subset(self, index) -> "ChainResult":
        kw = {f: (None if getattr(self, f) is None else getattr(self, f)[index])
              for f in ("y", "a", "z", "mu", "pi", "rho2", "sigma2", "phi2",
                        "iterations", "x_new")}
        return replace(self, **kw)


_FIELDS = ("y", "a", "z", "mu", "pi", "rho2", "sigma2", "phi2")


def retained_iterations(n_iter: int, burn_in: int, thin: int) -> np.ndarray:
    """Sweeps ``s`` (1-based) with ``s > burn_in`` and ``(s - burn_in) % thin == 0``."""
    if n_iter <= burn_in:
        raise ValueError("n_iter must exceed burn_in")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    return np.arange(burn_in + thin, n_iter + 1, thin)


def collect(sampler: GibbsSampler, n_iter: int, burn_in: int = 0, thin: int = 1,
            predict: bool = False) -> ChainResult:
    """Advance ``sampler`` by ``n_iter`` sweeps and stack the retained draws.

    Sweep ``s`` (1-based, counted from this call) is kept when
    ``s > burn_in`` and ``(s - burn_in) % thin == 0``.
    """
    keep = set(retained_iterations(n_iter, burn_in, thin).tolist())
    store = {f: [] for f in _FIELDS}
    x_new, its = [], []
    for s in range(1, n_iter + 1):
        st = sampler.sweep()
        if s in keep:
            for f in _FIELDS:
                store[f].append(np.array(getattr(st, f), copy=True))
            its.append(sampler.iteration)
            if predict:
                x_new.append(sampler.predict())
    out = {f: np.stack(v) for f, v in store.items()}
    out["z"] = out["z"].astype(np.int8)
    return ChainResult(**out, iterations=np.array(its),
                       x_new=np.stack(x_new) if predict else None,
                       final_state=sampler.state.copy())


def run_chain(data: Dataset, hyper: Hyperparams, sigma_y: CovMatrix, init: ModelState,
              n_iter: int, burn_in: int, thin: int, seed, sigma_y_ext=None,
              new_index=None) -> ChainResult:
    """Run one chain from ``init``; deterministic given ``seed``.

    ``seed`` may be an int, a ``SeedSequence`` or a ``Generator``.  When
    ``sigma_y_ext`` (pooled grid followed by new times) and ``new_index``
    are given, expression at the new times is drawn once per retained draw.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sampler = GibbsSampler(data, hyper, sigma_y, init, rng, sigma_y_ext, new_index)
    return collect(sampler, n_iter, burn_in, thin, predict=sigma_y_ext is not None)
