"""Dependent-GP covariances from the kernel convolution framework.

Each factor ``a`` is the sum of a shared process (one white-noise source
convolved with a Gaussian kernel of amplitude ``v_a0`` and precision
``B_a0``), a factor-specific process (``v_a1``, ``B_a1``) and iid noise
with standard deviation ``psi``.  All matrices are ordered factor-major:
row ``a * q + j`` is factor ``a`` at time ``t[j]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DgpParams",
    "TimeGrid",
    "CovMatrix",
    "NumericalDegeneracyError",
    "auto_cov",
    "cross_cov",
    "build_sigma_y",
    "sub_cov",
    "factor_variances",
    "factor_correlation",
    "cholesky_with_jitter",
    "JITTER_LEVELS",
]

SQRT_PI = np.sqrt(np.pi)
SQRT_2PI = np.sqrt(2.0 * np.pi)

JITTER_LEVELS = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class NumericalDegeneracyError(np.linalg.LinAlgError):
    """Cholesky failed even after the full jitter escalation."""

    def __init__(self, message, jitter_levels=()):
        super().__init__(message)
        self.jitter_levels = tuple(jitter_levels)


@dataclass(frozen=True)
class DgpParams:
    """Kernel-convolution hyperparameters for ``k`` dependent factors.

    Parameters
    ----------
    shared_amp : array_like, shape (k,)
        Amplitudes ``v_a0`` of the kernels applied to the shared base
        process.  Signed: the sign pattern sets the sign of each
        cross-covariance.  All zero for the independent (IGP) model.
    shared_prec : array_like, shape (k,)
        Precisions ``B_a0`` of the shared kernels (> 0).
    specific_amp : array_like, shape (k,)
        Amplitudes ``v_a1`` of the factor-specific kernels (> 0).
    specific_prec : array_like, shape (k,)
        Precisions ``B_a1`` of the factor-specific kernels (> 0).
    noise_sd : float
        Standard deviation ``psi`` of the iid factor noise (>= 0).
    independent : bool
        If True the shared amplitudes are pinned to zero and excluded from
        optimization, giving independent GPs per factor.
    """

    shared_amp: np.ndarray
    shared_prec: np.ndarray
    specific_amp: np.ndarray
    specific_prec: np.ndarray
    noise_sd: float = 0.0
    independent: bool = False

    def __post_init__(self):
        arrays = {}
        for name in ("shared_amp", "shared_prec", "specific_amp", "specific_prec"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).copy()
            arr.setflags(write=False)
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        k = arrays["shared_amp"].size
        if k < 1:
            raise ValueError("need at least one factor")
        if any(a.shape != (k,) for a in arrays.values()):
            raise ValueError("all per-factor parameter arrays must have length k")
        for name, arr in arrays.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
        if np.any(arrays["shared_prec"] <= 0) or np.any(arrays["specific_prec"] <= 0):
            raise ValueError("kernel precisions must be strictly positive")
        if np.any(arrays["specific_amp"] <= 0):
            raise ValueError("specific amplitudes must be strictly positive")
        noise = float(self.noise_sd)
        if not np.isfinite(noise) or noise < 0:
            raise ValueError("noise_sd must be finite and non-negative")
        object.__setattr__(self, "noise_sd", noise)
        if self.independent and np.any(arrays["shared_amp"] != 0):
            raise ValueError("independent params require all shared amplitudes = 0")

    @property
    def k(self) -> int:
        return self.shared_amp.size

    @classmethod
    def default(cls, k, spacing=1.0, independent=False, shared_sign=None):
        """Unit-variance starting point whose lag-``spacing`` correlation is ~0.78."""
        prec = 1.0 / spacing**2
        share = 0.0 if independent else 0.45
        spec = 1.0 - share - 0.05
        amp0 = np.sqrt(share * np.sqrt(prec) / SQRT_PI)
        amp1 = np.sqrt(spec * np.sqrt(prec) / SQRT_PI)
        sign = np.ones(k) if shared_sign is None else np.sign(shared_sign)
        sign[sign == 0] = 1.0
        return cls(
            shared_amp=amp0 * sign,
            shared_prec=np.full(k, prec),
            specific_amp=np.full(k, amp1),
            specific_prec=np.full(k, prec),
            noise_sd=np.sqrt(0.05),
            independent=independent,
        )

    def to_independent(self) -> "DgpParams":
        return DgpParams(
            np.zeros(self.k), self.shared_prec, self.specific_amp,
            self.specific_prec, self.noise_sd, independent=True,
        )

    # -- unconstrained vector form used by the optimizer --------------------

    def to_vector(self, log_floor=-10.0) -> np.ndarray:
        """Pack to ``[v0..., log v1..., log B0..., log B1..., log psi^2]``.

        The shared amplitudes stay on the natural (signed) scale and are
        omitted entirely for independent params.  ``psi = 0`` maps to
        ``log_floor``.
        """
        parts = []
        if not self.independent:
            parts.append(self.shared_amp)
        parts += [
            np.log(self.specific_amp),
            np.log(self.shared_prec),
            np.log(self.specific_prec),
        ]
        psi2 = self.noise_sd**2
        parts.append([np.log(psi2) if psi2 > 0 else log_floor])
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec, k, independent=False):
        vec = np.asarray(vec, dtype=float)
        expected = (3 if independent else 4) * k + 1
        if vec.shape != (expected,):
            raise ValueError(f"expected vector of length {expected}, got {vec.shape}")
        pos = 0
        if independent:
            shared = np.zeros(k)
        else:
            shared = vec[:k]
            pos = k
        v1 = np.exp(vec[pos:pos + k])
        b0 = np.exp(vec[pos + k:pos + 2 * k])
        b1 = np.exp(vec[pos + 2 * k:pos + 3 * k])
        psi = np.sqrt(np.exp(vec[-1]))
        return cls(shared, b0, v1, b1, psi, independent=independent)

    def as_dict(self) -> dict:
        return {
            "shared_amp": self.shared_amp.tolist(),
            "shared_prec": self.shared_prec.tolist(),
            "specific_amp": self.specific_amp.tolist(),
            "specific_prec": self.specific_prec.tolist(),
            "noise_sd": self.noise_sd,
            "independent": self.independent,
        }

    @classmethod
    def from_dict(cls, d) -> "DgpParams":
        return cls(
            d["shared_amp"], d["shared_prec"], d["specific_amp"],
            d["specific_prec"], d["noise_sd"], bool(d.get("independent", False)),
        )


@dataclass(frozen=True)
class TimeGrid:
    """Pooled observation grid plus per-subject index sets into it."""

    times: np.ndarray
    subject_index: tuple = ()

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel().copy()
        if t.size == 0 or not np.all(np.isfinite(t)):
            raise ValueError("pooled grid must be non-empty and finite")
        if np.any(np.diff(t) <= 0):
            raise ValueError("pooled grid must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        idx = []
        for ix in self.subject_index:
            ix = np.asarray(ix, dtype=int).ravel()
            if ix.size and (ix.min() < 0 or ix.max() >= t.size):
                raise ValueError("subject time index out of range")
            idx.append(ix)
        object.__setattr__(self, "subject_index", tuple(idx))

    @property
    def q(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class CovMatrix:
    """Factor-major ``(k*q, k*q)`` covariance (or correlation) matrix."""

    matrix: np.ndarray
    k: int
    times: np.ndarray
    is_correlation: bool = False
    jitter: float = 0.0
    chol: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def q(self) -> int:
        return self.times.size

    def index(self, time_index) -> np.ndarray:
        """Row indices of ``time_index`` for every factor, factor-major."""
        time_index = np.asarray(time_index, dtype=int).ravel()
        return (np.arange(self.k)[:, None] * self.q + time_index[None, :]).ravel()


def _check_lag(dt):
    dt = np.asarray(dt, dtype=float)
    if not np.all(np.isfinite(dt)):
        raise ValueError("time lag must be finite")
    return dt


def auto_cov(params: DgpParams, a: int, dt, same_point: bool = False):
    """Covariance of factor ``a`` with itself at lag ``dt``."""
    if not 0 <= a < params.k:
        raise IndexError("factor index out of range")
    dt = _check_lag(dt)
    v0, b0 = params.shared_amp[a], params.shared_prec[a]
    v1, b1 = params.specific_amp[a], params.specific_prec[a]
    out = (v0**2 * SQRT_PI / np.sqrt(b0) * np.exp(-b0 * dt**2 / 4)
           + v1**2 * SQRT_PI / np.sqrt(b1) * np.exp(-b1 * dt**2 / 4))
    if same_point:
        out = out + params.noise_sd**2
    return out


def cross_cov(params: DgpParams, a: int, b: int, dt):
    """Covariance between factor ``a`` at ``t`` and factor ``b`` at ``t - dt``."""
    if a == b:
        raise ValueError("cross_cov needs distinct factors; use auto_cov")
    if not (0 <= a < params.k and 0 <= b < params.k):
        raise IndexError("factor index out of range")
    dt = _check_lag(dt)
    ba, bb = params.shared_prec[a], params.shared_prec[b]
    bsum = ba + bb
    return (params.shared_amp[a] * params.shared_amp[b] * SQRT_2PI / np.sqrt(bsum)
            * np.exp(-0.5 * (ba * bb / bsum) * dt**2))


def factor_variances(params: DgpParams) -> np.ndarray:
    """Stationary marginal variance of each factor, noise included."""
    return (params.shared_amp**2 * SQRT_PI / np.sqrt(params.shared_prec)
            + params.specific_amp**2 * SQRT_PI / np.sqrt(params.specific_prec)
            + params.noise_sd**2)


def factor_correlation(params: DgpParams) -> np.ndarray:
    """``k x k`` cross-correlation between factors at zero lag."""
    var = factor_variances(params)
    b = params.shared_prec
    shared = (np.outer(params.shared_amp, params.shared_amp) * SQRT_2PI
              / np.sqrt(b[:, None] + b[None, :]))
    cov = shared.copy()
    np.fill_diagonal(cov, var)
    sd = np.sqrt(var)
    corr = cov / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    return corr


def _blocks(params: DgpParams, times: np.ndarray):
    """Covariance pieces as ``(k, k, q, q)`` arrays.

    Returns the shared part (which on the diagonal blocks is the shared
    auto-covariance), the shared kernel without amplitudes, the lag matrix
    and the per-factor specific parts ``(k, q, q)``.
    """
    d2 = (times[:, None] - times[None, :]) ** 2
    b0 = params.shared_prec
    bsum = b0[:, None] + b0[None, :]
    bab = np.outer(b0, b0) / bsum
    kern = (SQRT_2PI / np.sqrt(bsum))[:, :, None, None] * np.exp(
        -0.5 * bab[:, :, None, None] * d2)
    shared = np.outer(params.shared_amp, params.shared_amp)[:, :, None, None] * kern
    b1 = params.specific_prec[:, None, None]
    specific = (params.specific_amp**2)[:, None, None] * SQRT_PI / np.sqrt(b1) * np.exp(
        -b1 * d2 / 4)
    return shared, kern, d2, specific


def _assemble(params: DgpParams, times: np.ndarray) -> np.ndarray:
    k, q = params.k, times.size
    shared, _, _, specific = _blocks(params, times)
    full = shared
    idx = np.arange(k)
    full[idx, idx] += specific
    mat = full.transpose(0, 2, 1, 3).reshape(k * q, k * q)
    mat[np.diag_indices_from(mat)] += params.noise_sd**2
    return 0.5 * (mat + mat.T)


def cholesky_with_jitter(mat: np.ndarray, levels=JITTER_LEVELS):
    """Lower Cholesky factor, escalating diagonal jitter on failure.

    Returns ``(chol, jitter)`` where ``jitter`` is the absolute amount added
    to the diagonal (0 when none was needed).
    """
    try:
        return np.linalg.cholesky(mat), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(mat)))
    if not np.isfinite(scale) or scale <= 0:
        raise NumericalDegeneracyError("matrix has non-positive mean diagonal", ())
    tried = []
    eye = np.eye(mat.shape[0])
    for eps in levels:
        tried.append(eps)
        try:
            return np.linalg.cholesky(mat + eps * scale * eye), eps * scale
        except np.linalg.LinAlgError:
            continue
    raise NumericalDegeneracyError(
        f"Cholesky failed after jitter levels {tried}", tried)


def build_sigma_y(params: DgpParams, grid, as_correlation: bool = False) -> CovMatrix:
    """Assemble the factor-major covariance of all factors over ``grid``.

    ``grid`` may be a :class:`TimeGrid` or any 1-d array of finite times
    (unsorted grids are allowed, e.g. pooled times followed by prediction
    times).  With ``as_correlation`` the matrix is rescaled by the
    analytic stationary standard deviation of each factor, so the diagonal
    is exactly one.
    """
    times = grid.times if isinstance(grid, TimeGrid) else np.asarray(grid, dtype=float).ravel()
    if times.size == 0 or not np.all(np.isfinite(times)):
        raise ValueError("grid must contain finite times")
    mat = _assemble(params, times)
    q = times.size
    if as_correlation:
        sd = np.repeat(np.sqrt(factor_variances(params)), q)
        mat = mat / np.outer(sd, sd)
        mat[np.diag_indices_from(mat)] = 1.0
    chol, jitter = cholesky_with_jitter(mat)
    if jitter:
        mat = mat + jitter * np.eye(mat.shape[0])
        if as_correlation:
            mat = mat / (1.0 + jitter)
            mat[np.diag_indices_from(mat)] = 1.0
            chol = np.linalg.cholesky(mat)
    times = times.copy()
    times.setflags(write=False)
    return CovMatrix(mat, params.k, times, as_correlation, jitter, chol)


def sub_cov(full: CovMatrix, row_times, col_times) -> np.ndarray:
    """Block of ``full`` for the given time indices, factor-major on both axes."""
    rows = full.index(row_times)
    cols = full.index(col_times)
    if rows.size and (rows.min() < 0 or rows.max() >= full.matrix.shape[0]):
        raise IndexError("row time index out of range")
    if cols.size and (cols.min() < 0 or cols.max() >= full.matrix.shape[1]):
        raise IndexError("column time index out of range")
    return full.matrix[np.ix_(rows, cols)]


def loglik_gradient_terms(params: DgpParams, times: np.ndarray, weight: np.ndarray):
    """Contract ``weight`` (kq x kq, symmetric) against dSigma/dtheta.

    Returns the gradient of ``0.5 * tr(weight @ Sigma)`` with respect to the
    packed vector of :meth:`DgpParams.to_vector`.  With
    ``weight = Sigma^-1 S Sigma^-1 - N Sigma^-1`` this is the gradient of a
    Gaussian log-likelihood with scatter ``S`` over ``N`` vectors.
    """
    k, q = params.k, times.size
    w = weight.reshape(k, q, k, q).transpose(0, 2, 1, 3)
    shared, kern, d2, specific = _blocks(params, times)

    grads = []
    if not params.independent:
        t_ab = np.einsum("abjl,abjl->ab", w, kern)
        grads.append(t_ab @ params.shared_amp)

    idx = np.arange(k)
    w_diag = w[idx, idx]  # (k, q, q)
    b1 = params.specific_prec[:, None, None]
    grads.append(np.einsum("ajl,ajl->a", w_diag, specific))  # d/dlog v1 = 2 S, times 1/2
    b0 = params.shared_prec
    bsum = b0[:, None] + b0[None, :]
    h = (-0.5 / bsum)[:, :, None, None] - 0.5 * d2 * ((b0[None, :] ** 2) / bsum**2)[:, :, None, None]
    g_b0 = b0 * np.einsum("abjl,abjl,abjl->a", w, shared, h)
    grads.append(g_b0)
    grads.append(0.5 * np.einsum("ajl,ajl->a", w_diag, specific * (-0.5 - b1 * d2 / 4)))
    grads.append([0.5 * params.noise_sd**2 * np.trace(weight)])
    return np.concatenate(grads)
