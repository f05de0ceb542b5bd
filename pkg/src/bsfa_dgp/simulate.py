"""Synthetic longitudinal datasets with known factors, loadings and means."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from .data import Dataset

__all__ = [
    "ScenarioSpec",
    "GroundTruth",
    "SCENARIOS",
    "default_correlation",
    "nearest_correlation",
    "true_sigma_y",
    "simulate",
    "split_train_test",
]

log = logging.getLogger(__name__)

SCENARIOS = ("CS", "CL", "US", "UL")
SMALL_SD = (0.21, 0.23, 0.21, 0.17)
MAX_RETRIES = 100


def default_correlation() -> np.ndarray:
    """The packaged 4 x 4 cross-correlation used by the correlated scenarios."""
    text = resources.files("bsfa_dgp").joinpath("data_files/scenario_c_correlation.json").read_text()
    return np.array(json.loads(text)["matrix"], dtype=float)


def nearest_correlation(mat, floor=1e-6) -> np.ndarray:
    """Clip eigenvalues at ``floor`` and restore the unit diagonal."""
    mat = np.asarray(mat, dtype=float)
    mat = 0.5 * (mat + mat.T)
    w, v = np.linalg.eigh(mat)
    if w.min() > floor:
        return mat
    fixed = (v * np.clip(w, floor, None)) @ v.T
    d = np.sqrt(np.diag(fixed))
    out = fixed / np.outer(d, d)
    np.fill_diagonal(out, 1.0)
    return out


@dataclass
class ScenarioSpec:
    """Design of one simulated dataset.

    ``correlation`` is the lag-0 cross-correlation of the true factors
    (identity for the uncorrelated scenarios).  Every factor follows a
    squared-exponential temporal correlation with lag-1 value ``lag1_corr``.
    """

    name: str = "CS"
    correlated: bool = True
    n: int = 17
    p: int = 100
    k: int = 4
    u1: int = 8
    u2: int = 2
    factor_sd: tuple = SMALL_SD
    correlation: list | None = None
    sparsity: float = 0.1
    loading_mean: float = 4.0
    loading_sd: float = 1.0
    mu_range: tuple = (4.0, 16.0)
    mu_sd: float = 0.5
    noise_sd: float = 0.5
    lag1_corr: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if min(self.n, self.p, self.k, self.u1) < 1 or self.u2 < 0:
            raise ValueError("n, p, k, u1 must be >= 1 and u2 >= 0")
        if not 0 < self.sparsity <= 1:
            raise ValueError("sparsity must lie in (0, 1]")
        if not 0 < self.lag1_corr < 1:
            raise ValueError("lag1_corr must lie in (0, 1)")
        self.factor_sd = tuple(float(s) for s in np.broadcast_to(self.factor_sd, (self.k,)))
        if min(self.factor_sd) <= 0:
            raise ValueError("factor standard deviations must be positive")
        if self.correlation is None:
            corr = default_correlation() if self.correlated else np.eye(self.k)
        else:
            corr = np.asarray(self.correlation, dtype=float)
        if corr.shape != (self.k, self.k):
            raise ValueError(f"correlation must be {self.k} x {self.k}")
        if not self.correlated and np.any(corr != np.eye(self.k)):
            raise ValueError("uncorrelated scenarios need an identity correlation")
        self.correlation = nearest_correlation(corr).tolist()

    @classmethod
    def preset(cls, name: str, seed: int = 0, **overrides) -> "ScenarioSpec":
        """One of ``CS``, ``CL``, ``US``, ``UL`` (correlated/uncorrelated, small/large)."""
        name = name.upper()
        if name not in SCENARIOS:
            raise ValueError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
        kw = dict(name=name, correlated=name[0] == "C",
                  factor_sd=SMALL_SD if name[1] == "S" else (1.0,) * 4, seed=seed)
        kw.update(overrides)
        return cls(**kw)

    @property
    def n_times(self) -> int:
        return self.u1 + self.u2

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_times, dtype=float)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["factor_sd"] = list(self.factor_sd)
        d["mu_range"] = list(self.mu_range)
        return d

    @classmethod
    def from_dict(cls, d) -> "ScenarioSpec":
        d = dict(d)
        d["factor_sd"] = tuple(d["factor_sd"])
        d["mu_range"] = tuple(d["mu_range"])
        return cls(**d)


@dataclass
class GroundTruth:
    """Generating quantities; ``y`` is ``(n, k, Q)`` over all simulated times."""

    y: np.ndarray
    loadings: np.ndarray
    mu: np.ndarray
    sigma_y: np.ndarray
    times: np.ndarray
    spec: ScenarioSpec = field(repr=False)

    @property
    def factor_sd(self) -> np.ndarray:
        return np.asarray(self.spec.factor_sd)

    @property
    def correlation(self) -> np.ndarray:
        return np.asarray(self.spec.correlation)

    def unit_scale_y(self) -> np.ndarray:
        """True scores divided by each factor's standard deviation."""
        return self.y / self.factor_sd[None, :, None]

    def unit_scale_loadings(self) -> np.ndarray:
        """Loadings absorbing the factor scale, so ``L' y' = L y``."""
        return self.loadings * self.factor_sd[None, :]


def time_correlation(times, lag1_corr) -> np.ndarray:
    """Squared-exponential correlation with the given value at lag 1."""
    inv_two_ell2 = -np.log(lag1_corr)
    d = np.subtract.outer(times, times)
    return np.exp(-inv_two_ell2 * d**2)


def true_sigma_y(spec: ScenarioSpec) -> np.ndarray:
    """Factor-major covariance ``(D C D) kron K_time`` of the true scores."""
    sd = np.asarray(spec.factor_sd)
    between = np.asarray(spec.correlation) * np.outer(sd, sd)
    return np.kron(between, time_correlation(spec.times, spec.lag1_corr))


def _draw_inclusion(spec: ScenarioSpec, rng) -> np.ndarray:
    for attempt in range(1, MAX_RETRIES + 1):
        z = rng.random((spec.p, spec.k)) < spec.sparsity
        if z.any(axis=0).all():
            return z
        log.info("simulated factor with no genes; redrawing (attempt %d)", attempt)
    raise RuntimeError(f"every one of {MAX_RETRIES} draws left a factor without genes")


def simulate(spec: ScenarioSpec) -> tuple[Dataset, GroundTruth]:
    """Draw one dataset over all ``u1 + u2`` times; reproducible from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    q = spec.n_times
    sigma = true_sigma_y(spec)
    chol = np.linalg.cholesky(sigma + 1e-12 * np.eye(sigma.shape[0]))
    y = (rng.standard_normal((spec.n, sigma.shape[0])) @ chol.T).reshape(spec.n, spec.k, q)

    z = _draw_inclusion(spec, rng)
    a = rng.normal(spec.loading_mean, spec.loading_sd, size=(spec.p, spec.k))
    loadings = np.where(z, a, 0.0)

    mu_g = np.linspace(*spec.mu_range, spec.p)
    mu = rng.normal(mu_g[None, :], spec.mu_sd, size=(spec.n, spec.p))
    signal = np.einsum("pk,nkt->npt", loadings, y)
    x = mu[:, :, None] + signal + spec.noise_sd * rng.standard_normal(signal.shape)

    data = Dataset.from_common_grid(list(x), spec.times)
    truth = GroundTruth(y, loadings, mu, sigma, spec.times.copy(), spec)
    return data, truth


def split_train_test(data: Dataset, u1: int, u2: int):
    """First ``u1`` observed times of each subject for training, last ``u2`` held out.

    Returns the training :class:`Dataset` and a list of ``(p, u2)`` arrays.
    """
    if u1 < 1 or u2 < 0:
        raise ValueError("need u1 >= 1 and u2 >= 0")
    if np.any(data.q_i != u1 + u2):
        raise ValueError("every subject must have exactly u1 + u2 observed times")
    if u2 == 0:
        return data, [np.empty((data.p, 0)) for _ in range(data.n)]
    keep = np.unique(np.concatenate([ix[:u1] for ix in data.time_index]))
    remap = np.full(data.q, -1)
    remap[keep] = np.arange(keep.size)
    train = Dataset(
        tuple(xi[:, :u1] for xi in data.x),
        tuple(remap[ix[:u1]] for ix in data.time_index),
        data.times[keep],
        data.gene_names,
        data.subject_ids,
    )
    test = [xi[:, u1:].copy() for xi in data.x]
    return train, test
