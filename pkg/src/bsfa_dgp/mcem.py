"""Monte Carlo EM for the GP hyperparameters with ascent-based sample sizes.

Each iteration runs the Gibbs sampler under the current hyperparameters
(correlation form), keeps a post-processed bank of aligned factor-score
draws, maximizes the bank's likelihood, and accepts the new estimate only
if a one-sided lower confidence bound on the gain in the Monte Carlo
Q-function is positive.  A rejection extends the same chain by ``R // m``
sweeps and counts towards the stopping budget ``W``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .alignment import align_within, apply_to_state, best_signed_permutation
from .data import Dataset
from .gibbs import GibbsError, GibbsSampler, Hyperparams, ModelState
from .initialize import shared_sign_guess
from .kcf import DgpParams, build_sigma_y, factor_correlation
from .mle import MleOptions, MleReport, SampleBank, fit_mle, per_draw_loglik

__all__ = [
    "McemConfig",
    "McemRecord",
    "McemTrace",
    "McemResult",
    "delta_q",
    "batch_means_var",
    "lower_bound",
    "retained_sweeps",
    "m_step",
    "fresh_start",
    "run_mcem",
]

log = logging.getLogger(__name__)


@dataclass
class McemConfig:
    """Settings of the MCEM loop.

    ``r0`` Gibbs sweeps per E-step to start; a rejected step adds
    ``R // m`` sweeps; the loop stops after more than ``max_increases``
    rejections or ``max_iterations`` iterations.  Each E-step drops the
    first ``burn_frac`` of its sweeps and thins so that at most
    ``max_bank`` draws reach the M-step.
    """

    r0: int = 200
    m: int = 2
    max_increases: int = 5
    alpha: float = 0.25
    burn_frac: float = 0.2
    max_bank: int = 500
    n_batches: int = 10
    max_iterations: int = 100
    max_total_sweeps: int = 500_000
    force_zero_variance: bool = False
    mle: MleOptions = field(default_factory=MleOptions)

    def __post_init__(self):
        if self.r0 < 10:
            raise ValueError("r0 must be >= 10")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.max_increases < 0:
            raise ValueError("max_increases must be >= 0")
        if not 0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 0.5)")
        if not 0 <= self.burn_frac < 1:
            raise ValueError("burn_frac must lie in [0, 1)")
        if self.n_batches < 2 or self.max_bank < 2:
            raise ValueError("n_batches and max_bank must be >= 2")

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "McemConfig":
        d = dict(d)
        if "mle" in d and isinstance(d["mle"], dict):
            d["mle"] = MleOptions(**d["mle"])
        return cls(**d)


@dataclass
class McemRecord:
    iteration: int
    sweeps: int
    bank_size: int
    delta_q: float
    zeta: float
    lower_bound: float
    accepted: bool
    increases: int
    mle_converged: bool
    correlation: list
    theta: dict


@dataclass
class McemTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, rec: McemRecord):
        self.records.append(rec)

    @property
    def accepted(self) -> list:
        return [r for r in self.records if r.accepted]

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(asdict(rec)) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "McemTrace":
        with open(path) as fh:
            return cls([McemRecord(**json.loads(line)) for line in fh if line.strip()])


@dataclass
class McemResult:
    theta: DgpParams
    trace: McemTrace
    state: ModelState
    reference: np.ndarray
    initial_theta: DgpParams
    total_sweeps: int

    @property
    def correlation(self) -> np.ndarray:
        return factor_correlation(self.theta)


def delta_q(bank: SampleBank, theta_new: DgpParams, theta_old: DgpParams):
    """Mean and per-draw values of ``log f(Y^r | new) - log f(Y^r | old)``."""
    same = (theta_new.independent == theta_old.independent
            and np.array_equal(theta_new.to_vector(), theta_old.to_vector()))
    if same:
        g = np.zeros(bank.n_draws)
    else:
        g = per_draw_loglik(theta_new, bank) - per_draw_loglik(theta_old, bank)
    return float(np.mean(g)), g


def batch_means_var(g, n_batches: int) -> float:
    """Batch-means estimate of the asymptotic variance of the mean of ``g``.

    The series is truncated to ``n_batches * floor(len / n_batches)``
    values; with batch length ``B`` the estimate is
    ``B / (n_batches - 1) * sum((batch_mean - grand_mean)^2)``.
    """
    g = np.asarray(g, dtype=float).ravel()
    if n_batches < 2:
        raise ValueError("need at least 2 batches")
    size = g.size // n_batches
    if size < 1:
        raise ValueError(f"{g.size} values cannot fill {n_batches} batches")
    means = g[:size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(size / (n_batches - 1) * np.sum((means - means.mean()) ** 2))


def lower_bound(dq: float, zeta: float, r_remain: int, alpha: float) -> float:
    """``dq - sqrt(zeta / r_remain) * z_{1-alpha}``."""
    if zeta < 0 or r_remain < 1:
        raise ValueError("need zeta >= 0 and r_remain >= 1")
    return float(dq - np.sqrt(zeta / r_remain) * norm.ppf(1.0 - alpha))


def retained_sweeps(n_sweeps: int, burn_frac: float, max_bank: int) -> np.ndarray:
    """Indices kept after dropping the burn-in and thinning to ``max_bank`` draws.

    The last sweep is always kept and the spacing is uniform.
    """
    burn = int(burn_frac * n_sweeps)
    avail = n_sweeps - burn
    if avail < 1:
        raise ValueError("burn-in leaves no sweeps")
    thin = -(-avail // max_bank)
    return np.arange(n_sweeps - 1, burn - 1, -thin)[::-1]


class _EStep:
    """Sweeps of one E-step under fixed hyperparameters, extendable on rejection."""

    def __init__(self, data, hyper, theta, state, rng):
        sigma = build_sigma_y(theta, data.times, as_correlation=True)
        self.sampler = GibbsSampler(data, hyper, sigma, state, rng)
        self.y = []
        self.loadings = []

    def extend(self, n):
        for _ in range(n):
            st = self.sampler.sweep()
            self.y.append(st.y.copy())
            self.loadings.append(st.loadings)

    @property
    def n_sweeps(self):
        return len(self.y)


def fresh_start(bank: SampleBank, like: DgpParams) -> DgpParams:
    """Default hyperparameters with shared signs read off the bank."""
    times = bank.times
    spacing = float(np.median(np.diff(times))) if times.size > 1 else 1.0
    sign = None if like.independent else shared_sign_guess(bank.y)
    return DgpParams.default(like.k, spacing, like.independent, sign)


def m_step(bank: SampleBank, theta_old: DgpParams, opts: MleOptions) -> MleReport:
    """Best of a warm start at ``theta_old`` and a fresh default start.

    The fresh start guards against the warm start sitting in a flat region
    (e.g. a very short shared length scale) that it cannot leave.  The
    result never has a lower likelihood than ``theta_old``.
    """
    warm = fit_mle(bank, theta_old, opts)
    fresh = fit_mle(bank, fresh_start(bank, theta_old), opts)
    if fresh.objective > warm.objective:
        return replace(fresh, initial_objective=warm.initial_objective)
    return warm


def _n_batches(size, wanted):
    return max(2, min(wanted, size // 2))


def run_mcem(data: Dataset, hyper: Hyperparams, init_state: ModelState,
             init_theta: DgpParams, config: McemConfig | None = None,
             seed=0, reference=None) -> McemResult:
    """Estimate the hyperparameters by MCEM, starting from ``init_theta``.

    ``reference`` is the loading matrix the banks are aligned to at the
    first iteration (default: the initial loadings); afterwards the mean
    aligned loadings of the last accepted bank take its place.  Returns the
    last accepted estimate together with the full trace.
    """
    cfg = config or McemConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta = init_theta
    state = init_state.copy()
    ref = init_state.loadings if reference is None else np.asarray(reference, dtype=float)
    trace = McemTrace()
    r = cfg.r0
    increases = 0
    total = 0
    estep = None

    for it in range(1, cfg.max_iterations + 1):
        if estep is None:
            estep = _EStep(data, hyper, theta, state, rng)
            need = r
        else:
            need = r - estep.n_sweeps
        try:
            estep.extend(need)
        except GibbsError as exc:
            raise GibbsError(f"MCEM iteration {it}: {exc}", exc.iteration) from exc
        total += need

        keep = retained_sweeps(estep.n_sweeps, cfg.burn_frac, cfg.max_bank)
        loads = np.stack([estep.loadings[i] for i in keep])
        transforms, _, _ = align_within(loads, ref)
        mean_load = np.mean([t.columns(l) for l, t in zip(loads, transforms)], axis=0)
        glob = best_signed_permutation(mean_load, ref)
        transforms = [glob.compose(t) for t in transforms]
        ys = np.stack([t.rows(estep.y[i]) for i, t in zip(keep, transforms)])
        bank = SampleBank(ys, data.times, iteration=it)

        report = m_step(bank, theta, cfg.mle)
        if not report.converged:
            log.info("iteration %d: MLE not converged (%s)", it, report.message)
        dq, g = delta_q(bank, report.params, theta)
        zeta = 0.0 if cfg.force_zero_variance else batch_means_var(
            g, _n_batches(g.size, cfg.n_batches))
        lb = lower_bound(dq, zeta, g.size, cfg.alpha)
        accepted = lb > 0
        trace.append(McemRecord(
            iteration=it, sweeps=estep.n_sweeps, bank_size=int(g.size), delta_q=dq,
            zeta=zeta, lower_bound=lb, accepted=bool(accepted), increases=increases,
            mle_converged=report.converged,
            correlation=factor_correlation(report.params).tolist(),
            theta=report.params.as_dict(),
        ))
        log.info("iteration %d: R=%d dQ=%.4g LB=%.4g %s", it, estep.n_sweeps, dq, lb,
                 "accepted" if accepted else "rejected")

        state = estep.sampler.state
        if accepted:
            theta = report.params
            ref = glob.columns(mean_load)
            state = apply_to_state(state, best_signed_permutation(state.loadings, ref))
            estep = None
        else:
            increases += 1
            if increases > cfg.max_increases:
                break
            r = estep.n_sweeps + max(1, estep.n_sweeps // cfg.m)
        if total >= cfg.max_total_sweeps:
            log.warning("MCEM stopped at the sweep cap (%d)", cfg.max_total_sweeps)
            break

    return McemResult(theta, trace, state.copy(), np.asarray(ref), init_theta, total)
