"""End-to-end fit: initialize, MCEM for the GP hyperparameters, final Gibbs chains."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .alignment import align_chains
from .data import Dataset
from .diagnostics import (
    LoadingSummary,
    align_to_truth,
    factor_recovery_mae,
    max_rhat_report,
    permute_correlation,
    prediction_metrics,
    rhat_array,
    summarize_loadings,
)
from .gibbs import Hyperparams, run_chain
from .initialize import InitResult, init_factors, init_theta
from .kcf import DgpParams, build_sigma_y, factor_correlation
from .mcem import McemConfig, McemResult, run_mcem
from .simulate import GroundTruth

__all__ = ["FitConfig", "FitResult", "fit_model", "evaluate", "StageError"]

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A hard failure, tagged with the pipeline stage it happened in."""

    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage


@dataclass
class FitConfig:
    """Model and sampler settings of one fit."""

    k: int = 4
    model: str = "dgp"
    n_chains: int = 5
    n_iter: int = 10_000
    burn_in: int = 3_000
    thin: int = 10
    sparsity: float = 0.1
    rotation: str | None = "varimax"
    seed: int = 0
    workers: int = 1
    hyper: dict = field(default_factory=dict)
    mcem: McemConfig = field(default_factory=McemConfig)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.model not in ("dgp", "igp"):
            raise ValueError("model must be 'dgp' or 'igp'")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if isinstance(self.mcem, dict):
            self.mcem = McemConfig.from_dict(self.mcem)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "FitConfig":
        return cls(**d)


@dataclass
class FitResult:
    config: FitConfig
    theta: DgpParams
    correlation: np.ndarray
    mcem: McemResult
    chains: list
    loadings: LoadingSummary
    diagnostics: dict
    init: InitResult = field(repr=False)
    new_times: np.ndarray = None

    def pooled(self, name) -> np.ndarray:
        """Draws of one field stacked over all chains."""
        return np.concatenate([getattr(c, name) for c in self.chains], axis=0)

    def chain_stack(self, name) -> np.ndarray:
        """``(m, R, ...)`` array of one field."""
        return np.stack([getattr(c, name) for c in self.chains])


def _chain_job(args):
    return run_chain(*args[:-2], sigma_y_ext=args[-2], new_index=args[-1])


def _run_chains(data, hyper, sigma, state, cfg, seeds, ext, new_index):
    jobs = [(data, hyper, sigma, state, cfg.n_iter, cfg.burn_in, cfg.thin, s, ext, new_index)
            for s in seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_chain_job, jobs))
    return [_chain_job(j) for j in jobs]


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (np.linalg.LinAlgError, RuntimeError, FloatingPointError) as exc:
        raise StageError(name, exc) from exc


def fit_model(data: Dataset, config: FitConfig | None = None, new_times=None) -> FitResult:
    """Fit the model to ``data`` and draw predictions at ``new_times``.

    All randomness derives from ``config.seed``: one child seed for MCEM
    and one per final chain, so results do not depend on ``workers``.
    """
    cfg = config or FitConfig()
    root = np.random.SeedSequence(cfg.seed)
    mcem_seed, *chain_seeds = root.spawn(1 + cfg.n_chains)
    independent = cfg.model == "igp"

    hyper = Hyperparams.default(data, cfg.sparsity, **cfg.hyper)
    init = _stage("initialize", init_factors, data, cfg.k, hyper, cfg.sparsity,
                  rotation=cfg.rotation)
    theta0 = _stage("initialize", init_theta, init.y0, data.times, independent,
                    cfg.mcem.mle).params
    mcem = _stage("mcem", run_mcem, data, hyper, init.state, theta0, cfg.mcem,
                  np.random.default_rng(mcem_seed))
    theta = mcem.theta

    sigma = build_sigma_y(theta, data.times, as_correlation=True)
    ext, new_index = None, None
    if new_times is not None and len(new_times):
        new_times = np.asarray(new_times, dtype=float)
        ext = build_sigma_y(theta, np.concatenate([data.times, new_times]), as_correlation=True)
        new_index = np.arange(data.q, data.q + new_times.size)
    chains = _stage("gibbs", _run_chains, data, hyper, sigma, mcem.state, cfg,
                    chain_seeds, ext, new_index)
    chains = align_chains(chains, reference=mcem.reference)

    a = np.stack([c.a for c in chains])
    z = np.stack([c.z for c in chains])
    summary = summarize_loadings(a, z)
    classes = {"loadings": summary.rhat[~summary.zeroed]}
    if len(chains) >= 2:
        if ext is not None:
            classes["predicted_expression"] = rhat_array(np.stack([c.x_new for c in chains]))[0]
        classes["mu"] = rhat_array(np.stack([c.mu for c in chains]))[0]
        classes["phi2"] = rhat_array(np.stack([c.phi2 for c in chains]))[0]
        classes["sigma2"] = rhat_array(np.stack([c.sigma2 for c in chains]))[0]
    diagnostics = max_rhat_report(classes)
    for name in diagnostics["above_cutoff"]:
        log.warning("max Rhat of %s is %.3f (> %.1f)", name,
                    diagnostics["max_rhat"][name], diagnostics["cutoff"])
    return FitResult(cfg, theta, factor_correlation(theta), mcem, chains, summary,
                     diagnostics, init, new_times)


def evaluate(fit: FitResult, truth: GroundTruth, test_x=None) -> dict:
    """Compare a fit with the generating truth.

    Estimated factors are first matched to the true ones by a signed
    permutation of the column-normalized loadings.  Returns the prediction
    metrics (when ``test_x`` and predictions exist), the factor-recovery
    error on the training times and the correlation error.
    """
    mean_load = np.mean([c.loadings.mean(axis=0) for c in fit.chains], axis=0)
    tr = align_to_truth(mean_load, truth.loadings)
    y = tr.rows(fit.pooled("y"))
    q = y.shape[-1]
    out = {
        "mae_y": factor_recovery_mae(y, truth.y[..., :q], rescale=truth.factor_sd),
        "correlation": permute_correlation(fit.correlation, tr).tolist(),
        "correlation_max_error": float(np.max(np.abs(
            permute_correlation(fit.correlation, tr) - truth.correlation))),
        "transform": {"perm": tr.perm.tolist(), "sign": tr.sign.tolist()},
    }
    if test_x is not None and fit.chains[0].x_new is not None:
        mae, mwi, pwi = prediction_metrics(fit.pooled("x_new"), np.stack(test_x))
        out.update(mae_x=mae, mwi_x=mwi, pwi_x=pwi)
    return out
