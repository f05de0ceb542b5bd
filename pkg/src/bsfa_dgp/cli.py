"""Command line: ``simulate``, ``fit``, ``predict`` and ``summarize``.

A ``--config`` JSON file overrides the corresponding flags.  Every
command writes a ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .data import Dataset
from .diagnostics import (
    align_to_truth,
    factor_recovery_mae,
    prediction_metrics,
    summarize_loadings,
)
from .mcem import McemConfig
from .pipeline import FitConfig, StageError, fit_model
from .simulate import SCENARIOS, ScenarioSpec, simulate, split_train_test

log = logging.getLogger("bsfa_dgp")

METRIC_COLUMNS = ("model", "mae_x", "mwi_x", "pwi_x", "mae_y")


def _load_config(path):
    return io.read_json(path) if path else {}


def cmd_simulate(args) -> int:
    overrides = _load_config(args.config)
    scenario = overrides.pop("scenario", args.scenario)
    seed = overrides.pop("seed", args.seed)
    spec = ScenarioSpec.preset(scenario, seed=seed, **overrides)
    data, truth = simulate(spec)
    train, test = split_train_test(data, spec.u1, spec.u2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_dataset(train, out / "train")
    if spec.u2:
        held = Dataset(tuple(test), tuple(np.arange(spec.u2) for _ in test),
                       spec.times[spec.u1:], data.gene_names, data.subject_ids)
        io.write_dataset(held, out / "heldout")
    io.write_truth(truth, out / "truth.json")
    io.write_json(spec.as_dict(), out / "spec.json")
    io.write_manifest(out / "manifest.json", "simulate", spec.as_dict(), spec.seed,
                      ["train", "heldout", "truth.json", "spec.json"])
    print(f"wrote scenario {spec.name} (seed {spec.seed}) to {out}")
    return 0


def _fit_config(args) -> FitConfig:
    cfg = dict(k=args.k, model=args.model, n_chains=args.chains, n_iter=args.iterations,
               burn_in=args.burn_in, thin=args.thin, seed=args.seed, workers=args.workers)
    mcem = {}
    if args.mcem_iterations is not None:
        mcem["max_iterations"] = args.mcem_iterations
    overrides = _load_config(args.config)
    mcem.update(overrides.pop("mcem", {}))
    cfg.update(overrides)
    cfg["mcem"] = McemConfig.from_dict(mcem)
    return FitConfig(**cfg)


def _new_times(args):
    if args.new_times:
        return np.array([float(t) for t in args.new_times.split(",")])
    held = Path(args.data).parent / "heldout"
    if held.exists():
        return io.read_dataset(held).times
    return None


def cmd_fit(args) -> int:
    cfg = _fit_config(args)
    data = io.read_dataset(args.data)
    new_times = _new_times(args)
    try:
        fit = fit_model(data, cfg, new_times)
    except (StageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_theta(fit.theta, out / "theta.json")
    io.write_matrix_csv(fit.correlation, out / "correlation.csv")
    fit.mcem.trace.to_jsonl(out / "mcem_trace.jsonl")
    io.write_chains(fit.chains, out / "draws.npz")
    _write_loadings(fit.loadings, data.gene_names, out / "loadings.csv")
    io.write_json(fit.diagnostics, out / "diagnostics.json")
    if new_times is not None:
        io.write_json({"times": new_times.tolist(), "genes": list(data.gene_names),
                       "subjects": list(data.subject_ids)}, out / "prediction.json")
    io.write_manifest(out / "manifest.json", "fit", cfg.as_dict(), cfg.seed,
                      [p.name for p in out.iterdir() if p.name != "manifest.json"])
    for name in fit.diagnostics["above_cutoff"]:
        print(f"warning: max Rhat for {name} exceeds {fit.diagnostics['cutoff']}")
    print(f"fit written to {out}")
    return 0


def _write_loadings(summary, gene_names, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gene", "factor", "inclusion", "value", "lower", "upper",
                    "significant", "rhat"])
        for row in summary.rows(list(gene_names)):
            w.writerow(row)


def _write_predictions(x_new, subject_ids, gene_names, times, path):
    lo, med, hi = np.quantile(x_new, (0.025, 0.5, 0.975), axis=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "gene", "time", "median", "lower", "upper"])
        for i, sid in enumerate(subject_ids):
            for g, gene in enumerate(gene_names):
                for j, t in enumerate(times):
                    w.writerow([sid, gene, io.FLOAT_FMT % t, io.FLOAT_FMT % med[i, g, j],
                                io.FLOAT_FMT % lo[i, g, j], io.FLOAT_FMT % hi[i, g, j]])


def _metrics(fit_dir: Path, chains, heldout, truth_path):
    row = {"model": io.read_json(fit_dir / "manifest.json")["config"]["model"]}
    if heldout is not None and chains[0].x_new is not None:
        x_new = np.concatenate([c.x_new for c in chains])
        row.update(zip(("mae_x", "mwi_x", "pwi_x"),
                       prediction_metrics(x_new, np.stack(heldout.x))))
    if truth_path:
        truth = io.read_truth(truth_path)
        if truth.loadings.shape[1] != chains[0].a.shape[-1]:
            print("notice: fitted and true numbers of factors differ; mae_y skipped")
            return row
        mean_load = np.mean([(c.a * c.z).mean(axis=0) for c in chains], axis=0)
        tr = align_to_truth(mean_load, truth.loadings)
        y = tr.rows(np.concatenate([c.y for c in chains]))
        row["mae_y"] = factor_recovery_mae(y, truth.y[..., :y.shape[-1]],
                                           rescale=truth.factor_sd)
    return row


def _write_metrics(row, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        w.writerow([row.get(c, "") if c == "model" or c not in row
                    else io.FLOAT_FMT % row[c] for c in METRIC_COLUMNS])


def _common_eval(args):
    fit_dir = Path(args.fit)
    chains = io.read_chains(fit_dir / "draws.npz")
    heldout = io.read_dataset(args.heldout) if args.heldout else None
    if heldout is None and not args.truth:
        print("notice: no held-out data or truth file given; metrics skipped")
        return fit_dir, chains, heldout, None
    return fit_dir, chains, heldout, _metrics(fit_dir, chains, heldout, args.truth)


def cmd_predict(args) -> int:
    fit_dir, chains, heldout, row = _common_eval(args)
    out = Path(args.out or fit_dir)
    out.mkdir(parents=True, exist_ok=True)
    if chains[0].x_new is None:
        print("error: the fit has no prediction draws (fit with --new-times)", file=sys.stderr)
        return 1
    x_new = np.concatenate([c.x_new for c in chains])
    info = io.read_json(fit_dir / "prediction.json")
    _write_predictions(x_new, info["subjects"], info["genes"], info["times"],
                       out / "predictions.csv")
    outputs = ["predictions.csv"]
    if row is not None:
        _write_metrics(row, out / "metrics.csv")
        outputs.append("metrics.csv")
    io.write_manifest(out / "manifest_predict.json", "predict", vars_config(args), 0, outputs)
    print(f"predictions written to {out}")
    return 0


def cmd_summarize(args) -> int:
    fit_dir, chains, heldout, row = _common_eval(args)
    out = Path(args.out or fit_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize_loadings(np.stack([c.a for c in chains]), np.stack([c.z for c in chains]))
    print("significant loadings per factor:", summary.n_significant.tolist())
    outputs = []
    if row is not None:
        _write_metrics(row, out / "metrics.csv")
        outputs.append("metrics.csv")
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in row.items()))
    io.write_manifest(out / "manifest_summarize.json", "summarize", vars_config(args), 0, outputs)
    return 0


def vars_config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsfa-dgp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scenario")
    p.add_argument("--scenario", choices=SCENARIOS, default="CS")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="MCEM then final Gibbs chains")
    p.add_argument("--data", required=True, help="dataset directory with index.json")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--model", choices=("dgp", "igp"), default="dgp")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chains", type=int, default=5)
    p.add_argument("--iterations", type=int, default=10_000)
    p.add_argument("--burn-in", type=int, default=3_000)
    p.add_argument("--thin", type=int, default=10)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--mcem-iterations", type=int)
    p.add_argument("--new-times", help="comma-separated prediction times "
                   "(default: times of a sibling 'heldout' directory)")
    p.add_argument("--config")
    p.set_defaults(func=cmd_fit)

    for name, func, text in (("predict", cmd_predict, "held-out predictions and metrics"),
                             ("summarize", cmd_summarize, "loading summary and metric table")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--fit", required=True, help="output directory of 'fit'")
        p.add_argument("--heldout", help="dataset directory with the held-out times")
        p.add_argument("--truth", help="truth.json written by 'simulate'")
        p.add_argument("--out")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
