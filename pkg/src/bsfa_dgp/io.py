"""File formats for datasets, ground truth, draws and fit outputs.

Dataset layout (one directory)::

    index.json            pooled times, gene names, one entry per subject
    subject_<id>.csv      header ``gene,<t1>,<t2>,...``; one row per gene

Floats are written with 17 significant digits so every file round-trips
exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from pathlib import Path

import numpy as np
import scipy

from .data import Dataset
from .gibbs import ChainResult
from .kcf import DgpParams
from .simulate import GroundTruth, ScenarioSpec

__all__ = [
    "write_dataset",
    "read_dataset",
    "write_truth",
    "read_truth",
    "write_chains",
    "read_chains",
    "write_json",
    "read_json",
    "write_matrix_csv",
    "read_matrix_csv",
    "write_theta",
    "read_theta",
    "config_hash",
    "write_manifest",
]

FLOAT_FMT = "%.17g"


def _fmt(x) -> str:
    return FLOAT_FMT % x


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_dataset(data: Dataset, directory):
    """Write one CSV per subject plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    subjects = []
    for sid, xi, ix in zip(data.subject_ids, data.x, data.time_index):
        fname = f"subject_{sid}.csv"
        with open(directory / fname, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gene"] + [_fmt(t) for t in data.times[ix]])
            for name, row in zip(data.gene_names, xi):
                w.writerow([name] + [_fmt(v) for v in row])
        subjects.append({"id": sid, "file": fname, "time_index": ix.tolist()})
    write_json({"times": data.times.tolist(), "genes": list(data.gene_names),
                "subjects": subjects}, directory / "index.json")


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    index = read_json(directory / "index.json")
    times = np.array(index["times"], dtype=float)
    xs, idx, ids = [], [], []
    for entry in index["subjects"]:
        with open(directory / entry["file"], newline="") as fh:
            rows = list(csv.reader(fh))
        header_times = np.array([float(t) for t in rows[0][1:]])
        ix = np.array(entry["time_index"], dtype=int)
        if not np.array_equal(header_times, times[ix]):
            raise ValueError(f"{entry['file']}: header times disagree with index.json")
        genes = [r[0] for r in rows[1:]]
        if genes != index["genes"]:
            raise ValueError(f"{entry['file']}: gene rows disagree with index.json")
        xs.append(np.array([[float(v) for v in r[1:]] for r in rows[1:]]))
        idx.append(ix)
        ids.append(entry["id"])
    return Dataset(tuple(xs), tuple(idx), times, tuple(index["genes"]), tuple(ids))


def write_truth(truth: GroundTruth, path):
    write_json({
        "y": truth.y.tolist(),
        "loadings": truth.loadings.tolist(),
        "mu": truth.mu.tolist(),
        "sigma_y": truth.sigma_y.tolist(),
        "times": truth.times.tolist(),
        "spec": truth.spec.as_dict(),
    }, path)


def read_truth(path) -> GroundTruth:
    d = read_json(path)
    return GroundTruth(
        np.array(d["y"]), np.array(d["loadings"]), np.array(d["mu"]),
        np.array(d["sigma_y"]), np.array(d["times"]), ScenarioSpec.from_dict(d["spec"]),
    )


_CHAIN_FIELDS = ("y", "a", "z", "mu", "pi", "rho2", "sigma2", "phi2", "iterations", "x_new")


def write_chains(chains, path):
    """Stack every field over chains into one ``.npz`` (arrays ``(m, R, ...)``)."""
    arrays = {}
    for f in _CHAIN_FIELDS:
        vals = [getattr(c, f) for c in chains]
        if any(v is None for v in vals):
            continue
        arrays[f] = np.stack(vals)
    np.savez(path, **arrays)


def read_chains(path) -> list:
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    m = arrays["y"].shape[0]
    return [ChainResult(**{f: arrays[f][c] for f in arrays}) for c in range(m)]


def write_matrix_csv(mat, path, labels=None):
    """Square matrix with a header row and a label column."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    labels = list(labels or [str(i + 1) for i in range(mat.shape[1])])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + labels)
        for lab, row in zip(labels, mat):
            w.writerow([lab] + [_fmt(v) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def write_theta(theta: DgpParams, path):
    write_json(theta.as_dict(), path)


def read_theta(path) -> DgpParams:
    return DgpParams.from_dict(read_json(path))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(path, command: str, config: dict, seed: int, outputs=()):
    from . import __version__

    write_json({
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "outputs": sorted(outputs),
        "versions": {
            "bsfa_dgp": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }, path)
