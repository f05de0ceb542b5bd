"""Longitudinal expression data on subject-specific time grids."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = ["Dataset", "Layout"]


@dataclass(frozen=True)
class Layout:
    """Flattened column view of a dataset.

    All observed columns are concatenated subject-major into ``x`` of shape
    ``(p, N)``.  ``patterns`` groups subjects that share the same set of
    observed pooled-grid times, so per-pattern linear algebra is done once.
    """

    x: np.ndarray
    col_subject: np.ndarray
    col_time: np.ndarray
    indicator: np.ndarray
    q_obs: np.ndarray
    patterns: tuple

    @property
    def n_cols(self) -> int:
        return self.col_subject.size


@dataclass(frozen=True)
class Pattern:
    subjects: np.ndarray
    times: np.ndarray
    cols: np.ndarray  # (n_s, q_s) column indices into Layout.x


@dataclass(frozen=True)
class Dataset:
    """Observed matrices ``X_i`` (genes x observed times) per subject.

    Parameters
    ----------
    x : sequence of ndarray
        One ``(p, q_i)`` matrix per subject.
    time_index : sequence of int arrays
        Positions of each subject's observed times in ``times``.
    times : ndarray
        Pooled grid: sorted union of all observed times.
    """

    x: tuple
    time_index: tuple
    times: np.ndarray
    gene_names: tuple = ()
    subject_ids: tuple = ()

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        if times.size == 0 or np.any(np.diff(times) <= 0):
            raise ValueError("pooled grid must be non-empty and strictly increasing")
        xs = tuple(np.asarray(xi, dtype=float) for xi in self.x)
        idx = tuple(np.asarray(ix, dtype=int).ravel() for ix in self.time_index)
        if len(xs) == 0 or len(xs) != len(idx):
            raise ValueError("need one time index per subject and at least one subject")
        p = xs[0].shape[0]
        seen = np.zeros(times.size, dtype=bool)
        for xi, ix in zip(xs, idx):
            if xi.ndim != 2 or xi.shape[0] != p:
                raise ValueError("every X_i must be 2-d with the same number of genes")
            if xi.shape[1] != ix.size or ix.size < 1:
                raise ValueError("X_i columns must match its time index (q_i >= 1)")
            if ix.min() < 0 or ix.max() >= times.size or np.any(np.diff(ix) <= 0):
                raise ValueError("time index must be increasing and inside the pooled grid")
            seen[ix] = True
        if not seen.all():
            raise ValueError("pooled grid contains times no subject observed")
        object.__setattr__(self, "x", xs)
        object.__setattr__(self, "time_index", idx)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "gene_names", tuple(self.gene_names) or
                           tuple(f"g{g}" for g in range(p)))
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids) or
                           tuple(f"s{i}" for i in range(len(xs))))

    @classmethod
    def from_common_grid(cls, x, times, **kw):
        """All subjects observed at every time of ``times``."""
        x = [np.asarray(xi, dtype=float) for xi in x]
        q = len(times)
        return cls(tuple(x), tuple(np.arange(q) for _ in x), times, **kw)

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def p(self) -> int:
        return self.x[0].shape[0]

    @property
    def q(self) -> int:
        return self.times.size

    @property
    def q_i(self) -> np.ndarray:
        return np.array([ix.size for ix in self.time_index])

    @cached_property
    def gene_means(self) -> np.ndarray:
        """Grand mean of each gene over every subject and time."""
        return self.layout.x.mean(axis=1)

    @cached_property
    def layout(self) -> Layout:
        x = np.concatenate(self.x, axis=1)
        col_subject = np.concatenate(
            [np.full(ix.size, i) for i, ix in enumerate(self.time_index)])
        col_time = np.concatenate(self.time_index)
        indicator = np.zeros((col_subject.size, self.n))
        indicator[np.arange(col_subject.size), col_subject] = 1.0
        offsets = np.concatenate([[0], np.cumsum(self.q_i)])
        groups = {}
        for i, ix in enumerate(self.time_index):
            groups.setdefault(tuple(ix.tolist()), []).append(i)
        patterns = []
        for key, subs in groups.items():
            subs = np.array(subs)
            cols = np.stack([np.arange(offsets[i], offsets[i + 1]) for i in subs])
            patterns.append(Pattern(subs, np.array(key, dtype=int), cols))
        return Layout(x, col_subject, col_time, indicator, self.q_i, tuple(patterns))

    def with_x(self, x) -> "Dataset":
        return Dataset(tuple(x), self.time_index, self.times, self.gene_names,
                       self.subject_ids)
