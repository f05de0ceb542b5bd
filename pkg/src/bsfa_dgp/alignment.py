"""Sign and label alignment of factor-model draws.

A signed permutation ``T = (perm, sign)`` maps loadings ``L`` to
``L[:, perm] * sign`` and factor scores ``Y`` (factors on axis -2) to
``Y[perm] * sign``, which leaves every product ``L @ Y_i`` unchanged.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .gibbs import ChainResult, ModelState

__all__ = [
    "SignedPermutation",
    "best_signed_permutation",
    "align_draw",
    "align_within",
    "align_across",
    "align_chain",
    "align_chains",
    "apply_to_chain",
    "apply_to_state",
    "AlignmentWarning",
    "MAX_EXACT_K",
]

log = logging.getLogger(__name__)

MAX_EXACT_K = 8


class AlignmentWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SignedPermutation:
    perm: np.ndarray
    sign: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=int).ravel()
        sign = np.asarray(self.sign, dtype=float).ravel()
        if sorted(perm.tolist()) != list(range(perm.size)):
            raise ValueError("perm must be a permutation of 0..k-1")
        if sign.shape != perm.shape or not np.all(np.abs(sign) == 1):
            raise ValueError("sign must be a +/-1 vector of the same length")
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "sign", sign)

    @classmethod
    def identity(cls, k: int) -> "SignedPermutation":
        return cls(np.arange(k), np.ones(k))

    @property
    def k(self) -> int:
        return self.perm.size

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.perm == np.arange(self.k)) and np.all(self.sign == 1))

    def inverse(self) -> "SignedPermutation":
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.k)
        return SignedPermutation(inv, self.sign[inv])

    def compose(self, inner: "SignedPermutation") -> "SignedPermutation":
        """Transformation equal to applying ``inner`` first, then ``self``."""
        return SignedPermutation(inner.perm[self.perm], inner.sign[self.perm] * self.sign)

    def matrix(self) -> np.ndarray:
        """``M`` with ``L @ M`` equal to the transformed loadings."""
        m = np.zeros((self.k, self.k))
        m[self.perm, np.arange(self.k)] = self.sign
        return m

    def columns(self, arr, signed=True):
        """Transform the last axis (factors as columns)."""
        arr = np.asarray(arr)
        out = arr[..., self.perm]
        return out * self.sign if signed else out

    def rows(self, arr, signed=True):
        """Transform axis -2 (factors as rows, e.g. ``(..., k, q)`` scores)."""
        arr = np.asarray(arr)
        out = arr[..., self.perm, :]
        return out * self.sign[:, None] if signed else out

    def __eq__(self, other):
        return (isinstance(other, SignedPermutation)
                and np.array_equal(self.perm, other.perm)
                and np.array_equal(self.sign, other.sign))

    def __hash__(self):
        return hash((tuple(self.perm), tuple(self.sign)))


def _greedy_assignment(score):
    k = score.shape[0]
    perm = np.full(k, -1)
    s = score.astype(float).copy()
    for _ in range(k):
        j, i = np.unravel_index(np.argmax(s), s.shape)
        perm[j] = i
        s[j, :] = -np.inf
        s[:, i] = -np.inf
    return perm


def best_signed_permutation(loadings, reference, greedy: bool = False) -> SignedPermutation:
    """Signed permutation minimizing ``||T(loadings) - reference||_F^2``.

    Because ``||s L_i - R_j||^2 = ||L_i||^2 + ||R_j||^2 - 2 s (L_i . R_j)``,
    the best sign for each pairing is the sign of the inner product and
    the pairing itself is a linear assignment maximizing the sum of
    ``|L_i . R_j|``.  This is exact; ``greedy`` trades exactness for a
    simpler pairing and is required above ``MAX_EXACT_K`` factors.
    """
    loadings = np.asarray(loadings, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if loadings.shape != reference.shape or loadings.ndim != 2:
        raise ValueError("loadings and reference must be matching (p, k) arrays")
    k = loadings.shape[1]
    if k > MAX_EXACT_K and not greedy:
        raise ValueError(
            f"exact alignment supports k <= {MAX_EXACT_K}; pass greedy=True for k={k}")
    dots = reference.T @ loadings       # dots[j, i] = R_j . L_i
    score = np.abs(dots)
    if greedy:
        perm = _greedy_assignment(score)
    else:
        perm = linear_sum_assignment(score, maximize=True)[1]
    best = score[np.arange(k), perm].sum()
    scale = max(1.0, float(np.abs(best)))
    if score.trace() >= best - 1e-12 * scale:
        perm = np.arange(k)  # prefer the identity on ties
    sign = np.sign(dots[np.arange(k), perm])
    sign[sign == 0] = 1.0
    return SignedPermutation(perm, sign)


def align_draw(loadings, reference, y=None, greedy: bool = False):
    """Align one draw to ``reference``.

    Returns ``(aligned_loadings, aligned_y, transform)``; ``y`` may hold any
    number of leading axes as long as factors sit on axis -2.
    """
    tr = best_signed_permutation(loadings, reference, greedy)
    return tr.columns(loadings), (None if y is None else tr.rows(y)), tr


def _objective(loadings, transforms, ref):
    return float(sum(np.sum((t.columns(l) - ref) ** 2) for l, t in zip(loadings, transforms)))


def align_within(loadings, reference=None, max_rounds: int = 100, greedy: bool = False):
    """Fixed-point alignment of a stack of loading draws ``(R, p, k)``.

    Draws are aligned to ``reference`` (default: the first draw), then the
    reference is replaced by the mean of the aligned draws and the process
    repeats until no transformation changes.  Returns
    ``(transforms, rounds, objective_history)``.
    """
    loadings = np.asarray(loadings, dtype=float)
    if loadings.ndim != 3 or loadings.shape[0] == 0:
        raise ValueError("need a non-empty (R, p, k) stack of loadings")
    ref = loadings[0] if reference is None else np.asarray(reference, dtype=float)
    transforms = [best_signed_permutation(l, ref, greedy) for l in loadings]
    history = []
    for rounds in range(1, max_rounds + 1):
        mean = np.mean([t.columns(l) for l, t in zip(loadings, transforms)], axis=0)
        history.append(_objective(loadings, transforms, mean))
        new = [best_signed_permutation(l, mean, greedy) for l in loadings]
        changed = sum(a != b for a, b in zip(new, transforms))
        transforms = new
        if changed == 0:
            return transforms, rounds, history
    warnings.warn(f"alignment did not settle after {max_rounds} rounds; "
                  f"{changed} draws still changing", AlignmentWarning, stacklevel=2)
    return transforms, max_rounds, history


def align_across(chain_means, greedy: bool = False):
    """Transformations taking each chain's mean loadings onto chain 0's."""
    ref = np.asarray(chain_means[0], dtype=float)
    return [best_signed_permutation(m, ref, greedy) for m in chain_means]


def apply_to_chain(result: ChainResult, transforms) -> ChainResult:
    """Apply one transformation per draw (or one for all) to a chain's draws."""
    if isinstance(transforms, SignedPermutation):
        transforms = [transforms] * result.n_draws
    if len(transforms) != result.n_draws:
        raise ValueError("need one transformation per draw")
    perm = np.stack([t.perm for t in transforms])
    sign = np.stack([t.sign for t in transforms])
    r = np.arange(result.n_draws)[:, None]
    a = result.a[r, :, perm].transpose(0, 2, 1) * sign[:, None, :]
    z = result.z[r, :, perm].transpose(0, 2, 1)
    y = result.y[r, :, perm].transpose(0, 2, 1, 3) * sign[:, None, :, None]
    return replace(
        result, a=a, z=z, y=y,
        pi=np.take_along_axis(result.pi, perm, axis=1),
        rho2=np.take_along_axis(result.rho2, perm, axis=1),
    )


def apply_to_state(state: ModelState, tr: SignedPermutation) -> ModelState:
    """Copy of ``state`` expressed in the transformed factor frame."""
    out = state.copy()
    out.a = tr.columns(state.a)
    out.z = tr.columns(state.z, signed=False)
    out.y = tr.rows(state.y)
    out.pi = state.pi[tr.perm]
    out.rho2 = state.rho2[tr.perm]
    return out


def align_chain(result: ChainResult, reference=None, max_rounds: int = 100,
                greedy: bool = False) -> ChainResult:
    """Within-chain alignment; with ``reference`` the chain ends in its frame."""
    transforms, _, _ = align_within(result.loadings, reference, max_rounds, greedy)
    out = apply_to_chain(result, transforms)
    if reference is not None:
        glob = best_signed_permutation(out.loadings.mean(axis=0), reference, greedy)
        if not glob.is_identity:
            out = apply_to_chain(out, glob)
    return out


def align_chains(results, reference=None, max_rounds: int = 100, greedy: bool = False):
    """Align each chain internally, then every chain onto the first one."""
    within = [align_chain(r, reference, max_rounds, greedy) for r in results]
    across = align_across([r.loadings.mean(axis=0) for r in within], greedy)
    return [r if t.is_identity else apply_to_chain(r, t) for r, t in zip(within, across)]
