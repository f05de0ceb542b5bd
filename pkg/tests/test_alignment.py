import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsfa_dgp.alignment import (
    AlignmentWarning,
    SignedPermutation,
    align_chains,
    align_draw,
    align_within,
    apply_to_chain,
    apply_to_state,
    best_signed_permutation,
)
from bsfa_dgp.gibbs import ChainResult, ModelState


def random_transform(rng, k):
    return SignedPermutation(rng.permutation(k), rng.choice([-1.0, 1.0], k))


@st.composite
def transforms(draw, k=4):
    perm = draw(st.permutations(range(k)))
    sign = draw(st.lists(st.sampled_from([-1.0, 1.0]), min_size=k, max_size=k))
    return SignedPermutation(perm, sign)


@given(transforms(), transforms())
def test_group_laws(t, u):
    assert t.compose(t.inverse()).is_identity
    assert t.inverse().compose(t).is_identity
    m = np.arange(12.0).reshape(3, 4) + 1
    np.testing.assert_array_equal(t.compose(u).columns(m), t.columns(u.columns(m)))
    np.testing.assert_array_equal(t.columns(m), m @ t.matrix())


def test_invalid_transforms():
    with pytest.raises(ValueError):
        SignedPermutation([0, 0, 1], [1, 1, 1])
    with pytest.raises(ValueError):
        SignedPermutation([0, 1], [1, 0.5])


def test_reference_equal_to_draw_gives_identity():
    l = np.random.default_rng(0).normal(size=(20, 3))
    assert best_signed_permutation(l, l).is_identity


def test_swap_and_negation_is_recovered_and_products_kept():
    rng = np.random.default_rng(1)
    l = rng.normal(size=(20, 3))
    y = rng.normal(size=(5, 3, 4))
    ref = l[:, [1, 0, 2]] * np.array([-1.0, 1.0, 1.0])
    l2, y2, tr = align_draw(l, ref, y)
    assert tr == SignedPermutation([1, 0, 2], [-1, 1, 1])
    np.testing.assert_array_equal(l2, ref)
    np.testing.assert_allclose(l2 @ y2, l @ y, atol=1e-12)


def test_planted_recovery_rate():
    rng = np.random.default_rng(2)
    hits = 0
    for _ in range(100):
        l = rng.normal(size=(20, 3))
        tr = random_transform(rng, 3)
        noisy = tr.inverse().columns(l) + rng.normal(0, 0.01, l.shape)
        hits += best_signed_permutation(noisy, l) == tr
    assert hits >= 99


def test_assignment_matches_exhaustive_search():
    from itertools import permutations, product

    rng = np.random.default_rng(3)
    for _ in range(20):
        l, ref = rng.normal(size=(2, 10, 4))
        costs = {}
        for perm in permutations(range(4)):
            for sign in product([-1.0, 1.0], repeat=4):
                t = SignedPermutation(perm, sign)
                costs[t] = np.sum((t.columns(l) - ref) ** 2)
        best = min(costs.values())
        got = best_signed_permutation(l, ref)
        assert costs[got] == pytest.approx(best, rel=1e-12)


def test_idempotent():
    rng = np.random.default_rng(4)
    l, ref = rng.normal(size=(2, 15, 5))
    aligned, _, _ = align_draw(l, ref)
    assert best_signed_permutation(aligned, ref).is_identity


def test_large_k_needs_greedy_flag():
    l = np.random.default_rng(5).normal(size=(30, 9))
    with pytest.raises(ValueError, match="greedy"):
        best_signed_permutation(l, l)
    assert best_signed_permutation(l, l, greedy=True).is_identity


def chain_from(loadings, y, seed=0):
    r, p, k = loadings.shape
    rng = np.random.default_rng(seed)
    n = y.shape[1]
    return ChainResult(
        y=y, a=loadings.copy(), z=np.ones((r, p, k), dtype=np.int8),
        mu=rng.normal(size=(r, n, p)), pi=rng.random((r, k)), rho2=rng.random((r, k)) + 1,
        sigma2=np.ones((r, p)), phi2=np.ones((r, p)), iterations=np.arange(1, r + 1),
    )


def test_two_mode_bank_is_unified():
    rng = np.random.default_rng(6)
    base = rng.normal(size=(25, 3))
    draws = base + rng.normal(0, 0.05, (40, 25, 3))
    draws[::2] *= np.array([1.0, -1.0, -1.0])
    trs, rounds, history = align_within(draws, base)
    aligned = np.stack([t.columns(d) for t, d in zip(trs, draws)])
    dots = np.einsum("rpk,pk->rk", aligned, base)
    assert np.all(dots > 0)
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_single_draw_bank_unchanged():
    l = np.random.default_rng(7).normal(size=(1, 10, 3))
    trs, rounds, _ = align_within(l)
    assert trs[0].is_identity and rounds == 1


def test_products_invariant_on_every_aligned_draw():
    rng = np.random.default_rng(8)
    r, p, k, n, q = 30, 12, 3, 4, 5
    l = rng.normal(size=(r, p, k))
    y = rng.normal(size=(r, n, k, q))
    chain = chain_from(l, y)
    trs = [random_transform(rng, k) for _ in range(r)]
    out = apply_to_chain(chain, trs)
    before = np.einsum("rpk,rnkq->rnpq", chain.a * chain.z, chain.y)
    after = np.einsum("rpk,rnkq->rnpq", out.a * out.z, out.y)
    np.testing.assert_allclose(after, before, atol=1e-12)
    for i, t in enumerate(trs):
        np.testing.assert_array_equal(out.pi[i], chain.pi[i][t.perm])


def test_identical_chains_up_to_permutation_share_mean_loadings():
    rng = np.random.default_rng(9)
    l = rng.normal(size=(20, 15, 3))
    y = rng.normal(size=(20, 2, 3, 4))
    base = chain_from(l, y)
    chains = [base] + [apply_to_chain(base, random_transform(rng, 3)) for _ in range(4)]
    out = align_chains(chains)
    ref = out[0].loadings.mean(axis=0)
    for c in out[1:]:
        np.testing.assert_allclose(c.loadings.mean(axis=0), ref, atol=1e-12)


def test_state_transform_keeps_products():
    rng = np.random.default_rng(10)
    st_ = ModelState(rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 6)), rng.normal(size=(6, 4)),
                     (rng.random((6, 4)) < 0.5).astype(float), rng.random(4), rng.random(4),
                     np.ones(6), np.ones(6))
    t = random_transform(rng, 4)
    out = apply_to_state(st_, t)
    np.testing.assert_allclose(np.einsum("pk,nkq->npq", out.loadings, out.y),
                               np.einsum("pk,nkq->npq", st_.loadings, st_.y), atol=1e-12)


def test_non_settling_alignment_warns(monkeypatch):
    import bsfa_dgp.alignment as al

    calls = iter(range(10**6))

    def flip(l, ref, greedy=False):
        return SignedPermutation([0, 1], [1.0, 1.0 if next(calls) % 2 else -1.0])

    monkeypatch.setattr(al, "best_signed_permutation", flip)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        _, rounds, _ = al.align_within(np.ones((1, 3, 2)), max_rounds=5)
    assert rounds == 5
    assert any(issubclass(x.category, AlignmentWarning) for x in w)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_random_draws_keep_products(seed):
    rng = np.random.default_rng(seed)
    l = rng.normal(size=(8, 3))
    y = rng.normal(size=(2, 3, 4))
    ref = rng.normal(size=(8, 3))
    l2, y2, _ = align_draw(l, ref, y)
    np.testing.assert_allclose(l2 @ y2, l @ y, atol=1e-12)
