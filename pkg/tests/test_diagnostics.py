import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import empirical_quantile, gelman_rubin

from bsfa_dgp.alignment import SignedPermutation
from bsfa_dgp.diagnostics import (
    DegenerateChainWarning,
    align_to_truth,
    factor_recovery_mae,
    max_rhat_report,
    permute_correlation,
    prediction_metrics,
    rhat,
    rhat_array,
    summarize_loadings,
)


def test_rhat_identical_chains():
    assert rhat([[1, 2, 3, 4], [1, 2, 3, 4]]) == pytest.approx(np.sqrt(0.75), abs=1e-12)


def test_rhat_degenerate_chains_warn():
    with pytest.warns(DegenerateChainWarning):
        assert rhat([[0, 0, 0, 0], [10, 10, 10, 10]]) == 1.0


def test_rhat_long_stationary_chains():
    chains = np.random.default_rng(0).standard_normal((2, 10_000))
    assert 0.99 <= rhat(chains) <= 1.05


def test_rhat_detects_separated_chains():
    rng = np.random.default_rng(1)
    chains = rng.standard_normal((3, 500)) + np.array([[0.0], [3.0], [-3.0]])
    assert rhat(chains) > 1.2


def test_rhat_matches_oracle_and_vectorizes():
    rng = np.random.default_rng(2)
    chains = rng.normal(size=(4, 50, 3, 2)) + rng.normal(size=(4, 1, 3, 2))
    vals, flags = rhat_array(chains)
    assert not flags.any()
    for i in range(3):
        for j in range(2):
            assert vals[i, j] == pytest.approx(gelman_rubin(chains[:, :, i, j]), rel=1e-12)


def test_rhat_split_option_and_validation():
    trend = np.tile(np.linspace(0, 10, 200), (2, 1))
    trend += np.random.default_rng(3).normal(0, 0.1, trend.shape)
    assert rhat(trend, split=True) > rhat(trend)
    with pytest.raises(ValueError):
        rhat([[1, 2, 3, 4]])
    with pytest.raises(ValueError):
        rhat([[1, 2, 3], [1, 2, 3]])


def test_loadings_all_excluded_are_zero():
    a = np.random.default_rng(4).normal(size=(2, 50, 1, 1))
    z = np.zeros_like(a)
    s = summarize_loadings(a, z)
    assert s.value[0, 0] == 0.0 and not s.significant[0, 0] and s.zeroed[0, 0]
    assert np.isnan(s.rhat[0, 0])


def test_loadings_constant_included():
    a = np.full((2, 50, 1, 1), 2.5)
    s = summarize_loadings(a, np.ones_like(a))
    assert (s.value[0, 0], s.lower[0, 0], s.upper[0, 0]) == (2.5, 2.5, 2.5)
    assert s.significant[0, 0]


def test_loading_kept_unless_every_chain_mostly_excludes_it():
    rng = np.random.default_rng(5)
    a = rng.normal(3, 0.1, (2, 100, 1, 1))
    z = np.zeros_like(a)
    z[0, :60] = 1
    z[1, :40] = 1
    s = summarize_loadings(a, z)
    assert not s.zeroed[0, 0] and s.value[0, 0] != 0
    assert s.inclusion[0, 0] == pytest.approx(0.5)
    z[0, 40:] = 0
    assert summarize_loadings(a, z).zeroed[0, 0]


def test_summary_frame_independent():
    rng = np.random.default_rng(6)
    a = rng.normal(1, 1, (3, 40, 6, 3))
    z = (rng.random(a.shape) < 0.7).astype(float)
    t = SignedPermutation([2, 0, 1], [1, -1, 1])
    s = summarize_loadings(a, z)
    s2 = summarize_loadings(t.columns(a), t.columns(z, signed=False))
    np.testing.assert_allclose(s2.value, t.columns(s.value), atol=1e-12)
    np.testing.assert_array_equal(s2.significant, t.columns(s.significant, signed=False))
    np.testing.assert_allclose(s2.rhat, t.columns(s.rhat, signed=False), atol=1e-12)
    rows = list(s.rows(["a", "b", "c", "d", "e", "f"]))
    assert len(rows) == 18 and rows[0][:2] == ("a", 1)


def test_point_mass_predictions():
    truth = np.random.default_rng(7).normal(size=(2, 3, 2))
    assert prediction_metrics(np.repeat(truth[None], 10, axis=0), truth) == (0.0, 0.0, 0.0)


def test_point_mass_coverage_is_strict():
    # an interval of zero width excludes its own endpoint
    truth = np.zeros((1,))
    assert prediction_metrics(np.zeros((5, 1)), truth)[2] == 0.0


def test_discrete_uniform_draws():
    draws = np.arange(101.0).reshape(-1, 1)
    mae, mwi, pwi = prediction_metrics(draws, np.array([50.0]))
    assert (mae, pwi) == (0.0, 1.0)
    assert mwi == pytest.approx(95.0, abs=1e-12)
    assert mwi == pytest.approx(empirical_quantile(draws[:, 0], 0.975)
                                - empirical_quantile(draws[:, 0], 0.025), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_metric_ranges_and_order_invariance(seed):
    rng = np.random.default_rng(seed)
    draws = rng.normal(size=(30, 2, 3))
    truth = rng.normal(size=(2, 3))
    mae, mwi, pwi = prediction_metrics(draws, truth)
    assert mae >= 0 and mwi >= 0 and 0 <= pwi <= 1
    assert prediction_metrics(draws[rng.permutation(30)], truth) == (mae, mwi, pwi)


def test_factor_recovery():
    truth = np.random.default_rng(8).normal(size=(2, 3, 4))
    assert factor_recovery_mae(np.repeat(truth[None], 5, axis=0), truth) == 0.0
    assert factor_recovery_mae(np.ones((3, 1, 1, 1)), np.full((1, 1, 1), 3.0)) == 2.0
    sd = np.array([2.0, 1.0, 0.5])
    scaled = truth / sd[None, :, None]
    assert factor_recovery_mae(scaled[None], truth, rescale=sd) == pytest.approx(0.0, abs=1e-15)


def test_truth_alignment_ignores_column_scale():
    rng = np.random.default_rng(9)
    true = rng.normal(size=(30, 3)) * (rng.random((30, 3)) < 0.3)
    t = SignedPermutation([1, 2, 0], [-1, 1, -1])
    est = t.inverse().columns(true) * np.array([10.0, 0.1, 3.0])
    got = align_to_truth(est, true)
    assert got == t
    corr = np.array([[1, 0.5, -0.2], [0.5, 1, 0.3], [-0.2, 0.3, 1]])
    pc = permute_correlation(corr, got)
    np.testing.assert_allclose(np.diag(pc), 1.0)
    np.testing.assert_allclose(pc, pc.T)


def test_max_rhat_report():
    rep = max_rhat_report({"a": [1.0, 1.3, np.nan], "b": [1.01], "c": []})
    assert rep["max_rhat"] == {"a": 1.3, "b": 1.01, "c": None}
    assert rep["above_cutoff"] == ["a"] and rep["cutoff"] == 1.2


def test_no_warning_for_regular_chains():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rhat(np.random.default_rng(10).normal(size=(3, 20)))
