import numpy as np
import pytest

from bsfa_dgp.kcf import cholesky_with_jitter
from bsfa_dgp.simulate import (
    SMALL_SD,
    ScenarioSpec,
    default_correlation,
    nearest_correlation,
    simulate,
    split_train_test,
    true_sigma_y,
)


def test_scenario_presets():
    ul = ScenarioSpec.preset("UL")
    assert (ul.n, ul.p, ul.k, ul.u1, ul.u2) == (17, 100, 4, 8, 2)
    np.testing.assert_array_equal(ul.factor_sd, 1.0)
    np.testing.assert_array_equal(ul.correlation, np.eye(4))
    cs = ScenarioSpec.preset("CS")
    np.testing.assert_array_equal(cs.factor_sd, SMALL_SD)
    np.testing.assert_array_equal(cs.correlation, default_correlation())
    with pytest.raises(ValueError):
        ScenarioSpec.preset("XX")


def test_packaged_correlation_is_valid():
    c = default_correlation()
    np.testing.assert_array_equal(c, c.T)
    np.testing.assert_array_equal(np.diag(c), 1.0)
    assert np.linalg.eigvalsh(c).min() > 0
    assert c[0, 3] == -0.69 and c[1, 3] == -0.71


def test_nearest_correlation_repairs_indefinite_input():
    bad = np.array([[1, 0.9, 0.9], [0.9, 1, -0.9], [0.9, -0.9, 1]])
    fixed = nearest_correlation(bad)
    assert np.linalg.eigvalsh(fixed).min() > 0
    np.testing.assert_allclose(np.diag(fixed), 1.0)
    good = default_correlation()
    np.testing.assert_array_equal(nearest_correlation(good), good)


@pytest.mark.parametrize("name", ["CS", "CL", "US", "UL"])
def test_true_covariance_structure(name):
    spec = ScenarioSpec.preset(name)
    sigma = true_sigma_y(spec)
    cholesky_with_jitter(sigma)
    q = spec.n_times
    blocks = sigma.reshape(spec.k, q, spec.k, q)
    if name.startswith("U"):
        for a in range(spec.k):
            for b in range(spec.k):
                if a != b:
                    assert np.all(blocks[a, :, b] == 0)
    np.testing.assert_allclose(np.diag(blocks[0, :, 0]), spec.factor_sd[0] ** 2)


def test_empirical_covariance_converges():
    spec = ScenarioSpec.preset("CS", seed=1, n=100_000, p=4)
    _, truth = simulate(spec)
    v = truth.y.reshape(spec.n, -1)
    emp = v.T @ v / spec.n
    assert np.max(np.abs(emp - truth.sigma_y)) < 0.02


def test_uncorrelated_scenario_cross_correlations_vanish():
    spec = ScenarioSpec.preset("US", seed=2, n=10_000, p=4)
    _, truth = simulate(spec)
    cols = np.moveaxis(truth.y, 1, 2).reshape(-1, spec.k)
    c = np.corrcoef(cols, rowvar=False)
    assert np.max(np.abs(c - np.eye(spec.k))) < 0.05


def test_inclusion_rate_near_ten_percent():
    counts = []
    for seed in range(30):
        _, truth = simulate(ScenarioSpec.preset("CS", seed=seed))
        counts.append((truth.loadings != 0).sum(axis=0))
    counts = np.concatenate(counts)
    se = np.sqrt(100 * 0.1 * 0.9 / counts.size)
    assert abs(counts.mean() - 10) < 3 * se + 0.1  # redraws of empty factors bias upwards slightly
    assert np.all(counts >= 1)


def test_generated_quantities():
    spec = ScenarioSpec.preset("CL", seed=3)
    data, truth = simulate(spec)
    assert data.n == 17 and data.p == 100 and data.q == 10
    nz = truth.loadings[truth.loadings != 0]
    assert 3 < nz.mean() < 5
    mu_g = np.linspace(4, 16, 100)
    assert np.abs(truth.mu.mean(axis=0) - mu_g).max() < 0.6
    recon = truth.mu[:, :, None] + np.einsum("pk,nkt->npt", truth.loadings, truth.y)
    resid = np.stack(data.x) - recon
    assert abs(resid.std() - spec.noise_sd) < 0.02


def test_reproducible_from_seed():
    a = simulate(ScenarioSpec.preset("CS", seed=7))
    b = simulate(ScenarioSpec.preset("CS", seed=7))
    c = simulate(ScenarioSpec.preset("CS", seed=8))
    np.testing.assert_array_equal(np.stack(a[0].x), np.stack(b[0].x))
    np.testing.assert_array_equal(a[1].y, b[1].y)
    assert not np.array_equal(np.stack(a[0].x), np.stack(c[0].x))


def test_split_shapes_and_reassembly():
    data, _ = simulate(ScenarioSpec.preset("CS", seed=4))
    train, test = split_train_test(data, 8, 2)
    assert all(x.shape == (100, 8) for x in train.x)
    assert all(x.shape == (100, 2) for x in test)
    np.testing.assert_array_equal(train.times, np.arange(8.0))
    for full, tr, te in zip(data.x, train.x, test):
        np.testing.assert_array_equal(np.concatenate([tr, te], axis=1), full)
    same, empty = split_train_test(data, 10, 0)
    assert same is data and all(e.size == 0 for e in empty)


def test_spec_validation_and_round_trip():
    spec = ScenarioSpec.preset("CS", seed=9)
    again = ScenarioSpec.from_dict(spec.as_dict())
    assert again.as_dict() == spec.as_dict()
    with pytest.raises(ValueError):
        ScenarioSpec.preset("CS", sparsity=0.0)
    with pytest.raises(ValueError):
        ScenarioSpec.preset("US", correlation=default_correlation().tolist())
