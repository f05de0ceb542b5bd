"""Numbered acceptance criteria; run with ``pytest tests/test_acceptance.py``.

The end-to-end fits are session fixtures shared between criteria.  A
summary line per criterion is printed at the end of the session.
"""

import json
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from bsfa_dgp.alignment import SignedPermutation, align_draw, apply_to_chain
from bsfa_dgp.cli import main
from bsfa_dgp.gibbs import Hyperparams
from bsfa_dgp.initialize import init_factors, init_theta
from bsfa_dgp.kcf import DgpParams, build_sigma_y
from bsfa_dgp.mcem import McemConfig, run_mcem
from bsfa_dgp.mle import SampleBank, dgp_loglik, dgp_loglik_and_grad
from bsfa_dgp.pipeline import FitConfig, evaluate, fit_model
from bsfa_dgp.simulate import ScenarioSpec, simulate, split_train_test

SEED = 1
TESTS = Path(__file__).parent

pytestmark = pytest.mark.slow


@pytest.fixture(scope="session")
def cs():
    data, truth = simulate(ScenarioSpec.preset("CS", seed=SEED))
    train, test = split_train_test(data, 8, 2)
    return train, test, truth


def _fit(cs, model):
    train, test, truth = cs
    start = time.perf_counter()
    fit = fit_model(train, FitConfig(k=4, model=model, seed=SEED), new_times=truth.times[8:])
    return fit, evaluate(fit, truth, test), time.perf_counter() - start


@pytest.fixture(scope="session")
def cs_dgp(cs):
    return _fit(cs, "dgp")


@pytest.fixture(scope="session")
def cs_igp(cs):
    return _fit(cs, "igp")


@pytest.mark.acceptance(1)
def test_scenario_reproduction(cs_dgp, cs_igp, report):
    (_, dgp, t_dgp), (_, igp, t_igp) = cs_dgp, cs_igp
    report(f"PWI {dgp['pwi_x']:.3f}/{igp['pwi_x']:.3f}, MAE_Y {dgp['mae_y']:.3f}/"
           f"{igp['mae_y']:.3f}, MAE_X {dgp['mae_x']:.4f}/{igp['mae_x']:.4f}, "
           f"MWI_X {dgp['mwi_x']:.3f}/{igp['mwi_x']:.3f} (DGP/IGP), {t_dgp + t_igp:.0f} s")
    assert 0.90 <= dgp["pwi_x"] <= 0.99 and 0.90 <= igp["pwi_x"] <= 0.99
    assert dgp["mae_y"] < igp["mae_y"]
    assert 0.15 <= dgp["mae_y"] <= 0.35
    assert dgp["mae_x"] <= igp["mae_x"]
    assert dgp["mwi_x"] <= igp["mwi_x"]
    assert t_dgp + t_igp <= 30 * 60


@pytest.mark.acceptance(2)
def test_cross_correlation_recovery(cs, cs_dgp, report):
    truth = cs[2]
    corr = np.array(cs_dgp[1]["correlation"])
    err = np.abs(corr - truth.correlation).max()
    report(f"max error {err:.3f}, entries (1,4)={corr[0, 3]:.3f} (2,4)={corr[1, 3]:.3f}")
    assert err <= 0.25
    for a, b in ((0, 3), (1, 3)):
        assert truth.correlation[a, b] < 0
        assert corr[a, b] <= -0.4


@pytest.mark.acceptance(3)
def test_redundant_factor_detection(report):
    data, truth = simulate(ScenarioSpec.preset("CL", seed=SEED))
    train, _ = split_train_test(data, 8, 2)
    fit = fit_model(train, FitConfig(k=5, seed=SEED))
    n_sig = fit.loadings.n_significant
    report(f"significant loadings per factor {n_sig.tolist()}")
    assert np.any(n_sig == 0)


@pytest.mark.acceptance(4)
def test_conjugacy_oracle_suite(report):
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           str(TESTS / "test_gibbs.py")], capture_output=True, text=True)
    elapsed = time.perf_counter() - start
    report(proc.stdout.strip().splitlines()[-1] + f", {elapsed:.0f} s")
    assert proc.returncode == 0, proc.stdout[-3000:]
    assert elapsed <= 60


def _random_params(rng, k, independent):
    return DgpParams(
        shared_amp=np.zeros(k) if independent else rng.normal(0, 1, k),
        shared_prec=np.exp(rng.uniform(-2, 2, k)),
        specific_amp=np.exp(rng.uniform(-1, 1, k)),
        specific_prec=np.exp(rng.uniform(-2, 2, k)),
        noise_sd=rng.uniform(0.0, 0.5),
        independent=independent,
    )


@pytest.mark.acceptance(5)
def test_covariance_properties(report):
    rng = np.random.default_rng(SEED)
    worst_diag = 0.0
    for _ in range(1000):
        k, q = rng.integers(1, 5), rng.integers(1, 9)
        independent = bool(rng.random() < 0.3)
        params = _random_params(rng, k, independent)
        times = np.sort(rng.uniform(0, 10, q)) + np.arange(q) * 1e-3
        cov = build_sigma_y(params, times)
        assert np.array_equal(cov.matrix, cov.matrix.T)
        np.linalg.cholesky(cov.matrix + cov.jitter * np.eye(cov.matrix.shape[0]))
        corr = build_sigma_y(params, times, as_correlation=True).matrix
        worst_diag = max(worst_diag, np.abs(np.diag(corr) - 1).max())
        if independent:
            blocks = cov.matrix.reshape(k, q, k, q)
            for a in range(k):
                for b in range(k):
                    if a != b:
                        assert np.all(blocks[a, :, b] == 0.0)
    report(f"max |diag - 1| = {worst_diag:.1e}")
    assert worst_diag <= 1e-10


@pytest.mark.acceptance(6)
def test_gradient_check(report):
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(20):
        k, q = rng.integers(1, 4), rng.integers(2, 6)
        params = _random_params(rng, k, False)
        params = DgpParams(params.shared_amp, params.shared_prec, params.specific_amp,
                           params.specific_prec, max(params.noise_sd, 0.05))
        bank = SampleBank(rng.normal(size=(3, 2, k, q)), np.arange(q, dtype=float))
        _, grad = dgp_loglik_and_grad(params, bank.times, bank.scatter(), bank.vectors().shape[0])
        x = params.to_vector()
        fd = np.empty_like(x)
        for i in range(x.size):
            h = 1e-6 * max(1.0, abs(x[i]))
            e = np.zeros_like(x)
            e[i] = h
            fd[i] = (dgp_loglik(DgpParams.from_vector(x + e, k), bank)
                     - dgp_loglik(DgpParams.from_vector(x - e, k), bank)) / (2 * h)
        rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, rel)
    report(f"worst relative error {worst:.1e}")
    assert worst <= 1e-4


@pytest.mark.acceptance(7)
def test_mcem_ascent(cs, cs_dgp, report):
    train = cs[0]
    hyper = Hyperparams.default(train)
    init = init_factors(train, 4, hyper)
    theta0 = init_theta(init.y0, train.times).params
    cfg = McemConfig(r0=50, max_iterations=10, force_zero_variance=True)
    forced = run_mcem(train, hyper, init.state, theta0, cfg, seed=SEED)
    n_acc = len(forced.trace.accepted)
    default_trace = cs_dgp[0].mcem.trace
    lbs = [r.lower_bound for r in default_trace.accepted]
    report(f"forced: {n_acc}/{len(forced.trace)} accepted; default: {len(lbs)} accepted, "
           f"min LB {min(lbs):.2e}")
    assert n_acc == len(forced.trace) == 10
    assert lbs and min(lbs) > 0


@pytest.mark.acceptance(8)
def test_alignment_suite(report):
    rng = np.random.default_rng(SEED)
    hits = 0
    worst = 0.0
    for _ in range(100):
        l = rng.normal(size=(20, 3))
        y = rng.normal(size=(17, 3, 8))
        planted = SignedPermutation(rng.permutation(3), rng.choice([-1.0, 1.0], 3))
        noisy = planted.inverse().columns(l) + rng.normal(0, 0.01, l.shape)
        y_noisy = planted.inverse().rows(y)
        l2, y2, tr = align_draw(noisy, l, y_noisy)
        hits += tr == planted
        worst = max(worst, np.abs(l2 @ y2 - noisy @ y_noisy).max())
    report(f"{hits}/100 recovered, max |LY change| {worst:.1e}")
    assert hits >= 99
    assert worst <= 1e-12


@pytest.mark.acceptance(8)
def test_alignment_keeps_products_on_fitted_chains(cs_dgp):
    fit = cs_dgp[0]
    rng = np.random.default_rng(SEED)
    chain = fit.chains[0]
    trs = [SignedPermutation(rng.permutation(4), rng.choice([-1.0, 1.0], 4))
           for _ in range(chain.n_draws)]
    moved = apply_to_chain(chain, trs)
    before = np.einsum("rpk,rnkq->rnpq", chain.loadings, chain.y)
    after = np.einsum("rpk,rnkq->rnpq", moved.loadings, moved.y)
    assert np.abs(after - before).max() <= 1e-12


@pytest.mark.acceptance(9)
def test_convergence_reporting(cs_dgp, report):
    fit = cs_dgp[0]
    cfg = fit.config
    assert (cfg.n_chains, cfg.n_iter, cfg.burn_in, cfg.thin) == (5, 10_000, 3_000, 10)
    rh = fit.diagnostics["max_rhat"]
    report(f"max Rhat predicted {rh['predicted_expression']:.4f}, loadings {rh['loadings']:.4f}")
    assert rh["predicted_expression"] <= 1.2
    assert rh["loadings"] <= 1.2


@pytest.mark.acceptance(10)
def test_determinism(tmp_path, report):
    sim_cfg = tmp_path / "sim.json"
    sim_cfg.write_text(json.dumps({"n": 5, "p": 20}))
    fit_cfg = tmp_path / "fit.json"
    fit_cfg.write_text(json.dumps({
        "n_chains": 2, "n_iter": 200, "burn_in": 50, "thin": 5,
        "mcem": {"r0": 30, "max_iterations": 3, "mle": {"max_iter": 100, "restarts": 1}}}))
    out = tmp_path / "run"
    snapshots = []
    for _ in range(2):
        if out.exists():
            shutil.rmtree(out)
        assert main(["simulate", "--scenario", "CS", "--seed", "11", "--out", str(out / "sim"),
                     "--config", str(sim_cfg)]) == 0
        assert main(["fit", "--data", str(out / "sim" / "train"), "--out", str(out / "fit"),
                     "--seed", "11", "--config", str(fit_cfg)]) == 0
        assert main(["predict", "--fit", str(out / "fit"), "--heldout",
                     str(out / "sim" / "heldout"), "--truth", str(out / "sim" / "truth.json")]) == 0
        snapshots.append({p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()})
    files = sorted(snapshots[0])
    assert files == sorted(snapshots[1])
    same = [snapshots[0][f] == snapshots[1][f] for f in files]
    report(f"{sum(same)}/{len(files)} files identical")
    assert len(files) > 10 and all(same)


def test_initializer_sensitivity(cs, cs_dgp):
    """A second MCEM seed on the same data gives nearly the same correlation estimate."""
    train = cs[0]
    hyper = Hyperparams.default(train)
    init = init_factors(train, 4, hyper)
    theta0 = init_theta(init.y0, train.times).params
    other = run_mcem(train, hyper, init.state, theta0, McemConfig(), seed=SEED + 100)
    first = cs_dgp[0]
    diff = np.abs(other.correlation - first.correlation)
    assert diff.max() <= 0.1, diff
