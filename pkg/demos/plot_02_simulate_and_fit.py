"""
Simulate a scenario and fit the model
=====================================

A reduced version of the correlated small-variability scenario, fitted
with short chains so the script finishes in about a minute.
"""

import time

import numpy as np

from bsfa_dgp.mcem import McemConfig
from bsfa_dgp.pipeline import FitConfig, evaluate, fit_model
from bsfa_dgp.simulate import ScenarioSpec, simulate, split_train_test

np.set_printoptions(precision=2, suppress=True)

spec = ScenarioSpec.preset("CS", seed=3)
data, truth = simulate(spec)
train, test = split_train_test(data, spec.u1, spec.u2)
print(f"{train.n} subjects, {train.p} genes, {train.q} training times")

# %%
# Fewer MCEM iterations and Gibbs sweeps than the defaults.
config = FitConfig(
    k=4, seed=3, n_chains=3, n_iter=2000, burn_in=600, thin=5,
    mcem=McemConfig(max_iterations=20),
)
start = time.perf_counter()
fit = fit_model(train, config, new_times=truth.times[spec.u1:])
print(f"fit took {time.perf_counter() - start:.0f} s, "
      f"{len(fit.mcem.trace)} MCEM iterations")

# %%
# Estimated factors are matched to the true ones before comparing.
metrics = evaluate(fit, truth, test)
print("estimated correlation\n", np.array(metrics["correlation"]))
print("true correlation\n", truth.correlation)
for key in ("mae_x", "mwi_x", "pwi_x", "mae_y"):
    print(f"{key}: {metrics[key]:.3f}")
print("significant loadings per factor:", fit.loadings.n_significant)
print("max Rhat:", fit.diagnostics["max_rhat"])
