"""Plug measured per-level stability and variance into the generalization bound.

The bound carries powers of L_f, so at L_f = 50 it sits orders of magnitude
above the measured gap.

    python3 demos/bound_from_measurements.py
"""

import numpy as np

from klevel import (
    BoundInputs,
    Schedule,
    StabilityConfig,
    coupled_stability,
    generalization_bound,
    generalization_gap,
    level_variance,
    make_klevel_synthetic,
    run_svmr,
)

K, sched = 3, Schedule(100, 0.01, 0.1)
problem, train, _ = make_klevel_synthetic(K, n_per_level=300, noise_var=1.0, seed=0)
eps = []
for k in range(1, K + 1):
    cfg = StabilityConfig("svmr", sched, batch=16, level=k, position=1, num_seeds=10, initial_batch=16)
    eps.append(coupled_stability(problem, train, cfg).eps_hat)

x, _ = run_svmr(problem, train, sched, 16, 0, initial_batch=16)
var = [level_variance(problem, train, x, k) for k in range(1, K)]
bound = generalization_bound(BoundInputs(problem.constants.lf, K, eps, var, list(train.sizes)))
print("eps per level", np.round(eps, 5))
print(f"bound {bound:.4g}   measured gap {generalization_gap(problem, train, x):+.4f}")
