"""Train SVMR on a 5-level synthetic problem and print the loss curve.

    python3 demos/single_run.py
"""

import numpy as np

from klevel import Schedule, make_klevel_synthetic, run_svmr

problem, train, test = make_klevel_synthetic(5, n_per_level=1000, noise_var=1.0, seed=0)
x, rec = run_svmr(problem, train, Schedule(300, 0.01, 0.1), batch=64, seed=0, initial_batch=128, lf=50.0,
                  log_every=50)

for t in np.flatnonzero(~np.isnan(rec.train_loss)):
    print(f"t={rec.t[t]:4d}  train={rec.train_loss[t]:.4f}  test={rec.test_loss[t]:.4f}  gap={rec.gap[t]:+.4f}")
print("solution", np.round(x, 4))
