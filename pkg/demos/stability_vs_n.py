"""Coupled-trajectory stability of STORM as the training set grows.

Replacing one sample moves the output less when n is larger.

    python3 demos/stability_vs_n.py
"""

from klevel import Schedule, StabilityConfig, coupled_stability, make_quadratic_problem

for n in (32, 64, 128, 256):
    problem, train = make_quadratic_problem(n, dim=5, noise_var=1.0, seed=0)
    cfg = StabilityConfig("storm", Schedule(256, 0.01, 0.1), batch=1, level=1, position=3, num_seeds=20)
    est = coupled_stability(problem, train, cfg)
    print(f"n={n:4d}  eps_hat={est.eps_hat:.4f} +- {est.std_err:.4f}")
