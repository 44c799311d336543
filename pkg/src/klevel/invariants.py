"""Fast self-checks of the package's structural properties.

Each check returns ``(passed, detail)``. They are small versions of the
test-suite properties so an installed copy can verify itself without
the tests directory (``klevel check-invariants``).
"""

from __future__ import annotations

import numpy as np

from .estimators import project_ball
from .optimizers import (
    UNIFORM,
    AveragingMode,
    Schedule,
    average,
    full_gradient_descent,
    run_cover,
    run_storm,
    run_svmr,
    schedule_convex,
    schedule_strongly_convex,
)
from .problem import (
    empirical_gradient,
    finite_difference_gradient,
    make_klevel_synthetic,
    make_quadratic_problem,
    neighbor,
)
from .rng import stream
from .stability import (
    BoundInputs,
    StabilityConfig,
    coupled_stability,
    generalization_bound,
    level_variance,
)


def check_gradient_oracle():
    worst = 0.0
    for seed in range(5):
        rng = stream(seed, "check-gradient")
        K = int(rng.integers(1, 5))
        problem, train, _ = make_klevel_synthetic(K, dims=int(rng.integers(1, 5)), n_per_level=20, seed=seed)
        x = rng.standard_normal(problem.input_dim)
        g = empirical_gradient(problem, train, x)
        fd = finite_difference_gradient(problem, train, x)
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8))))
    return worst <= 1e-5, f"max relative error {worst:.2e}"


def check_projection():
    rng = stream(0, "check-projection")
    for _ in range(200):
        M = rng.standard_normal((3, 4)) * 10 ** rng.uniform(-3, 3)
        r = float(10 ** rng.uniform(-2, 2))
        P = project_ball(M, r)
        if np.linalg.norm(P) > r or not np.array_equal(project_ball(P, r), P):
            return False, "projection left the ball or was not idempotent"
    return True, "200 random matrices"


def check_svmr_norms():
    problem, train, _ = make_klevel_synthetic(4, n_per_level=100)
    worst = 0.0

    def hook(t, x, chain):
        nonlocal worst
        worst = max(worst, max(float(np.linalg.norm(v)) for v in chain.v))

    run_svmr(problem, train, Schedule(50, 0.01, 0.1), 16, 0, lf=0.5, log_every=50, on_step=hook)
    return worst <= 0.5, f"largest estimator norm {worst!r} with radius 0.5"


def check_degeneracy():
    problem, train = make_quadratic_problem(40, dim=5)
    sched = Schedule(30, 0.05, 0.3)
    _, a = run_storm(problem, train, sched, 4, 3, initial_batch=1, lf=5.0)
    _, b = run_svmr(problem, train, sched, 4, 3, initial_batch=1, lf=5.0)
    diff_storm = float(np.max(np.abs(a.iterates - b.iterates)))
    full = Schedule(30, 0.05, 1.0)
    _, c = run_svmr(problem, train, full, 40, 0, initial_batch=40, lf=5.0)
    ref = full_gradient_descent(problem, train, 0.05, 30, lf=5.0)
    diff_gd = float(np.max(np.abs(c.iterates - ref)))
    ok = diff_storm <= 1e-12 and diff_gd <= 1e-12
    return ok, f"svmr vs storm {diff_storm:.1e}, full batch vs descent {diff_gd:.1e}"


def check_cover_full_batch():
    # full batches and beta = 1 make COVER's estimators exact
    problem, train, _ = make_klevel_synthetic(2, n_per_level=30)
    n = min(train.sizes)
    _, rec = run_cover(problem, train, Schedule(20, 0.05, 1.0), n, 0, initial_batch=n, lf=1e6)
    ref = full_gradient_descent(problem, train, 0.05, 20)
    diff = float(np.max(np.abs(rec.iterates - ref)))
    return diff <= 1e-12, f"max deviation from descent {diff:.1e}"


def check_zero_perturbation():
    details = []
    for opt, K in (("storm", 1), ("cover", 2), ("svmr", 3)):
        problem, train, _ = make_klevel_synthetic(K, n_per_level=30, noise_var=0.0)
        cfg = StabilityConfig(opt, Schedule(20, 0.05, 0.2), 4, K, 2, num_seeds=3)
        est = coupled_stability(problem, train, cfg)
        details.append(f"{opt}={est.eps_hat!r}")
        if est.eps_hat != 0.0:
            return False, ", ".join(details)
    return True, ", ".join(details)


def check_neighbor():
    _, train, _ = make_klevel_synthetic(3, n_per_level=20)
    other = neighbor(train, 2, 5, stream(0, "check-neighbor"))
    changed = [
        np.flatnonzero(np.any(a != b, axis=1)).tolist() for a, b in zip(train.payloads, other.payloads)
    ]
    return changed == [[], [4], []], f"changed rows per level {changed}"


def check_schedules():
    a = schedule_convex(16)
    b = schedule_strongly_convex(64)
    ok = (a.T, a.eta, a.beta) == (1024, 2.0 ** -8, 2.0 ** -8) and (b.T, b.eta, b.beta) == (128, 2.0 ** -6, 2.0 ** -6)
    return ok, f"convex {a.T},{a.eta!r}; strongly convex {b.T},{b.eta!r}"


def check_bound():
    one = generalization_bound(BoundInputs(2.0, 1, [0.5]))
    two = generalization_bound(BoundInputs(1.0, 2, [0.1, 0.2], [0.04], [4, 4]))
    base = BoundInputs(1.7, 3, [0.1, 0.3, 0.2], [0.0, 0.0], [5, 5, 5])
    scaled = BoundInputs(1.7, 3, [0.25, 0.75, 0.5], [0.0, 0.0], [5, 5, 5])
    homog = abs(generalization_bound(scaled) - 2.5 * generalization_bound(base))
    ok = one == 1.0 and two == 0.7 and homog <= 1e-12
    return ok, f"K=1 {one!r}, K=2 {two!r}, homogeneity error {homog:.1e}"


def check_level_variance():
    problem, train, _ = make_klevel_synthetic(3, n_per_level=50)
    x = np.array([0.3, -0.2])
    got = level_variance(problem, train, x, 2)
    y, _ = problem.mean_eval(train, 1, slice(None), x)
    vals, _ = problem.evaluate(train, 2, slice(None), y)
    mean = vals.sum(axis=0) / len(vals)
    ref = sum(float(np.sum((v - mean) ** 2)) for v in vals) / len(vals)
    return abs(got - ref) <= 1e-12, f"difference {abs(got - ref):.1e}"


def check_averaging():
    X = stream(0, "check-average").standard_normal((20, 3))
    same = np.array_equal(average(X, UNIFORM), average(X, AveragingMode.mu_weighted(0.0, 0.1)))
    return same, "mu_weighted with mu=0 equals uniform"


def check_determinism():
    problem, train, _ = make_klevel_synthetic(3, n_per_level=40)
    sched = Schedule(20, 0.05, 0.2)
    _, a = run_svmr(problem, train, sched, 8, 11)
    _, b = run_svmr(problem, train, sched, 8, 11)
    return a.same_as(b), "two identical runs"


CHECKS = {
    "gradient_oracle": check_gradient_oracle,
    "projection": check_projection,
    "svmr_estimator_norms": check_svmr_norms,
    "degeneracy": check_degeneracy,
    "cover_full_batch": check_cover_full_batch,
    "zero_perturbation": check_zero_perturbation,
    "neighbor_single_row": check_neighbor,
    "schedules": check_schedules,
    "bound_evaluator": check_bound,
    "level_variance": check_level_variance,
    "averaging": check_averaging,
    "determinism": check_determinism,
}


def run_checks():
    """Run every check; a check that raises counts as failed."""
    rows = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # report, never crash the runner
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        rows.append({"check": name, "passed": bool(ok), "detail": detail})
    return rows
