"""Sweep drivers for the four generalization experiments.

Every sweep is a list of independent ``(sweep point, seed)`` cells. A
cell builds its own problem and dataset from the seed, runs one or more
optimizers and returns plain rows, so cells can run in worker processes
and the report only depends on the inputs. Results are collected in
cell order, never in completion order.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .optimizers import Schedule, run_sgd, run_storm, run_svmr
from .problem import make_klevel_synthetic, make_quintic_problem
from .serialization import write_csv
from .stability import (
    BoundInputs,
    StabilityConfig,
    coupled_stability,
    generalization_bound,
    level_variance,
)

#: Shared settings of the synthetic sweeps (steps, momentum, sizes).
DEFAULTS = {
    "eta": 0.01,
    "beta": 0.1,
    "iters": 500,
    "batch": 128,
    "initial_batch": 128,
    "lf": 50.0,
    "dims": 2,
    "n_per_level": 1000,
    "noise_var": 3.0,
    "split": 0.6,
    "last": 10,
    "bound_seeds": 0,
}

#: Settings of the SGD-versus-STORM comparison on the quintic.
QUINTIC_DEFAULTS = {
    "eta": 0.001,
    "beta": 0.1,
    "iters": 500,
    "batch": 128,
    "initial_batch": 128,
    "lf": 50.0,
    "n_points": 2000,
    "noise_var": 3.0,
    "split": 0.6,
    "last": 10,
    "bound_seeds": 0,
}


@dataclass
class Report:
    """Per-cell rows, per-sweep-point summary and optional extra tables."""

    name: str
    rows: list
    summary: list
    tables: dict = field(default_factory=dict)

    def write(self, outdir):
        os.makedirs(outdir, exist_ok=True)
        write_csv(os.path.join(outdir, "rows.csv"), self.rows)
        write_csv(os.path.join(outdir, "summary.csv"), self.summary)
        for name, rows in self.tables.items():
            write_csv(os.path.join(outdir, f"{name}.csv"), rows)


def default_jobs():
    env = os.environ.get("KLVL_JOBS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def map_cells(fn, cells, jobs=1):
    """``[fn(c) for c in cells]``, optionally across worker processes."""
    cells = list(cells)
    if jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=min(jobs, len(cells))) as pool:
        return list(pool.map(fn, cells))


def _mean_se(values):
    a = np.asarray(values, dtype=float)
    if len(a) == 0:
        return math.nan, math.nan
    se = float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else math.nan
    return float(a.mean()), se


def _params(defaults, overrides):
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ValueError(f"unknown experiment settings: {sorted(unknown)}")
    p = dict(defaults)
    p.update(overrides)
    return p


def _schedule(p):
    return Schedule(int(p["iters"]), float(p["eta"]), float(p["beta"]))


def _gap_fields(rec, last):
    gap = rec.gap
    tail = gap[-last:]
    return {
        "final_train": float(rec.train_loss[-1]),
        "final_test": float(rec.test_loss[-1]),
        "gap": float(gap[-1]),
        "gap_last": float(np.mean(tail)),
    }


def _curve_rows(rec, key):
    return [
        dict(key, t=int(t), train_loss=float(a), test_loss=float(b))
        for t, a, b in zip(rec.t, rec.train_loss, rec.test_loss)
    ]


def _echo(p, keys):
    return {k: p[k] for k in keys}


# ---------------------------------------------------------------------------
# Bound estimate per sweep point


def _bound_cell(args):
    """Coupled stability of one level at one sweep point."""
    build, build_args, optimizer, p, level, seeds = args
    problem, train, _ = build(**build_args)
    kw = {} if optimizer == "sgd" else {"initial_batch": p["initial_batch"], "lf": p["lf"]}
    cfg = StabilityConfig(optimizer, _schedule(p), p["batch"], level, 1, num_seeds=seeds,
                          initial_batch=kw.get("initial_batch", 1), lf=kw.get("lf"))
    return coupled_stability(problem, train, cfg).eps_hat


def _attach_bounds(summary, groups, jobs):
    """Fill ``bound``/``bound_violated`` for summary rows that have a group."""
    cells, owners = [], []
    for i, g in enumerate(groups):
        if g is None:
            continue
        for level in range(1, g["K"] + 1):
            cells.append((g["build"], g["build_args"], g["optimizer"], g["p"], level, g["p"]["bound_seeds"]))
            owners.append(i)
    eps = map_cells(_bound_cell, cells, jobs)
    per_row = {}
    for i, e in zip(owners, eps):
        per_row.setdefault(i, []).append(e)
    for i, g in enumerate(groups):
        if g is None:
            continue
        inputs = BoundInputs(g["p"]["lf"], g["K"], per_row[i], g["var"], g["n"])
        bound = generalization_bound(inputs)
        summary[i]["bound"] = bound
        summary[i]["bound_violated"] = summary[i]["mean_gap"] > bound


def _level_vars(problem, train, x):
    return [level_variance(problem, train, x, k) for k in range(1, problem.K)]


# ---------------------------------------------------------------------------
# SGD versus STORM on the quintic


def _quintic_cell(args):
    seed, p = args
    problem, train, _ = make_quintic_problem(p["n_points"], p["noise_var"], p["split"], seed=seed)
    sched = _schedule(p)
    rows, curves = [], []
    for name in ("sgd", "storm"):
        if name == "sgd":
            _, rec = run_sgd(problem, train, sched, p["batch"], seed)
        else:
            _, rec = run_storm(problem, train, sched, p["batch"], seed,
                               initial_batch=p["initial_batch"], lf=p["lf"])
        key = {"optimizer": name, "seed": seed}
        rows.append(dict(key, **_echo(p, ("eta", "beta", "iters", "batch", "noise_var")), **_gap_fields(rec, p["last"])))
        curves.extend(_curve_rows(rec, key))
    return rows, curves


def experiment_sgd_vs_storm(seeds=range(10), jobs=1, **overrides):
    """SGD and STORM on the quintic regression, one cell per seed.

    Rows hold final losses and gaps per (optimizer, seed); the ``curves``
    table holds every logged train/test loss.
    """
    p = _params(QUINTIC_DEFAULTS, overrides)
    out = map_cells(_quintic_cell, [(s, p) for s in seeds], jobs)
    rows = [r for rs, _ in out for r in rs]
    curves = [c for _, cs in out for c in cs]
    summary, groups = [], []
    for name in ("sgd", "storm"):
        mine = [r for r in rows if r["optimizer"] == name]
        summary.append(_summarize({"optimizer": name}, mine))
        groups.append(None)
    if p["bound_seeds"] > 0:
        problem, train, _ = make_quintic_problem(p["n_points"], p["noise_var"], p["split"], seed=min(seeds))
        build_args = {"n_points": p["n_points"], "noise_var": p["noise_var"], "split": p["split"], "seed": min(seeds)}
        groups = [
            {"build": make_quintic_problem, "build_args": build_args, "optimizer": name, "p": p, "K": 1,
             "var": [], "n": list(train.sizes)}
            for name in ("sgd", "storm")
        ]
        _attach_bounds(summary, groups, jobs)
    return Report("compare-sgd-storm", rows, summary, {"curves": curves})


def _summarize(key, rows):
    gap, gap_se = _mean_se([r["gap"] for r in rows])
    last, last_se = _mean_se([r["gap_last"] for r in rows])
    train, _ = _mean_se([r["final_train"] for r in rows])
    test, test_se = _mean_se([r["final_test"] for r in rows])
    return dict(key, seeds=len(rows), mean_gap=gap, se_gap=gap_se, mean_gap_last=last, se_gap_last=last_se,
                mean_train=train, mean_test=test, se_test=test_se)


# ---------------------------------------------------------------------------
# SVMR sweeps on the synthetic K-level family


def _synthetic_args(K, seed, p, noise_var=None):
    return {
        "K": K,
        "dims": p["dims"],
        "n_per_level": p["n_per_level"],
        "noise_var": p["noise_var"] if noise_var is None else noise_var,
        "seed": seed,
        "split": p["split"],
        "lf": p["lf"],
    }


def _svmr_cell(args):
    point, build_args, p, warm_steps = args
    problem, train, _ = make_klevel_synthetic(**build_args)
    x, rec = run_svmr(problem, train, _schedule(p), p["batch"], build_args["seed"],
                      initial_batch=p["initial_batch"], warm_steps=warm_steps, lf=p["lf"])
    row = dict(point, seed=build_args["seed"], K=build_args["K"], noise_var=build_args["noise_var"],
               **_echo(p, ("eta", "beta", "iters", "batch", "initial_batch", "lf")), warm_steps=warm_steps,
               **_gap_fields(rec, p["last"]))
    return row, _level_vars(problem, train, x), list(train.sizes)


def _svmr_sweep(name, points, seeds, jobs, p, warm_steps=0):
    """``points`` is a list of ``(key, K, noise_var, initial_batch)``."""
    cells = []
    for key, K, noise, ib in points:
        q = dict(p, initial_batch=ib)
        for s in seeds:
            cells.append((key, _synthetic_args(K, s, q, noise), q, warm_steps))
    out = map_cells(_svmr_cell, cells, jobs)
    rows = [r for r, _, _ in out]
    summary, groups = [], []
    for key, K, noise, ib in points:
        idx = [i for i, c in enumerate(cells) if c[0] == key]
        summary.append(_summarize(key, [rows[i] for i in idx]))
        if p["bound_seeds"] > 0:
            var = np.mean([out[i][1] for i in idx], axis=0).tolist() if K > 1 else []
            q = dict(p, initial_batch=ib)
            groups.append({"build": make_klevel_synthetic, "build_args": _synthetic_args(K, min(seeds), q, noise),
                           "optimizer": "svmr", "p": q, "K": K, "var": var, "n": out[idx[0]][2]})
        else:
            groups.append(None)
    if p["bound_seeds"] > 0:
        _attach_bounds(summary, groups, jobs)
    return Report(name, rows, summary)


def experiment_level_sweep(K_range=range(1, 21), seeds=range(5), jobs=1, **overrides):
    """Generalization gap of SVMR as the number of levels grows.

    The sweep statistic is ``gap_last``, the mean gap over the last
    ``last`` iterations.
    """
    p = _params(DEFAULTS, overrides)
    points = [({"K": int(K)}, int(K), None, p["initial_batch"]) for K in K_range]
    return _svmr_sweep("sweep-levels", points, list(seeds), jobs, p)


def experiment_initial_batch(batch_set=(32, 512), seeds=range(10), jobs=1, K=10, warm_steps=5, **overrides):
    """SVMR with a different minibatch for initialization and the first
    ``warm_steps`` updates, then the regular batch."""
    p = _params(DEFAULTS, overrides)
    points = [({"initial_batch": int(b)}, K, None, int(b)) for b in batch_set]
    return _svmr_sweep("sweep-initial-batch", points, list(seeds), jobs, p, warm_steps)


def noise_grid(start=0.1, stop=3.0, step=0.1):
    """Inclusive grid rounded to the step's decimals (no float drift)."""
    count = int(round((stop - start) / step)) + 1
    decimals = max(0, -int(math.floor(math.log10(step))) + 1)
    return [round(start + i * step, decimals) for i in range(count)]


def experiment_noise_sweep(var_range=None, seeds=range(10), jobs=1, K=10, **overrides):
    """SVMR gap statistics across level-noise variances."""
    p = _params(DEFAULTS, overrides)
    var_range = noise_grid() if var_range is None else list(var_range)
    points = [({"noise_var": float(v)}, K, float(v), p["initial_batch"]) for v in var_range]
    return _svmr_sweep("sweep-noise", points, list(seeds), jobs, p)
