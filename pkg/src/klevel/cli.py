"""Command-line entry point.

Every subcommand writes ``<outdir>/<subcommand>-<timestamp>/`` with
``config.json`` (the effective configuration), ``rows.csv``,
``summary.csv`` and ``metadata.json``. Only the metadata file carries
wall-clock information, so CSV files are identical across reruns.

Exit status: 0 on success, 1 when a run fails, 2 on invalid usage or a
failed invariant check.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import __version__
from .errors import KLevelError, RunError
from .experiments import (
    DEFAULTS,
    QUINTIC_DEFAULTS,
    Report,
    default_jobs,
    experiment_initial_batch,
    experiment_level_sweep,
    experiment_noise_sweep,
    experiment_sgd_vs_storm,
    noise_grid,
)
from .invariants import run_checks
from .optimizers import OPTIMIZERS, Schedule, schedule_convex, schedule_strongly_convex
from .problem import make_klevel_synthetic, make_quadratic_problem, make_quintic_problem
from .serialization import dump_json, record_rows
from .stability import StabilityConfig, coupled_stability

SUBCOMMANDS = (
    "run",
    "stability",
    "sweep-levels",
    "sweep-initial-batch",
    "sweep-noise",
    "compare-sgd-storm",
    "check-invariants",
)
PROBLEMS = ("synthetic", "quadratic", "quintic")
SCHEDULES = ("convex", "strongly-convex")
#: Largest level count accepted without ``--deep``.
DESK_K_MAX = 20


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration of one CLI invocation."""

    subcommand: str
    optimizer: Optional[str] = None
    problem: str = "synthetic"
    levels: int = 1
    dims: int = 2
    n: int = 600
    noise_var: float = 3.0
    eta: Optional[float] = None
    beta: Optional[float] = None
    iters: Optional[int] = None
    schedule: Optional[str] = None
    batch: int = 128
    initial_batch: int = 128
    warm_steps: int = 0
    lf: float = 50.0
    seeds: tuple = (0,)
    outdir: str = "runs"
    log_every: int = 1
    max_iters: Optional[int] = None
    jobs: int = 1
    level: int = 1
    position: int = 1
    k_min: int = 1
    k_max: int = 20
    deep: bool = False
    batch_set: tuple = ()
    noise_grid: tuple = ()
    bound_seeds: int = 0

    def to_json(self):
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["batch_set"] = list(self.batch_set)
        d["noise_grid"] = list(self.noise_grid)
        return d


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}
# keys a config file may use besides the RunConfig fields
_ALIASES = {"seed_count", "seed_base", "var_min", "var_max", "var_step"}
_EXPLICIT_SCHEDULE = ("eta", "beta", "iters")


def _int_list(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _float_list(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def build_parser():
    parser = argparse.ArgumentParser(prog="klevel", description="K-level compositional optimizers and stability experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    S = argparse.SUPPRESS
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, argument_default=S)
        p.add_argument("--config", help="flat JSON file of settings; flags override it")
        p.add_argument("--outdir")
        p.add_argument("--jobs", type=int, help="worker processes (KLVL_JOBS overrides)")
        if name == "check-invariants":
            continue
        p.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
        p.add_argument("--seed-count", dest="seed_count", type=int)
        p.add_argument("--seed-base", dest="seed_base", type=int)
        p.add_argument("--eta", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--iters", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--initial-batch", dest="initial_batch", type=int)
        p.add_argument("--lf", type=float)
        p.add_argument("--dims", type=int)
        p.add_argument("--n", type=int, help="training samples per level")
        p.add_argument("--noise-var", dest="noise_var", type=float)
        p.add_argument("--bound-seeds", dest="bound_seeds", type=int,
                       help="seeds per level for the stability-bound estimate (0 disables it)")
        if name in ("run", "stability"):
            p.add_argument("--optimizer", choices=sorted(OPTIMIZERS))
            p.add_argument("--problem", choices=PROBLEMS)
            p.add_argument("--levels", type=int)
            p.add_argument("--schedule", choices=SCHEDULES, help="derive eta, beta, T from n")
            p.add_argument("--warm-steps", dest="warm_steps", type=int)
            p.add_argument("--max-iters", dest="max_iters", type=int)
        if name == "run":
            p.add_argument("--log-every", dest="log_every", type=int)
        if name == "stability":
            p.add_argument("--level", type=int)
            p.add_argument("--position", type=int)
        if name == "sweep-levels":
            p.add_argument("--k-min", dest="k_min", type=int)
            p.add_argument("--k-max", dest="k_max", type=int)
            p.add_argument("--deep", action="store_true", help=f"allow K above {DESK_K_MAX}")
        if name in ("sweep-initial-batch", "sweep-noise"):
            p.add_argument("--levels", type=int)
        if name == "sweep-initial-batch":
            p.add_argument("--batch-set", dest="batch_set", type=_int_list)
            p.add_argument("--warm-steps", dest="warm_steps", type=int)
        if name == "sweep-noise":
            p.add_argument("--noise-grid", dest="noise_grid", type=_float_list)
            p.add_argument("--var-min", dest="var_min", type=float)
            p.add_argument("--var-max", dest="var_max", type=float)
            p.add_argument("--var-step", dest="var_step", type=float)
    return parser


def _load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise UsageError("config file must be a flat JSON object")
    unknown = sorted(set(data) - _FIELDS - _ALIASES)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return data


def _subcommand_defaults(sub):
    d = {}
    if sub == "run":
        d.update(seeds=(0,), eta=DEFAULTS["eta"], beta=DEFAULTS["beta"], iters=DEFAULTS["iters"])
    elif sub == "stability":
        d.update(seeds=tuple(range(20)), problem="quadratic", batch=1, initial_batch=1, n=64, dims=5,
                 noise_var=1.0, eta=0.01, beta=0.1, iters=256, log_every=1)
    elif sub == "sweep-levels":
        d.update(seeds=tuple(range(5)), optimizer="svmr")
    elif sub == "sweep-initial-batch":
        d.update(seeds=tuple(range(10)), optimizer="svmr", levels=10, batch_set=(32, 64, 128, 256, 512), warm_steps=5)
    elif sub == "sweep-noise":
        d.update(seeds=tuple(range(10)), optimizer="svmr", levels=10)
    elif sub == "compare-sgd-storm":
        d.update(seeds=tuple(range(10)), problem="quintic", levels=1,
                 n=int(math.floor(QUINTIC_DEFAULTS["split"] * QUINTIC_DEFAULTS["n_points"])))
    elif sub == "check-invariants":
        d.update(seeds=())
    if sub.startswith("sweep") or sub == "compare-sgd-storm":
        base = QUINTIC_DEFAULTS if sub == "compare-sgd-storm" else DEFAULTS
        d.update(eta=base["eta"], beta=base["beta"], iters=base["iters"], batch=base["batch"],
                 initial_batch=base["initial_batch"], lf=base["lf"], noise_var=base["noise_var"])
    return d


def _source_seeds(src, default_count):
    has_range = "seed_count" in src or "seed_base" in src
    if "seeds" in src and has_range:
        raise UsageError("give either --seeds or --seed-count/--seed-base, not both")
    if "seeds" in src:
        return tuple(int(s) for s in src["seeds"])
    if has_range:
        base = int(src.get("seed_base", 0))
        return tuple(range(base, base + int(src.get("seed_count", default_count))))
    return None


def parse_config(argv):
    """Merge defaults, an optional config file and flags into a :class:`RunConfig`."""
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    sub = ns.pop("subcommand")
    path = ns.pop("config", None)
    file_vals = _load_config_file(path) if path else {}
    if file_vals.get("subcommand", sub) != sub:
        raise UsageError(f"config file is for {file_vals['subcommand']!r}, not {sub!r}")
    file_vals.pop("subcommand", None)

    # explicit steps and a derived schedule are exclusive, within and across sources
    for src in (file_vals, ns):
        if src.get("schedule") and any(src.get(k) is not None for k in _EXPLICIT_SCHEDULE):
            raise UsageError("--schedule cannot be combined with --eta/--beta/--iters")
    merged = dict(file_vals)
    if ns.get("schedule"):
        for k in _EXPLICIT_SCHEDULE:
            merged.pop(k, None)
    if any(ns.get(k) is not None for k in _EXPLICIT_SCHEDULE):
        merged.pop("schedule", None)
    merged.update(ns)

    # each source names its seeds either as a list or as count/base; flags win
    default_count = len(_subcommand_defaults(sub).get("seeds", (0,)))
    seeds = None
    for src in (file_vals, ns):
        got = _source_seeds(src, default_count)
        if got is not None:
            seeds = got
    for k in ("seeds", "seed_count", "seed_base"):
        merged.pop(k, None)
    if seeds is not None:
        merged["seeds"] = seeds

    if sub == "sweep-noise" and any(k in merged for k in ("var_min", "var_max", "var_step")):
        if "noise_grid" in ns:
            raise UsageError("give either --noise-grid or --var-min/--var-max/--var-step")
        merged["noise_grid"] = tuple(noise_grid(merged.pop("var_min", 0.1), merged.pop("var_max", 3.0),
                                                merged.pop("var_step", 0.1)))
    for k in ("var_min", "var_max", "var_step"):
        merged.pop(k, None)

    values = _subcommand_defaults(sub)
    if merged.get("schedule"):
        for k in _EXPLICIT_SCHEDULE:
            values.pop(k, None)
    values.update(merged)
    for k in ("batch_set", "noise_grid"):
        if k in values:
            values[k] = tuple(values[k])
    if sub == "sweep-noise" and not values.get("noise_grid"):
        values["noise_grid"] = tuple(noise_grid())
    env = os.environ.get("KLVL_JOBS")
    if env:
        values["jobs"] = int(env)
    elif "jobs" not in values:
        values["jobs"] = default_jobs()
    try:
        config = RunConfig(subcommand=sub, **values)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    _validate(config)
    return config


def _validate(c):
    if c.subcommand in ("run", "stability") and not c.optimizer:
        raise UsageError(f"{c.subcommand} requires --optimizer")
    if c.subcommand != "check-invariants" and not c.seeds:
        raise UsageError("seed list is empty")
    if c.schedule and any(getattr(c, k) is not None for k in _EXPLICIT_SCHEDULE):
        raise UsageError("--schedule cannot be combined with --eta/--beta/--iters")
    if c.subcommand in ("run", "stability") and not c.schedule and None in (c.eta, c.beta, c.iters):
        raise UsageError("give --eta, --beta and --iters, or --schedule")
    if c.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    if c.subcommand == "sweep-levels":
        if not 1 <= c.k_min <= c.k_max:
            raise UsageError("need 1 <= k-min <= k-max")
        if c.k_max > DESK_K_MAX and not c.deep:
            raise UsageError(f"k-max above {DESK_K_MAX} needs --deep")
    if c.problem not in PROBLEMS:
        raise UsageError(f"unknown problem {c.problem!r}")


# ---------------------------------------------------------------------------
# Dispatch


def _build_problem(c, seed):
    """``(problem, train)`` for run and stability."""
    if c.problem == "quadratic":
        if c.levels != 1:
            raise UsageError("the quadratic problem has one level")
        return make_quadratic_problem(c.n, dim=c.dims, noise_var=c.noise_var, seed=seed, lf=c.lf)
    split = 0.6
    total = int(math.ceil(c.n / split))
    if c.problem == "quintic":
        if c.levels != 1:
            raise UsageError("the quintic problem has one level")
        problem, train, _ = make_quintic_problem(total, c.noise_var, split, seed=seed)
    else:
        problem, train, _ = make_klevel_synthetic(c.levels, dims=c.dims, n_per_level=total, noise_var=c.noise_var,
                                                  seed=seed, split=split, lf=c.lf)
    return problem, train


def _schedule(c, train):
    if c.schedule == "convex":
        return schedule_convex(max(train.sizes))
    if c.schedule == "strongly-convex":
        return schedule_strongly_convex(max(train.sizes))
    return Schedule(c.iters, c.eta, c.beta)


def _optimizer_kwargs(c):
    kw = {"max_iters": c.max_iters}
    if c.optimizer != "sgd":
        kw.update(initial_batch=c.initial_batch, lf=c.lf)
    if c.optimizer == "svmr":
        kw["warm_steps"] = c.warm_steps
    return kw


def _cmd_run(c):
    rows, summary = [], []
    for seed in c.seeds:
        problem, train = _build_problem(c, seed)
        sched = _schedule(c, train)
        _, rec = OPTIMIZERS[c.optimizer](problem, train, sched, c.batch, seed, log_every=c.log_every,
                                         var_every=c.log_every, **_optimizer_kwargs(c))
        for r in record_rows(rec):
            rows.append(dict({"seed": seed}, **r))
        last = np.flatnonzero(~np.isnan(rec.train_loss))[-1]
        summary.append({
            "seed": seed, "T": rec.T, "eta": sched.eta, "beta": sched.beta,
            "final_train": rec.train_loss[last], "final_test": rec.test_loss[last],
            "gap": rec.gap[last], "x_norm": rec.x_norm[-1],
        })
    return Report("run", rows, summary)


def _cmd_stability(c):
    problem, train = _build_problem(c, c.seeds[0])
    sched = _schedule(c, train)
    if c.max_iters is not None and c.max_iters < sched.T:
        sched = dataclasses.replace(sched, T=int(c.max_iters))
    # consecutive seeds keep the per-seed streams aligned with coupled_stability
    if list(c.seeds) != list(range(c.seeds[0], c.seeds[0] + len(c.seeds))):
        raise UsageError("stability needs consecutive seeds (use --seed-count/--seed-base)")
    cfg = StabilityConfig(c.optimizer, sched, c.batch, c.level, c.position, num_seeds=len(c.seeds),
                          base_seed=c.seeds[0], initial_batch=c.initial_batch, lf=c.lf)
    est = coupled_stability(problem, train, cfg)
    echo = {"optimizer": c.optimizer, "n": train.sizes[c.level - 1], "level": c.level, "position": c.position,
            "T": sched.T, "eta": sched.eta, "beta": sched.beta, "batch": c.batch}
    rows = [dict(echo, seed=s, distance=d) for s, d in zip(est.seeds, est.distances)]
    summary = [dict(echo, seeds=len(est.seeds), eps_hat=est.eps_hat, std_err=est.std_err)]
    return Report("stability", rows, summary)


def _sweep_overrides(c, base):
    o = {"eta": c.eta, "beta": c.beta, "iters": c.iters, "batch": c.batch, "initial_batch": c.initial_batch,
         "lf": c.lf, "noise_var": c.noise_var, "bound_seeds": c.bound_seeds}
    if "dims" in base:
        o.update(dims=c.dims, n_per_level=int(math.ceil(c.n / base["split"])))
    return o


def _cmd_sweep_levels(c):
    return experiment_level_sweep(range(c.k_min, c.k_max + 1), c.seeds, c.jobs, **_sweep_overrides(c, DEFAULTS))


def _cmd_sweep_initial_batch(c):
    return experiment_initial_batch(c.batch_set, c.seeds, c.jobs, K=c.levels, warm_steps=c.warm_steps,
                                    **_sweep_overrides(c, DEFAULTS))


def _cmd_sweep_noise(c):
    o = _sweep_overrides(c, DEFAULTS)
    o.pop("noise_var")
    return experiment_noise_sweep(c.noise_grid, c.seeds, c.jobs, K=c.levels, **o)


def _cmd_compare(c):
    o = _sweep_overrides(c, QUINTIC_DEFAULTS)
    o["n_points"] = int(math.ceil(c.n / QUINTIC_DEFAULTS["split"]))
    return experiment_sgd_vs_storm(c.seeds, c.jobs, **o)


def _cmd_check(c):
    rows = run_checks()
    failed = sum(not r["passed"] for r in rows)
    summary = [{"checks": len(rows), "passed": len(rows) - failed, "failed": failed}]
    return Report("check-invariants", rows, summary)


COMMANDS = {
    "run": _cmd_run,
    "stability": _cmd_stability,
    "sweep-levels": _cmd_sweep_levels,
    "sweep-initial-batch": _cmd_sweep_initial_batch,
    "sweep-noise": _cmd_sweep_noise,
    "compare-sgd-storm": _cmd_compare,
    "check-invariants": _cmd_check,
}


def _output_dir(c):
    stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S%f")
    path = os.path.join(c.outdir, f"{c.subcommand}-{stamp}")
    suffix = 1
    while os.path.exists(path):
        path = os.path.join(c.outdir, f"{c.subcommand}-{stamp}-{suffix}")
        suffix += 1
    os.makedirs(path)
    return path


def dispatch(c, out=sys.stdout):
    """Run a parsed configuration; returns the exit status."""
    path = _output_dir(c)
    dump_json(os.path.join(path, "config.json"), c.to_json())
    started = time.time()
    status, error, report = 0, None, None
    try:
        report = COMMANDS[c.subcommand](c)
    except UsageError:
        raise
    except (RunError, KLevelError, FloatingPointError) as exc:
        status, error = 1, str(exc)
    if report is not None:
        report.write(path)
        if c.subcommand == "check-invariants" and report.summary[0]["failed"]:
            status = 2
    meta = {
        "subcommand": c.subcommand,
        "started": _dt.datetime.fromtimestamp(started).isoformat(),
        "seconds": round(time.time() - started, 3),
        "exit_status": status,
        "error": error,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    dump_json(os.path.join(path, "metadata.json"), meta)
    if report is not None:
        for row in report.summary:
            print(", ".join(f"{k}={v}" for k, v in row.items()), file=out)
        if c.subcommand == "check-invariants":
            for row in report.rows:
                print(f"{'PASS' if row['passed'] else 'FAIL'} {row['check']}: {row['detail']}", file=out)
    if error:
        print(f"error: {error}", file=sys.stderr)
    print(f"output: {path}", file=out)
    return status


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        config = parse_config(argv)
        return dispatch(config)
    except UsageError as exc:
        print(f"klevel: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
