"""Stability, generalization and variance measurements.

Uniform stability is estimated with coupled trajectories: the optimizer
runs on ``S`` and on a neighbor ``S^{l,k}`` with the same seed, so both
runs consume identical index streams, and the distance between their
last iterates is averaged over seeds.

CSV columns written by the command-line tool (one directory per call,
``rows.csv`` per cell or iteration, ``summary.csv`` per sweep point):

``run``
    rows: seed, t, train_loss, test_loss, x_norm, var_u_1..K, var_v_1..K
    (estimator deviations from the full-batch maps, blank when not sampled);
    summary: seed, T, eta, beta, final_train, final_test, gap, x_norm.
``stability``
    rows: optimizer, n, level, position, T, eta, beta, batch, seed,
    distance; summary: the same echo with seeds, eps_hat, std_err.
``sweep-levels``, ``sweep-initial-batch``, ``sweep-noise``
    rows: sweep key (K, initial_batch or noise_var), seed, K, noise_var,
    eta, beta, iters, batch, initial_batch, lf, warm_steps, final_train,
    final_test, gap, gap_last; summary: sweep key, seeds, mean_gap,
    se_gap, mean_gap_last, se_gap_last, mean_train, mean_test, se_test,
    plus bound and bound_violated when a bound estimate is requested.
``compare-sgd-storm``
    rows: optimizer, seed, eta, beta, iters, batch, noise_var, final_train,
    final_test, gap, gap_last; summary as for sweeps keyed by optimizer;
    curves.csv: optimizer, seed, t, train_loss, test_loss.
``check-invariants``
    rows: check, passed, detail; summary: checks, passed, failed.

``gap`` is test minus train loss at the last iterate and ``gap_last`` its
mean over the last ten iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError, OracleNotConvergedError, RunError
from .optimizers import OPTIMIZERS, Schedule
from .problem import empirical_gradient, empirical_value, neighbor, population_value
from .rng import stream

_EXACT_K = {"storm": 1, "cover": 2}


@dataclass(frozen=True)
class StabilityConfig:
    """What to run and which sample to replace (``level``, ``position`` are 1-based)."""

    optimizer: str
    schedule: Schedule
    batch: int
    level: int
    position: int
    num_seeds: int = 20
    base_seed: int = 0
    initial_batch: int = 1
    lf: Optional[float] = None

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")
        if self.num_seeds < 1:
            raise InvalidInputError("num_seeds must be at least 1")

    @property
    def seeds(self):
        return list(range(self.base_seed, self.base_seed + self.num_seeds))


@dataclass
class StabilityEstimate:
    eps_hat: float
    std_err: float
    distances: np.ndarray
    seeds: list = field(default_factory=list)


def _run_kwargs(config):
    kw = {"log_every": 10 ** 9}
    if config.optimizer != "sgd":
        kw["initial_batch"] = config.initial_batch
        kw["lf"] = config.lf
    return kw


def _check_compatible(problem, optimizer):
    if optimizer in _EXACT_K and problem.K != _EXACT_K[optimizer]:
        raise InvalidInputError(f"{optimizer} needs K = {_EXACT_K[optimizer]}, problem has K = {problem.K}")


def coupled_stability(problem, data, config, replace=neighbor):
    """Estimate ``E_A ||A(S) - A(S^{l,k})||`` on the last iterate.

    For each seed the neighbor is drawn from a stream keyed by
    ``(seed, level, position)``; ``replace(data, k, l, rng)`` builds it.
    """
    _check_compatible(problem, config.optimizer)
    if not 1 <= config.level <= problem.K:
        raise InvalidInputError(f"level {config.level} out of range 1..{problem.K}")
    if not 1 <= config.position <= data.sizes[config.level - 1]:
        raise InvalidInputError(f"position {config.position} out of range 1..{data.sizes[config.level - 1]}")
    run = OPTIMIZERS[config.optimizer]
    kw = _run_kwargs(config)
    dists = []
    for seed in config.seeds:
        other = replace(data, config.level, config.position, stream(seed, "neighbor", config.level, config.position))
        xs = []
        for which, d in (("S", data), ("S'", other)):
            try:
                _, rec = run(problem, d, config.schedule, config.batch, seed, **kw)
            except RunError as exc:
                raise RunError(exc.message, iteration=exc.iteration, seed=seed, trajectory=which) from exc
            xs.append(rec.iterates[-1])
        dists.append(float(np.linalg.norm(xs[0] - xs[1])))
    dists = np.array(dists)
    se = float(dists.std(ddof=1) / math.sqrt(len(dists))) if len(dists) > 1 else 0.0
    return StabilityEstimate(float(dists.mean()), se, dists, config.seeds)


def generalization_gap(problem, train, solution):
    """Population (or held-out) risk minus training risk at ``solution``."""
    return population_value(problem, solution) - empirical_value(problem, train, solution)


def reference_minimizer(problem, train, x_start=None, oracle_iters=100_000, tol=1e-8, step=None):
    """Empirical minimizer by full-batch gradient descent.

    Stops once ``||grad F_S|| <= tol``; raises
    :class:`OracleNotConvergedError` otherwise.
    """
    step = 1.0 / problem.constants.L if step is None else step
    x = np.zeros(problem.input_dim) if x_start is None else problem.check_x(x_start).copy()
    for _ in range(oracle_iters):
        g = empirical_gradient(problem, train, x)
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return x
        x = x - step * g
    gn = float(np.linalg.norm(empirical_gradient(problem, train, x)))
    if gn <= tol:
        return x
    raise OracleNotConvergedError(gn, tol)


def optimization_error(problem, train, solution, oracle_iters=100_000, tol=1e-8, step=None, x_start=None):
    """``F_S(solution) - F_S(x_ref)`` with ``x_ref`` from :func:`reference_minimizer`.

    The reference run starts from ``x_start`` (default: ``solution``).
    """
    start = solution if x_start is None else x_start
    x_ref = reference_minimizer(problem, train, start, oracle_iters, tol, step)
    return empirical_value(problem, train, solution) - empirical_value(problem, train, x_ref)


def level_variance(problem, data, x, k, mc_samples=None, rng=None):
    """Spread of level-``k`` sample values around their mean at the nested input.

    The input is the full-batch chain up to level ``k - 1``. With
    ``mc_samples=None`` the spread is the plug-in variance over ``S_k``;
    otherwise ``mc_samples`` fresh payloads are drawn from the level's
    generator and the unbiased sample variance is returned.
    """
    if not 1 <= k <= problem.K:
        raise InvalidInputError(f"level {k} out of range 1..{problem.K}")
    y = problem.check_x(x)
    for i in range(1, k):
        y, _ = problem.mean_eval(data, i, slice(None), y)
    level = problem.levels[k - 1]
    if mc_samples is None:
        vals, _ = level.evaluate(data.payloads[k - 1], y)
        ddof = 0
    else:
        if mc_samples < 1:
            raise InvalidInputError("mc_samples must be at least 1")
        rng = stream(0, "level-variance", k) if rng is None else rng
        vals, _ = level.evaluate(level.draw(rng, mc_samples), y)
        ddof = 1 if mc_samples > 1 else 0
    return float(np.var(vals, axis=0, ddof=ddof).sum())


def estimate_variance_constants(problem, data, points):
    """Empirical ``(sigma_f, sigma_j)``: the largest per-level spread of
    sample values and Jacobians over the probe ``points``.

    These are estimates of sup-bounds, not the bounds themselves.
    """
    sf = sj = 0.0
    for x in points:
        y = problem.check_x(x)
        for k in range(1, problem.K + 1):
            vals, jacs = problem.evaluate(data, k, slice(None), y)
            dv = vals - vals.mean(axis=0)
            dj = jacs - jacs.mean(axis=0)
            sf = max(sf, float(np.einsum("bi,bi->", dv, dv) / len(vals)))
            sj = max(sj, float(np.einsum("bij,bij->", dj, dj) / len(jacs)))
            y = vals.mean(axis=0)
    return math.sqrt(sf), math.sqrt(sj)


@dataclass(frozen=True)
class BoundInputs:
    """Inputs of the stability-based generalization bound.

    ``eps`` has ``K`` entries, ``var`` and ``n`` have ``K - 1`` (entries
    beyond that are ignored for ``n``).
    """

    lf: float
    K: int
    eps: Sequence[float]
    var: Sequence[float] = ()
    n: Sequence[float] = ()

    def __post_init__(self):
        if self.K < 1:
            raise InvalidInputError("K must be at least 1")
        if len(self.eps) != self.K:
            raise InvalidInputError(f"need {self.K} stability values, got {len(self.eps)}")
        if len(self.var) != self.K - 1 or len(self.n) < self.K - 1:
            raise InvalidInputError(f"need {self.K - 1} variance terms and sample sizes")
        if self.lf < 0 or min(self.eps) < 0 or (self.var and min(self.var) < 0):
            raise InvalidInputError("bound inputs must be non-negative")
        if any(v <= 0 for v in list(self.n)[: self.K - 1]):
            raise InvalidInputError("sample sizes must be positive")


def generalization_bound(inputs):
    """``lf^K eps_K + sum_{k<K} (4 lf^K eps_k + lf sqrt(var_k / n_k))``."""
    lk = inputs.lf ** inputs.K
    head = lk * inputs.eps[-1]
    tail = sum(
        4.0 * lk * inputs.eps[k] + inputs.lf * math.sqrt(inputs.var[k] / inputs.n[k])
        for k in range(inputs.K - 1)
    )
    return head + tail
