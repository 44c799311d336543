"""Driver loops for SGD, STORM, COVER and SVMR.

Each driver takes a problem, a training dataset, a :class:`Schedule`,
a minibatch size and a seed, and returns ``(solution, record)``. All
index draws of a run come from one keyed stream, so a run is a
deterministic function of its arguments.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidInputError, NumericError, RunError
from .estimators import EstimatorChain, cover_update, init_chain, project_ball, storm_update, svmr_step
from .problem import chain_product, empirical_value, nested_means, population_value
from .rng import draw_indices, stream

log = logging.getLogger(__name__)

CONVEX = "convex"
STRONGLY_CONVEX = "strongly_convex"


# ---------------------------------------------------------------------------
# Schedules


@dataclass(frozen=True)
class Schedule:
    """Iteration count, step size and momentum of a run.

    ``a`` and ``b`` record the exponents when ``eta = T^-a`` and
    ``beta = T^-b`` came from a rate prescription.
    """

    T: int
    eta: float
    beta: float
    regime: str = CONVEX
    mu: float = 0.0
    a: Optional[float] = None
    b: Optional[float] = None
    beta_clamped: bool = False

    def __post_init__(self):
        if self.T < 1:
            raise InvalidInputError("T must be at least 1")
        if self.eta < 0:
            raise InvalidInputError("eta must be non-negative")
        if not 0 < self.beta <= 1:
            raise InvalidInputError(f"beta must lie in (0, 1], got {self.beta}")
        if self.regime not in (CONVEX, STRONGLY_CONVEX):
            raise InvalidInputError(f"unknown regime {self.regime!r}")
        if self.regime == CONVEX and self.mu != 0:
            raise InvalidInputError("convex regime requires mu = 0")
        if self.mu < 0:
            raise InvalidInputError("mu must be non-negative")


def _exact_power(base, num, den):
    """``base ** (num / den)`` for integer ``base``, exact when a root exists."""
    root = round(base ** (1.0 / den))
    for r in (root - 1, root, root + 1):
        if r >= 1 and r ** den == base:
            if num >= 0:
                return float(r ** num)
            return 1.0 / float(r ** -num)
    return base ** (num / den)


def _beta_cap(K, lf):
    # min(1 / (8 K sum_i (2 lf^2)^i), 1)
    s = sum((2.0 * lf * lf) ** i for i in range(1, K + 1))
    return min(1.0 / (8.0 * K * s), 1.0)


def _prescribed(n_max, t_num, t_den, e_num, e_den, regime, mu, K, lf):
    if n_max < 1:
        raise InvalidInputError("n_max must be at least 1")
    T = max(1, int(round(_exact_power(int(n_max), t_num, t_den))))
    step = min(_exact_power(T, -e_num, e_den), 1.0)
    beta = step
    clamped = False
    if K is not None and lf is not None:
        cap = _beta_cap(K, lf)
        if beta > cap:
            log.info("beta %.3g clamped to %.3g", beta, cap)
            beta, clamped = cap, True
    return Schedule(T, step, beta, regime, mu, e_num / e_den, e_num / e_den, clamped)


def schedule_convex(n_max, K=None, lf=None):
    """``T = n^{5/2}``, ``eta = beta = T^{-4/5}``.

    When ``K`` and ``lf`` are given, ``beta`` is also capped at
    ``min(1 / (8 K sum_i (2 lf^2)^i), 1)``.
    """
    return _prescribed(n_max, 5, 2, 4, 5, CONVEX, 0.0, K, lf)


def schedule_strongly_convex(n_max, mu=0.0, K=None, lf=None):
    """``T = n^{7/6}``, ``eta = beta = T^{-6/7}``."""
    return _prescribed(n_max, 7, 6, 6, 7, STRONGLY_CONVEX, mu, K, lf)


# ---------------------------------------------------------------------------
# Averaging


@dataclass(frozen=True)
class AveragingMode:
    """How a run's iterates become its output: ``last``, ``uniform`` or
    ``mu_weighted`` with weights ``(1 - mu eta / 2)^(T - t)``."""

    kind: str
    mu: float = 0.0
    eta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("last", "uniform", "mu_weighted"):
            raise InvalidInputError(f"unknown averaging mode {self.kind!r}")
        if self.kind == "mu_weighted" and (self.mu < 0 or self.eta < 0):
            raise InvalidInputError("mu_weighted needs mu >= 0 and eta >= 0")

    @property
    def name(self):
        return self.kind

    @classmethod
    def mu_weighted(cls, mu, eta):
        return cls("mu_weighted", mu, eta)


LAST = AveragingMode("last")
UNIFORM = AveragingMode("uniform")


def _as_mode(mode):
    if isinstance(mode, AveragingMode):
        return mode
    return AveragingMode(str(mode))


def average(iterates, mode=UNIFORM):
    """Combine iterates ``x_1..x_T`` (rows) according to ``mode``."""
    X = np.asarray(iterates, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) == 0:
        raise InvalidInputError("cannot average an empty iterate list")
    mode = _as_mode(mode)
    if mode.kind == "last":
        return X[-1].copy()
    T = len(X)
    if mode.kind == "uniform":
        w = np.ones(T)
    else:
        w = (1.0 - mode.mu * mode.eta / 2.0) ** np.arange(T - 1, -1, -1)
    return (w[:, None] * X).sum(axis=0) / w.sum()


# ---------------------------------------------------------------------------
# Run record


@dataclass
class RunRecord:
    """Per-iteration trace of a run (rows ``t = 1..T``).

    ``iterates`` has ``T + 1`` rows starting with ``x_0``. Deviation
    columns ``var_u``/``var_v`` hold ``NaN`` where not sampled.
    """

    optimizer: str
    t: np.ndarray
    train_loss: np.ndarray
    test_loss: np.ndarray
    x_norm: np.ndarray
    var_u: np.ndarray
    var_v: np.ndarray
    iterates: np.ndarray
    solutions: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def T(self):
        return len(self.t)

    @property
    def gap(self):
        return self.test_loss - self.train_loss

    def same_as(self, other):
        """Bitwise equality of every numeric trace (NaN-aware)."""
        names = ("t", "train_loss", "test_loss", "x_norm", "var_u", "var_v", "iterates")
        return all(
            np.array_equal(getattr(self, n), getattr(other, n), equal_nan=True) for n in names
        ) and self.solutions.keys() == other.solutions.keys() and all(
            np.array_equal(self.solutions[k], other.solutions[k]) for k in self.solutions
        )


class _Recorder:
    def __init__(self, name, problem, data, schedule, T, x0, seed, log_every, var_every, config):
        self.name = name
        self.problem = problem
        self.data = data
        self.T = T
        self.log_every = log_every
        self.var_every = var_every
        K = problem.K
        self.train = np.full(T, np.nan)
        self.test = np.full(T, np.nan)
        self.xnorm = np.empty(T)
        self.var_u = np.full((T, K), np.nan)
        self.var_v = np.full((T, K), np.nan)
        self.iterates = np.empty((T + 1, problem.input_dim))
        self.iterates[0] = x0
        self.seed = seed
        self.has_test = problem.population_oracle is not None or problem.holdout is not None
        self.config = config
        self.current = 0

    def log(self, t, x, u=None, v=None):
        """Record ``x_t`` (``t >= 1``) and optional estimator deviations."""
        if not np.all(np.isfinite(x)):
            raise RunError("non-finite iterate", iteration=t, seed=self.seed)
        self.iterates[t] = x
        self.xnorm[t - 1] = np.linalg.norm(x)
        if t % self.log_every == 0 or t == self.T:
            loss = empirical_value(self.problem, self.data, x)
            if not math.isfinite(loss):
                raise RunError("non-finite training loss", iteration=t, seed=self.seed)
            self.train[t - 1] = loss
            if self.has_test:
                self.test[t - 1] = population_value(self.problem, x)
        if self.var_every and (u is not None or v is not None) and t % self.var_every == 0:
            self._deviations(t, x, u, v)

    def _deviations(self, t, x, u, v):
        # level i is compared with the full-batch map at u^{(i-1)}, u^{(0)} = x_t
        prev = x
        for i in range(len(v)):
            val, jac = self.problem.mean_eval(self.data, i + 1, slice(None), prev)
            self.var_v[t - 1, i] = np.linalg.norm(v[i] - jac)
            if u is None or i >= len(u):
                break
            self.var_u[t - 1, i] = np.linalg.norm(u[i] - val)
            prev = u[i]

    @contextlib.contextmanager
    def guard(self):
        """Re-raise numeric failures as :class:`RunError` with the iteration."""
        try:
            yield
        except (NumericError, FloatingPointError) as exc:
            raise RunError(f"{self.name}: {exc}", iteration=self.current, seed=self.seed) from exc

    def finish(self, modes):
        X = self.iterates[1:]
        solutions = {}
        for m in modes:
            solutions[m.name] = average(X, m)
        return RunRecord(
            optimizer=self.name,
            t=np.arange(1, self.T + 1),
            train_loss=self.train,
            test_loss=self.test,
            x_norm=self.xnorm,
            var_u=self.var_u,
            var_v=self.var_v,
            iterates=self.iterates,
            solutions=solutions,
            config=self.config,
            seed=self.seed,
        )


def _setup(name, problem, data, schedule, batch, seed, averaging, x0, max_iters, log_every, var_every, lf, extra):
    problem.check_dataset(data)
    if batch < 1 or batch > min(data.sizes):
        raise InvalidInputError(f"batch must lie in 1..{min(data.sizes)}, got {batch}")
    if log_every < 1:
        raise InvalidInputError("log_every must be at least 1")
    x = np.zeros(problem.input_dim) if x0 is None else problem.check_x(x0).copy()
    T = schedule.T if max_iters is None else min(schedule.T, int(max_iters))
    if averaging is None:
        modes = [LAST]
    elif isinstance(averaging, (str, AveragingMode)):
        modes = [_as_mode(averaging)]
    else:
        modes = [_as_mode(m) for m in averaging]
    lf = problem.constants.lf if lf is None else float(lf)
    config = {
        "optimizer": name,
        "T": T,
        "T_prescribed": schedule.T,
        "capped": T < schedule.T,
        "eta": schedule.eta,
        "beta": schedule.beta,
        "beta_is_one": schedule.beta == 1.0,
        "regime": schedule.regime,
        "mu": schedule.mu,
        "batch": batch,
        "seed": seed,
        "lf": lf,
        "averaging": [m.name for m in modes],
    }
    config.update(extra)
    rec = _Recorder(name, problem, data, schedule, T, x, seed, log_every, var_every, config)
    return x, T, modes, lf, rec, _Streams(seed)


class _Streams:
    """Separate index streams for initialization, warm-up and main steps.

    Runs that differ only in their initial batch therefore share every
    main-phase draw.
    """

    def __init__(self, seed):
        self.init = stream(seed, "init-indices")
        self.warm = stream(seed, "warm-indices")
        self.main = stream(seed, "indices")

    def step(self, t, warm_steps=0):
        return self.warm if t < warm_steps else self.main


def _domain(problem, x):
    r = problem.constants.domain_radius
    return x if r is None else project_ball(x, r)


def run_sgd(problem, data, schedule, batch, seed, averaging=None, *, x0=None, max_iters=None,
            log_every=1, var_every=0, on_step=None):
    """Minibatch SGD through fresh samples at every level.

    For ``K > 1`` the gradient plugs nested minibatch means into the
    chain rule and is biased by construction.
    """
    x, T, modes, _, rec, rng = _setup("sgd", problem, data, schedule, batch, seed, averaging, x0,
                                      max_iters, log_every, var_every, None, {})
    eta = schedule.eta
    with rec.guard():
        for t in range(T):
            rec.current = t + 1
            y, jacs = x, []
            for k in range(1, problem.K + 1):
                idx = draw_indices(rng.main, data.sizes[k - 1], batch)
                y, J = problem.mean_eval(data, k, idx, y)
                jacs.append(J)
            x = _domain(problem, x - eta * chain_product(jacs))
            rec.log(t + 1, x)
            if on_step is not None:
                on_step(t + 1, x, None)
    record = rec.finish(modes)
    return record.solutions[modes[0].name], record


def run_storm(problem, data, schedule, batch, seed, averaging=None, *, x0=None, initial_batch=1,
              lf=None, max_iters=None, log_every=1, var_every=0, on_step=None):
    """STORM on a one-level problem."""
    if problem.K != 1:
        raise InvalidInputError(f"STORM needs K = 1, problem has K = {problem.K}")
    x, T, modes, lf, rec, rng = _setup("storm", problem, data, schedule, batch, seed, averaging, x0,
                                       max_iters, log_every, var_every, lf, {"initial_batch": initial_batch})
    if not 1 <= initial_batch <= data.sizes[0]:
        raise InvalidInputError("initial_batch out of range")
    n, eta, beta = data.sizes[0], schedule.eta, schedule.beta
    idx = draw_indices(rng.init, n, initial_batch)
    _, J = problem.mean_eval(data, 1, idx, x)
    v = project_ball(J, lf)
    with rec.guard():
        for t in range(T):
            rec.current = t + 1
            x_new = _domain(problem, x - eta * v[0])
            idx = draw_indices(rng.main, n, batch)
            _, J_new = problem.mean_eval(data, 1, idx, x_new)
            _, J_old = problem.mean_eval(data, 1, idx, x)
            v = storm_update(v, J_new, J_old, beta, lf)
            x = x_new
            rec.log(t + 1, x, None, [v])
            if on_step is not None:
                on_step(t + 1, x, v)
    record = rec.finish(modes)
    return record.solutions[modes[0].name], record


def run_cover(problem, data, schedule, batch, seed, averaging=None, *, x0=None, initial_batch=1,
              lf=None, max_iters=None, log_every=1, var_every=0, on_step=None):
    """COVER on a two-level problem ``f(g(x))``.

    ``u``/``v`` track the inner value and Jacobian; the outer gradient is
    a fresh minibatch every step.
    """
    if problem.K != 2:
        raise InvalidInputError(f"COVER needs K = 2, problem has K = {problem.K}")
    x, T, modes, lf, rec, rng = _setup("cover", problem, data, schedule, batch, seed, averaging, x0,
                                       max_iters, log_every, var_every, lf, {"initial_batch": initial_batch})
    m, n = data.sizes
    if not 1 <= initial_batch <= m:
        raise InvalidInputError("initial_batch out of range")
    eta, beta = schedule.eta, schedule.beta
    idx = draw_indices(rng.init, m, initial_batch)
    u, J = problem.mean_eval(data, 1, idx, x)
    v = project_ball(J, lf)
    with rec.guard():
        for t in range(T):
            rec.current = t + 1
            idx_out = draw_indices(rng.main, n, batch)
            _, outer = problem.mean_eval(data, 2, idx_out, u)
            x_new = _domain(problem, x - eta * (outer @ v)[0])
            idx = draw_indices(rng.main, m, batch)
            g_new, J_new = problem.mean_eval(data, 1, idx, x_new)
            g_old, J_old = problem.mean_eval(data, 1, idx, x)
            u, v = cover_update(u, v, g_new, g_old, J_new, J_old, beta, lf)
            x = x_new
            rec.log(t + 1, x, [u], [v])
            if on_step is not None:
                on_step(t + 1, x, (u, v))
    record = rec.finish(modes)
    return record.solutions[modes[0].name], record


def run_svmr(problem, data, schedule, batch, seed, averaging=None, *, initial_batch=1, warm_steps=0,
             x0=None, lf=None, max_iters=None, log_every=1, var_every=0, on_step=None):
    """SVMR on a K-level problem.

    The first ``warm_steps`` estimator updates use ``initial_batch``
    instead of ``batch``; ``init_chain`` always uses ``initial_batch``.
    """
    x, T, modes, lf, rec, rng = _setup("svmr", problem, data, schedule, batch, seed, averaging, x0,
                                       max_iters, log_every, var_every, lf,
                                       {"initial_batch": initial_batch, "warm_steps": warm_steps})
    if not 1 <= initial_batch <= min(data.sizes):
        raise InvalidInputError("initial_batch out of range")
    eta, beta = schedule.eta, schedule.beta
    chain = init_chain(problem, data, x, initial_batch, lf, rng.init)
    with rec.guard():
        for t in range(T):
            rec.current = t + 1
            x_new = _domain(problem, x - eta * chain.direction())
            b = initial_batch if t < warm_steps else batch
            chain = svmr_step(chain, x_new, x, problem, data, b, beta, rng.step(t, warm_steps))
            x = x_new
            rec.log(t + 1, x, chain.u, chain.v)
            if on_step is not None:
                on_step(t + 1, x, chain)
    record = rec.finish(modes)
    return record.solutions[modes[0].name], record


OPTIMIZERS = {"sgd": run_sgd, "storm": run_storm, "cover": run_cover, "svmr": run_svmr}


def full_gradient_descent(problem, data, eta, T, x0=None, lf=None):
    """Projected full-batch gradient descent (clipped gradient steps).

    Returns the iterates ``x_0..x_T``; used as a reference trajectory.
    """
    x = np.zeros(problem.input_dim) if x0 is None else problem.check_x(x0).copy()
    out = [x]
    for _ in range(T):
        g = empirical_gradient_clipped(problem, data, x, lf)
        x = _domain(problem, x - eta * g)
        out.append(x)
    return np.array(out)


def empirical_gradient_clipped(problem, data, x, lf=None):
    _, jacs = nested_means(problem, data, x)
    g = chain_product(jacs)
    return g if lf is None else project_ball(g, lf)
