"""K-level compositional objectives, their datasets and generators.

A problem is an ordered chain of levels. Level ``k`` maps
``R^{d_{k-1}} -> R^{d_k}`` and is indexed by a sample payload; the last
level returns a scalar loss. The empirical risk is the nested chain of
full-batch means,

    y_0 = x,   y_k = mean_j f_k(payload_kj, y_{k-1}),   F_S(x) = y_K.

Every level evaluates a whole minibatch at once: ``evaluate(rows, y)``
returns values of shape ``(b, d_k)`` and Jacobians of shape
``(b, d_k, d_{k-1})``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, InvalidInputError, NumericError
from .rng import stream


# ---------------------------------------------------------------------------
# Levels


class Level:
    """Base class for a sampled level map.

    Subclasses set ``in_dim``, ``out_dim`` and ``payload_width`` and
    implement :meth:`evaluate` and :meth:`draw`.
    """

    in_dim: int
    out_dim: int
    payload_width: int
    #: Lipschitz bound of every sampled map, or None when unbounded.
    lipschitz: Optional[float] = None
    #: Lipschitz bound of every sampled Jacobian, or None when unknown.
    smoothness: Optional[float] = None

    def evaluate(self, rows, y):
        raise NotImplementedError

    def draw(self, rng, size):
        raise NotImplementedError

    def mean_map(self, y):
        """Population mean of the level at ``y`` as ``(value, jacobian)``.

        Only levels with a closed form implement this.
        """
        raise NotImplementedError


class CallableLevel(Level):
    """Level defined by a per-sample Python function.

    ``fn(row, y)`` returns ``(value, jacobian)`` for one payload row.
    Convenient for small hand-written problems; not vectorized.
    """

    def __init__(self, in_dim, out_dim, fn, sampler=None, payload_width=1):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.payload_width = int(payload_width)
        self._fn = fn
        self._sampler = sampler

    def evaluate(self, rows, y):
        vals = np.empty((len(rows), self.out_dim))
        jacs = np.empty((len(rows), self.out_dim, self.in_dim))
        for i, row in enumerate(rows):
            v, j = self._fn(row, y)
            vals[i] = np.reshape(v, self.out_dim)
            jacs[i] = np.reshape(j, (self.out_dim, self.in_dim))
        return vals, jacs

    def draw(self, rng, size):
        if self._sampler is None:
            raise ConfigurationError("this level has no sampler; neighbor replacement is unavailable")
        return np.reshape(self._sampler(rng, size), (size, self.payload_width))


class SquaredDistanceLevel(Level):
    """Scalar loss ``scale * ||x - nu||^2`` with ``nu ~ N(center, noise_var I)``.

    The payload row is ``nu``. With ``scale=0.5`` this is the standard
    strongly convex quadratic whose per-sample gradient is ``x - nu``.
    """

    def __init__(self, dim, center=None, noise_var=1.0, scale=0.5):
        self.in_dim = int(dim)
        self.out_dim = 1
        self.payload_width = int(dim)
        self.center = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
        self.noise_var = float(noise_var)
        self.scale = float(scale)
        self.smoothness = 2.0 * self.scale

    def evaluate(self, rows, y):
        diff = y[None, :] - rows
        vals = self.scale * np.einsum("bi,bi->b", diff, diff)[:, None]
        jacs = (2.0 * self.scale * diff)[:, None, :]
        return vals, jacs

    def draw(self, rng, size):
        return self.center + math.sqrt(self.noise_var) * rng.standard_normal((size, self.in_dim))

    def mean_map(self, y):
        diff = y - self.center
        value = self.scale * (diff @ diff + self.in_dim * self.noise_var)
        return np.array([value]), (2.0 * self.scale * diff)[None, :]


class PolynomialRegressionLevel(Level):
    """Squared error of a polynomial model at one noisy data point.

    The decision variable holds the ``degree + 1`` coefficients (constant
    term first). A payload row is ``(t, y)`` with ``t ~ U[t_low, t_high]``
    and ``y = p_true(t) + N(0, noise_var)``. The per-sample loss is
    ``(phi(t) . x - y)^2`` with ``phi(t) = (1, t, ..., t^degree)``.
    """

    def __init__(self, true_coefs, noise_var=3.0, t_range=(-1.0, 1.0)):
        self.true_coefs = np.asarray(true_coefs, dtype=float)
        self.degree = len(self.true_coefs) - 1
        self.in_dim = len(self.true_coefs)
        self.out_dim = 1
        self.payload_width = 2
        self.noise_var = float(noise_var)
        self.t_range = tuple(t_range)
        tmax = max(abs(t_range[0]), abs(t_range[1]))
        # |phi(t)|^2 bounds the per-sample Hessian 2 phi phi^T
        self.smoothness = 2.0 * sum(tmax ** (2 * p) for p in range(self.degree + 1))

    def features(self, t):
        return np.power.outer(np.asarray(t, dtype=float), np.arange(self.degree + 1))

    def evaluate(self, rows, y):
        phi = self.features(rows[:, 0])
        resid = phi @ y - rows[:, 1]
        return (resid ** 2)[:, None], (2.0 * resid[:, None] * phi)[:, None, :]

    def draw(self, rng, size):
        t = rng.uniform(self.t_range[0], self.t_range[1], size)
        y = self.features(t) @ self.true_coefs + math.sqrt(self.noise_var) * rng.standard_normal(size)
        return np.column_stack([t, y])


class TanhLevel(Level):
    """Affine-plus-tanh map with additive Gaussian value noise.

    ``f_nu(y) = A y + gamma * tanh(A y) + b + nu``, ``nu ~ N(0, noise_var I)``.
    The Jacobian ``(I + gamma diag(sech^2(A y))) A`` does not depend on
    the sample, so the Lipschitz constant is ``(1 + gamma) ||A||_2``.
    """

    def __init__(self, A, b=None, gamma=0.25, noise_var=0.0):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.out_dim, self.in_dim = self.A.shape
        self.payload_width = self.out_dim
        self.b = np.zeros(self.out_dim) if b is None else np.asarray(b, dtype=float)
        self.gamma = float(gamma)
        self.noise_var = float(noise_var)
        norm = np.linalg.norm(self.A, 2)
        self.lipschitz = (1.0 + abs(self.gamma)) * norm
        # max |d/dz sech^2 z| = 4 / (3 sqrt 3)
        self.smoothness = abs(self.gamma) * norm ** 2 * 4.0 / (3.0 * math.sqrt(3.0))

    def _base(self, y):
        z = self.A @ y
        th = np.tanh(z)
        value = z + self.gamma * th + self.b
        jac = (1.0 + self.gamma * (1.0 - th ** 2))[:, None] * self.A
        return value, jac

    def evaluate(self, rows, y):
        value, jac = self._base(y)
        vals = value[None, :] + rows
        jacs = np.broadcast_to(jac, (len(rows),) + jac.shape)
        return vals, jacs

    def draw(self, rng, size):
        return math.sqrt(self.noise_var) * rng.standard_normal((size, self.out_dim))

    def mean_map(self, y):
        return self._base(y)


class TargetLossLevel(Level):
    """Scalar fitting loss ``0.5 ||y - c||^2 - <nu, y - c>``.

    This is the squared distance to a noisy target ``c + nu`` with the
    ``y``-independent ``0.5 ||nu||^2`` dropped, so its sample mean differs
    from the population loss ``0.5 ||y - c||^2`` only through a term that
    depends on ``y``.
    """

    def __init__(self, target, noise_var=0.0):
        self.target = np.atleast_1d(np.asarray(target, dtype=float))
        self.in_dim = len(self.target)
        self.out_dim = 1
        self.payload_width = self.in_dim
        self.noise_var = float(noise_var)
        self.smoothness = 1.0

    def evaluate(self, rows, y):
        d = y - self.target
        vals = (0.5 * (d @ d) - rows @ d)[:, None]
        jacs = (d[None, :] - rows)[:, None, :]
        return vals, jacs

    def draw(self, rng, size):
        return math.sqrt(self.noise_var) * rng.standard_normal((size, self.in_dim))

    def mean_map(self, y):
        d = y - self.target
        return np.array([0.5 * (d @ d)]), d[None, :]


# ---------------------------------------------------------------------------
# Data containers


@dataclass(frozen=True)
class ProblemConstants:
    """Constants describing a problem.

    ``lf`` doubles as the default projection radius of the Jacobian
    estimators. ``lg``, ``cf``, ``sigma_g`` and ``sigma_g_prime`` are only
    meaningful for two-level problems.
    """

    lf: float
    L: float
    mu: float = 0.0
    sigma_f: float = 0.0
    sigma_j: float = 0.0
    domain_radius: Optional[float] = None
    d_x: Optional[float] = None
    lg: Optional[float] = None
    cf: Optional[float] = None
    sigma_g: Optional[float] = None
    sigma_g_prime: Optional[float] = None

    def __post_init__(self):
        if not self.lf > 0 or not self.L > 0:
            raise InvalidInputError(f"need lf > 0 and L > 0, got lf={self.lf}, L={self.L}")
        if self.mu < 0 or self.sigma_f < 0 or self.sigma_j < 0:
            raise InvalidInputError("mu, sigma_f and sigma_j must be non-negative")
        if self.domain_radius is not None and not self.domain_radius > 0:
            raise InvalidInputError("domain_radius must be positive when given")


def _freeze(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Per-level sample payloads.

    ``payloads[k-1]`` has shape ``(n_k, payload_width_k)``; ``draws[k-1]``
    redraws rows i.i.d. from the generating distribution.
    """

    payloads: tuple
    draws: tuple
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "payloads", tuple(_freeze(p) for p in self.payloads))
        object.__setattr__(self, "draws", tuple(self.draws))
        if len(self.payloads) != len(self.draws):
            raise InvalidInputError("payloads and draws must have one entry per level")

    @property
    def K(self):
        return len(self.payloads)

    @property
    def sizes(self):
        return tuple(p.shape[0] for p in self.payloads)

    def level(self, k):
        return self.payloads[k - 1]

    def equals(self, other):
        """Bitwise payload equality."""
        return self.sizes == other.sizes and all(
            np.array_equal(a, b) for a, b in zip(self.payloads, other.payloads)
        )


def draw_dataset(levels, sizes, seed, purpose="data"):
    """Draw a dataset for ``levels`` with ``sizes[k-1]`` rows at level ``k``."""
    payloads = [lvl.draw(stream(seed, purpose, k), n) for k, (lvl, n) in enumerate(zip(levels, sizes), start=1)]
    return Dataset(tuple(payloads), tuple(lvl.draw for lvl in levels), seed)


@dataclass(frozen=True, eq=False)
class CompositionalProblem:
    """``F = f_K o ... o f_1`` with per-level sampled maps.

    ``population_oracle`` maps ``x`` to the exact population risk. When it
    is absent, ``holdout`` (a test dataset) stands in for the population.
    """

    levels: tuple
    constants: ProblemConstants
    population_oracle: Optional[Callable] = None
    holdout: Optional[Dataset] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise InvalidInputError("a problem needs at least one level")
        for k in range(1, len(self.levels)):
            if self.levels[k - 1].out_dim != self.levels[k].in_dim:
                raise InvalidInputError(
                    f"level {k} outputs {self.levels[k - 1].out_dim} dims "
                    f"but level {k + 1} expects {self.levels[k].in_dim}"
                )
        if self.levels[-1].out_dim != 1:
            raise InvalidInputError("the last level must return a scalar")
        if self.holdout is not None:
            self.check_dataset(self.holdout)

    @property
    def K(self):
        return len(self.levels)

    @property
    def dims(self):
        return (self.levels[0].in_dim,) + tuple(lvl.out_dim for lvl in self.levels)

    @property
    def input_dim(self):
        return self.levels[0].in_dim

    def check_dataset(self, data):
        if data.K != self.K:
            raise InvalidInputError(f"dataset has {data.K} levels, problem has {self.K}")
        for k, (lvl, p) in enumerate(zip(self.levels, data.payloads), start=1):
            if p.ndim != 2 or p.shape[1] != lvl.payload_width or p.shape[0] < 1:
                raise InvalidInputError(f"level {k} payload has shape {p.shape}")

    def check_x(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.input_dim,):
            raise InvalidInputError(f"x has shape {x.shape}, expected ({self.input_dim},)")
        return x

    def evaluate(self, data, k, idx, y):
        """Per-sample values and Jacobians of level ``k`` at ``y``."""
        return self.levels[k - 1].evaluate(data.payloads[k - 1][idx], y)

    def mean_eval(self, data, k, idx, y):
        """Minibatch mean value and Jacobian of level ``k`` at ``y``."""
        vals, jacs = self.evaluate(data, k, idx, y)
        return vals.mean(axis=0), jacs.mean(axis=0)

    def with_holdout(self, holdout):
        return dataclasses.replace(self, holdout=holdout)


# ---------------------------------------------------------------------------
# Operations


def _check_finite(arr, k):
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite intermediate value", level=k)


def nested_means(problem, data, x):
    """Full-batch chain at ``x``.

    Returns ``(ys, jacs)`` where ``ys[k]`` is ``y_k`` (``ys[0] = x``) and
    ``jacs[k-1]`` is the mean level-``k`` Jacobian at ``y_{k-1}``.
    """
    problem.check_dataset(data)
    y = problem.check_x(x)
    ys, jacs = [y], []
    for k in range(1, problem.K + 1):
        vals, js = problem.evaluate(data, k, slice(None), y)
        y = vals.mean(axis=0)
        jm = js.mean(axis=0)
        _check_finite(y, k)
        _check_finite(jm, k)
        ys.append(y)
        jacs.append(jm)
    return ys, jacs


def chain_product(jacobians):
    """Compose Jacobians ``J_K ... J_1`` into a ``d_0`` gradient vector.

    ``jacobians[0]`` is the first level. The last one must have one row.
    """
    g = jacobians[-1][0]
    for J in reversed(jacobians[:-1]):
        g = g @ J
    return g


def empirical_value(problem, data, x):
    """Nested full-batch empirical risk ``F_S(x)``."""
    ys, _ = nested_means(problem, data, x)
    return float(ys[-1][0])


def empirical_gradient(problem, data, x):
    """Chain-rule gradient of ``F_S`` through the per-level mean Jacobians."""
    _, jacs = nested_means(problem, data, x)
    return chain_product(jacs)


def population_value(problem, x):
    """Population risk, or the held-out surrogate when no oracle exists."""
    if problem.population_oracle is not None:
        return float(problem.population_oracle(problem.check_x(x)))
    if problem.holdout is not None:
        return empirical_value(problem, problem.holdout, x)
    raise ConfigurationError("problem has neither a population oracle nor a held-out dataset")


def analytic_population(levels):
    """Population oracle built from the levels' closed-form mean maps."""

    def oracle(x):
        y = np.asarray(x, dtype=float)
        for lvl in levels:
            y, _ = lvl.mean_map(y)
        return float(y[0])

    return oracle


def neighbor(data, k, l, rng):
    """Copy of ``data`` with sample ``l`` of level ``k`` redrawn (both 1-based)."""
    if not 1 <= k <= data.K:
        raise InvalidInputError(f"level {k} out of range 1..{data.K}")
    n_k = data.sizes[k - 1]
    if not 1 <= l <= n_k:
        raise InvalidInputError(f"position {l} out of range 1..{n_k}")
    rows = np.array(data.payloads[k - 1])
    rows[l - 1] = np.reshape(data.draws[k - 1](rng, 1), rows.shape[1])
    payloads = list(data.payloads)
    payloads[k - 1] = rows
    return Dataset(tuple(payloads), data.draws, data.seed)


def finite_difference_gradient(problem, data, x, h=1e-5):
    """Central-difference gradient of ``F_S``; independent of the chain rule."""
    if not h > 0:
        raise InvalidInputError("step h must be positive")
    x = problem.check_x(x)
    grad = np.empty_like(x)
    for i in range(len(x)):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (empirical_value(problem, data, xp) - empirical_value(problem, data, xm)) / (2 * h)
    if not np.all(np.isfinite(grad)):
        raise NumericError("finite-difference gradient is not finite")
    return grad


# ---------------------------------------------------------------------------
# Generators

#: Coefficients (constant term first) of the target quintic.
QUINTIC_COEFS = (0.5, -1.0, -2.0, 1.5, 1.0, -0.8)


def _split_dataset(levels, n_points, split, seed):
    n_train = int(math.floor(split * n_points))
    train_p, test_p = [], []
    for k, lvl in enumerate(levels, start=1):
        rows = lvl.draw(stream(seed, "data", k), n_points)
        train_p.append(rows[:n_train])
        test_p.append(rows[n_train:])
    draws = tuple(lvl.draw for lvl in levels)
    return Dataset(tuple(train_p), draws, seed), Dataset(tuple(test_p), draws, seed)


def make_quintic_problem(n_points=2000, noise_var=3.0, split=0.6, seed=0, t_range=(-2.0, 2.0), coefs=QUINTIC_COEFS):
    """One-level quintic regression with Gaussian label noise.

    Returns ``(problem, train, test)``; ``problem.holdout`` is ``test``.
    """
    if n_points < 2:
        raise InvalidInputError("need at least two points")
    if not 0 < split < 1:
        raise InvalidInputError("split must lie in (0, 1)")
    if noise_var < 0:
        raise InvalidInputError("noise_var must be non-negative")
    n_train = int(math.floor(split * n_points))
    if n_train < 1 or n_train == n_points:
        raise InvalidInputError("split leaves an empty partition")
    level = PolynomialRegressionLevel(coefs, noise_var=noise_var, t_range=t_range)
    train, test = _split_dataset([level], n_points, split, seed)
    # the squared loss is not globally Lipschitz; lf here is the projection radius
    constants = ProblemConstants(lf=50.0, L=level.smoothness)
    problem = CompositionalProblem((level,), constants, holdout=test, info={"true_coefs": level.true_coefs})
    return problem, train, test


def make_quadratic_problem(n, dim=5, noise_var=1.0, seed=0, center=None, lf=50.0):
    """Strongly convex one-level problem ``0.5 ||x - nu||^2``.

    ``nu ~ N(center, noise_var I)`` with ``n`` training samples; the
    population risk is available in closed form. The empirical minimizer
    is the sample mean of ``nu``. Returns ``(problem, train)``.
    """
    if n < 1 or dim < 1:
        raise InvalidInputError("need n >= 1 and dim >= 1")
    if noise_var < 0:
        raise InvalidInputError("noise_var must be non-negative")
    level = SquaredDistanceLevel(dim, center=center, noise_var=noise_var)
    train = draw_dataset([level], [n], seed)
    constants = ProblemConstants(
        lf=lf, L=1.0, mu=1.0, sigma_j=math.sqrt(noise_var * dim),
    )
    problem = CompositionalProblem((level,), constants, population_oracle=analytic_population([level]))
    return problem, train


def _orthogonal(rng, rows, cols):
    m = rng.standard_normal((max(rows, cols), max(rows, cols)))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    return q[:rows, :cols]


def make_klevel_synthetic(
    K,
    dims=2,
    n_per_level=1000,
    noise_var=3.0,
    seed=0,
    split=0.6,
    gamma=0.1,
    base_seed=0,
    lf=50.0,
):
    """Random K-level problem with affine-plus-tanh inner levels.

    ``dims`` is either an int ``d`` (meaning ``d_0 = ... = d_{K-1} = d``)
    or the full list ``[d_0, ..., d_K]`` with ``d_K = 1``. Levels
    ``1..K-1`` are :class:`TanhLevel` maps with near-isometric weights,
    level ``K`` is a :class:`TargetLossLevel` whose target is the
    noise-free image of a hidden point ``x_true``. Every level draws
    ``n_per_level`` samples and splits them ``split`` / ``1 - split`` into
    train and test.

    The base maps depend only on ``base_seed``; ``seed`` controls the
    noise. Returns ``(problem, train, test)``.
    """
    if K < 1:
        raise InvalidInputError("K must be at least 1")
    if isinstance(dims, (int, np.integer)):
        dims = [int(dims)] * K + [1]
    dims = [int(d) for d in dims]
    if len(dims) != K + 1 or dims[-1] != 1 or min(dims) < 1:
        raise InvalidInputError(f"dims must list K+1={K + 1} positive sizes ending in 1, got {dims}")
    if noise_var < 0:
        raise InvalidInputError("noise_var must be non-negative")
    if n_per_level < 2 or not 0 < split < 1:
        raise InvalidInputError("need n_per_level >= 2 and split in (0, 1)")

    levels = []
    for k in range(1, K):
        base = stream(base_seed, "structure", k)
        # singular values of the Jacobian stay within [1, 1 + gamma] / (1 + gamma / 2)
        A = _orthogonal(base, dims[k], dims[k - 1]) / (1.0 + gamma / 2.0)
        b = 0.1 * base.standard_normal(dims[k])
        levels.append(TanhLevel(A, b, gamma=gamma, noise_var=noise_var))
    x_true = stream(base_seed, "x_true", dims[0]).standard_normal(dims[0])
    target = x_true
    for lvl in levels:
        target, _ = lvl.mean_map(target)
    levels.append(TargetLossLevel(target, noise_var=noise_var))

    train, test = _split_dataset(levels, n_per_level, split, seed)
    # additive N(0, s I_d) noise: E||nu - mean||^2 = s d for values; the only
    # sample-dependent Jacobian is the final level's (y - c - nu)
    constants = ProblemConstants(
        lf=lf,
        L=_composite_smoothness(levels),
        sigma_f=math.sqrt(noise_var * max(dims[1:-1] + [1])),
        sigma_j=math.sqrt(noise_var * dims[-2]),
        d_x=float(x_true @ x_true),
    )
    info = {"x_true": x_true, "inner_lipschitz": float(np.prod([lvl.lipschitz for lvl in levels[:-1]]))}
    problem = CompositionalProblem(tuple(levels), constants, holdout=test, info=info)
    return problem, train, test


def _composite_smoothness(levels):
    """Bound on the gradient-Lipschitz constant of a scalar composition.

    Uses ``sum_k M_k prod_{j<k} L_j^2 prod_{j>k} G_j`` where ``L_j`` is the
    value-Lipschitz constant, ``M_k`` the Jacobian-Lipschitz constant and
    ``G_j`` bounds the Jacobian norm (equal to ``L_j`` for inner levels and
    1 for the final fitting loss near its target).
    """
    lips = [lvl.lipschitz if lvl.lipschitz is not None else 1.0 for lvl in levels]
    total = 0.0
    for k, lvl in enumerate(levels):
        m = lvl.smoothness or 0.0
        before = float(np.prod([l ** 2 for l in lips[:k]])) if k else 1.0
        after = float(np.prod(lips[k + 1:])) if k + 1 < len(lips) else 1.0
        total += m * before * after
    return max(total, 1e-12)
