"""Recursive-momentum estimators and the norm-ball projection.

All updates are pure: they take arrays (or an :class:`EstimatorChain`)
and return new ones. Jacobian estimators are clipped to the Frobenius
ball of radius ``lf`` after every update; value estimators are not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericError
from .rng import draw_indices


def project_ball(M, radius):
    """Scale ``M`` onto the Frobenius ball of the given radius if outside it."""
    if not radius > 0:
        raise InvalidInputError("radius must be positive")
    M = np.asarray(M, dtype=float)
    norm = np.linalg.norm(M)
    if not np.isfinite(norm):
        raise NumericError("cannot project a non-finite array")
    if norm <= radius:
        return M
    out = M * (radius / norm)
    # rounding can leave the rescaled norm a few ulps above the radius
    while np.linalg.norm(out) > radius:
        out = out * (1.0 - 2.0 ** -52)
    return out


def _same_shape(*arrays):
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise InvalidInputError(f"shape mismatch: {shape} vs {np.shape(a)}")


def _check_beta(beta):
    if not 0 < beta <= 1:
        raise InvalidInputError(f"beta must lie in (0, 1], got {beta}")


def storm_update(v, grad_new, grad_old, beta, lf):
    """``Pi_lf[grad_new + (1 - beta) (v - grad_old)]``.

    ``grad_new`` and ``grad_old`` must come from the same sample(s),
    evaluated at the new and the previous iterate.
    """
    _check_beta(beta)
    v, grad_new, grad_old = (np.asarray(a, dtype=float) for a in (v, grad_new, grad_old))
    _same_shape(v, grad_new, grad_old)
    return project_ball(grad_new + (1.0 - beta) * (v - grad_old), lf)


def momentum_value_update(u, val_new, val_old, beta):
    """Unprojected value estimator ``val_new + (1 - beta) (u - val_old)``."""
    _check_beta(beta)
    u, val_new, val_old = (np.asarray(a, dtype=float) for a in (u, val_new, val_old))
    _same_shape(u, val_new, val_old)
    return val_new + (1.0 - beta) * (u - val_old)


def cover_update(u, v, g_new, g_old, J_new, J_old, beta, lf):
    """One COVER estimator step; returns ``(u_next, v_next)``."""
    u_next = momentum_value_update(u, g_new, g_old, beta)
    v_next = storm_update(v, J_new, J_old, beta, lf)
    return u_next, v_next


@dataclass(frozen=True, eq=False)
class EstimatorChain:
    """Per-level estimators ``u[i-1]`` (shape ``d_i``) and ``v[i-1]``
    (shape ``d_i x d_{i-1}``) for ``i = 1..K``."""

    u: tuple
    v: tuple
    lf: float

    @property
    def K(self):
        return len(self.v)

    def direction(self):
        """``(v_K ... v_1)^T`` as a ``d_0`` vector."""
        g = self.v[-1][0]
        for J in reversed(self.v[:-1]):
            g = g @ J
        return g


def _check_chain(chain, problem):
    if chain.K != problem.K or len(chain.u) != problem.K:
        raise InvalidInputError(f"chain has {chain.K} levels, problem has {problem.K}")
    for i, lvl in enumerate(problem.levels):
        if chain.u[i].shape != (lvl.out_dim,) or chain.v[i].shape != (lvl.out_dim, lvl.in_dim):
            raise InvalidInputError(f"estimator shapes do not match level {i + 1}")


def _finite(arr, level):
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite estimator", level=level)


def svmr_step(chain, x_new, x_old, problem, data, batch, beta, rng):
    """Advance every level's estimators from ``x_old`` to ``x_new``.

    Level ``i`` draws one minibatch and evaluates it at the freshly
    updated ``u_{t+1}^{(i-1)}`` and the retained ``u_t^{(i-1)}``.
    """
    _check_beta(beta)
    _check_chain(chain, problem)
    x_new = problem.check_x(x_new)
    x_old = problem.check_x(x_old)
    prev_new, prev_old = x_new, x_old
    us, vs = [], []
    for i in range(1, problem.K + 1):
        idx = draw_indices(rng, data.sizes[i - 1], batch)
        f_new, J_new = problem.mean_eval(data, i, idx, prev_new)
        f_old, J_old = problem.mean_eval(data, i, idx, prev_old)
        u = f_new + (1.0 - beta) * (chain.u[i - 1] - f_old)
        v = project_ball(J_new + (1.0 - beta) * (chain.v[i - 1] - J_old), chain.lf)
        _finite(u, i)
        _finite(v, i)
        us.append(u)
        vs.append(v)
        prev_new, prev_old = u, chain.u[i - 1]
    return EstimatorChain(tuple(us), tuple(vs), chain.lf)


def init_chain(problem, data, x0, initial_batch, lf, rng):
    """Minibatch estimates of every level along the nested chain at ``x0``."""
    if initial_batch < 1 or initial_batch > min(data.sizes):
        raise InvalidInputError(f"initial_batch must lie in 1..{min(data.sizes)}, got {initial_batch}")
    y = problem.check_x(x0)
    us, vs = [], []
    for i in range(1, problem.K + 1):
        idx = draw_indices(rng, data.sizes[i - 1], initial_batch)
        u, J = problem.mean_eval(data, i, idx, y)
        v = project_ball(J, lf)
        _finite(u, i)
        _finite(v, i)
        us.append(u)
        vs.append(v)
        y = u
    return EstimatorChain(tuple(us), tuple(vs), lf)
