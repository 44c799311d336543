import numpy as np
import pytest

from klevel.problem import CallableLevel, CompositionalProblem, Dataset, ProblemConstants


def scalar_square_level():
    """``(y - nu)^2`` on scalars, payload ``nu``."""

    def fn(row, y):
        d = y[0] - row[0]
        return np.array([d * d]), np.array([[2 * d]])

    return CallableLevel(1, 1, fn, sampler=lambda rng, n: rng.standard_normal((n, 1)))


def shift_level():
    """``y + omega`` on scalars."""

    def fn(row, y):
        return np.array([y[0] + row[0]]), np.array([[1.0]])

    return CallableLevel(1, 1, fn, sampler=lambda rng, n: rng.standard_normal((n, 1)))


def square_level():
    """``y^2`` with an unused payload."""

    def fn(row, y):
        return np.array([y[0] ** 2]), np.array([[2 * y[0]]])

    return CallableLevel(1, 1, fn, sampler=lambda rng, n: np.zeros((n, 1)))


def make_problem(levels, payloads, **kw):
    problem = CompositionalProblem(tuple(levels), ProblemConstants(lf=10.0, L=2.0), **kw)
    data = Dataset(tuple(np.asarray(p, dtype=float).reshape(len(p), -1) for p in payloads),
                   tuple(lvl.draw for lvl in levels))
    return problem, data


@pytest.fixture
def one_level():
    return make_problem([scalar_square_level()], [[0.0, 2.0]])


@pytest.fixture
def two_level():
    return make_problem([shift_level(), square_level()], [[-1.0, 1.0], [0.0]])


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
