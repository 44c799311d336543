import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from klevel.errors import InvalidInputError, NumericError
from klevel.estimators import (
    EstimatorChain,
    cover_update,
    init_chain,
    momentum_value_update,
    project_ball,
    storm_update,
    svmr_step,
)
from klevel.problem import (
    chain_product,
    empirical_gradient,
    empirical_value,
    make_klevel_synthetic,
    make_quadratic_problem,
    nested_means,
)
from klevel.rng import draw_indices, stream

finite = st.floats(-1e6, 1e6, allow_nan=False)


# --- projection -------------------------------------------------------------

@pytest.mark.parametrize("M, r, expected", [
    ([3.0, 4.0], 5.0, [3.0, 4.0]),
    ([6.0, 8.0], 5.0, [3.0, 4.0]),
    ([[0.0, 0.0], [0.0, 0.0]], 0.3, [[0.0, 0.0], [0.0, 0.0]]),
])
def test_project_examples(M, r, expected):
    assert np.array_equal(project_ball(np.array(M), r), np.array(expected))


@settings(max_examples=200)
@given(M=hnp.arrays(float, hnp.array_shapes(min_dims=1, max_dims=2, max_side=5), elements=finite),
       r=st.floats(1e-3, 1e3))
def test_project_inside_ball_and_idempotent(M, r):
    P = project_ball(M, r)
    assert np.linalg.norm(P) <= r
    assert np.array_equal(project_ball(P, r), P)
    if np.linalg.norm(M) <= r:
        assert np.array_equal(P, M)


def test_project_errors():
    with pytest.raises(NumericError):
        project_ball(np.array([np.nan, 1.0]), 1.0)
    with pytest.raises(InvalidInputError):
        project_ball(np.array([1.0]), 0.0)


# --- STORM and COVER updates -----------------------------------------------

def test_storm_beta_one_drops_history():
    g = np.array([[3.0, -1.0]])
    out = storm_update(np.array([[100.0, 5.0]]), g, np.array([[7.0, 7.0]]), 1.0, 10.0)
    assert np.array_equal(out, g)


@given(beta=st.floats(0.01, 1.0))
def test_storm_exact_old_estimate(beta):
    v = np.array([[0.5, 2.0]])
    g = np.array([[30.0, 40.0]])
    assert np.array_equal(storm_update(v, g, v, beta, 10.0), project_ball(g, 10.0))


def test_storm_scalar_hand_value():
    assert storm_update(np.array([2.0]), np.array([1.0]), np.array([3.0]), 0.5, 10.0)[0] == 0.5


def test_storm_validation():
    with pytest.raises(InvalidInputError):
        storm_update(np.zeros(2), np.zeros(3), np.zeros(2), 0.5, 1.0)
    for beta in (0.0, 1.5):
        with pytest.raises(InvalidInputError):
            storm_update(np.zeros(2), np.zeros(2), np.zeros(2), beta, 1.0)


def test_cover_beta_one():
    g, J = np.array([1.0, 2.0]), np.array([[30.0, 40.0]])
    u, v = cover_update(np.array([9.0, 9.0]), np.zeros((1, 2)), g, np.zeros(2), J, np.ones((1, 2)), 1.0, 5.0)
    assert np.array_equal(u, g) and np.array_equal(v, [[3.0, 4.0]])


def test_cover_scalar_u_path():
    u, _ = cover_update(np.array([1.0]), np.zeros((1, 1)), np.array([2.0]), np.array([1.5]),
                        np.zeros((1, 1)), np.zeros((1, 1)), 0.5, 1.0)
    assert u[0] == 1.75


@given(beta=st.floats(0.01, 1.0))
def test_cover_exact_old_estimates(beta):
    u_old, v_old = np.array([0.3]), np.array([[0.2, -0.1]])
    g, J = np.array([-4.0]), np.array([[60.0, 80.0]])
    u, v = cover_update(u_old, v_old, g, u_old, J, v_old, beta, 50.0)
    assert np.array_equal(u, g) and np.array_equal(v, project_ball(J, 50.0))


def test_value_update_not_projected():
    u = momentum_value_update(np.zeros(2), np.array([1e6, 1e6]), np.zeros(2), 0.5)
    assert np.array_equal(u, [1e6, 1e6])


# --- SVMR chain ---------------------------------------------------------------

def _chain_at(problem, data, x, lf=50.0):
    return init_chain(problem, data, x, min(data.sizes), lf, stream(0, "x"))


def test_svmr_k1_reduces_to_storm():
    problem, data = make_quadratic_problem(20, dim=3, seed=1)
    x_old, x_new = np.zeros(3), np.array([0.1, -0.2, 0.05])
    chain = EstimatorChain((np.array([0.7]),), (np.array([[0.4, 0.1, -0.3]]),), 2.0)
    rng = stream(3, "i")
    out = svmr_step(chain, x_new, x_old, problem, data, 4, 0.3, rng)
    idx = draw_indices(stream(3, "i"), 20, 4)
    f_new, J_new = problem.mean_eval(data, 1, idx, x_new)
    f_old, J_old = problem.mean_eval(data, 1, idx, x_old)
    assert np.array_equal(out.v[0], storm_update(chain.v[0], J_new, J_old, 0.3, 2.0))
    assert np.array_equal(out.u[0], momentum_value_update(chain.u[0], f_new, f_old, 0.3))


def test_svmr_full_batch_beta_one_is_exact():
    problem, train, _ = make_klevel_synthetic(3, dims=2, n_per_level=25, seed=4)
    x_old, x_new = np.array([0.1, 0.2]), np.array([-0.3, 0.4])
    chain = _chain_at(problem, train, x_old)
    out = svmr_step(chain, x_new, x_old, problem, train, 10 ** 6, 1.0, stream(0, "i"))
    ys, jacs = nested_means(problem, train, x_new)
    for i in range(3):
        assert np.allclose(out.u[i], ys[i + 1], rtol=0, atol=1e-13)
        assert np.allclose(out.v[i], project_ball(jacs[i], 50.0), rtol=0, atol=1e-13)


def test_svmr_zero_noise_top_value():
    problem, train, _ = make_klevel_synthetic(4, n_per_level=20, noise_var=0.0)
    x_old, x_new = np.array([0.5, 0.5]), np.array([0.2, -0.1])
    out = svmr_step(_chain_at(problem, train, x_old), x_new, x_old, problem, train, 3, 1.0, stream(1, "i"))
    assert out.u[-1][0] == pytest.approx(empirical_value(problem, train, x_new), abs=1e-14)


def test_svmr_beta_one_ignores_previous_chain():
    problem, train, _ = make_klevel_synthetic(3, n_per_level=30, seed=2)
    x_old, x_new = np.array([0.1, 0.2]), np.array([0.0, 0.3])
    a = _chain_at(problem, train, x_old)
    b = EstimatorChain(tuple(u + 5.0 for u in a.u), tuple(v * 0.5 for v in a.v), a.lf)
    out_a = svmr_step(a, x_new, x_old, problem, train, 7, 1.0, stream(9, "i"))
    out_b = svmr_step(b, x_new, x_old, problem, train, 7, 1.0, stream(9, "i"))
    for i in range(3):
        assert np.array_equal(out_a.u[i], out_b.u[i]) and np.array_equal(out_a.v[i], out_b.v[i])


def test_svmr_does_not_mutate_and_keeps_shapes():
    problem, train, _ = make_klevel_synthetic(3, dims=[3, 2, 4, 1], n_per_level=30)
    chain = _chain_at(problem, train, np.zeros(3))
    snapshot = [u.copy() for u in chain.u] + [v.copy() for v in chain.v]
    out = svmr_step(chain, np.ones(3) * 0.1, np.zeros(3), problem, train, 5, 0.2, stream(0, "i"))
    assert all(np.array_equal(a, b) for a, b in zip(snapshot, list(chain.u) + list(chain.v)))
    assert [v.shape for v in out.v] == [(2, 3), (4, 2), (1, 4)]
    assert out.direction().shape == (3,)


def test_svmr_shape_mismatch():
    problem, train, _ = make_klevel_synthetic(2, n_per_level=30)
    other, otrain, _ = make_klevel_synthetic(3, n_per_level=30)
    chain = _chain_at(other, otrain, np.zeros(2))
    with pytest.raises(InvalidInputError):
        svmr_step(chain, np.zeros(2), np.zeros(2), problem, train, 4, 0.5, stream(0, "i"))


def test_svmr_non_finite_names_level():
    problem, train, _ = make_klevel_synthetic(2, n_per_level=30)
    chain = _chain_at(problem, train, np.zeros(2))
    bad = EstimatorChain((np.array([np.inf, 0.0]), chain.u[1]), chain.v, chain.lf)
    with pytest.raises(NumericError) as err:
        svmr_step(bad, np.zeros(2), np.zeros(2), problem, train, 4, 0.5, stream(0, "i"))
    assert err.value.level == 1


def test_same_sample_discipline():
    problem, train, _ = make_klevel_synthetic(3, n_per_level=40, seed=1)
    calls = []
    original = type(problem).evaluate

    def spy(self, data, k, idx, y):
        calls.append((k, tuple(np.atleast_1d(idx))))
        return original(self, data, k, idx, y)

    chain = _chain_at(problem, train, np.zeros(2))
    type(problem).evaluate = spy
    try:
        svmr_step(chain, np.ones(2) * 0.1, np.zeros(2), problem, train, 6, 0.3, stream(2, "i"))
    finally:
        type(problem).evaluate = original
    assert [k for k, _ in calls] == [1, 1, 2, 2, 3, 3]
    for j in range(0, 6, 2):
        assert calls[j][1] == calls[j + 1][1]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), lf=st.floats(0.05, 5.0))
def test_projection_invariant_every_level(seed, lf):
    problem, train, _ = make_klevel_synthetic(3, n_per_level=30, seed=seed)
    rng = stream(seed, "i")
    chain = init_chain(problem, train, np.zeros(2), 3, lf, rng)
    x = np.zeros(2)
    for _ in range(5):
        x_new = x - 0.1 * chain.direction()
        chain = svmr_step(chain, x_new, x, problem, train, 3, 0.2, rng)
        x = x_new
        assert all(np.linalg.norm(v) <= lf for v in chain.v)


# --- initialization -------------------------------------------------------

def test_init_full_batch_exact():
    problem, train, _ = make_klevel_synthetic(3, n_per_level=30, seed=3)
    x0 = np.array([0.3, -0.7])
    chain = init_chain(problem, train, x0, 18, 0.5, stream(0, "i"))
    ys, jacs = nested_means(problem, train, x0)
    for i in range(3):
        assert np.allclose(chain.u[i], ys[i + 1], rtol=0, atol=1e-14)
        assert np.allclose(chain.v[i], project_ball(jacs[i], 0.5), rtol=0, atol=1e-14)


def test_init_single_sample():
    problem, data = make_quadratic_problem(10, dim=2, seed=0)
    rng = stream(4, "i")
    chain = init_chain(problem, data, np.zeros(2), 1, 100.0, rng)
    j = draw_indices(stream(4, "i"), 10, 1)
    vals, jacs = problem.evaluate(data, 1, j, np.zeros(2))
    assert np.array_equal(chain.u[0], vals[0]) and np.array_equal(chain.v[0], jacs[0])


def test_init_error_shrinks_with_batch():
    problem, data = make_quadratic_problem(256, dim=3, seed=0)
    x0 = np.ones(3)
    g = empirical_gradient(problem, data, x0)
    errs = []
    for b in (1, 8, 64):
        e = [np.sum((init_chain(problem, data, x0, b, 100.0, stream(r, "mc", b)).v[0][0] - g) ** 2)
             for r in range(300)]
        errs.append(np.mean(e))
    assert errs[0] > errs[1] > errs[2]


def test_init_validation():
    problem, data = make_quadratic_problem(10, dim=2)
    for b in (0, 11):
        with pytest.raises(InvalidInputError):
            init_chain(problem, data, np.zeros(2), b, 1.0, stream(0, "i"))


def test_chain_direction_matches_chain_product():
    problem, train, _ = make_klevel_synthetic(3, dims=[2, 3, 2, 1], n_per_level=20)
    chain = _chain_at(problem, train, np.array([0.1, 0.2]), lf=1e9)
    _, jacs = nested_means(problem, train, np.array([0.1, 0.2]))
    assert np.allclose(chain.direction(), chain_product(jacs), atol=1e-13)
