import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from admmqp.admm import factorize_kkt, recover_duals
from admmqp.core import (
    AsymmetricQ,
    BoundsInverted,
    DimensionMismatch,
    GradientBundle,
    SolverConfig,
    generate_exp1_problem,
    load_problem,
    problem_from_dict,
    problem_to_dict,
    save_problem,
    validate_problem,
)


def test_valid_problem(simplex_problem):
    assert simplex_problem.d_z == 2
    assert simplex_problem.d_eq == 1


def test_bounds_inverted():
    with pytest.raises(BoundsInverted):
        validate_problem([[1.0]], [0.0], None, None, [0.5], [0.2])


def test_asymmetric_q():
    with pytest.raises(AsymmetricQ):
        validate_problem([[1.0, 0.3], [0.1, 1.0]], [0, 0], None, None, [0, 0], [1, 1])


def test_tiny_asymmetry_is_symmetrized():
    Q = np.array([[1.0, 0.3], [0.3 + 1e-14, 1.0]])
    prob = validate_problem(Q, [0, 0], None, None, [0, 0], [1, 1])
    assert np.array_equal(prob.Q, prob.Q.T)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(Q=np.eye(3)),
        dict(A=np.ones((1, 3))),
        dict(b=[1.0, 2.0]),
        dict(l=[0.0]),
    ],
)
def test_dimension_mismatch(kwargs):
    base = dict(Q=np.eye(2), p=[0, 0], A=[[1, 1]], b=[1.0], l=[0, 0], u=[1, 1])
    base.update(kwargs)
    with pytest.raises(DimensionMismatch):
        validate_problem(**base)


def test_arrays_read_only(simplex_problem):
    with pytest.raises(ValueError):
        simplex_problem.p[0] = 3.0


def test_validation_idempotent():
    prob = generate_exp1_problem(6, 3)
    again = validate_problem(prob.Q, prob.p, prob.A, prob.b, prob.l, prob.u)
    for name in "QpAblu":
        assert np.array_equal(getattr(prob, name), getattr(again, name))


def test_solver_config_checks():
    with pytest.raises(ValueError):
        SolverConfig(rho=0)
    with pytest.raises(ValueError):
        SolverConfig(eps_primal=0)
    with pytest.raises(ValueError):
        SolverConfig(max_iter=0)
    assert SolverConfig.with_tol(1e-4).eps_dual == 1e-4


def test_exp1_deterministic():
    a, b = generate_exp1_problem(10, 123), generate_exp1_problem(10, 123)
    for name in "QpAblu":
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    c = generate_exp1_problem(10, 124)
    assert not np.array_equal(a.p, c.p)


def test_exp1_structure():
    prob = generate_exp1_problem(10, 7)
    width = prob.u - prob.l
    assert np.all((width >= 2) & (width <= 4))
    assert np.all((prob.l >= -2) & (prob.l <= -1))
    assert np.all((prob.u >= 1) & (prob.u <= 2))
    assert np.array_equal(prob.A, np.ones((1, 10)))
    assert np.array_equal(prob.b, [1.0])


def test_exp1_positive_definite():
    prob = generate_exp1_problem(50, 11)
    np.linalg.cholesky(prob.Q)
    factorize_kkt(prob, 1.0)


@settings(max_examples=50, deadline=None)
@given(
    mu=st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20),
    rho=st.floats(1e-3, 1e3),
)
def test_dual_pair_complementarity(mu, rho):
    duals = recover_duals(np.array(mu), rho)
    assert np.all(duals.lambda_minus * duals.lambda_plus == 0)
    assert np.all(duals.lambda_minus >= 0) and np.all(duals.lambda_plus >= 0)


def test_serialization_round_trip(tmp_path):
    prob = validate_problem(np.eye(3), [1, 2, 3], None, None, [-np.inf, 0, -1], [np.inf, 1, np.inf])
    data = problem_to_dict(prob)
    assert data["l"][0] == "-inf" and data["u"][0] == "inf"
    back = problem_from_dict(data)
    for name in "QpAblu":
        assert np.array_equal(getattr(prob, name), getattr(back, name))
    path = tmp_path / "prob.json"
    exp1 = generate_exp1_problem(5, 1)
    save_problem(exp1, path)
    loaded = load_problem(path)
    for name in "QpAblu":
        assert np.array_equal(getattr(exp1, name), getattr(loaded, name))


def test_gradient_bundle_arithmetic():
    g = GradientBundle(np.eye(2), np.ones(2), np.ones((1, 2)), np.ones(1), np.zeros(2), np.zeros(2))
    h = 2 * g + g
    assert np.array_equal(h.dQ, 3 * np.eye(2))
    assert set(h.as_dict()) == set(GradientBundle.NAMES)
