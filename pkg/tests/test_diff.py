import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from admmqp.admm import admm_solve, factorize_kkt
from admmqp.core import (
    MissingTrace,
    QPSolution,
    SingularBackwardSystem,
    SolverConfig,
    generate_exp1_problem,
    validate_problem,
)
from admmqp.diff import (
    BackwardMethod,
    backward,
    backward_fixed_point,
    backward_kkt,
    backward_unrolled,
    fixed_point_jacobian,
    fixed_point_residual,
    fixed_point_system,
    kkt_system,
    projection_mask,
    timed_backward,
)
from admmqp.oracle import complementarity_margin, fd_bundle, reference_solve

from helpers import random_box_problem

TIGHT = SolverConfig.with_tol(1e-10, max_iter=100_000)
TRACED = SolverConfig.with_tol(1e-8, max_iter=100_000, record_trace=True)
NAMES = ("dQ", "dp", "dA", "db", "dl", "du")


def rel(a, b, floor=1e-3):
    return np.abs(a - b).max(initial=0.0) / max(np.abs(b).max(initial=0.0), floor)


def strict_instances(d_z, count, start=0):
    """Exp-1 instances with margin >= 1e-3 between v* and every bound."""
    out, seed = [], start
    while len(out) < count:
        prob = generate_exp1_problem(d_z, seed)
        seed += 1
        if complementarity_margin(prob, reference_solve(prob)) >= 1e-3:
            out.append(prob)
    return out


# -- projection mask and fixed-point map ---------------------------------------


def test_projection_mask_examples():
    assert np.array_equal(projection_mask(np.array([0.5]), np.zeros(1), np.ones(1)), [1.0])
    assert np.array_equal(projection_mask(np.array([-2.0, 3.0]), np.zeros(2), np.ones(2)), [0.0, 0.0])
    assert np.array_equal(projection_mask(np.array([0.0]), np.zeros(1), np.ones(1)), [1.0])


def test_projection_mask_infinite_bounds():
    v = np.array([-1e308, 1e308])
    assert np.array_equal(projection_mask(v, np.full(2, -np.inf), np.full(2, np.inf)), [1.0, 1.0])


@pytest.mark.parametrize("seed", range(5))
def test_fixed_point_residual_at_solution(seed):
    prob = generate_exp1_problem(10, seed)
    sol = admm_solve(prob, TIGHT)
    r = fixed_point_residual(prob, sol.rho, sol.v_star, sol.eta_star)
    assert np.abs(r).max() <= 1e-8
    moved = fixed_point_residual(prob, sol.rho, sol.v_star + 1e-2, sol.eta_star)
    assert np.abs(moved).max() > 1e-4


def test_fixed_point_residual_hand_case():
    prob = validate_problem(np.eye(3), np.zeros(3), None, None, -np.ones(3), np.ones(3))
    assert not fixed_point_residual(prob, 1.0, np.zeros(3), np.zeros(0)).any()


def test_fixed_point_jacobian_matches_fd():
    prob = generate_exp1_problem(6, 1)
    sol = admm_solve(prob, TIGHT)
    v, eta = sol.v_star, sol.eta_star
    J = fixed_point_jacobian(prob, sol.rho, v)
    h = 1e-7
    n = prob.d_z + prob.d_eq
    num = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        vp, ep = v + e[: prob.d_z], eta + e[prob.d_z :]
        vm, em = v - e[: prob.d_z], eta - e[prob.d_z :]
        Fp = fixed_point_residual(prob, sol.rho, vp, ep) + np.concatenate([vp, ep])
        Fm = fixed_point_residual(prob, sol.rho, vm, em) + np.concatenate([vm, em])
        num[:, k] = (Fp - Fm) / (2 * h)
    assert np.abs(J - num).max() <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_simplified_system_equals_first_line(seed):
    # the bracketed system is (I - dF)' M, so solving it is the same as
    # applying (I - dF)^{-T} and then M^{-1}
    prob = generate_exp1_problem(8, seed)
    sol = admm_solve(prob, TIGHT)
    fact = factorize_kkt(prob, sol.rho)
    J = fixed_point_jacobian(prob, sol.rho, sol.v_star, fact)
    S = fixed_point_system(prob, sol)
    IJ = np.eye(J.shape[0]) - J
    assert np.abs(S - IJ.T @ fact.matrix).max() <= 1e-10
    g = np.random.default_rng(seed).standard_normal(prob.d_z)
    mask = projection_mask(sol.v_star, prob.l, prob.u)
    rhs = np.concatenate([-mask * g, np.zeros(prob.d_eq)])
    first_line = fact.solve(np.linalg.solve(IJ.T, rhs))
    b = backward_fixed_point(prob, sol, g)
    assert np.allclose(b.dp, first_line[: prob.d_z], atol=1e-10)
    assert np.allclose(-b.db, first_line[prob.d_z :], atol=1e-10)


# -- structural properties -----------------------------------------------------


@pytest.mark.parametrize("d_z,d_eq", [(5, 1), (12, 3), (7, 0)])
def test_system_sizes(d_z, d_eq):
    prob = random_box_problem(d_z, d_z, d_eq=d_eq)
    sol = admm_solve(prob, TIGHT)
    assert fixed_point_system(prob, sol).shape == (d_z + d_eq, d_z + d_eq)
    K, lower, upper, _ = kkt_system(prob, sol)
    assert K.shape == (3 * d_z + d_eq, 3 * d_z + d_eq)
    assert lower.size == upper.size == d_z


def test_kkt_drops_infinite_bounds():
    prob = validate_problem(np.eye(3), [0.1, 0.2, -3.0], [[1, 1, 1]], [1.0], [-np.inf, 0, 0], [np.inf, np.inf, 1])
    sol = admm_solve(prob, TIGHT)
    K, lower, upper, _ = kkt_system(prob, sol)
    assert K.shape == (3 + 2 + 1 + 1,) * 2
    b = backward_kkt(prob, sol, np.ones(3))
    assert b.dl[0] == 0 and b.du[0] == 0 and b.du[1] == 0


@pytest.mark.parametrize("method", list(BackwardMethod))
def test_interior_solution_has_zero_bound_gradients(method):
    prob = random_box_problem(6, 0, box=50.0)
    sol = admm_solve(prob, TRACED)
    assert not sol.mu_star.any()
    b = backward(prob, sol, np.arange(6.0), method)
    assert not b.dl.any() and not b.du.any()


@pytest.mark.parametrize("method", list(BackwardMethod))
def test_dq_symmetric_linear_and_zero_seed(method):
    prob = generate_exp1_problem(8, 3)
    sol = admm_solve(prob, TRACED)
    g = np.random.default_rng(0).standard_normal(8)
    b = backward(prob, sol, g, method)
    assert np.array_equal(b.dQ, b.dQ.T)
    b3 = backward(prob, sol, -3.0 * g, method)
    for name in NAMES:
        assert np.allclose(getattr(b3, name), -3.0 * getattr(b, name), rtol=1e-10, atol=1e-12)
    zero = backward(prob, sol, np.zeros(8), method)
    for name in NAMES:
        assert not np.abs(getattr(zero, name)).max(initial=0.0) > 0


@pytest.mark.parametrize("method", list(BackwardMethod))
def test_inactive_coordinates_have_no_bound_gradient(method):
    prob = generate_exp1_problem(10, 12)
    sol = admm_solve(prob, TRACED)
    b = backward(prob, sol, np.ones(10), method)
    inactive = (sol.mu_star == 0) & (projection_mask(sol.v_star, prob.l, prob.u) == 1)
    assert inactive.any()
    assert not b.dl[inactive].any() and not b.du[inactive].any()


def test_unrolled_needs_trace():
    prob = generate_exp1_problem(5, 0)
    sol = admm_solve(prob)
    with pytest.raises(MissingTrace):
        backward(prob, sol, np.ones(5), "unroll")


def test_timed_backward():
    prob = generate_exp1_problem(5, 0)
    sol = admm_solve(prob)
    bundle, seconds = timed_backward(prob, sol, np.ones(5), BackwardMethod.KKT)
    assert seconds >= 0 and bundle.dp.shape == (5,)


def _fake_solution(z, mu, v, eta):
    z = np.asarray(z, float)
    return QPSolution(z, z.copy(), np.asarray(eta, float), np.asarray(mu, float), np.asarray(v, float), 1, 0.0, 0.0, True, 1.0)


def test_singular_fixed_point_system(simplex_problem):
    # every coordinate clipped and an equality row: the eta columns vanish
    sol = _fake_solution([1.0, 1.0], [1.0, 1.0], [2.0, 2.0], [0.0])
    with pytest.raises(SingularBackwardSystem):
        backward_fixed_point(simplex_problem, sol, np.ones(2))


def test_singular_kkt_system(simplex_problem):
    # z at a bound with a zero multiplier: weak complementarity
    sol = _fake_solution([1.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0])
    with pytest.raises(SingularBackwardSystem):
        backward_kkt(simplex_problem, sol, np.ones(2))


def test_perturbation_moves_off_contact():
    # v exactly at the bound with mu = 0: the closed-interval mask keeps the
    # coordinate, and the perturbation moves v into the interior
    prob = validate_problem(np.eye(2), [-1.0, 0.5], None, None, [-1, -1], [1, 1])
    sol = _fake_solution([1.0, -0.5], [0.0, 0.0], [1.0, -0.5], [])
    g = np.array([1.0, 2.0])
    for perturb in (0.0, 1e-6):
        b = backward_fixed_point(prob, sol, g, perturb=perturb)
        assert np.allclose(b.dp, [-1.0, -2.0])
        assert not b.dl.any() and not b.du.any()


# -- agreement with finite differences -----------------------------------------


@pytest.fixture(scope="module")
def fd_cases():
    cases = []
    for prob in strict_instances(6, 4):
        g = np.random.default_rng(prob.d_z).standard_normal(prob.d_z)
        fd = fd_bundle(prob, lambda z, g=g: float(g @ z))
        cases.append((prob, g, fd))
    return cases


@pytest.mark.parametrize("method", list(BackwardMethod))
def test_engines_match_finite_differences(fd_cases, method):
    for prob, g, fd in fd_cases:
        sol = admm_solve(prob, TRACED if method is BackwardMethod.UNROLLED else TIGHT)
        ours = backward(prob, sol, g, method).as_dict()
        for name in NAMES:
            assert rel(ours[name], fd[name]) <= 1e-4, name


def test_engines_agree():
    for prob in strict_instances(10, 10, start=100):
        sol = admm_solve(prob, TRACED)
        g = np.random.default_rng(0).standard_normal(10)
        bundles = [backward(prob, sol, g, m).as_dict() for m in BackwardMethod]
        for name in NAMES:
            assert rel(bundles[0][name], bundles[1][name]) <= 1e-5
            assert rel(bundles[2][name], bundles[0][name]) <= 1e-4


def test_equality_only_closed_form():
    rng = np.random.default_rng(4)
    U = rng.standard_normal((10, 5))
    Q = U.T @ U / 10 + np.eye(5)
    A = rng.standard_normal((2, 5))
    prob = validate_problem(Q, rng.standard_normal(5), A, [0.5, -1.0], [-np.inf] * 5, [np.inf] * 5)
    sol = admm_solve(prob, TIGHT)
    g = rng.standard_normal(5)
    M0 = np.block([[Q, A.T], [A, np.zeros((2, 2))]])
    dz_dp = -np.linalg.inv(M0)[:5, :5]
    expected = dz_dp.T @ g
    for method in (BackwardMethod.FIXED_POINT, BackwardMethod.KKT):
        assert np.allclose(backward(prob, sol, g, method).dp, expected, atol=1e-8)


def _k_step_map(prob, K):
    cfg = SolverConfig(eps_primal=1e-300, eps_dual=1e-300, max_iter=K)
    return lambda q: admm_solve(q, cfg)


def test_unrolled_single_step_exact():
    # separable box QP, Q = I, rho = 1: one step from zero is exact
    prob = validate_problem(np.eye(3), [-0.4, 0.2, -3.0], None, None, [-1, -1, -1], [1, 1, 1])
    sol = admm_solve(prob, SolverConfig(max_iter=1, record_trace=True))
    g = np.array([1.0, -2.0, 0.5])
    b = backward_unrolled(prob, sol, g)
    fd = fd_bundle(prob, lambda z: float(g @ z), solver=_k_step_map(prob, 1))
    for name in NAMES:
        assert np.abs(b.as_dict()[name] - fd[name]).max(initial=0.0) <= 1e-6, name


@pytest.mark.parametrize("K", [3, 25])
def test_unrolled_is_exact_derivative_of_k_steps(K):
    prob = strict_instances(5, 1, start=7)[0]
    sol = admm_solve(prob, SolverConfig(eps_primal=1e-300, eps_dual=1e-300, max_iter=K, record_trace=True))
    assert sol.iterations == K
    g = np.random.default_rng(K).standard_normal(5)
    b = backward_unrolled(prob, sol, g).as_dict()
    fd = fd_bundle(prob, lambda z: float(g @ z), solver=_k_step_map(prob, K))
    for name in NAMES:
        assert rel(b[name], fd[name]) <= 1e-6, name


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(-10, 10, allow_nan=False))
def test_fixed_point_linear_in_seed(seed, c):
    prob = generate_exp1_problem(6, seed)
    sol = admm_solve(prob)
    g = np.random.default_rng(seed).standard_normal(6)
    try:
        a = backward_fixed_point(prob, sol, g)
    except SingularBackwardSystem:
        return
    b = backward_fixed_point(prob, sol, c * g)
    for name in NAMES:
        assert np.allclose(getattr(b, name), c * getattr(a, name), rtol=1e-9, atol=1e-12)
