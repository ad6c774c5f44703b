"""Backward passes: map dloss/dz* to gradients w.r.t. (Q, p, A, b, l, u).

Three engines are provided:

* ``FIXED_POINT`` differentiates the residual of the ADMM fixed-point map in
  v = x + mu and eta, a system of size d_z + d_eq.
* ``KKT`` differentiates the KKT conditions of the QP, with box constraints
  written as Gz <= h; a system of size d_z + (#finite bounds) + d_eq,
  i.e. 3 d_z + d_eq when every bound is finite.
* ``UNROLLED`` runs reverse mode through the recorded ADMM iterations.
"""

from __future__ import annotations

import enum
import time
import warnings

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .admm import KKTFactorization, factorize_kkt, project_box, recover_duals
from .core import GradientBundle, MissingTrace, QPProblem, QPSolution, SingularBackwardSystem

# |mu_j| below this counts as an inactive box constraint
MU_ZERO = 1e-12
# relative pivot size below which a backward LU factor is declared singular
LU_PIVOT_RTOL = 1e-13


class BackwardMethod(str, enum.Enum):
    FIXED_POINT = "fp"
    KKT = "kkt"
    UNROLLED = "unroll"


def projection_mask(v: np.ndarray, l: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Derivative of the box projection: 1 on the closed interval [l, u], else 0."""
    return ((v >= l) & (v <= u)).astype(float)


def _lu(mat: np.ndarray, what: str):
    try:
        with warnings.catch_warnings():
            # an exactly singular factor is reported below as our own error
            warnings.simplefilter("ignore", LinAlgWarning)
            lu, piv = lu_factor(mat, check_finite=False)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SingularBackwardSystem(f"{what}: {exc}") from exc
    diag = np.abs(np.diag(lu))
    if not np.all(np.isfinite(diag)) or diag.min() <= LU_PIVOT_RTOL * max(diag.max(), 1.0):
        raise SingularBackwardSystem(f"{what} is singular (degenerate active set?)")
    return lu, piv


def _factorization(problem: QPProblem, rho: float, fact: KKTFactorization | None) -> KKTFactorization:
    if fact is not None and fact.matches(problem, rho):
        return fact
    return factorize_kkt(problem, rho)


# -- fixed point ----------------------------------------------------------------


def fixed_point_residual(
    problem: QPProblem, rho: float, v: np.ndarray, eta: np.ndarray, fact: KKTFactorization | None = None
) -> np.ndarray:
    """F(v, eta) - (v, eta) for the fixed-point form of the ADMM iteration."""
    fact = _factorization(problem, rho, fact)
    pv = project_box(v, problem.l, problem.u)
    step = fact.solve(np.concatenate([-(problem.p - rho * (2 * pv - v)), problem.b]))
    return step - np.concatenate([pv, eta])


def fixed_point_jacobian(
    problem: QPProblem, rho: float, v: np.ndarray, fact: KKTFactorization | None = None
) -> np.ndarray:
    """Jacobian of F with respect to (v, eta), dense.  Used for verification."""
    fact = _factorization(problem, rho, fact)
    d_z, n = problem.d_z, fact.size
    D = projection_mask(v, problem.l, problem.u)
    R = np.zeros((n, n))
    R[:d_z, :d_z] = np.diag(-rho * (2 * D - 1))
    Dfull = np.diag(np.concatenate([D, np.ones(problem.d_eq)]))
    return -fact.solve(R) + np.eye(n) - Dfull


def fixed_point_system(problem: QPProblem, solution: QPSolution, mask: np.ndarray | None = None) -> np.ndarray:
    """The (d_z + d_eq) matrix diag(DPi, I) M + blkdiag(-rho (2 DPi - I), 0)."""
    rho, d_z = solution.rho, problem.d_z
    if mask is None:
        mask = projection_mask(solution.v_star, problem.l, problem.u)
    n = d_z + problem.d_eq
    S = np.zeros((n, n))
    S[:d_z, :d_z] = mask[:, None] * problem.Q
    S[:d_z, d_z:] = mask[:, None] * problem.A.T
    S[d_z:, :d_z] = problem.A
    S[np.arange(d_z), np.arange(d_z)] += rho * mask - rho * (2 * mask - 1)
    return S


def _perturbed_v(problem: QPProblem, solution: QPSolution, perturb: float) -> np.ndarray:
    # nudge v off exact bound contact: into the interior where mu = 0, outward otherwise
    v = np.array(solution.v_star, dtype=float)
    inactive = np.abs(solution.mu_star) < MU_ZERO
    near_l = np.abs(v - problem.l) < perturb
    near_u = np.abs(problem.u - v) < perturb
    v[near_l] = np.where(inactive[near_l], problem.l[near_l] + perturb, problem.l[near_l] - perturb)
    v[near_u] = np.where(inactive[near_u], problem.u[near_u] - perturb, problem.u[near_u] + perturb)
    return v


def backward_fixed_point(
    problem: QPProblem, solution: QPSolution, grad_z: np.ndarray, perturb: float = 0.0
) -> GradientBundle:
    """Implicit differentiation of the ADMM fixed point.

    Solves [diag(DPi, I) M + blkdiag(-rho(2 DPi - I), 0)] d = diag(DPi, I) [-grad_z; 0]
    for d = (d_x, d_eta) and assembles the per-variable gradients from it.
    ``perturb > 0`` moves v* away from exact bound contact before taking DPi.
    """
    grad_z = np.asarray(grad_z, dtype=float)
    d_z, rho = problem.d_z, solution.rho
    v = _perturbed_v(problem, solution, perturb) if perturb > 0 else solution.v_star
    mask = projection_mask(v, problem.l, problem.u)
    S = fixed_point_system(problem, solution, mask)
    rhs = np.concatenate([-mask * grad_z, np.zeros(problem.d_eq)])
    d = lu_solve(_lu(S, "fixed-point backward system"), rhs, check_finite=False)
    d_x, d_eta = d[:d_z], d[d_z:]

    x, eta, mu = solution.x_star, solution.eta_star, solution.mu_star
    dQ = 0.5 * (np.outer(d_x, x) + np.outer(x, d_x))
    dA = np.outer(d_eta, x) + np.outer(eta, d_x)

    mu_tilde = np.where(np.abs(mu) < MU_ZERO, 1.0, mu)
    d_lam = (-grad_z - problem.Q @ d_x - problem.A.T @ d_eta) / (rho * mu_tilde)
    duals = recover_duals(mu, rho)
    dl = duals.lambda_minus * d_lam
    du = -duals.lambda_plus * d_lam
    return GradientBundle(dQ, d_x, dA, -d_eta, dl, du)


# -- KKT ------------------------------------------------------------------------


def kkt_system(problem: QPProblem, solution: QPSolution):
    """Build the transposed KKT differential matrix.

    Returns (K, lower_idx, upper_idx, lam) where the bound rows of G are the
    finite lower bounds followed by the finite upper bounds.
    """
    d_z, d_eq = problem.d_z, problem.d_eq
    z = solution.z_star
    lower = np.flatnonzero(np.isfinite(problem.l))
    upper = np.flatnonzero(np.isfinite(problem.u))
    nl, nu = lower.size, upper.size
    duals = recover_duals(solution.mu_star, solution.rho)
    lam = np.concatenate([duals.lambda_minus[lower], duals.lambda_plus[upper]])
    slack = np.concatenate([problem.l[lower] - z[lower], z[upper] - problem.u[upper]])  # Gz - h

    nb = nl + nu
    n = d_z + nb + d_eq
    K = np.zeros((n, n))
    K[:d_z, :d_z] = problem.Q
    rows = np.arange(nb)
    cols = np.concatenate([lower, upper])
    signs = np.concatenate([-np.ones(nl), np.ones(nu)])
    # G' diag(lam) in the (z, lambda) block, G in the (lambda, z) block
    K[cols, d_z + rows] = signs * lam
    K[d_z + rows, cols] = signs
    K[d_z + rows, d_z + rows] = slack
    K[:d_z, d_z + nb :] = problem.A.T
    K[d_z + nb :, :d_z] = problem.A
    return K, lower, upper, lam


def backward_kkt(problem: QPProblem, solution: QPSolution, grad_z: np.ndarray) -> GradientBundle:
    """Implicit differentiation of the QP's KKT conditions."""
    grad_z = np.asarray(grad_z, dtype=float)
    d_z = problem.d_z
    K, lower, upper, lam = kkt_system(problem, solution)
    n = K.shape[0]
    rhs = np.zeros(n)
    rhs[:d_z] = -grad_z
    d = lu_solve(_lu(K, "KKT backward system"), rhs, check_finite=False)
    nb = lower.size + upper.size
    d_z_, d_lam, d_eta = d[:d_z], d[d_z : d_z + nb], d[d_z + nb :]

    z, eta = solution.z_star, solution.eta_star
    dh = -lam * d_lam
    dl = np.zeros(d_z)
    du = np.zeros(d_z)
    dl[lower] = -dh[: lower.size]  # h = [-l; u]
    du[upper] = dh[lower.size :]
    return GradientBundle(
        0.5 * (np.outer(d_z_, z) + np.outer(z, d_z_)),
        d_z_,
        np.outer(d_eta, z) + np.outer(eta, d_z_),
        -d_eta,
        dl,
        du,
    )


# -- unrolled -------------------------------------------------------------------


def backward_unrolled(
    problem: QPProblem,
    solution: QPSolution,
    grad_z: np.ndarray,
    fact: KKTFactorization | None = None,
) -> GradientBundle:
    """Reverse sweep through every recorded iteration.

    The initial iterate is treated as a constant.  Each iteration's linear
    solve contributes to dQ and dA, and each projection routes the adjoint of
    clipped coordinates to the bound that clipped them.
    """
    trace = solution.trace
    if trace is None:
        raise MissingTrace("solve with record_trace=True to use the unrolled backward pass")
    rho, d_z = solution.rho, problem.d_z
    fact = _factorization(problem, rho, fact)
    K = trace.iterations
    l, u = problem.l, problem.u

    z_bar = np.asarray(grad_z, dtype=float).copy()
    mu_bar = np.zeros(d_z)
    l_bar = np.zeros(d_z)
    u_bar = np.zeros(d_z)
    S = np.empty((K, d_z + problem.d_eq))
    pad = np.zeros(problem.d_eq)
    for k in range(K - 1, -1, -1):
        v = trace.v[k]
        zb = z_bar - mu_bar
        below, above = v < l, v > u
        inside = ~(below | above)
        v_bar = mu_bar + np.where(inside, zb, 0.0)
        l_bar += np.where(below, zb, 0.0)
        u_bar += np.where(above, zb, 0.0)
        s = fact.solve(np.concatenate([v_bar, pad]))
        S[k] = s
        s_x = s[:d_z]
        z_bar = rho * s_x
        mu_bar = v_bar - rho * s_x

    S_x, S_eta = S[:, :d_z], S[:, d_z:]
    Qbar = -S_x.T @ trace.x
    Abar = -(S_eta.T @ trace.x + trace.eta.T @ S_x)
    return GradientBundle(
        0.5 * (Qbar + Qbar.T),
        -S_x.sum(axis=0),
        Abar,
        S_eta.sum(axis=0),
        l_bar,
        u_bar,
    )


# -- dispatch -------------------------------------------------------------------


def backward(
    problem: QPProblem,
    solution: QPSolution,
    grad_z: np.ndarray,
    method: BackwardMethod | str = BackwardMethod.FIXED_POINT,
    fact: KKTFactorization | None = None,
) -> GradientBundle:
    method = BackwardMethod(method)
    if method is BackwardMethod.FIXED_POINT:
        return backward_fixed_point(problem, solution, grad_z)
    if method is BackwardMethod.KKT:
        return backward_kkt(problem, solution, grad_z)
    return backward_unrolled(problem, solution, grad_z, fact)


def timed_backward(problem, solution, grad_z, method, fact=None) -> tuple[GradientBundle, float]:
    """Like :func:`backward`, also returning wall-clock seconds spent."""
    t0 = time.perf_counter()
    bundle = backward(problem, solution, grad_z, method, fact)
    return bundle, time.perf_counter() - t0
