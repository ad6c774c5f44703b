"""ADMM forward solver for box- and equality-constrained QPs.

The problem is split as x - z = 0 with x carrying the quadratic objective and
the equality constraints and z carrying the box.  Each iteration is

    [x; eta]  = M^{-1} [-(p - rho (z - mu)); b],   M = [[Q + rho I, A'], [A, 0]]
    z         = clip(x + mu, l, u)
    mu        = mu + x - z

M depends only on (Q, A, rho) and is factorized once per solve (or once per
training run when Q and A are fixed).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import DualPair, QPProblem, QPSolution, SingularKKT, SolverConfig, Trace

log = logging.getLogger(__name__)

# Relative pivot size below which a Cholesky factor is treated as singular.
PIVOT_RTOL = 1e-10


def _cholesky(mat: np.ndarray, what: str):
    try:
        c, lower = cho_factor(mat, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularKKT(f"{what} is not positive definite") from exc
    diag = np.abs(np.diag(c))
    if diag.size and (not np.all(np.isfinite(diag)) or diag.min() <= PIVOT_RTOL * max(diag.max(), 1.0)):
        raise SingularKKT(f"{what} is numerically singular")
    return c, lower


@dataclass(frozen=True, eq=False)
class KKTFactorization:
    """Factorization of M = [[Q + rho I, A'], [A, 0]] via its Schur complement.

    Q + rho I = L L' and S = A (Q + rho I)^{-1} A' = R R' are both Cholesky
    factorized; M itself is symmetric indefinite and never factorized directly.
    """

    rho: float
    d_z: int
    d_eq: int
    Q: np.ndarray
    A: np.ndarray
    _H: tuple
    _HinvAt: np.ndarray
    _S: tuple | None

    @property
    def size(self) -> int:
        return self.d_z + self.d_eq

    @property
    def matrix(self) -> np.ndarray:
        """Dense M, for callers that need to form products with it."""
        M = np.zeros((self.size, self.size))
        M[: self.d_z, : self.d_z] = self.Q + self.rho * np.eye(self.d_z)
        M[: self.d_z, self.d_z :] = self.A.T
        M[self.d_z :, : self.d_z] = self.A
        return M

    def matches(self, problem: QPProblem, rho: float) -> bool:
        if rho != self.rho or problem.d_z != self.d_z or problem.d_eq != self.d_eq:
            return False
        same_q = problem.Q is self.Q or np.array_equal(problem.Q, self.Q)
        same_a = problem.A is self.A or np.array_equal(problem.A, self.A)
        return same_q and same_a

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve M y = rhs; rhs may be a vector or a (size, k) matrix."""
        r1, r2 = rhs[: self.d_z], rhs[self.d_z :]
        h1 = cho_solve(self._H, r1, check_finite=False)
        if self.d_eq == 0:
            return h1
        eta = cho_solve(self._S, self.A @ h1 - r2, check_finite=False)
        x = h1 - self._HinvAt @ eta
        return np.concatenate([x, eta], axis=0)


def factorize_kkt(problem: QPProblem, rho: float) -> KKTFactorization:
    if not rho > 0:
        raise ValueError("rho must be positive")
    d_z, d_eq = problem.d_z, problem.d_eq
    H = _cholesky(problem.Q + rho * np.eye(d_z), "Q + rho I")
    if d_eq:
        HinvAt = cho_solve(H, problem.A.T, check_finite=False)
        S = problem.A @ HinvAt
        S = _cholesky(0.5 * (S + S.T), "A (Q + rho I)^{-1} A' (A rank deficient?)")
    else:
        HinvAt, S = np.zeros((d_z, 0)), None
    return KKTFactorization(rho, d_z, d_eq, problem.Q, problem.A, H, HinvAt, S)


def project_box(x: np.ndarray, l: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(x, l), u)


@dataclass(frozen=True)
class IterationState:
    x: np.ndarray
    z: np.ndarray
    mu: np.ndarray
    eta: np.ndarray
    k: int = 0

    @classmethod
    def cold(cls, problem: QPProblem) -> "IterationState":
        zeros = np.zeros(problem.d_z)
        return cls(zeros, zeros, zeros, np.zeros(problem.d_eq), 0)


def admm_step(state: IterationState, fact: KKTFactorization, problem: QPProblem) -> IterationState:
    rho = fact.rho
    rhs = np.concatenate([-(problem.p - rho * (state.z - state.mu)), problem.b])
    y = fact.solve(rhs)
    x, eta = y[: problem.d_z], y[problem.d_z :]
    v = x + state.mu
    z = project_box(v, problem.l, problem.u)
    return IterationState(x, z, v - z, eta, state.k + 1)


def residual_norms(z_prev: np.ndarray, state: IterationState, rho: float) -> tuple[float, float]:
    """Primal ||x - z||_2 and dual rho ||z - z_prev||_2 residuals."""
    return float(np.linalg.norm(state.x - state.z)), float(rho * np.linalg.norm(state.z - z_prev))


def admm_solve(
    problem: QPProblem,
    config: SolverConfig | None = None,
    warm_start: IterationState | None = None,
    factorization: KKTFactorization | None = None,
) -> QPSolution:
    """Run ADMM until both residuals are below tolerance or max_iter is hit.

    Non-convergence is reported through ``converged=False``, not raised.
    A precomputed ``factorization`` is reused when it matches (Q, A, rho).
    """
    config = config or SolverConfig()
    rho = config.rho
    if factorization is None or not factorization.matches(problem, rho):
        factorization = factorize_kkt(problem, rho)
    fact_solve = factorization.solve
    d_z = problem.d_z
    p, b, l, u = problem.p, problem.b, problem.l, problem.u

    if warm_start is None:
        z = np.zeros(d_z)
        mu = np.zeros(d_z)
    else:
        z, mu = np.array(warm_start.z, dtype=float), np.array(warm_start.mu, dtype=float)

    xs, etas, vs = [], [], []
    r_norm = s_norm = np.inf
    converged = False
    k = 0
    while k < config.max_iter:
        y = fact_solve(np.concatenate([rho * (z - mu) - p, b]))
        x, eta = y[:d_z], y[d_z:]
        v = x + mu
        z_new = np.minimum(np.maximum(v, l), u)
        mu = v - z_new
        k += 1
        if config.record_trace:
            xs.append(x)
            etas.append(eta)
            vs.append(v)
        r_norm = float(np.linalg.norm(x - z_new))
        s_norm = float(rho * np.linalg.norm(z_new - z))
        z = z_new
        if r_norm <= config.eps_primal and s_norm <= config.eps_dual:
            converged = True
            break

    if not converged:
        log.debug("ADMM hit max_iter=%d (r=%.3g, s=%.3g)", config.max_iter, r_norm, s_norm)

    trace = None
    if config.record_trace:
        trace = Trace(np.array(xs), np.array(etas).reshape(k, problem.d_eq), np.array(vs))
    return QPSolution(
        z_star=z,
        x_star=x,
        eta_star=eta,
        mu_star=mu,
        # x^K + mu^{K-1}; equals z + mu exactly since mu^K = v - clip(v)
        v_star=v,
        iterations=k,
        primal_residual=r_norm,
        dual_residual=s_norm,
        converged=converged,
        rho=rho,
        trace=trace,
    )


def recover_duals(mu_star: np.ndarray, rho: float) -> DualPair:
    scaled = rho * np.asarray(mu_star, dtype=float)
    return DualPair(lambda_minus=-np.minimum(scaled, 0.0), lambda_plus=np.maximum(scaled, 0.0))


def solution_state(solution: QPSolution) -> IterationState:
    """Iteration state to warm-start a new solve from a finished one."""
    return IterationState(
        solution.x_star, solution.z_star, solution.mu_star, solution.eta_star, solution.iterations
    )
