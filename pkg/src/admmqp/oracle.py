"""Ground truth for tests: an exact active-set QP solver and finite differences.

Nothing here imports the ADMM solver.  The active-set method is the textbook
primal one: start from a feasible vertex (found by an LP), keep a working set
of bounds pinned, take equality-constrained Newton steps on the free
coordinates, add blocking bounds, and release the bound with the most
negative multiplier once the step vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linprog

from .core import CyclingDetected, QPProblem, QPSolution, SingularKKT

STEP_TOL = 1e-12
MULT_TOL = 1e-11


def _feasible_start(problem: QPProblem) -> np.ndarray:
    bounds = [
        (None if np.isneginf(lo) else lo, None if np.isposinf(hi) else hi)
        for lo, hi in zip(problem.l, problem.u)
    ]
    if problem.d_eq == 0:
        z = np.clip(np.zeros(problem.d_z), problem.l, problem.u)
        return z
    res = linprog(
        np.zeros(problem.d_z), A_eq=problem.A, b_eq=problem.b, bounds=bounds, method="highs"
    )
    if res.status != 0:
        raise SingularKKT(f"no feasible point: {res.message}")
    return np.clip(res.x, problem.l, problem.u)


def _full_row_rank(A: np.ndarray) -> bool:
    if A.shape[0] == 0:
        return True
    if A.shape[1] < A.shape[0]:
        return False
    return np.linalg.matrix_rank(A) == A.shape[0]


def _eqp_step(problem: QPProblem, z: np.ndarray, free: np.ndarray):
    """Newton step on the free coordinates with the equalities kept satisfied."""
    F = np.flatnonzero(free)
    nf, d_eq = F.size, problem.d_eq
    g = problem.Q @ z + problem.p
    K = np.zeros((nf + d_eq, nf + d_eq))
    K[:nf, :nf] = problem.Q[np.ix_(F, F)]
    K[:nf, nf:] = problem.A[:, F].T
    K[nf:, :nf] = problem.A[:, F]
    rhs = np.concatenate([-g[F], np.zeros(d_eq)])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularKKT("reduced KKT system is singular") from exc
    step = np.zeros(problem.d_z)
    step[F] = sol[:nf]
    return step, sol[nf:]


def reference_solve(problem: QPProblem, rho: float = 1.0, max_iter: int | None = None) -> QPSolution:
    """Solve exactly by a primal active-set method.

    Duals come back in the ADMM convention: ``rho * mu_star`` is the box
    multiplier (positive at an active upper bound, negative at an active
    lower bound), and ``v_star = z_star + mu_star``.
    """
    d_z = problem.d_z
    l, u = problem.l, problem.u
    if max_iter is None:
        max_iter = d_z * 2 ** min(d_z, 20)

    z = _feasible_start(problem)
    scale = 1.0 + np.abs(z).max(initial=0.0)
    at_lower = np.isfinite(l) & (np.abs(z - l) <= 1e-12 * scale)
    at_upper = np.isfinite(u) & (np.abs(z - u) <= 1e-12 * scale) & ~at_lower
    z[at_lower] = l[at_lower]
    z[at_upper] = u[at_upper]
    free = ~(at_lower | at_upper)
    # the pinned bounds plus A must be linearly independent
    for j in np.flatnonzero(~free):
        if _full_row_rank(problem.A[:, free]):
            break
        free[j] = True
        at_lower[j] = at_upper[j] = False

    seen = set()
    for it in range(max_iter):
        step, eta = _eqp_step(problem, z, free)
        if np.abs(step).max(initial=0.0) <= STEP_TOL * (1.0 + np.abs(z).max(initial=0.0)):
            # stationary on the working set: check multiplier signs
            r = problem.Q @ z + problem.p + problem.A.T @ eta
            mult = np.where(at_lower, r, np.where(at_upper, -r, np.inf))
            j = int(np.argmin(mult))
            if mult[j] >= -MULT_TOL * (1.0 + np.abs(r).max(initial=0.0)):
                break
            key = (at_lower.tobytes(), at_upper.tobytes())
            if key in seen:
                raise CyclingDetected(f"active set revisited after {it} iterations")
            seen.add(key)
            at_lower[j] = at_upper[j] = False
            free[j] = True
            continue

        # longest feasible step along `step`
        alpha, block, block_lower = 1.0, -1, False
        with np.errstate(divide="ignore", invalid="ignore"):
            to_l = np.where(free & (step < 0) & np.isfinite(l), (l - z) / step, np.inf)
            to_u = np.where(free & (step > 0) & np.isfinite(u), (u - z) / step, np.inf)
        jl, ju = int(np.argmin(to_l)), int(np.argmin(to_u))
        if to_l[jl] < alpha:
            alpha, block, block_lower = to_l[jl], jl, True
        if to_u[ju] < alpha:
            alpha, block, block_lower = to_u[ju], ju, False
        z = z + max(alpha, 0.0) * step
        if block >= 0:
            free[block] = False
            if block_lower:
                at_lower[block], z[block] = True, l[block]
            else:
                at_upper[block], z[block] = True, u[block]
    else:
        raise CyclingDetected(f"no convergence within {max_iter} active-set iterations")

    z = np.clip(z, l, u)
    r = problem.Q @ z + problem.p + problem.A.T @ eta
    box_mult = np.where(free, 0.0, -r)  # rho*mu; zero on free coordinates
    mu = box_mult / rho
    return QPSolution(
        z_star=z,
        x_star=z.copy(),
        eta_star=eta,
        mu_star=mu,
        v_star=z + mu,
        iterations=it + 1,
        primal_residual=0.0,
        dual_residual=0.0,
        converged=True,
        rho=rho,
    )


def kkt_residuals(problem: QPProblem, z, eta, mu, rho: float) -> dict[str, float]:
    """Infinity-norm residuals of stationarity, feasibility and complementarity."""
    box = rho * np.asarray(mu)
    lam_minus, lam_plus = -np.minimum(box, 0.0), np.maximum(box, 0.0)
    stationarity = problem.p + problem.Q @ z + problem.A.T @ eta + box
    with np.errstate(invalid="ignore"):
        slack_l = np.where(np.isfinite(problem.l), z - problem.l, 0.0)
        slack_u = np.where(np.isfinite(problem.u), problem.u - z, 0.0)
    return {
        "stationarity": float(np.abs(stationarity).max(initial=0.0)),
        "equality": float(np.abs(problem.A @ z - problem.b).max(initial=0.0)),
        "bounds": float(max(np.maximum(-slack_l, 0).max(initial=0), np.maximum(-slack_u, 0).max(initial=0))),
        "complementarity": float(
            max(np.abs(lam_minus * slack_l).max(initial=0.0), np.abs(lam_plus * slack_u).max(initial=0.0))
        ),
        "dual_sign": float(max(np.maximum(-lam_minus, 0).max(initial=0), np.maximum(-lam_plus, 0).max(initial=0))),
    }


# -- finite differences -------------------------------------------------------

TARGETS = ("Q", "p", "A", "b", "l", "u")


@dataclass(frozen=True)
class FDSpec:
    target: str
    index: tuple
    step: float = 1e-5

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")
        if not self.step > 0:
            raise ValueError("step must be positive")


def _perturbed(problem: QPProblem, spec: FDSpec, h: float) -> QPProblem:
    arr = np.array(getattr(problem, spec.target), dtype=float)
    idx = tuple(spec.index)
    if spec.target == "Q":
        j, k = idx
        # stay in symmetric space: (j,k) and (k,j) each move by h/2
        arr[j, k] += h / 2
        arr[k, j] += h / 2
    else:
        arr[idx] += h
    return problem.replace(**{spec.target: arr})


def fd_gradient(
    problem: QPProblem,
    loss_fn: Callable[[np.ndarray], float],
    spec: FDSpec,
    solver: Callable[[QPProblem], QPSolution] = reference_solve,
) -> float:
    """Central difference of loss(z*(theta)) in one problem entry."""
    h = spec.step
    plus = loss_fn(solver(_perturbed(problem, spec, h)).z_star)
    minus = loss_fn(solver(_perturbed(problem, spec, -h)).z_star)
    return (plus - minus) / (2 * h)


def fd_bundle(
    problem: QPProblem,
    loss_fn: Callable[[np.ndarray], float],
    step: float = 1e-5,
    solver: Callable[[QPProblem], QPSolution] = reference_solve,
    skip_infinite_bounds: bool = True,
) -> dict[str, np.ndarray]:
    """Finite-difference gradient for every entry of every problem variable.

    dQ is filled with the symmetric-direction derivative, which equals the
    symmetric part of the unconstrained gradient.
    """
    out = {}
    for name in TARGETS:
        arr = getattr(problem, name)
        grad = np.zeros(arr.shape)
        if name == "Q":
            n = arr.shape[0]
            for j in range(n):
                for k in range(j, n):
                    g = fd_gradient(problem, loss_fn, FDSpec("Q", (j, k), step), solver)
                    grad[j, k] = grad[k, j] = g
        else:
            for idx in np.ndindex(arr.shape):
                if skip_infinite_bounds and not np.isfinite(arr[idx]):
                    continue
                grad[idx] = fd_gradient(problem, loss_fn, FDSpec(name, idx, step), solver)
        out["d" + name] = grad
    return out


def complementarity_margin(problem: QPProblem, solution: QPSolution) -> float:
    """Smallest distance from v* to a finite bound.

    For an inactive coordinate this is the slack of z*, for an active one it is
    |mu*|; a small value means the solution map is (nearly) nondifferentiable.
    """
    v = solution.v_star
    dist = np.concatenate([np.abs(v - problem.l), np.abs(problem.u - v)])
    dist = dist[np.isfinite(dist)]
    return float(dist.min(initial=np.inf))
