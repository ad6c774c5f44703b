"""Problem and solution containers, validation, and random instance generation.

A QP instance has the form

    minimize    0.5 z'Qz + p'z
    subject to  Az = b,  l <= z <= u

with Q symmetric positive definite and A of full row rank (possibly with
zero rows).  Bounds may be infinite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SYMMETRY_RTOL = 1e-12


class QPError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatch(QPError, ValueError):
    pass


class BoundsInverted(QPError, ValueError):
    pass


class AsymmetricQ(QPError, ValueError):
    pass


class SingularKKT(QPError, np.linalg.LinAlgError):
    """The ADMM matrix [[Q + rho I, A'], [A, 0]] could not be factorized."""


class SingularBackwardSystem(QPError, np.linalg.LinAlgError):
    """The linear system of a backward pass is singular (degenerate active set)."""


class MissingTrace(QPError, ValueError):
    pass


class CyclingDetected(QPError, RuntimeError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class QPProblem:
    """One validated QP instance.  Arrays are read-only after construction."""

    Q: np.ndarray
    p: np.ndarray
    A: np.ndarray
    b: np.ndarray
    l: np.ndarray
    u: np.ndarray

    @property
    def d_z(self) -> int:
        return self.p.shape[0]

    @property
    def d_eq(self) -> int:
        return self.b.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.Q @ z + self.p @ z)

    def replace(self, **changes) -> "QPProblem":
        """Return a new validated problem with some fields swapped out."""
        fields = dict(Q=self.Q, p=self.p, A=self.A, b=self.b, l=self.l, u=self.u)
        fields.update(changes)
        return validate_problem(**fields)


@dataclass(frozen=True)
class SolverConfig:
    rho: float = 1.0
    eps_primal: float = 1e-6
    eps_dual: float = 1e-6
    max_iter: int = 10_000
    record_trace: bool = False

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not (self.eps_primal > 0 and self.eps_dual > 0):
            raise ValueError("stopping tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    @classmethod
    def with_tol(cls, eps: float, **kwargs) -> "SolverConfig":
        return cls(eps_primal=eps, eps_dual=eps, **kwargs)


@dataclass(frozen=True)
class Trace:
    """Per-iteration record of an ADMM run, needed by the unrolled backward pass.

    Row k of each array belongs to iteration k -> k+1:  ``x[k]`` and ``eta[k]``
    come out of the linear solve, ``v[k] = x[k] + mu_k`` is the projection input.
    Memory is O(K * d_z).
    """

    x: np.ndarray
    eta: np.ndarray
    v: np.ndarray

    @property
    def iterations(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class QPSolution:
    z_star: np.ndarray
    x_star: np.ndarray
    eta_star: np.ndarray
    mu_star: np.ndarray
    v_star: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    converged: bool
    rho: float
    trace: Trace | None = field(default=None, repr=False)


@dataclass(frozen=True)
class DualPair:
    lambda_minus: np.ndarray
    lambda_plus: np.ndarray


@dataclass(frozen=True)
class GradientBundle:
    dQ: np.ndarray
    dp: np.ndarray
    dA: np.ndarray
    db: np.ndarray
    dl: np.ndarray
    du: np.ndarray

    NAMES = ("dQ", "dp", "dA", "db", "dl", "du")

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.NAMES}

    def __mul__(self, c: float) -> "GradientBundle":
        return GradientBundle(*(c * getattr(self, n) for n in self.NAMES))

    __rmul__ = __mul__

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(*(getattr(self, n) + getattr(other, n) for n in self.NAMES))


def validate_problem(Q, p, A, b, l, u) -> QPProblem:
    """Check shapes and invariants, symmetrize Q, and freeze the arrays.

    ``A`` may be ``None`` or have zero rows for box-only problems.
    Positive definiteness and the rank of ``A`` are not checked here; they
    surface as :class:`SingularKKT` when the problem is factorized.
    """
    p = np.array(p, dtype=float).reshape(-1)
    d_z = p.shape[0]
    Q = np.array(Q, dtype=float)
    if Q.shape != (d_z, d_z):
        raise DimensionMismatch(f"Q has shape {Q.shape}, expected {(d_z, d_z)}")
    if A is None:
        A = np.zeros((0, d_z))
    A = np.array(A, dtype=float)
    if A.ndim == 1:
        A = A.reshape(1, -1) if A.size else np.zeros((0, d_z))
    b = np.array(b if b is not None else [], dtype=float).reshape(-1)
    if A.shape != (b.shape[0], d_z):
        raise DimensionMismatch(f"A has shape {A.shape}, expected {(b.shape[0], d_z)}")
    l = np.array(l, dtype=float).reshape(-1)
    u = np.array(u, dtype=float).reshape(-1)
    if l.shape != (d_z,) or u.shape != (d_z,):
        raise DimensionMismatch("l and u must have length d_z")
    if np.any(np.isnan(l)) or np.any(np.isnan(u)):
        raise ValueError("bounds must not be NaN")
    if np.any(l > u):
        j = int(np.argmax(l > u))
        raise BoundsInverted(f"l[{j}] = {l[j]} > u[{j}] = {u[j]}")

    scale = max(np.abs(Q).max(initial=0.0), 1.0)
    asym = np.abs(Q - Q.T).max(initial=0.0)
    if asym > SYMMETRY_RTOL * scale:
        raise AsymmetricQ(f"max |Q - Q'| = {asym:.3g}")
    if asym > 0:
        Q = 0.5 * (Q + Q.T)

    return QPProblem(*(_readonly(a) for a in (Q, p, A, b, l, u)))


# -- random generation --------------------------------------------------------

# Each field draws from its own child of SeedSequence(seed), spawned in this
# order, so adding a field never shifts the streams of the existing ones.
EXP1_STREAMS = ("U", "p", "l", "u")


def field_rngs(seed: int, names) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(names, children)}


def generate_exp1_problem(d_z: int, seed: int) -> QPProblem:
    """Random benchmark instance: Q = U'U / (2 d_z), one budget equality.

    U is (2 d_z x d_z) standard normal, p standard normal,
    l ~ U[-2, -1] and u ~ U[1, 2] per coordinate, A = 1', b = 1.
    """
    if d_z < 1:
        raise ValueError("d_z must be positive")
    rng = field_rngs(seed, EXP1_STREAMS)
    U = rng["U"].standard_normal((2 * d_z, d_z))
    Q = U.T @ U / (2 * d_z)
    p = rng["p"].standard_normal(d_z)
    l = rng["l"].uniform(-2.0, -1.0, d_z)
    u = rng["u"].uniform(1.0, 2.0, d_z)
    return validate_problem(Q, p, np.ones((1, d_z)), [1.0], l, u)


# -- serialization ------------------------------------------------------------


def _encode(values) -> list:
    out = []
    for v in np.asarray(values, dtype=float).reshape(-1):
        if np.isposinf(v):
            out.append("inf")
        elif np.isneginf(v):
            out.append("-inf")
        else:
            out.append(float(v))
    return out


def _decode(values) -> np.ndarray:
    return np.array([float(v) for v in values], dtype=float)


def problem_to_dict(problem: QPProblem) -> dict:
    return {
        "d_z": problem.d_z,
        "d_eq": problem.d_eq,
        "Q": _encode(problem.Q),
        "p": _encode(problem.p),
        "A": _encode(problem.A),
        "b": _encode(problem.b),
        "l": _encode(problem.l),
        "u": _encode(problem.u),
    }


def problem_from_dict(data: dict) -> QPProblem:
    d_z, d_eq = int(data["d_z"]), int(data["d_eq"])
    return validate_problem(
        _decode(data["Q"]).reshape(d_z, d_z),
        _decode(data["p"]),
        _decode(data["A"]).reshape(d_eq, d_z),
        _decode(data["b"]),
        _decode(data["l"]),
        _decode(data["u"]),
    )


def save_problem(problem: QPProblem, path) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(problem), indent=1))


def load_problem(path) -> QPProblem:
    return problem_from_dict(json.loads(Path(path).read_text()))
