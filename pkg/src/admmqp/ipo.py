"""Integrated predict-and-optimize training through the ADMM layer.

A linear model maps features w to a QP input (a cost vector, the return
vector of a max-Sharpe constraint, or a factor covariance).  Each training
step solves the QP per instance, scores the decision with the realized loss,
backpropagates through the QP with one of the backward engines, chains into
theta, and takes a plain SGD step.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .admm import admm_solve, factorize_kkt
from .core import (
    QPError,
    QPProblem,
    SingularBackwardSystem,
    SolverConfig,
    field_rngs,
    validate_problem,
)
from .diff import BackwardMethod, backward

log = logging.getLogger(__name__)

OBJECTIVES = ("qp_decision", "max_sharpe", "min_variance")
RHO_P = 0.50


class InfeasibleRecast(QPError, ValueError):
    """No entry of the predicted return vector is positive."""


class DegenerateRisk(QPError, ValueError):
    pass


class ZeroSum(QPError, ValueError):
    pass


class RankDeficientFeatures(QPError, np.linalg.LinAlgError):
    pass


class NonPositiveResidualVariance(QPError, ValueError):
    pass


@dataclass
class LinearModel:
    theta: np.ndarray  # (d_w, d_z)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta has non-finite entries")

    def predict(self, w: np.ndarray) -> np.ndarray:
        return np.asarray(w) @ self.theta


@dataclass(frozen=True)
class IPODataset:
    """Features, realized outcomes and the fixed parts of the decision QP.

    ``P[i]`` is the realized cost (learn-p) or asset return vector.  ``Q_true``
    is the covariance used to score decisions.  ``W_cov`` and ``F_diag`` feed
    the factor covariance model of the min-variance objective.
    """

    W: np.ndarray
    P: np.ndarray
    Q_true: np.ndarray
    theta0: np.ndarray
    snr: float | None
    tau: float
    l: np.ndarray
    u: np.ndarray
    A: np.ndarray
    b: np.ndarray
    W_cov: np.ndarray | None = None
    F_diag: np.ndarray | None = None

    def __post_init__(self):
        m, d_w = self.W.shape
        if m < 1:
            raise ValueError("dataset needs at least one instance")
        d_z = self.P.shape[1]
        if self.P.shape[0] != m or self.Q_true.shape != (d_z, d_z) or self.theta0.shape != (d_w, d_z):
            raise ValueError("inconsistent dataset shapes")

    @property
    def m(self) -> int:
        return self.W.shape[0]

    @property
    def d_w(self) -> int:
        return self.W.shape[1]

    @property
    def d_z(self) -> int:
        return self.P.shape[1]

    def feature_cov(self, i: int) -> np.ndarray:
        if self.W_cov is None:
            return np.eye(self.d_w)
        return self.W_cov if self.W_cov.ndim == 2 else self.W_cov[i]


def ar1_correlation(d_z: int, rho_p: float = RHO_P) -> np.ndarray:
    idx = np.arange(d_z)
    return rho_p ** np.abs(idx[:, None] - idx[None, :])


def _calibrate_tau(signal: np.ndarray, noise: np.ndarray, snr: float | None) -> float:
    # snr is the variance ratio Var(signal) / Var(tau * noise), pooled over all entries
    if snr is None:
        return 0.0
    if not 0 < snr <= 1:
        raise ValueError("snr must lie in (0, 1]")
    return float(np.sqrt(signal.var() / snr) / np.sqrt(noise.var()))


EXP2_STREAMS = ("theta0", "W", "eps", "l", "u")


def generate_exp2_dataset(d_z: int, d_w: int, m: int, snr: float | None = 0.10, seed: int = 0) -> IPODataset:
    """Synthetic learn-p data: p = w' theta0 + tau eps with eps ~ N(0, Q).

    Q has entries 0.5^|j-k|.  ``snr=None`` gives noiseless data.
    """
    if min(d_z, d_w, m) < 1:
        raise ValueError("dimensions must be positive")
    rng = field_rngs(seed, EXP2_STREAMS)
    Q = ar1_correlation(d_z)
    theta0 = rng["theta0"].standard_normal((d_w, d_z)) / np.sqrt(d_w)
    W = rng["W"].standard_normal((m, d_w))
    eps = rng["eps"].multivariate_normal(np.zeros(d_z), Q, size=m, method="cholesky")
    signal = W @ theta0
    tau = _calibrate_tau(signal, eps, snr)
    l = rng["l"].uniform(-1.0, 0.0, d_z)
    u = rng["u"].uniform(0.0, 1.0, d_z)
    return IPODataset(
        W=W, P=signal + tau * eps, Q_true=Q, theta0=theta0, snr=snr, tau=tau,
        l=l, u=u, A=np.ones((1, d_z)), b=np.ones(1),
    )


def generate_factor_dataset(d_z: int, d_w: int, m: int, snr: float | None = 0.10, seed: int = 0) -> IPODataset:
    """Synthetic factor-model returns for the portfolio objectives.

    a = theta0' w + tau eps with w ~ N(0, I) and eps ~ N(0, R), R the 0.5^|j-k|
    correlation.  Returns are rescaled to unit pooled standard deviation, and
    ``Q_true`` is the implied return covariance theta0' theta0 + tau^2 R.
    Bounds are the long-only box [0, 1] with a budget constraint.
    """
    base = generate_exp2_dataset(d_z, d_w, m, snr, seed)
    scale = float(base.P.std()) or 1.0
    theta0 = base.theta0 / scale
    tau = base.tau / scale
    R = ar1_correlation(d_z)
    Q_true = theta0.T @ theta0 + tau**2 * R
    return IPODataset(
        W=base.W, P=base.P / scale, Q_true=Q_true, theta0=theta0, snr=snr, tau=tau,
        l=np.zeros(d_z), u=np.ones(d_z), A=np.ones((1, d_z)), b=np.ones(1),
        W_cov=np.eye(d_w), F_diag=np.full(d_z, tau**2),
    )


# -- losses ---------------------------------------------------------------------


def qp_decision_loss(z, p_true, Q_true) -> float:
    return float(z @ p_true + 0.5 * z @ Q_true @ z)


def qp_decision_grad(z, p_true, Q_true) -> np.ndarray:
    return p_true + Q_true @ z


def sharpe_loss(z, a_true, Q_true) -> float:
    """Negative realized Sharpe ratio; invariant to positive rescaling of z."""
    risk = float(z @ Q_true @ z)
    if risk <= 1e-14:
        raise DegenerateRisk(f"portfolio variance {risk:.3g} is not positive")
    return -float(a_true @ z) / np.sqrt(risk)


def sharpe_grad(z, a_true, Q_true) -> np.ndarray:
    Qz = Q_true @ z
    risk = float(z @ Qz)
    if risk <= 1e-14:
        raise DegenerateRisk(f"portfolio variance {risk:.3g} is not positive")
    sigma = np.sqrt(risk)
    return -(a_true / sigma - float(a_true @ z) * Qz / sigma**3)


def min_var_loss(z, Q_true) -> float:
    return float(z @ Q_true @ z)


def min_var_grad(z, Q_true) -> np.ndarray:
    return 2.0 * Q_true @ z


# -- portfolio helpers ----------------------------------------------------------


def max_sharpe_problem(a_hat, Q) -> QPProblem:
    """Convex recast: minimize 0.5 z'Qz s.t. a_hat'z = 1, z >= 0."""
    a_hat = np.asarray(a_hat, dtype=float)
    if not np.any(a_hat > 0):
        raise InfeasibleRecast("max-Sharpe recast needs a positive predicted return")
    d_z = a_hat.shape[0]
    return validate_problem(Q, np.zeros(d_z), a_hat.reshape(1, -1), [1.0], np.zeros(d_z), np.full(d_z, np.inf))


def normalize_weights(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    total = z.sum()
    if abs(total) <= 1e-12:
        raise ZeroSum("weights sum to zero")
    return z / total


def build_covariance(theta, W_cov, F_diag) -> np.ndarray:
    F_diag = np.asarray(F_diag, dtype=float)
    if np.any(F_diag <= 0):
        raise NonPositiveResidualVariance("residual variances must be positive")
    theta = np.asarray(theta, dtype=float)
    Qh = theta.T @ W_cov @ theta
    return 0.5 * (Qh + Qh.T) + np.diag(F_diag)


def ols_fit(dataset: IPODataset) -> LinearModel:
    """Columnwise least squares of the outcomes on the features."""
    W = dataset.W
    if W.shape[0] <= W.shape[1] or np.linalg.matrix_rank(W) < W.shape[1]:
        raise RankDeficientFeatures("W'W is singular")
    theta, *_ = np.linalg.lstsq(W, dataset.P, rcond=None)
    return LinearModel(theta)


def ols_residual_variance(dataset: IPODataset, model: LinearModel) -> np.ndarray:
    resid = dataset.P - model.predict(dataset.W)
    return resid.var(axis=0)


# -- training -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    backward_method: BackwardMethod = BackwardMethod.FIXED_POINT
    train_eps: float = 1e-3
    eval_eps: float = 1e-6
    seed: int = 0
    rho: float = 1.0
    max_iter: int = 10_000
    jobs: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.jobs < 1:
            raise ValueError("epochs, batch_size and jobs must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 < self.eval_eps <= self.train_eps:
            raise ValueError("need 0 < eval_eps <= train_eps")
        object.__setattr__(self, "backward_method", BackwardMethod(self.backward_method))


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    forward_seconds: list[float] = field(default_factory=list)
    backward_seconds: list[float] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)
    theta: np.ndarray | None = None


def init_theta(d_w: int, d_z: int, seed: int) -> np.ndarray:
    """N(0, 0.01) entries (standard deviation 0.1)."""
    return np.random.default_rng(seed).normal(0.0, 0.1, (d_w, d_z))


def _check_objective(objective: str) -> str:
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    return objective


def decision_problem(dataset: IPODataset, theta: np.ndarray, i: int, objective: str) -> QPProblem:
    """The QP whose solution is the decision for instance i under theta."""
    w = dataset.W[i]
    if objective == "qp_decision":
        # the forward QP minimizes -z'p_hat + 0.5 z'Qz
        return validate_problem(dataset.Q_true, -(w @ theta), dataset.A, dataset.b, dataset.l, dataset.u)
    if objective == "max_sharpe":
        return max_sharpe_problem(w @ theta, dataset.Q_true)
    Qh = build_covariance(theta, dataset.feature_cov(i), dataset.F_diag)
    return validate_problem(Qh, np.zeros(dataset.d_z), dataset.A, dataset.b, dataset.l, dataset.u)


def realized_loss(dataset: IPODataset, i: int, z: np.ndarray, objective: str) -> float:
    if objective == "qp_decision":
        return qp_decision_loss(z, dataset.P[i], dataset.Q_true)
    if objective == "max_sharpe":
        return sharpe_loss(z, dataset.P[i], dataset.Q_true)
    return min_var_loss(z, dataset.Q_true)


def _loss_seed(dataset: IPODataset, i: int, z: np.ndarray, objective: str) -> np.ndarray:
    if objective == "qp_decision":
        return qp_decision_grad(z, dataset.P[i], dataset.Q_true)
    if objective == "max_sharpe":
        return sharpe_grad(z, dataset.P[i], dataset.Q_true)
    return min_var_grad(z, dataset.Q_true)


def chain_theta(dataset: IPODataset, theta: np.ndarray, i: int, bundle, objective: str) -> np.ndarray:
    """Pull a QP gradient bundle back to the model parameter."""
    w = dataset.W[i]
    if objective == "qp_decision":
        return np.outer(w, -bundle.dp)
    if objective == "max_sharpe":
        return np.outer(w, bundle.dA[0])
    cov = dataset.feature_cov(i)
    return cov @ theta @ (bundle.dQ + bundle.dQ.T)


@dataclass
class _InstanceResult:
    loss: float
    grad: np.ndarray | None
    forward_seconds: float
    backward_seconds: float


def instance_gradient(
    dataset: IPODataset,
    theta: np.ndarray,
    i: int,
    objective: str,
    config: TrainConfig,
    fact=None,
) -> _InstanceResult | None:
    """Loss and theta-gradient for one instance; None if the instance is skipped."""
    method = config.backward_method
    solver_cfg = SolverConfig.with_tol(
        config.train_eps, rho=config.rho, max_iter=config.max_iter,
        record_trace=method is BackwardMethod.UNROLLED,
    )
    try:
        problem = decision_problem(dataset, theta, i, objective)
    except InfeasibleRecast:
        log.info("instance %d skipped: infeasible max-Sharpe recast", i)
        return None
    t0 = time.perf_counter()
    sol = admm_solve(problem, solver_cfg, factorization=fact)
    t1 = time.perf_counter()
    loss = realized_loss(dataset, i, sol.z_star, objective)
    seed = _loss_seed(dataset, i, sol.z_star, objective)
    t2 = time.perf_counter()
    try:
        bundle = backward(problem, sol, seed, method, fact)
    except SingularBackwardSystem:
        log.info("instance %d skipped: singular backward system", i)
        return _InstanceResult(loss, None, t1 - t0, time.perf_counter() - t2)
    t3 = time.perf_counter()
    grad = chain_theta(dataset, theta, i, bundle, objective)
    return _InstanceResult(loss, grad, t1 - t0, t3 - t2)


def _shared_factorization(dataset: IPODataset, theta: np.ndarray, objective: str, rho: float):
    # Q and A are the same for every instance of a batch unless the constraint
    # row (max-Sharpe) or the feature covariance varies per instance
    if objective == "qp_decision":
        return factorize_kkt(decision_problem(dataset, theta, 0, objective), rho)
    if objective == "min_variance" and (dataset.W_cov is None or dataset.W_cov.ndim == 2):
        return factorize_kkt(decision_problem(dataset, theta, 0, objective), rho)
    return None


def batch_gradient(
    dataset: IPODataset,
    theta: np.ndarray,
    idx: np.ndarray,
    objective: str,
    config: TrainConfig,
    fact=None,
    pool: ThreadPoolExecutor | None = None,
):
    """Mean gradient over the non-skipped instances of a batch.

    Per-instance results are reduced in batch order, so the sum is the same
    whether or not a pool is used.
    """
    if fact is None:
        fact = _shared_factorization(dataset, theta, objective, config.rho)

    def work(i):
        return instance_gradient(dataset, theta, int(i), objective, config, fact)

    results = list(pool.map(work, idx)) if pool is not None else [work(i) for i in idx]
    losses, grad, n_grad, fwd, bwd, skipped = [], np.zeros_like(theta), 0, 0.0, 0.0, 0
    for res in results:
        if res is None:
            skipped += 1
            continue
        losses.append(res.loss)
        fwd += res.forward_seconds
        bwd += res.backward_seconds
        if res.grad is None:
            skipped += 1
        else:
            grad += res.grad
            n_grad += 1
    if n_grad:
        grad /= n_grad
    return grad, losses, fwd, bwd, skipped


def train(
    dataset: IPODataset,
    objective: str,
    config: TrainConfig | None = None,
    theta_init: np.ndarray | None = None,
) -> TrainHistory:
    """Mini-batch SGD on theta.  The loss recorded for an epoch is the mean
    realized loss over the instances processed in it, each at the theta in
    force when its batch was solved."""
    config = config or TrainConfig()
    _check_objective(objective)
    theta = (
        init_theta(dataset.d_w, dataset.d_z, config.seed) if theta_init is None
        else np.array(theta_init, dtype=float)
    )
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    fixed_fact = None
    if objective == "qp_decision":
        # Q and A never change: factorize once for the whole run
        fixed_fact = _shared_factorization(dataset, theta, objective, config.rho)
    pool = ThreadPoolExecutor(config.jobs) if config.jobs > 1 else None
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(dataset.m)
            losses, fwd, bwd, skipped = [], 0.0, 0.0, 0
            for start in range(0, dataset.m, config.batch_size):
                idx = order[start : start + config.batch_size]
                g, batch_losses, f, b, s = batch_gradient(
                    dataset, theta, idx, objective, config, fixed_fact, pool
                )
                theta = theta - config.learning_rate * g
                losses += batch_losses
                fwd, bwd, skipped = fwd + f, bwd + b, skipped + s
            # fsum: the epoch mean must not depend on the shuffle order
            history.loss.append(math.fsum(losses) / len(losses) if losses else float("nan"))
            history.forward_seconds.append(fwd)
            history.backward_seconds.append(bwd)
            history.skipped.append(skipped)
            log.info("epoch %d: loss %.6g (%d skipped)", epoch + 1, history.loss[-1], skipped)
    finally:
        if pool is not None:
            pool.shutdown()
    history.theta = theta
    return history


def policy_decisions(dataset: IPODataset, theta: np.ndarray, objective: str, eps: float = 1e-6, rho: float = 1.0):
    """Decisions of the policy theta on every instance.

    An infeasible max-Sharpe recast falls back to equal weights.
    """
    _check_objective(objective)
    cfg = SolverConfig.with_tol(eps, rho=rho)
    fact = _shared_factorization(dataset, theta, objective, rho)
    out = np.empty((dataset.m, dataset.d_z))
    for i in range(dataset.m):
        try:
            problem = decision_problem(dataset, theta, i, objective)
        except InfeasibleRecast:
            out[i] = np.full(dataset.d_z, 1.0 / dataset.d_z)
            continue
        z = admm_solve(problem, cfg, factorization=fact).z_star
        out[i] = normalize_weights(z) if objective == "max_sharpe" else z
    return out


def evaluate(dataset: IPODataset, theta: np.ndarray, objective: str, eps: float = 1e-6, rho: float = 1.0) -> float:
    """Mean realized loss of the policy theta over the whole dataset."""
    Z = policy_decisions(dataset, theta, objective, eps, rho)
    return float(np.mean([realized_loss(dataset, i, Z[i], objective) for i in range(dataset.m)]))


def ols_policy_theta(dataset: IPODataset) -> np.ndarray:
    return ols_fit(dataset).theta


def with_ols_residuals(dataset: IPODataset) -> IPODataset:
    """Copy of a factor dataset whose F_diag is the OLS residual variance."""
    model = ols_fit(dataset)
    F = ols_residual_variance(dataset, model)
    return IPODataset(**{**dataset.__dict__, "F_diag": F})
