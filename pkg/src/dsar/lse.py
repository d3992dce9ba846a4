"""Least-squares SAR objective on a worker shard and its local optimizer.

For a local node ``i`` write ``u_i = 1 / (1 + rho^2 dtilde_i)`` and

    G_i = y_i - rho (Wy_i + W'y_i) + rho^2 W'Wy_i - (X_i - rho W'X_i)' beta

so that ``F_i(theta) = u_i G_i`` is the ``i``-th entry of
``D S' (S y - X beta)``.  ``F_i`` is linear in ``beta`` and rational in
``rho``, which gives closed-form first and second derivatives.
``theta`` is always the vector ``(rho, beta_1, ..., beta_p)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .exceptions import AggregationError, ConvergenceError, DimensionError
from .network import SparseNetwork, WorkerShard

__all__ = [
    "SolverOptions",
    "ObjectiveEval",
    "LocalSummary",
    "DSOperators",
    "d_s_matrices",
    "eval_F_local",
    "eval_objective",
    "fit_local",
    "one_newton_step",
    "profile_beta",
]


@dataclass
class SolverOptions:
    max_iter: int = 100
    grad_tol: float = 1e-8
    step_tol: float = 1e-12
    rho_bounds: tuple = (-0.99, 0.99)
    armijo_c: float = 1e-4
    multistart: int = 0  # extra starts when the default one fails


@dataclass
class ObjectiveEval:
    value: float
    gradient: np.ndarray | None = None
    hessian: np.ndarray | None = None


@dataclass
class LocalSummary:
    """What a worker sends after local estimation."""

    worker_id: int
    theta_hat: np.ndarray
    hessian_at_opt: np.ndarray
    n_local: int
    sigma2_eps_local: float
    n_iter: int = 0

    def payload(self):
        return (self.theta_hat, self.hessian_at_opt, np.array([self.n_local, self.sigma2_eps_local]))

    @property
    def byte_size(self):
        from .cluster import payload_size

        return payload_size(self.payload())


@dataclass
class DSOperators:
    """``D`` and ``dD/drho`` as diagonals plus ``S = I - rho W`` as an operator."""

    d: np.ndarray
    d_dot: np.ndarray
    s: LinearOperator


def d_s_matrices(view, rho) -> DSOperators:
    """Matrix-free ``D``, ``S`` and ``D_dot`` for a network or a shard.

    For a :class:`WorkerShard` the diagonals cover every stored node and
    ``S`` maps store-indexed vectors to the rows of the local nodes.
    """
    if isinstance(view, SparseNetwork):
        dt = view.col_sq_sums
        w = view.weights
        n = view.n_nodes
        s = LinearOperator((n, n), matvec=lambda v: v - rho * (w @ v), rmatvec=lambda v: v - rho * (w.T @ v), dtype=float)
    elif isinstance(view, WorkerShard):
        dt = view.store_dtilde
        out, pos = view.out_rows, view.local_pos
        s = LinearOperator(
            (view.n_local, len(view.store_ids)),
            matvec=lambda v: v[pos] - rho * (out @ v),
            dtype=float,
        )
    else:
        raise TypeError(f"expected SparseNetwork or WorkerShard, got {type(view).__name__}")
    d = 1.0 / (1.0 + rho**2 * dt)
    return DSOperators(d=d, d_dot=-2.0 * rho * d**2 * dt, s=s)


def _check_theta(shard, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (shard.n_features + 1,):
        raise DimensionError(f"theta must have length {shard.n_features + 1}, got {theta.shape}")
    return theta


def _pieces(shard, theta):
    st = shard.stats
    rho, beta = theta[0], theta[1:]
    b = st.wy + st.wty
    xs = st.X - rho * st.wtx  # rows of (S'X) for the local nodes
    g = st.y - rho * b + rho**2 * st.wtwy - xs @ beta
    u = 1.0 / (1.0 + rho**2 * st.dtilde)
    return st, rho, beta, b, xs, g, u


def eval_F_local(shard: WorkerShard, theta) -> np.ndarray:
    """``F_i(theta)`` for every local node, in ``shard.local_nodes`` order."""
    theta = _check_theta(shard, theta)
    _, _, _, _, _, g, u = _pieces(shard, theta)
    return u * g


def eval_objective(shard: WorkerShard, theta, order=2) -> ObjectiveEval:
    """``Q_k(theta) = N_k^-1 sum_i F_i^2`` and optionally its exact derivatives."""
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    theta = _check_theta(shard, theta)
    st, rho, beta, b, xs, g, u = _pieces(shard, theta)
    nk = shard.n_local
    f = u * g
    value = float(f @ f) / nk
    if order == 0:
        return ObjectiveEval(value)

    dt = st.dtilde
    u1 = -2.0 * rho * dt * u**2
    g_rho = -b + 2.0 * rho * st.wtwy + st.wtx @ beta
    jac = np.empty((nk, len(theta)))
    jac[:, 0] = u1 * g + u * g_rho
    jac[:, 1:] = -u[:, None] * xs
    grad = 2.0 / nk * (jac.T @ f)
    if order == 1:
        return ObjectiveEval(value, grad)

    u2 = -2.0 * dt * u**2 + 8.0 * rho**2 * dt**2 * u**3
    f_rr = u2 * g + 2.0 * u1 * g_rho + 2.0 * u * st.wtwy
    f_rb = -u1[:, None] * xs + u[:, None] * st.wtx
    hess = jac.T @ jac
    hess[0, 0] += f @ f_rr
    cross = f @ f_rb
    hess[0, 1:] += cross
    hess[1:, 0] += cross
    hess *= 2.0 / nk
    return ObjectiveEval(value, grad, hess)


def profile_beta(shard: WorkerShard, rho):
    """Exact minimizer of ``Q_k(rho, .)`` (a linear least-squares problem)."""
    st = shard.stats
    u = 1.0 / (1.0 + rho**2 * st.dtilde)
    a = u[:, None] * (st.X - rho * st.wtx)
    r = u * (st.y - rho * (st.wy + st.wty) + rho**2 * st.wtwy)
    return np.linalg.lstsq(a, r, rcond=None)[0]


def _clamp(theta, bounds):
    theta = theta.copy()
    theta[0] = min(max(theta[0], bounds[0]), bounds[1])
    return theta


def _projected_grad(theta, grad, bounds):
    g = grad.copy()
    if (theta[0] <= bounds[0] and g[0] > 0) or (theta[0] >= bounds[1] and g[0] < 0):
        g[0] = 0.0
    return g


def _line_search(shard, theta, value, grad, step, opts):
    t = 1.0
    while t >= opts.step_tol:
        cand = _clamp(theta + t * step, opts.rho_bounds)
        move = cand - theta
        if not np.any(move):
            return None
        if eval_objective(shard, cand, 0).value <= value + opts.armijo_c * (grad @ move):
            return cand
        t *= 0.5
    return None


def _profile_step(shard, theta, opts):
    """Fallback: optimize beta exactly, then a safeguarded 1-D Newton step in rho."""
    rho = theta[0]
    base = np.concatenate([[rho], profile_beta(shard, rho)])
    ev = eval_objective(shard, base, 2)
    h = ev.hessian
    g_rho = ev.gradient[0]
    try:
        schur = h[0, 0] - h[0, 1:] @ np.linalg.solve(h[1:, 1:], h[1:, 0])
    except np.linalg.LinAlgError:
        schur = 0.0
    d_rho = -g_rho / schur if schur > 0 else -np.sign(g_rho) * 0.1
    t = 1.0
    while t >= opts.step_tol:
        r_new = min(max(rho + t * d_rho, opts.rho_bounds[0]), opts.rho_bounds[1])
        cand = np.concatenate([[r_new], profile_beta(shard, r_new)])
        if eval_objective(shard, cand, 0).value < ev.value:
            return cand
        t *= 0.5
    return base


def _default_init(shard, rho=0.0):
    return np.concatenate([[rho], profile_beta(shard, rho)])


def _newton(shard, theta, opts):
    theta = _clamp(np.asarray(theta, dtype=float), opts.rho_bounds)
    for it in range(1, opts.max_iter + 1):
        ev = eval_objective(shard, theta, 2)
        pg = _projected_grad(theta, ev.gradient, opts.rho_bounds)
        if np.abs(pg).max() <= opts.grad_tol:
            return theta, ev, it, True
        try:
            step = -np.linalg.solve(ev.hessian, ev.gradient)
        except np.linalg.LinAlgError:
            step = None
        new = None
        if step is not None and np.all(np.isfinite(step)) and ev.gradient @ step < 0:
            new = _line_search(shard, theta, ev.value, ev.gradient, step, opts)
        if new is None:
            new = _profile_step(shard, theta, opts)
        if np.abs(new - theta).max() <= opts.step_tol:
            theta = new
            ev = eval_objective(shard, theta, 2)
            return theta, ev, it, True
        theta = new
    ev = eval_objective(shard, theta, 2)
    pg = _projected_grad(theta, ev.gradient, opts.rho_bounds)
    return theta, ev, opts.max_iter, np.abs(pg).max() <= opts.grad_tol


def _residual_variance(shard, theta):
    st = shard.stats
    r = st.y - theta[0] * st.wy - st.X @ theta[1:]
    return float(r @ r) / shard.n_local


def fit_local(shard: WorkerShard, init=None, opts: SolverOptions | None = None) -> LocalSummary:
    """Minimize ``Q_k`` by projected Newton with Armijo backtracking.

    Starts from ``rho = 0`` with the shard OLS fit unless ``init`` is
    given.  Raises :class:`ConvergenceError` when ``max_iter`` is reached
    without meeting the gradient tolerance.
    """
    opts = opts or SolverOptions()
    start = _default_init(shard) if init is None else np.asarray(init, dtype=float)
    theta, ev, n_iter, ok = _newton(shard, start, opts)
    if not ok and opts.multistart:
        lo, hi = opts.rho_bounds
        for r0 in np.linspace(lo / 2, hi / 2, opts.multistart):
            cand = _newton(shard, _default_init(shard, r0), opts)
            if cand[3]:
                theta, ev, n_iter, ok = cand
                break
    if not ok:
        raise ConvergenceError(
            f"worker {shard.worker_id}: Newton did not converge in {opts.max_iter} iterations",
            last_theta=theta,
            grad_norm=float(np.abs(ev.gradient).max()),
        )
    return LocalSummary(
        worker_id=shard.worker_id,
        theta_hat=theta,
        hessian_at_opt=ev.hessian,
        n_local=shard.n_local,
        sigma2_eps_local=_residual_variance(shard, theta),
        n_iter=n_iter,
    )


MAX_CONDITION = 1e12


def newton_update(shard: WorkerShard, at):
    """One undamped Newton step; returns ``(new_theta, hessian_at)``."""
    at = np.asarray(at, dtype=float)
    ev = eval_objective(shard, at, 2)
    h = ev.hessian
    if not np.all(np.isfinite(h)) or np.linalg.cond(h) > MAX_CONDITION:
        raise AggregationError(
            f"worker {shard.worker_id}: Hessian is singular at the broadcast estimate; "
            "fall back to fit_local",
            worker_id=shard.worker_id,
        )
    return at - np.linalg.solve(h, ev.gradient), h


def one_newton_step(shard: WorkerShard, at) -> np.ndarray:
    """``at - H_k(at)^{-1} g_k(at)`` with no line search."""
    return newton_update(shard, at)[0]
