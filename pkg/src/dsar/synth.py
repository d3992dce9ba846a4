"""Synthetic networks, covariates, noise and SAR responses."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .exceptions import ConfigurationError, IsolatedNodeWarning, ModelValidityError, SolverError
from .network import Dataset, SparseNetwork, row_normalize

__all__ = [
    "NetworkSpec",
    "NoiseModel",
    "TrueModel",
    "DEFAULT_THETA",
    "gen_sbm",
    "gen_powerlaw",
    "gen_network",
    "gen_covariates",
    "gen_noise",
    "synth_response",
    "make_dataset",
]

DEFAULT_THETA = np.array([0.4, 0.2, 0.4, 0.6, 0.8, 1.0])


@dataclass
class NetworkSpec:
    kind: str = "sbm"
    n_nodes: int = 2000
    sbm_blocks: int = 20
    sbm_p_in: float | None = None  # default 20 / N
    sbm_p_out: float | None = None  # default 2 / N
    pl_alpha: float = 3.0
    ensure_min_outdegree: bool = False
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("sbm", "powerlaw"):
            raise ConfigurationError(f"unknown network kind {self.kind!r}")
        if self.sbm_p_in is None:
            self.sbm_p_in = min(1.0, 20.0 / self.n_nodes)
        if self.sbm_p_out is None:
            self.sbm_p_out = min(1.0, 2.0 / self.n_nodes)
        if not (0 <= self.sbm_p_in <= 1 and 0 <= self.sbm_p_out <= 1):
            raise ConfigurationError("SBM probabilities must lie in [0, 1]")
        if self.sbm_blocks < 1:
            raise ConfigurationError("sbm_blocks must be >= 1")
        if self.pl_alpha <= 1:
            raise ConfigurationError("pl_alpha must exceed 1")


@dataclass
class NoiseModel:
    """Error-term law.

    ``kind`` is one of ``iid_gaussian``, ``iid_student_t``,
    ``sparse_correlated`` (``sparse_pairs`` with covariance ``pair_cov``),
    ``equicorrelated`` (``cov(e_i, e_j) = gamma``, unit diagonal scaled by
    ``sigma**2``) or ``heteroscedastic`` (per-node ``variances``).
    """

    kind: str = "iid_gaussian"
    sigma: float = 1.0
    t_dof: float = 5.0
    sparse_pairs: np.ndarray | None = None
    pair_cov: float = 0.0
    gamma: float = 0.0
    variances: np.ndarray | None = None

    KINDS = ("iid_gaussian", "iid_student_t", "sparse_correlated", "equicorrelated", "heteroscedastic")

    def validate(self, n_nodes):
        if self.kind not in self.KINDS:
            raise ConfigurationError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ModelValidityError("sigma must be non-negative")
        s2 = self.sigma**2
        if self.kind == "iid_student_t" and self.t_dof <= 2:
            raise ModelValidityError("t_dof must exceed 2 for a finite variance")
        if self.kind == "equicorrelated":
            # sigma^2 ((1 - g) I + g 11^T) with g = gamma / sigma^2
            lam = s2 - self.gamma
            if lam <= 0 or lam + n_nodes * self.gamma <= 0:
                raise ModelValidityError(
                    f"equicorrelated covariance not positive definite (gamma={self.gamma}, sigma^2={s2})"
                )
        if self.kind == "heteroscedastic":
            v = np.asarray(self.variances, dtype=float)
            if v.shape != (n_nodes,) or (v < 0).any():
                raise ModelValidityError("variances must be a non-negative vector of length n_nodes")
        if self.kind == "sparse_correlated":
            pairs = self._pairs()
            deg = np.bincount(pairs.ravel(), minlength=n_nodes) if len(pairs) else np.zeros(n_nodes)
            if (pairs[:, 0] == pairs[:, 1]).any() if len(pairs) else False:
                raise ModelValidityError("sparse_pairs must be off-diagonal")
            if (abs(self.pair_cov) * deg > s2 + 1e-15).any():
                raise ModelValidityError(
                    "sparse correlated covariance must be diagonally dominant: "
                    "|pair_cov| * pairs-per-node <= sigma^2"
                )
            if n_nodes <= 500:
                try:
                    np.linalg.cholesky(self.covariance(n_nodes))
                except np.linalg.LinAlgError:
                    raise ModelValidityError("sparse correlated covariance is indefinite") from None

    def _pairs(self):
        if self.sparse_pairs is None:
            return np.zeros((0, 2), dtype=np.int64)
        return np.asarray(self.sparse_pairs, dtype=np.int64).reshape(-1, 2)

    def covariance(self, n_nodes):
        """Dense ``Sigma_e``; only for small ``n_nodes`` (tests)."""
        s2 = self.sigma**2
        if self.kind in ("iid_gaussian", "iid_student_t"):
            return s2 * np.eye(n_nodes)
        if self.kind == "heteroscedastic":
            return np.diag(np.asarray(self.variances, dtype=float))
        if self.kind == "equicorrelated":
            return (s2 - self.gamma) * np.eye(n_nodes) + self.gamma * np.ones((n_nodes, n_nodes))
        c = s2 * np.eye(n_nodes)
        for i, j in self._pairs():
            c[i, j] += self.pair_cov
            c[j, i] += self.pair_cov
        return c


@dataclass
class TrueModel:
    theta0: np.ndarray = field(default_factory=lambda: DEFAULT_THETA.copy())
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=float)
        if not abs(self.theta0[0]) < 1:
            raise ConfigurationError("|rho_0| must be < 1")

    @property
    def rho0(self):
        return float(self.theta0[0])

    @property
    def beta0(self):
        return self.theta0[1:]


def _bernoulli_pairs(n, p, rng):
    """Independent Bernoulli(p) draw over all ordered off-diagonal pairs."""
    total = n * (n - 1)
    if p <= 0 or total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    m = rng.binomial(total, p) if p < 1 else total
    idx = rng.choice(total, size=m, replace=False) if m < total else np.arange(total)
    u = idx // (n - 1)
    v = idx % (n - 1)
    v = v + (v >= u)
    return u, v


def _add_min_outdegree(rows, cols, n, rng):
    deg = np.bincount(rows, minlength=n)
    lonely = np.flatnonzero(deg == 0)
    if len(lonely) and n > 1:
        tgt = rng.integers(0, n - 1, size=len(lonely))
        tgt = tgt + (tgt >= lonely)
        rows = np.concatenate([rows, lonely])
        cols = np.concatenate([cols, tgt])
    return rows, cols


def _to_network(rows, cols, n):
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1.0
    return row_normalize(a)


def gen_sbm(spec: NetworkSpec, rng=None) -> SparseNetwork:
    """Directed stochastic block model; ``a_ij`` and ``a_ji`` drawn independently.

    Nodes are assigned to ``sbm_blocks`` blocks of (near) equal size at random.

    Uses an exact two-layer scheme: all pairs at the smaller probability,
    then the denser class topped up at ``(p_hi - p_lo) / (1 - p_lo)``.
    """
    rng = np.random.default_rng(spec.seed if rng is None else rng)
    n = spec.n_nodes
    labels = rng.permutation(np.arange(n) % spec.sbm_blocks)  # balanced blocks
    p_lo, p_hi = sorted((spec.sbm_p_in, spec.sbm_p_out))
    u, v = _bernoulli_pairs(n, p_lo, rng)
    rows, cols = [u], [v]
    if p_hi > p_lo:
        q = 1.0 if p_lo >= 1 else (p_hi - p_lo) / (1 - p_lo)
        u2, v2 = _bernoulli_pairs(n, q, rng)
        same = labels[u2] == labels[v2]
        keep = same if spec.sbm_p_in > spec.sbm_p_out else ~same
        rows.append(u2[keep])
        cols.append(v2[keep])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    if spec.ensure_min_outdegree:
        rows, cols = _add_min_outdegree(rows, cols, n, rng)
    return _to_network(rows, cols, n)


def powerlaw_pmf(alpha, k_max):
    k = np.arange(1, k_max + 1, dtype=float)
    w = k ** (-alpha)
    return w / w.sum()


def gen_powerlaw(spec: NetworkSpec, rng=None) -> SparseNetwork:
    """In-degrees drawn from ``P(d = k) ~ k^-alpha`` on ``1..N-1``, followers uniform."""
    rng = np.random.default_rng(spec.seed if rng is None else rng)
    n = spec.n_nodes
    if n < 2:
        return _to_network(np.zeros(0, int), np.zeros(0, int), n)
    pmf = powerlaw_pmf(spec.pl_alpha, n - 1)
    deg = rng.choice(np.arange(1, n), size=n, p=pmf)
    followee = np.repeat(np.arange(n), deg)
    # followers: distinct, never the followee itself
    follower = rng.integers(0, n - 1, size=len(followee))
    follower += follower >= followee
    while True:
        key = followee * n + follower
        _, first = np.unique(key, return_index=True)
        dup = np.ones(len(key), dtype=bool)
        dup[first] = False
        if not dup.any():
            break
        redo = rng.integers(0, n - 1, size=dup.sum())
        follower[dup] = redo + (redo >= followee[dup])
    rows, cols = follower, followee
    if spec.ensure_min_outdegree:
        rows, cols = _add_min_outdegree(rows, cols, n, rng)
    return _to_network(rows, cols, n)


def gen_network(spec: NetworkSpec, rng=None) -> SparseNetwork:
    if spec.kind == "sbm":
        return gen_sbm(spec, rng)
    return gen_powerlaw(spec, rng)


def gen_covariates(n_nodes, p=5, seed=None):
    if p < 1:
        raise ConfigurationError("p must be >= 1")
    return np.random.default_rng(seed).standard_normal((n_nodes, p))


def gen_noise(model: NoiseModel, n_nodes, seed=None):
    """Draw ``e = Sigma_e^{1/2} z`` for the configured error law."""
    model.validate(n_nodes)
    rng = np.random.default_rng(seed)
    s = model.sigma
    kind = model.kind
    if kind == "iid_gaussian":
        return s * rng.standard_normal(n_nodes)
    if kind == "iid_student_t":
        nu = model.t_dof
        return s * np.sqrt((nu - 2) / nu) * rng.standard_t(nu, size=n_nodes)
    if kind == "heteroscedastic":
        return np.sqrt(np.asarray(model.variances, dtype=float)) * rng.standard_normal(n_nodes)
    if kind == "equicorrelated":
        # closed-form square root of (s^2 - g) I + g 11^T for g >= 0
        g = model.gamma
        z = rng.standard_normal(n_nodes)
        if g >= 0:
            return np.sqrt(s**2 - g) * z + np.sqrt(g) * rng.standard_normal()
        lam = s**2 - g
        c = (np.sqrt(lam + n_nodes * g) - np.sqrt(lam)) / n_nodes
        return np.sqrt(lam) * z + c * z.sum()
    # sparse_correlated: sigma^2 I + c sum (e_i e_j^T + e_j e_i^T) written as a
    # sum of rank-one pair terms plus a non-negative diagonal remainder
    pairs = model._pairs()
    c = model.pair_cov
    deg = np.bincount(pairs.ravel(), minlength=n_nodes).astype(float)
    e = np.sqrt(np.maximum(s**2 - abs(c) * deg, 0.0)) * rng.standard_normal(n_nodes)
    if len(pairs):
        zp = np.sqrt(abs(c)) * rng.standard_normal(len(pairs))
        np.add.at(e, pairs[:, 0], zp)
        np.add.at(e, pairs[:, 1], np.sign(c) * zp)
    return e


def synth_response(net: SparseNetwork, x, model: TrueModel, seed=None, noise=None, tol=1e-10, max_iter=10_000):
    """Solve ``y = rho W y + X beta + e`` by fixed-point iteration.

    ``noise`` overrides the drawn error vector (used for noiseless tests).
    """
    x = np.asarray(x, dtype=float)
    if noise is None:
        noise = gen_noise(model.noise, net.n_nodes, seed)
    rho = model.rho0
    w = net.weights
    row_max = float(np.abs(w).sum(axis=1).max()) if w.nnz else 0.0
    bound = abs(rho) * row_max
    if bound >= 1:
        raise SolverError(f"|rho| * max row sum of W = {bound:.4g} >= 1; fixed point may diverge", bound)
    rhs = x @ model.beta0 + noise
    y = rhs.copy()
    for _ in range(max_iter):
        y_new = rho * (w @ y) + rhs
        if np.abs(y_new - y).max() <= tol * 0.1:
            y = y_new
            break
        y = y_new
    else:
        raise SolverError(f"fixed-point iteration did not converge in {max_iter} sweeps", bound)
    resid = np.abs(y - rho * (w @ y) - rhs).max()
    if resid > tol:
        raise SolverError(f"fixed-point residual {resid:.3g} exceeds {tol}", bound)
    return y


def make_dataset(spec: NetworkSpec, model: TrueModel, p=None, seed=None, quiet=True):
    """Network, covariates, noise and response from one seed (independent child streams)."""
    p = len(model.beta0) if p is None else p
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_net, s_x, s_e = ss.spawn(3)
    with warnings.catch_warnings():
        if quiet:
            warnings.simplefilter("ignore", IsolatedNodeWarning)
        net = gen_network(spec, np.random.default_rng(s_net))
    x = gen_covariates(spec.n_nodes, p, s_x)
    y = synth_response(net, x, model, seed=s_e)
    return Dataset(network=net, X=x, y=y)
