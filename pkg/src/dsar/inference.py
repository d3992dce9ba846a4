"""Distributed covariance estimation for the aggregated SAR estimators.

Every ``N x N`` matrix a worker contributes is kept in factored form
``M = A @ B.T`` with ``A, B`` sparse ``n_store x N_k``: column ``i`` of
``A`` is supported on node ``i``'s first- and second-order neighborhoods,
which the shard already stores.  Random projection turns each factor pair
into a ``d x d`` matrix at ``O(d * nnz)`` cost.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.stats import norm

from .exceptions import AggregationError, DimensionError, NegativeVarianceError, ProtocolError
from .network import Dataset, WorkerShard

__all__ = [
    "VariancePlugins",
    "ShardFactors",
    "Projectors",
    "InferencePack",
    "SandwichCovariance",
    "RHO_BETA_SIGN",
    "estimate_plugins",
    "pooled_plugins",
    "build_xi_vt",
    "sigma1_block",
    "sigma1_exact",
    "make_projectors",
    "default_proj_dim",
    "build_pack",
    "sigma1_projected",
    "sandwich",
    "confidence_intervals",
    "summary_rows",
]

# Sign of the rho/beta block of Sigma_1, fixed by the Monte-Carlo covariance
# of the score (tests/test_inference.py::test_sigma1_matches_monte_carlo).
# rho_beta_sign=-1 selects the opposite convention.
RHO_BETA_SIGN = 1.0


@dataclass(frozen=True)
class VariancePlugins:
    sigma2_eps: float
    sigma2_tilde: float


def estimate_plugins(theta, dataset: Dataset) -> VariancePlugins:
    """``sigma_eps^2 = |S y - X beta|^2 / N`` and ``sigma^2 = sigma_eps^2 + beta' (X'X/N) beta``."""
    theta = np.asarray(theta, dtype=float)
    w = dataset.network.weights
    r = dataset.y - theta[0] * (w @ dataset.y) - dataset.X @ theta[1:]
    n = dataset.n_nodes
    s2e = float(r @ r) / n
    xb = dataset.X @ theta[1:]
    return VariancePlugins(s2e, s2e + float(xb @ xb) / n)


def pooled_plugins(theta, resid_ss, xtx, n_total) -> VariancePlugins:
    beta = np.asarray(theta, dtype=float)[1:]
    s2e = float(resid_ss) / n_total
    return VariancePlugins(s2e, s2e + float(beta @ xtx @ beta) / n_total)


@dataclass(eq=False)
class ShardFactors:
    """Factored ``Xi_k``, ``V_1k``, ``V_2k`` and the vectors ``T_1k, T_2k, T_3k``.

    ``Xi_k = xi_a @ xi_b.T`` and so on, in store coordinates; ``t3`` has
    shape ``(p, n_store)``.  ``resid_ss`` and ``xtx`` are local partial
    sums for the variance plug-ins.
    """

    worker_id: int
    n_local: int
    n_total: int
    store_ids: np.ndarray
    theta: np.ndarray
    xi_a: sp.csc_matrix
    xi_b: sp.csc_matrix
    v1_a: sp.csc_matrix
    v1_b: sp.csc_matrix
    v2_a: sp.csc_matrix
    v2_b: sp.csc_matrix
    t1: np.ndarray
    t2: np.ndarray
    t3: np.ndarray
    resid_ss: float
    xtx: np.ndarray

    def globalize(self, m):
        """Lift a store-indexed factor to an ``N x N_k`` sparse matrix."""
        m = sp.coo_matrix(m)
        return sp.csr_matrix((m.data, (self.store_ids[m.row], m.col)), shape=(self.n_total, m.shape[1]))

    def global_matrix(self, name):
        """``Xi``, ``V1`` or ``V2`` as a global sparse ``N x N`` matrix."""
        a, b = {"xi": (self.xi_a, self.xi_b), "v1": (self.v1_a, self.v1_b), "v2": (self.v2_a, self.v2_b)}[name]
        return (self.globalize(a) @ self.globalize(b).T).tocsr()

    def global_vector(self, name):
        v = {"t1": self.t1, "t2": self.t2, "t3": self.t3}[name]
        out = np.zeros(v.shape[:-1] + (self.n_total,))
        out[..., self.store_ids] = v
        return out

    def arrays(self):
        """Sparse components as flat arrays, for byte accounting of exact-mode transfers."""
        out = []
        for m in (self.xi_a, self.xi_b, self.v1_a, self.v1_b, self.v2_a, self.v2_b):
            out += [m.data, m.indices, m.indptr]
        return out + [self.store_ids, self.t1, self.t2, self.t3, np.array([self.resid_ss]), self.xtx]


def build_xi_vt(shard: WorkerShard, theta) -> ShardFactors:
    """Shard-local factors of the covariance estimator at ``theta``."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (shard.n_features + 1,):
        raise DimensionError(f"theta must have length {shard.n_features + 1}")
    rho, beta = theta[0], theta[1:]
    n_store, nk = len(shard.store_ids), shard.n_local
    st = shard.stats

    e = sp.csc_matrix((np.ones(nk), (shard.local_pos, np.arange(nk))), shape=(n_store, nk))
    w_in = shard.in_cols.T.tocsc()  # column i: W e_i
    w_out = shard.out_rows.T.tocsc()  # column i: W' e_i
    w2 = shard.second_order.T.tocsc()  # column i: W'W e_i

    d_s = 1.0 / (1.0 + rho**2 * shard.store_dtilde)
    dd_s = -2.0 * rho * d_s**2 * shard.store_dtilde
    d_l = d_s[shard.local_pos]
    dd_l = dd_s[shard.local_pos]
    D_s, DD_s = sp.diags(d_s), sp.diags(dd_s)
    D_l, DD_l = sp.diags(d_l), sp.diags(dd_l)

    se = e - rho * w_in  # S e_i
    ste = e - rho * w_out  # S' e_i
    stse = e - rho * w_in - rho * w_out + rho**2 * w2  # S'S e_i
    stwe = w_in - rho * w2  # S'W e_i
    wtse = w_out - rho * w2  # W'S e_i

    xi_a = (stse @ DD_l - (stwe + wtse) @ D_l) @ D_l
    m_tilde = (
        DD_s @ stse @ DD_l
        - DD_s @ stwe @ D_l
        - DD_s @ wtse @ D_l
        - D_s @ wtse @ DD_l
        + D_s @ w2 @ D_l
        - D_s @ stwe @ DD_l
    )
    t_basis = (se @ sp.diags(d_l**2)).T.tocsr()  # row i: D_i^2 (S e_i)'
    c1 = st.wy - rho * st.wtwy  # (S'W y)_i
    c2 = st.wty - rho * st.wtwy  # (W'S y)_i
    c3 = st.X - rho * st.wtx  # rows of S'X

    r = st.y - rho * st.wy - st.X @ beta
    return ShardFactors(
        worker_id=shard.worker_id,
        n_local=nk,
        n_total=shard.n_total,
        store_ids=shard.store_ids,
        theta=theta.copy(),
        xi_a=xi_a.tocsc(),
        xi_b=e.copy(),
        v1_a=(D_s @ ste).tocsc(),
        v1_b=e,
        v2_a=m_tilde.tocsc(),
        v2_b=(se @ D_l).tocsc(),
        t1=t_basis.T @ c1,
        t2=t_basis.T @ c2,
        t3=(t_basis.T @ c3).T,
        resid_ss=float(r @ r),
        xtx=st.X.T @ st.X,
    )


def _assemble(tr_xi, tr_v, t1, t2, t3, plugins, rho_beta_sign):
    s2e, s2 = plugins.sigma2_eps, plugins.sigma2_tilde
    p = t3.shape[0]
    out = np.empty((p + 1, p + 1))
    out[0, 0] = s2e**2 * (tr_xi + tr_v + 2.0 * float(t1 @ t2) / s2) + s2e * float(t1 @ t1)
    cross = rho_beta_sign * s2e * (t3 @ t1)
    out[0, 1:] = cross
    out[1:, 0] = cross
    out[1:, 1:] = s2e * (t3 @ t3.T)
    return out


def sigma1_block(fk: ShardFactors, fl: ShardFactors, plugins: VariancePlugins, rho_beta_sign=None):
    """The ``(k, l)`` block of the covariance estimator, before ``sqrt(alpha_k alpha_l)`` weighting."""
    sign = RHO_BETA_SIGN if rho_beta_sign is None else rho_beta_sign
    s2e, s2 = plugins.sigma2_eps, plugins.sigma2_tilde
    xk, xl = fk.global_matrix("xi"), fl.global_matrix("xi")
    tr_xi = xk.multiply(xl.T).sum()
    tr_v = fk.global_matrix("v1").multiply(fl.global_matrix("v2")).sum()
    t1k, t2k, t3k = (fk.global_vector(n) for n in ("t1", "t2", "t3"))
    t1l, t2l, t3l = (fl.global_vector(n) for n in ("t1", "t2", "t3"))
    p = t3k.shape[0]
    out = np.empty((p + 1, p + 1))
    out[0, 0] = s2e**2 * (tr_xi + tr_v + (t1k @ t2l + t2k @ t1l) / s2) + s2e * (t1k @ t1l)
    out[0, 1:] = sign * s2e * (t3l @ t1k)
    out[1:, 0] = sign * s2e * (t3k @ t1l)
    out[1:, 1:] = s2e * (t3k @ t3l.T)
    return 4.0 / np.sqrt(fk.n_local * fl.n_local) * out


def _weights(n_locals, alphas):
    n_locals = np.asarray(n_locals, dtype=float)
    alphas = n_locals / n_locals.sum() if alphas is None else np.asarray(alphas, dtype=float)
    # sqrt(a_k a_l) * 4 / sqrt(N_k N_l) = c_k c_l
    return 2.0 * np.sqrt(alphas / n_locals)


def sigma1_exact(factors, plugins: VariancePlugins, alphas=None, rho_beta_sign=None):
    """``sum_{k,l} sqrt(alpha_k alpha_l) Sigma_1kl`` computed from all workers' factors.

    The double sum is bilinear, so the factors are weighted and summed
    first; the traces are then taken on sparse ``N x N`` matrices.
    """
    sign = RHO_BETA_SIGN if rho_beta_sign is None else rho_beta_sign
    c = _weights([f.n_local for f in factors], alphas)
    xi = sum(ck * f.global_matrix("xi") for ck, f in zip(c, factors))
    v1 = sum(ck * f.global_matrix("v1") for ck, f in zip(c, factors))
    v2 = sum(ck * f.global_matrix("v2") for ck, f in zip(c, factors))
    t1, t2, t3 = (sum(ck * f.global_vector(n) for ck, f in zip(c, factors)) for n in ("t1", "t2", "t3"))
    tr_xi = xi.multiply(xi.T).sum()
    tr_v = v1.multiply(v2).sum()
    return _assemble(tr_xi, tr_v, t1, t2, t3, plugins, sign)


@dataclass(frozen=True, eq=False)
class Projectors:
    """Shared random projections ``R_1, R_2`` of shape ``(d, N)``."""

    r1: object
    r2: object
    d: int
    seed: int | None
    sparse: bool
    identity: bool = False

    @property
    def n_nodes(self):
        return self.r1.shape[1]

    @property
    def fingerprint(self):
        tag = f"{self.n_nodes}:{self.d}:{self.seed}:{self.sparse}:{self.identity}"
        return hashlib.sha1(tag.encode()).hexdigest()[:16]

    def columns(self, ids):
        if self.identity:
            return None
        return self.r1[:, ids], self.r2[:, ids]


def default_proj_dim(n_nodes):
    return int(np.floor(np.log(n_nodes))) + 1


def _draw(rng, d, n, sparse, density):
    if not sparse:
        return rng.standard_normal((d, n)) / np.sqrt(d)
    # Achlioptas-style: +-sqrt(1/(density d)) with prob density/2 each
    nnz = rng.binomial(d * n, density)
    flat = rng.choice(d * n, size=nnz, replace=False)
    vals = rng.choice([-1.0, 1.0], size=nnz) / np.sqrt(density * d)
    return sp.csc_matrix((vals, (flat // n, flat % n)), shape=(d, n))


@lru_cache(maxsize=8)
def _cached_projectors(n_nodes, d, seed, sparse, density):
    s1, s2 = np.random.SeedSequence(seed).spawn(2)
    r1 = _draw(np.random.default_rng(s1), d, n_nodes, sparse, density)
    r2 = _draw(np.random.default_rng(s2), d, n_nodes, sparse, density)
    if not sparse:
        r1.setflags(write=False)
        r2.setflags(write=False)
    return r1, r2


def make_projectors(n_nodes, d=None, seed=0, sparse=False, identity=False, density=1.0 / 3.0) -> Projectors:
    """Random ``N(0, 1/d)`` (or sparse sign) projections, identical for identical seeds.

    ``identity=True`` is a test hook returning ``R_1 = R_2 = I_N``.
    """
    if identity:
        eye = sp.identity(n_nodes, format="csc")
        return Projectors(eye, eye, n_nodes, seed, sparse=False, identity=True)
    d = default_proj_dim(n_nodes) if d is None else int(d)
    if d < 1:
        raise ValueError("projection dimension must be >= 1")
    r1, r2 = _cached_projectors(n_nodes, d, seed, bool(sparse), density)
    return Projectors(r1, r2, d, seed, bool(sparse))


@dataclass(eq=False)
class InferencePack:
    """Projected covariance ingredients sent from worker to master."""

    worker_id: int
    n_local: int
    n_total: int
    theta: np.ndarray
    xi1_R: np.ndarray
    xi2_R: np.ndarray
    v1_R: np.ndarray
    v2_R: np.ndarray
    t1_R: np.ndarray
    t2_R: np.ndarray
    t3_R: np.ndarray
    resid_ss: float
    xtx: np.ndarray
    fingerprint: str
    d: int

    def payload(self):
        return (
            self.xi1_R,
            self.xi2_R,
            self.v1_R,
            self.v2_R,
            self.t1_R,
            self.t2_R,
            self.t3_R,
            np.array([self.n_local, self.resid_ss]),
            self.xtx,
        )

    @property
    def byte_size(self):
        from .cluster import payload_size

        return payload_size(self.payload())

    @property
    def plugins(self) -> VariancePlugins:
        """Plug-ins from this worker's nodes alone (the master pools across workers)."""
        return pooled_plugins(self.theta, self.resid_ss, self.xtx, self.n_local)


def _proj(left, a, right, b):
    """``(left @ a) @ (right @ b).T`` with sparse ``a, b`` and ``left, right`` of shape (d, n)."""
    la = np.asarray((a.T @ left.T).T) if not sp.issparse(left) else (left @ a).toarray()
    rb = np.asarray((b.T @ right.T).T) if not sp.issparse(right) else (right @ b).toarray()
    return la @ rb.T


def build_pack(factors: ShardFactors, proj: Projectors) -> InferencePack:
    """Project a worker's factors to ``d x d`` matrices and ``d``-vectors."""
    if proj.n_nodes != factors.n_total:
        raise DimensionError("projector width does not match the network size")
    if proj.identity:
        def dense(m):
            return factors.globalize(m).toarray()
        ids = factors.store_ids
        r1 = r2 = None
        xa, xb = dense(factors.xi_a), dense(factors.xi_b)
        xi1 = xi2 = xa @ xb.T
        v1 = dense(factors.v1_a) @ dense(factors.v1_b).T
        v2 = dense(factors.v2_a) @ dense(factors.v2_b).T
        t1, t2, t3 = (factors.global_vector(n) for n in ("t1", "t2", "t3"))
    else:
        r1, r2 = proj.columns(factors.store_ids)
        xi1 = _proj(r1, factors.xi_a, r2, factors.xi_b)
        xi2 = _proj(r2, factors.xi_a, r1, factors.xi_b)
        v1 = _proj(r1, factors.v1_a, r2, factors.v1_b)
        v2 = _proj(r1, factors.v2_a, r2, factors.v2_b)
        t1 = np.asarray(r1 @ factors.t1).ravel()
        t2 = np.asarray(r1 @ factors.t2).ravel()
        t3 = np.asarray(r1 @ factors.t3.T).T if not sp.issparse(r1) else np.asarray((r1 @ factors.t3.T)).T
    return InferencePack(
        worker_id=factors.worker_id,
        n_local=factors.n_local,
        n_total=factors.n_total,
        theta=factors.theta,
        xi1_R=xi1,
        xi2_R=xi2,
        v1_R=v1,
        v2_R=v2,
        t1_R=t1,
        t2_R=t2,
        t3_R=np.atleast_2d(t3),
        resid_ss=factors.resid_ss,
        xtx=factors.xtx,
        fingerprint=proj.fingerprint,
        d=proj.d,
    )


def sigma1_projected(packs, alphas=None, rho_beta_sign=None):
    """Master-side covariance estimate from projected packs only.

    Returns ``(sigma1, plugins)``; the plug-ins are pooled from the packs'
    partial sums.
    """
    if not packs:
        raise ProtocolError("no inference packs received")
    sign = RHO_BETA_SIGN if rho_beta_sign is None else rho_beta_sign
    fp = {p.fingerprint for p in packs}
    if len(fp) != 1 or len({p.d for p in packs}) != 1:
        raise ProtocolError("inference packs were built with different projectors")
    theta = packs[0].theta
    if any(not np.array_equal(p.theta, theta) for p in packs):
        raise ProtocolError("inference packs were evaluated at different parameter values")
    n_total = packs[0].n_total
    if sum(p.n_local for p in packs) != n_total:
        raise ProtocolError("inference packs do not cover every node exactly once")
    plugins = pooled_plugins(theta, sum(p.resid_ss for p in packs), sum(p.xtx for p in packs), n_total)
    c = _weights([p.n_local for p in packs], alphas)
    xi1 = sum(ck * p.xi1_R for ck, p in zip(c, packs))
    xi2 = sum(ck * p.xi2_R for ck, p in zip(c, packs))
    v1 = sum(ck * p.v1_R for ck, p in zip(c, packs))
    v2 = sum(ck * p.v2_R for ck, p in zip(c, packs))
    t1 = sum(ck * p.t1_R for ck, p in zip(c, packs))
    t2 = sum(ck * p.t2_R for ck, p in zip(c, packs))
    t3 = sum(ck * p.t3_R for ck, p in zip(c, packs))
    tr_xi = float(np.sum(xi1 * xi2.T))
    tr_v = float(np.sum(v1 * v2))
    return _assemble(tr_xi, tr_v, t1, t2, t3, plugins, sign), plugins


@dataclass
class SandwichCovariance:
    sigma1_hat: np.ndarray
    sigma2_hat: np.ndarray
    covariance: np.ndarray
    mode: str
    n_nodes: int

    @property
    def se(self):
        return np.sqrt(np.diag(self.covariance))


def sandwich(sigma1, sigma2, n_nodes, mode="exact") -> SandwichCovariance:
    """``Sigma_2^-1 Sigma_1 Sigma_2^-1 / N`` after symmetrizing ``Sigma_1``."""
    s1 = 0.5 * (np.asarray(sigma1) + np.asarray(sigma1).T)
    s2 = np.asarray(sigma2, dtype=float)
    try:
        s2_inv = np.linalg.inv(s2)
    except np.linalg.LinAlgError:
        raise AggregationError("Sigma_2 is singular") from None
    if not np.all(np.isfinite(s2_inv)) or np.linalg.cond(s2) > 1e12:
        raise AggregationError("Sigma_2 is singular")
    cov = s2_inv @ s1 @ s2_inv / n_nodes
    cov = 0.5 * (cov + cov.T)
    if np.any(np.diag(cov) < 0):
        raise NegativeVarianceError(
            "estimated covariance has a negative variance; increase the projection dimension"
        )
    return SandwichCovariance(s1, s2, cov, mode, n_nodes)


def confidence_intervals(theta, cov, level=0.95):
    """Normal intervals ``theta_j -/+ z_{(1+level)/2} se_j``; returns ``(lower, upper)``."""
    if not 0 <= level < 1:
        raise ValueError("level must lie in [0, 1)")
    c = cov.covariance if isinstance(cov, SandwichCovariance) else np.asarray(cov)
    se = np.sqrt(np.diag(c))
    z = norm.ppf(0.5 + level / 2.0)
    theta = np.asarray(theta, dtype=float)
    return theta - z * se, theta + z * se


def summary_rows(theta, cov, names=None, level=0.95):
    """Rows of ``parameter, estimate, se, ci_low, ci_high, p_value``."""
    theta = np.asarray(theta, dtype=float)
    c = cov.covariance if isinstance(cov, SandwichCovariance) else np.asarray(cov)
    se = np.sqrt(np.diag(c))
    lo, hi = confidence_intervals(theta, c, level)
    names = names or ["rho"] + [f"beta{j}" for j in range(1, len(theta))]
    with np.errstate(divide="ignore", invalid="ignore"):
        pval = 2.0 * norm.sf(np.abs(theta / se))
    return [
        {
            "parameter": nm,
            "estimate": theta[j],
            "se": se[j],
            "ci_low": lo[j],
            "ci_high": hi[j],
            "p_value": pval[j],
        }
        for j, nm in enumerate(names)
    ]
