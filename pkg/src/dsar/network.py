"""Sparse network representation, partitioning and worker shards.

A network is stored as a row-normalized weight matrix ``W`` (CSR) together
with its transpose and the second-order matrix ``W.T @ W``.  A
:class:`WorkerShard` holds everything one worker needs to evaluate the
least-squares objective for its own nodes: the out-, in- and
second-order neighborhoods of each local node, plus the responses,
covariates and column norms of every node appearing in them.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .exceptions import ConfigurationError, DimensionError, IsolatedNodeWarning

__all__ = [
    "SparseNetwork",
    "Partition",
    "WorkerShard",
    "Dataset",
    "row_normalize",
    "partition_uniform",
    "build_shard",
    "build_shards",
    "shard_storage_report",
    "read_edge_list",
    "write_edge_list",
    "write_id_map",
]


@dataclass(frozen=True, eq=False)
class SparseNetwork:
    """Row-normalized network.

    Attributes
    ----------
    adjacency : csr_matrix
        ``A`` with row = follower, column = followee, zero diagonal.
    weights : csr_matrix
        ``W`` with ``w_ij = a_ij / n_i``; rows with ``n_i = 0`` are zero.
    col_sq_sums : ndarray
        ``diag(W.T @ W)``, i.e. ``sum_k w_ki**2`` for each node ``i``.
    """

    adjacency: sp.csr_matrix
    weights: sp.csr_matrix
    col_sq_sums: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    @cached_property
    def weights_t(self) -> sp.csr_matrix:
        """``W.T`` in CSR form, i.e. column access to ``W``."""
        return self.weights.T.tocsr()

    @cached_property
    def second_order(self) -> sp.csr_matrix:
        """``W.T @ W``; entry ``(i, j)`` is ``w^(2)_ji = sum_k w_ki w_kj``."""
        m = (self.weights_t @ self.weights).tocsr()
        m.sort_indices()
        return m

    @cached_property
    def out_degree(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    @cached_property
    def in_degree(self) -> np.ndarray:
        return np.bincount(self.adjacency.indices, minlength=self.n_nodes)

    def stationary_mass(self, tol=1e-12, max_iter=10_000):
        """Sum of squared stationary probabilities of the random walk on ``W``.

        Diagnostic only; connectivity is never enforced.  Returns ``nan`` if
        power iteration does not settle.
        """
        pi = np.full(self.n_nodes, 1.0 / self.n_nodes)
        wt = self.weights_t
        for _ in range(max_iter):
            nxt = wt @ pi
            s = nxt.sum()
            if s <= 0:
                return float("nan")
            nxt /= s
            if np.abs(nxt - pi).max() < tol:
                return float(nxt @ nxt)
            pi = nxt
        return float("nan")


def _as_csr(matrix):
    if sp.issparse(matrix):
        m = sp.csr_matrix(matrix, dtype=np.float64, copy=True)
    else:
        m = sp.csr_matrix(np.asarray(matrix, dtype=np.float64))
    return m


def row_normalize(adjacency) -> SparseNetwork:
    """Build a :class:`SparseNetwork` from an adjacency matrix.

    Self-loops are removed with a warning.  Rows with zero out-degree stay
    zero in ``W`` (an :class:`IsolatedNodeWarning` is emitted).

    >>> net = row_normalize(np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]]))
    >>> net.weights.toarray()[0]
    array([0. , 0.5, 0.5])
    """
    a = _as_csr(adjacency)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"adjacency must be square, got shape {a.shape}")
    if a.diagonal().any():
        warnings.warn("self-loops stripped from adjacency", stacklevel=2)
        a.setdiag(0)
    a.eliminate_zeros()
    a.sum_duplicates()
    a.sort_indices()

    n_i = np.asarray(a.sum(axis=1)).ravel()
    isolated = n_i == 0
    if isolated.any():
        warnings.warn(
            f"{int(isolated.sum())} node(s) have zero out-degree; their rows of W are zero",
            IsolatedNodeWarning,
            stacklevel=2,
        )
    inv = np.zeros_like(n_i)
    inv[~isolated] = 1.0 / n_i[~isolated]
    w = sp.csr_matrix(
        (a.data * np.repeat(inv, np.diff(a.indptr)), a.indices.copy(), a.indptr.copy()),
        shape=a.shape,
    )
    col_sq = np.bincount(w.indices, weights=w.data**2, minlength=w.shape[0])
    return SparseNetwork(adjacency=a, weights=w, col_sq_sums=col_sq)


@dataclass(frozen=True, eq=False)
class Partition:
    """Assignment of nodes to ``K`` workers."""

    assignments: np.ndarray
    sets: tuple

    @classmethod
    def from_assignments(cls, assignments, k_workers=None):
        assignments = np.asarray(assignments, dtype=np.int64)
        if k_workers is None:
            k_workers = int(assignments.max()) + 1
        order = np.argsort(assignments, kind="stable")
        counts = np.bincount(assignments, minlength=k_workers)
        sets = tuple(np.sort(s) for s in np.split(order, np.cumsum(counts)[:-1]))
        return cls(assignments=assignments, sets=sets)

    @property
    def k_workers(self) -> int:
        return len(self.sets)

    @property
    def n_nodes(self) -> int:
        return len(self.assignments)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.sets])

    @property
    def alphas(self) -> np.ndarray:
        return self.sizes / self.n_nodes


def partition_uniform(n_nodes, k_workers, seed=None) -> Partition:
    """Random near-equal split: sizes are ``N // K`` or ``N // K + 1``."""
    if k_workers < 1 or k_workers > n_nodes:
        raise ConfigurationError(f"need 1 <= k_workers <= n_nodes, got K={k_workers}, N={n_nodes}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_nodes)
    # extra nodes land on a random subset of workers
    sizes = np.full(k_workers, n_nodes // k_workers)
    sizes[rng.choice(k_workers, n_nodes % k_workers, replace=False)] += 1
    assignments = np.empty(n_nodes, dtype=np.int64)
    assignments[perm] = np.repeat(np.arange(k_workers), sizes)
    return Partition.from_assignments(assignments, k_workers)


@dataclass(frozen=True, eq=False)
class Dataset:
    """A network with responses ``y`` and covariates ``X``."""

    network: SparseNetwork
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        n = self.network.n_nodes
        if self.X.ndim != 2 or self.X.shape[0] != n or self.y.shape != (n,):
            raise DimensionError(
                f"expected X of shape ({n}, p) and y of shape ({n},), "
                f"got {self.X.shape} and {self.y.shape}"
            )

    @property
    def n_nodes(self):
        return self.network.n_nodes

    @property
    def n_features(self):
        return self.X.shape[1]


@dataclass(frozen=True, eq=False)
class LocalStats:
    """Theta-free per-node aggregates for the local nodes of a shard."""

    y: np.ndarray  # Y_i
    wy: np.ndarray  # (W y)_i
    wty: np.ndarray  # (W^T y)_i
    wtwy: np.ndarray  # (W^T W y)_i
    X: np.ndarray  # X_i
    wtx: np.ndarray  # (W^T X)_i
    dtilde: np.ndarray  # (W^T W)_ii


def _remap_rows(m, store_ids):
    """Re-index the columns of a row slice into positions of ``store_ids``."""
    idx = np.searchsorted(store_ids, m.indices)
    return sp.csr_matrix((m.data.copy(), idx, m.indptr.copy()), shape=(m.shape[0], len(store_ids)))


@dataclass(frozen=True, eq=False)
class WorkerShard:
    """Self-contained data for one worker.

    All sparse members are indexed by position in ``store_ids`` (sorted
    global ids of every node the shard knows about).  Local node ``i``
    sits at position ``local_pos[i]`` of the store.

    Attributes
    ----------
    out_rows : csr_matrix, shape (N_k, n_store)
        Row ``i`` holds ``w_ij`` over the local-out-network.
    in_cols : csr_matrix, shape (N_k, n_store)
        Row ``i`` holds ``w_ji`` over the local-in-network.
    second_order : csr_matrix, shape (N_k, n_store)
        Row ``i`` holds ``w^(2)_ji`` over the local-second-order-network.
    """

    worker_id: int
    n_total: int
    local_nodes: np.ndarray
    store_ids: np.ndarray
    local_pos: np.ndarray
    out_rows: sp.csr_matrix
    in_cols: sp.csr_matrix
    second_order: sp.csr_matrix
    store_dtilde: np.ndarray
    store_y: np.ndarray
    store_X: np.ndarray
    stats: LocalStats = field(repr=False)

    @property
    def n_local(self) -> int:
        return len(self.local_nodes)

    @property
    def n_features(self) -> int:
        return self.store_X.shape[1]

    @property
    def dtilde(self):
        return self.stats.dtilde

    def neighborhoods(self, i):
        """Global-id sets ``(N_out, N_in, N_2)`` for the ``i``-th local node."""
        def ids(m):
            row = m.getrow(i)
            return set(self.store_ids[row.indices[row.data != 0]].tolist())

        return ids(self.out_rows), ids(self.in_cols), ids(self.second_order)


def build_shard(net: SparseNetwork, part: Partition, y, X, k: int) -> WorkerShard:
    """Extract worker ``k``'s shard; the result keeps no reference to ``net``."""
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = net.n_nodes
    if y.shape != (n,) or X.shape[0] != n or part.n_nodes != n:
        raise DimensionError("y, X and partition must all cover the network's nodes")
    if not 0 <= k < part.k_workers:
        raise ConfigurationError(f"worker index {k} out of range for K={part.k_workers}")

    loc = part.sets[k]
    out = net.weights[loc]
    inn = net.weights_t[loc]
    sec = net.second_order[loc]
    store = np.unique(np.concatenate([loc, out.indices, inn.indices, sec.indices]))
    out, inn, sec = (_remap_rows(m, store) for m in (out, inn, sec))
    y_s = y[store].copy()
    X_s = X[store].copy()
    pos = np.searchsorted(store, loc)

    stats = LocalStats(
        y=y_s[pos],
        wy=out @ y_s,
        wty=inn @ y_s,
        wtwy=sec @ y_s,
        X=X_s[pos],
        wtx=inn @ X_s,
        dtilde=net.col_sq_sums[loc].copy(),
    )
    return WorkerShard(
        worker_id=k,
        n_total=n,
        local_nodes=loc.copy(),
        store_ids=store,
        local_pos=pos,
        out_rows=out,
        in_cols=inn,
        second_order=sec,
        store_dtilde=net.col_sq_sums[store].copy(),
        store_y=y_s,
        store_X=X_s,
        stats=stats,
    )


def build_shards(dataset: Dataset, part: Partition):
    return [build_shard(dataset.network, part, dataset.y, dataset.X, k) for k in range(part.k_workers)]


def shard_storage_report(shards):
    """Stored-node counts per worker and the duplication factor ``sum_k stored / N``."""
    if not shards:
        return {"stored_nodes": [], "local_nodes": [], "duplication_factor": float("nan")}
    stored = [len(s.store_ids) for s in shards]
    n = shards[0].n_total
    return {
        "stored_nodes": stored,
        "local_nodes": [s.n_local for s in shards],
        "duplication_factor": sum(stored) / n,
    }


def read_edge_list(path, n_nodes=None, ids=None):
    """Read ``src dst`` pairs (whitespace separated, ``#`` comments allowed).

    Raw ids are remapped to dense 0-based indices in sorted order.  Pass
    ``ids`` to fix the id universe (e.g. nodes that only appear in a
    covariate file); edges touching unknown ids then raise ``KeyError``.

    Returns
    -------
    adjacency : csr_matrix
    ids : ndarray
        ``ids[k]`` is the raw id of dense node ``k``.
    """
    src, dst = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: expected 'src dst', got {line!r}")
            src.append(parts[0])
            dst.append(parts[1])
    src = np.asarray(src, dtype=object)
    dst = np.asarray(dst, dtype=object)
    if ids is None:
        raw = np.unique(np.concatenate([src, dst]).astype(str)) if len(src) else np.array([], dtype=str)
        raw = _sort_ids(raw)
    else:
        raw = np.asarray([str(i) for i in ids], dtype=object)
    lookup = {r: k for k, r in enumerate(raw)}
    try:
        rows = np.fromiter((lookup[str(s)] for s in src), dtype=np.int64, count=len(src))
        cols = np.fromiter((lookup[str(d)] for d in dst), dtype=np.int64, count=len(dst))
    except KeyError as exc:
        raise KeyError(f"edge references unknown node id {exc.args[0]!r}") from None
    n = len(raw) if n_nodes is None else n_nodes
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.data[:] = 1.0  # collapse duplicate edges
    return a, raw


def _sort_ids(raw):
    # numeric ids sort numerically, anything else lexicographically
    try:
        keys = np.array([int(r) for r in raw])
    except ValueError:
        return np.sort(raw).astype(object)
    return raw[np.argsort(keys, kind="stable")].astype(object)


def write_edge_list(path, adjacency, ids=None):
    a = sp.coo_matrix(adjacency)
    with open(path, "w") as fh:
        for i, j in zip(a.row, a.col):
            if ids is None:
                fh.write(f"{i} {j}\n")
            else:
                fh.write(f"{ids[i]} {ids[j]}\n")


def write_id_map(path, ids):
    """Export the dense-index to raw-id table as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "node_id"])
        for k, r in enumerate(ids):
            w.writerow([k, r])
