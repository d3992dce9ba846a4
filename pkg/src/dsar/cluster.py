"""Master/worker protocol: one-shot, weighted and two-step aggregation.

Workers are simulated in-process.  Every transfer is recorded as a
:class:`Message` whose size is the length of the canonical byte encoding
of its payload, so communication cost is reproducible across runs.
"""
from __future__ import annotations

import csv
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import AggregationError, ConfigurationError, DSARError, WorkerFailure
from .inference import (
    build_pack,
    build_xi_vt,
    make_projectors,
    pooled_plugins,
    sandwich,
    sigma1_exact,
    sigma1_projected,
)
from .lse import SolverOptions, fit_local, newton_update
from .network import Dataset, Partition, build_shards

__all__ = [
    "encode_payload",
    "payload_size",
    "Message",
    "MessageLog",
    "AggregateEstimate",
    "PipelineResult",
    "aggregate_os",
    "aggregate_wlse",
    "run_twlse",
    "run_pipeline",
    "METHODS",
    "INFER_MODES",
]

METHODS = ("os", "wlse", "twlse")
INFER_MODES = ("none", "exact", "projected")
MASTER = -1

_HEADER = struct.Struct("<4sI")
_MAGIC = b"DSAR"


def encode_payload(arrays) -> bytes:
    """Little-endian encoding: magic, array count, then per array
    ``(kind, ndim, shape...)`` followed by the raw values.

    Floating arrays are stored as ``<f8`` and integer arrays as ``<i8``.
    """
    arrays = [np.asarray(a) for a in arrays]
    parts = [_HEADER.pack(_MAGIC, len(arrays))]
    for a in arrays:
        if np.issubdtype(a.dtype, np.integer) or a.dtype == bool:
            kind, data = b"i", a.astype("<i8", copy=False)
        else:
            kind, data = b"f", a.astype("<f8", copy=False)
        parts.append(struct.pack(f"<cI{a.ndim}Q", kind, a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(data).tobytes())
    return b"".join(parts)


def decode_payload(buf: bytes):
    magic, count = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise ValueError("not a dsar payload")
    off = _HEADER.size
    out = []
    for _ in range(count):
        kind, ndim = struct.unpack_from("<cI", buf, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        dt = np.dtype("<i8" if kind == b"i" else "<f8")
        n = int(np.prod(shape, dtype=np.int64))
        out.append(np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape).copy())
        off += n * 8
    return out


def payload_size(arrays) -> int:
    """Byte count of :func:`encode_payload` without building the buffer."""
    total = _HEADER.size
    for a in arrays:
        a = np.asarray(a)
        total += 5 + 8 * a.ndim + 8 * a.size
    return total


@dataclass(frozen=True)
class Message:
    sender: int
    receiver: int
    round: int
    kind: str
    payload_bytes: int

    @property
    def worker_id(self):
        return self.receiver if self.sender == MASTER else self.sender


class MessageLog:
    """Thread-safe message record; :meth:`ordered` sorts by ``(round, worker_id)``."""

    def __init__(self):
        self._lock = threading.Lock()
        self._msgs = []

    def record(self, sender, receiver, rnd, kind, payload):
        size = payload if isinstance(payload, int) else payload_size(payload)
        msg = Message(sender, receiver, rnd, kind, size)
        with self._lock:
            self._msgs.append(msg)
        return msg

    def ordered(self):
        with self._lock:
            msgs = list(self._msgs)
        return sorted(msgs, key=lambda m: (m.round, m.worker_id, m.sender != MASTER, m.kind))

    @property
    def total_bytes(self):
        return sum(m.payload_bytes for m in self.ordered())

    @property
    def rounds(self):
        msgs = self.ordered()
        return max((m.round for m in msgs), default=0)

    def __len__(self):
        return len(self._msgs)

    def to_csv(self, path):
        write_message_log(path, self.ordered())


def write_message_log(path, messages):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "from", "to", "kind", "bytes"])
        for m in messages:
            w.writerow([m.round, _name(m.sender), _name(m.receiver), m.kind, m.payload_bytes])


def _name(node):
    return "master" if node == MASTER else f"worker{node}"


@dataclass
class AggregateEstimate:
    method: str
    theta: np.ndarray
    sigma2_hat: np.ndarray | None
    rounds_used: int
    total_bytes: int

    @property
    def rho(self):
        return float(self.theta[0])

    @property
    def beta(self):
        return self.theta[1:]


def _alphas(summaries, alphas):
    n = np.array([s.n_local for s in summaries], dtype=float)
    return n / n.sum() if alphas is None else np.asarray(alphas, dtype=float)


def aggregate_os(summaries) -> AggregateEstimate:
    """Simple average of the local estimates."""
    if not summaries:
        raise AggregationError("no local summaries to aggregate")
    theta = np.mean([s.theta_hat for s in summaries], axis=0)
    nbytes = sum(s.byte_size for s in summaries)
    return AggregateEstimate("os", theta, None, 1, nbytes)


def _weighted_solve(hessians, thetas, a):
    s2 = sum(ak * h for ak, h in zip(a, hessians))
    rhs = sum(ak * h @ t for ak, h, t in zip(a, hessians, thetas))
    if not np.all(np.isfinite(s2)) or np.linalg.cond(s2) > 1e12:
        raise AggregationError("weighted Hessian sum is singular")
    return np.linalg.solve(s2, rhs), s2


def aggregate_wlse(summaries, alphas=None) -> AggregateEstimate:
    """``(sum a_k H_k)^-1 sum a_k H_k theta_k`` with ``Sigma_2 = sum a_k H_k``."""
    if not summaries:
        raise AggregationError("no local summaries to aggregate")
    a = _alphas(summaries, alphas)
    theta, s2 = _weighted_solve([s.hessian_at_opt for s in summaries], [s.theta_hat for s in summaries], a)
    nbytes = sum(s.byte_size for s in summaries)
    return AggregateEstimate("wlse", theta, s2, 1, nbytes)


@dataclass
class _Refined:
    worker_id: int
    theta: np.ndarray
    hessian: np.ndarray
    n_local: int

    def payload(self):
        return (self.theta, self.hessian)


def _map(fn, items, n_jobs, stage):
    def call(item):
        try:
            return fn(item)
        except DSARError as exc:
            if isinstance(exc, WorkerFailure):
                raise
            raise WorkerFailure(str(exc), worker_id=getattr(item, "worker_id", None), stage=stage) from exc

    if n_jobs is None or n_jobs <= 1 or len(items) <= 1:
        return [call(it) for it in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(call, items))


def run_twlse(shards, summaries, first_pass: AggregateEstimate, alphas=None, log: MessageLog | None = None,
              n_jobs=1) -> AggregateEstimate:
    """Second round: broadcast ``first_pass.theta``, one Newton step per worker, reweight.

    A worker whose Hessian is singular at the broadcast value is rejected
    with :class:`AggregationError` naming it.
    """
    if first_pass.method != "wlse":
        raise ConfigurationError("run_twlse refines a 'wlse' first pass")
    at = np.asarray(first_pass.theta, dtype=float)
    own_log = log is None
    log = MessageLog() if own_log else log
    for s in shards:
        log.record(MASTER, s.worker_id, 2, "broadcast_theta", (at,))

    def step(shard):
        theta, h = newton_update(shard, at)
        return _Refined(shard.worker_id, theta, h, shard.n_local)

    try:
        refined = _map(step, shards, n_jobs, "refine")
    except WorkerFailure as exc:
        if isinstance(exc.__cause__, AggregationError):
            raise exc.__cause__ from None
        raise
    for r in refined:
        log.record(r.worker_id, MASTER, 2, "refined_summary", r.payload())
    a = _alphas(summaries, alphas)
    theta, s2 = _weighted_solve([r.hessian for r in refined], [r.theta for r in refined], a)
    round2 = sum(payload_size((at,)) + payload_size(r.payload()) for r in refined)
    total = first_pass.total_bytes + round2 if own_log else log.total_bytes
    return AggregateEstimate("twlse", theta, s2, 2, total)


@dataclass
class PipelineResult:
    estimate: AggregateEstimate
    covariance: object  # SandwichCovariance or None
    messages: list
    summaries: list
    plugins: object = None
    packs: list = field(default_factory=list)
    n_rounds: int = 1  # including the inference broadcast, if any

    @property
    def theta(self):
        return self.estimate.theta


def run_pipeline(
    dataset: Dataset,
    partition: Partition,
    method="twlse",
    infer="none",
    proj_dim=None,
    proj_seed=0,
    proj_sparse=False,
    solver: SolverOptions | None = None,
    n_jobs=1,
    alphas=None,
    rho_beta_sign=None,
) -> PipelineResult:
    """Shard the data, run the chosen protocol and, optionally, inference.

    Inference is always evaluated at the master's first-round weighted
    estimate: for ``wlse`` it is broadcast in an extra round, for
    ``twlse`` the packs travel with the refined summaries.  ``infer`` is
    not available for ``os``.

    ``estimate.rounds_used`` counts estimation rounds (1 for os and wlse,
    2 for twlse); ``n_rounds`` also counts the inference broadcast.
    ``estimate.total_bytes`` is the sum over every logged message.
    """
    if method not in METHODS:
        raise ConfigurationError(f"method must be one of {METHODS}, got {method!r}")
    if infer not in INFER_MODES:
        raise ConfigurationError(f"infer must be one of {INFER_MODES}, got {infer!r}")
    if method == "os" and infer != "none":
        raise ConfigurationError("inference requires method 'wlse' or 'twlse'")
    solver = solver or SolverOptions()
    shards = build_shards(dataset, partition)
    log = MessageLog()
    summaries = _map(lambda s: fit_local(s, opts=solver), shards, n_jobs, "fit")
    for s in summaries:
        log.record(s.worker_id, MASTER, 1, "local_summary", s.payload())

    if method == "os":
        est = aggregate_os(summaries)
    else:
        est = aggregate_wlse(summaries, alphas)
        est.total_bytes = log.total_bytes
        broadcast = est.theta
        if method == "twlse":
            est = run_twlse(shards, summaries, est, alphas, log, n_jobs)
        elif infer != "none":
            for s in shards:
                log.record(MASTER, s.worker_id, 2, "broadcast_theta", (est.theta,))
    cov, plugins, packs = None, None, []
    if infer != "none":
        at = broadcast
        factors = _map(lambda s: build_xi_vt(s, at), shards, n_jobs, "factors")
        if infer == "exact":
            for f in factors:
                log.record(f.worker_id, MASTER, 2, "inference_factors", f.arrays())
            plugins = pooled_plugins(at, sum(f.resid_ss for f in factors), sum(f.xtx for f in factors),
                                     dataset.n_nodes)
            s1 = sigma1_exact(factors, plugins, alphas, rho_beta_sign)
        else:
            proj = make_projectors(dataset.n_nodes, proj_dim, proj_seed, proj_sparse)
            packs = _map(lambda f: build_pack(f, proj), factors, n_jobs, "pack")
            for p in packs:
                log.record(p.worker_id, MASTER, 2, "inference_pack", p.payload())
            s1, plugins = sigma1_projected(packs, alphas, rho_beta_sign)
        cov = sandwich(s1, est.sigma2_hat, dataset.n_nodes, mode=infer)
    est.total_bytes = log.total_bytes
    return PipelineResult(est, cov, log.ordered(), summaries, plugins, packs, log.rounds)

