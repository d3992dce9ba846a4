"""Monte-Carlo experiment runner, real-data driver and result export.

Config files are INI (``configparser``, inline ``;`` or ``#`` comments
allowed) with these sections; every key is optional and falls back to the
dataclass default::

    [network]   kind, n_nodes, sbm_blocks, sbm_p_in, sbm_p_out, pl_alpha,
                ensure_min_outdegree
    [model]     theta0 (comma separated), noise, sigma, t_dof, gamma,
                var_low, var_high
    [run]       k_workers, methods (comma separated), replicates, seed,
                n_jobs, fail_fast, out
    [inference] mode (none | exact | projected), proj_dim, proj_seed,
                proj_sparse
    [solver]    max_iter, grad_tol, rho_low, rho_high, multistart
"""
from __future__ import annotations

import configparser
import csv
import json
import os
import platform
import subprocess
import time
import tracemalloc
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .cluster import AggregateEstimate, INFER_MODES, run_pipeline, write_message_log
from .exceptions import ConfigurationError, DSARError
from .inference import summary_rows
from .lse import SolverOptions, fit_local
from .network import (
    Dataset,
    Partition,
    build_shard,
    partition_uniform,
    read_edge_list,
    row_normalize,
    write_edge_list,
    write_id_map,
)
from .synth import NetworkSpec, NoiseModel, TrueModel, make_dataset

__all__ = [
    "ExperimentConfig",
    "MetricsTable",
    "fit_global",
    "run_experiment",
    "replicate_seed",
    "export_dataset",
    "load_dataset",
    "estimate_real",
    "timing_report",
    "write_csv",
    "run_metadata",
    "allocation_audit",
]

ALL_METHODS = ("global", "os", "wlse", "twlse")


@dataclass
class ExperimentConfig:
    network: NetworkSpec = field(default_factory=NetworkSpec)
    model: TrueModel = field(default_factory=TrueModel)
    k_workers: int = 10
    methods: tuple = ALL_METHODS
    replicates: int = 100
    seed: int = 0
    infer: str = "projected"
    proj_dim: int | None = None
    proj_seed: int = 0
    proj_sparse: bool | None = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    n_jobs: int = 1
    fail_fast: bool = False
    out: str | None = None

    def __post_init__(self):
        self.methods = tuple(self.methods)
        bad = set(self.methods) - set(ALL_METHODS)
        if bad:
            raise ConfigurationError(f"unknown methods {sorted(bad)}; choose from {ALL_METHODS}")
        if self.replicates < 1:
            raise ConfigurationError("replicates must be >= 1")
        if self.k_workers < 1:
            raise ConfigurationError("k_workers must be >= 1")
        if self.infer not in INFER_MODES:
            raise ConfigurationError(f"infer must be one of {INFER_MODES}")

    @classmethod
    def from_ini(cls, path, **overrides):
        if not os.path.exists(path):
            raise ConfigurationError(f"config file not found: {path}")
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        cp.read(path)
        return cls.from_parser(cp, **overrides)

    @classmethod
    def from_parser(cls, cp, **overrides):
        known = {"network", "model", "run", "inference", "solver"}
        extra = set(cp.sections()) - known
        if extra:
            raise ConfigurationError(f"unknown config sections {sorted(extra)}")
        net = cp["network"] if cp.has_section("network") else {}
        mod = cp["model"] if cp.has_section("model") else {}
        run = cp["run"] if cp.has_section("run") else {}
        inf = cp["inference"] if cp.has_section("inference") else {}
        sol = cp["solver"] if cp.has_section("solver") else {}
        try:
            n_nodes = int(net.get("n_nodes", 2000))
            spec = NetworkSpec(
                kind=net.get("kind", "sbm"),
                n_nodes=n_nodes,
                sbm_blocks=int(net.get("sbm_blocks", 20)),
                sbm_p_in=_opt_float(net.get("sbm_p_in")),
                sbm_p_out=_opt_float(net.get("sbm_p_out")),
                pl_alpha=float(net.get("pl_alpha", 3.0)),
                ensure_min_outdegree=_bool(net.get("ensure_min_outdegree", "false")),
            )
            theta0 = mod.get("theta0")
            theta0 = np.array([float(v) for v in theta0.split(",")]) if theta0 else None
            model = make_true_model(
                theta0,
                noise=mod.get("noise", "iid_gaussian"),
                sigma=float(mod.get("sigma", 1.0)),
                n_nodes=n_nodes,
                t_dof=float(mod.get("t_dof", 5.0)),
                gamma=_opt_float(mod.get("gamma")),
                var_range=(float(mod.get("var_low", 0.8)), float(mod.get("var_high", 1.2))),
            )
            solver = SolverOptions(
                max_iter=int(sol.get("max_iter", 100)),
                grad_tol=float(sol.get("grad_tol", 1e-8)),
                rho_bounds=(float(sol.get("rho_low", -0.99)), float(sol.get("rho_high", 0.99))),
                multistart=int(sol.get("multistart", 0)),
            )
            kw = dict(
                network=spec,
                model=model,
                k_workers=int(run.get("k_workers", 10)),
                methods=tuple(m.strip() for m in run.get("methods", ",".join(ALL_METHODS)).split(",") if m.strip()),
                replicates=int(run.get("replicates", 100)),
                seed=int(run.get("seed", 0)),
                n_jobs=int(run.get("n_jobs", 1)),
                fail_fast=_bool(run.get("fail_fast", "false")),
                out=run.get("out"),
                infer=inf.get("mode", "projected"),
                proj_dim=_opt_int(inf.get("proj_dim")),
                proj_seed=int(inf.get("proj_seed", 0)),
                proj_sparse=_opt_bool(inf.get("proj_sparse")),
                solver=solver,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"bad config value: {exc}") from None
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    def to_dict(self):
        d = asdict(self)
        d["model"] = {
            "theta0": self.model.theta0.tolist(),
            "noise": self.model.noise.kind,
            "sigma": self.model.noise.sigma,
            "gamma": self.model.noise.gamma,
        }
        d["methods"] = list(self.methods)
        return d


def _opt_float(v):
    return None if v in (None, "", "none") else float(v)


def _opt_int(v):
    return None if v in (None, "", "none") else int(v)


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_bool(v):
    return None if v in (None, "", "auto", "none") else _bool(v)


def make_true_model(theta0=None, noise="iid_gaussian", sigma=1.0, n_nodes=None, t_dof=5.0, gamma=None,
                    var_range=(0.8, 1.2), seed=12345):
    """Build a :class:`TrueModel` from scalar settings.

    ``equicorrelated`` defaults to ``gamma = N**-0.6``; ``heteroscedastic``
    draws per-node variances uniformly from ``var_range`` (fixed across
    replicates via ``seed``).
    """
    kw = {}
    if noise == "equicorrelated":
        kw["gamma"] = n_nodes**-0.6 if gamma is None else gamma
    elif noise == "heteroscedastic":
        lo, hi = var_range
        kw["variances"] = np.random.default_rng(seed).uniform(lo, hi, n_nodes)
    nm = NoiseModel(kind=noise, sigma=sigma, t_dof=t_dof, **kw)
    return TrueModel(theta0=theta0, noise=nm) if theta0 is not None else TrueModel(noise=nm)


def fit_global(dataset: Dataset, solver: SolverOptions | None = None) -> AggregateEstimate:
    """The ``K = 1`` estimator on the whole network."""
    part = Partition.from_assignments(np.zeros(dataset.n_nodes, dtype=np.int64), 1)
    shard = build_shard(dataset.network, part, dataset.y, dataset.X, 0)
    s = fit_local(shard, opts=solver)
    return AggregateEstimate("global", s.theta_hat, s.hessian_at_opt, 1, 0)


def replicate_seed(base, r):
    """Independent stream for replicate ``r``; adding methods never changes the data."""
    return np.random.SeedSequence([int(base), int(r)])


def _one_replicate(cfg: ExperimentConfig, r):
    ss = replicate_seed(cfg.seed, r)
    s_data, s_part = ss.spawn(2)
    out = {"replicate": r, "est": {}, "se": {}, "bytes": {}, "rounds": {}, "time": {}, "error": None}
    try:
        ds = make_dataset(cfg.network, cfg.model, seed=s_data)
        part = partition_uniform(ds.n_nodes, cfg.k_workers, seed=s_part)
        for m in cfg.methods:
            t0 = time.perf_counter()
            if m == "global":
                est = fit_global(ds, cfg.solver)
                se = None
                nbytes, rounds = 0, 0
            else:
                infer = cfg.infer if m != "os" else "none"
                proj_sparse = cfg.proj_sparse if cfg.proj_sparse is not None else ds.n_nodes >= 100_000
                res = run_pipeline(ds, part, m, infer=infer, proj_dim=cfg.proj_dim, proj_seed=cfg.proj_seed,
                                   proj_sparse=proj_sparse, solver=cfg.solver)
                est = res.estimate
                se = None if res.covariance is None else res.covariance.se
                nbytes, rounds = est.total_bytes, est.rounds_used
            out["time"][m] = time.perf_counter() - t0
            out["est"][m] = np.asarray(est.theta)
            out["se"][m] = se
            out["bytes"][m] = nbytes
            out["rounds"][m] = rounds
    except DSARError as exc:
        if cfg.fail_fast:
            raise
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


@dataclass
class MetricsTable:
    """Per ``(method, parameter)`` metrics plus per-method cost summaries."""

    rows: list
    method_rows: list
    n_replicates: int
    n_failed: int
    failures: list
    estimates: dict
    ses: dict

    def get(self, method, parameter, metric):
        for r in self.rows:
            if r["method"] == method and r["parameter"] == parameter:
                return r[metric]
        raise KeyError((method, parameter))

    def to_csv(self, path):
        write_csv(path, self.rows)

    def methods_to_csv(self, path):
        write_csv(path, self.method_rows)

    def format(self):
        lines = [f"{'method':8s} {'param':6s} {'mean':>8s} {'rmse':>8s} {'ree':>7s} {'cp':>6s}"]
        for r in self.rows:
            cp = "" if np.isnan(r["cp"]) else f"{r['cp']:.3f}"
            ree = "" if np.isnan(r["ree"]) else f"{r['ree']:.3f}"
            lines.append(
                f"{r['method']:8s} {r['parameter']:6s} {r['mean_estimate']:8.4f} {r['rmse']:8.4f} {ree:>7s} {cp:>6s}"
            )
        return "\n".join(lines)


def param_names(p):
    return ["rho"] + [f"beta{j}" for j in range(1, p + 1)]


def summarize(results, theta0, methods, level=0.95) -> MetricsTable:
    """Aggregate replicate outputs; failed replicates are excluded and counted."""
    from scipy.stats import norm

    ok = [r for r in results if r["error"] is None]
    failures = [(r["replicate"], r["error"]) for r in results if r["error"] is not None]
    theta0 = np.asarray(theta0, dtype=float)
    names = param_names(len(theta0) - 1)
    z = norm.ppf(0.5 + level / 2)
    est = {m: np.array([r["est"][m] for r in sorted(ok, key=lambda r: r["replicate"])]) for m in methods}
    ses = {}
    for m in methods:
        s = [r["se"][m] for r in sorted(ok, key=lambda r: r["replicate"])]
        ses[m] = np.array(s) if s and all(v is not None for v in s) else None
    rmse = {m: np.sqrt(np.mean((est[m] - theta0) ** 2, axis=0)) if len(ok) else np.full(len(theta0), np.nan)
            for m in methods}
    rows = []
    for m in methods:
        base = rmse.get("global")
        for j, nm in enumerate(names):
            cp = np.nan
            if ses[m] is not None and m not in ("os", "global"):
                cover = np.abs(est[m][:, j] - theta0[j]) <= z * ses[m][:, j]
                cp = float(np.mean(cover))
            rows.append(
                {
                    "method": m,
                    "parameter": nm,
                    "mean_estimate": float(np.mean(est[m][:, j])) if len(ok) else np.nan,
                    "mc_se": float(np.std(est[m][:, j], ddof=1) / np.sqrt(len(ok))) if len(ok) > 1 else np.nan,
                    "rmse": float(rmse[m][j]),
                    "ree": float(base[j] / rmse[m][j]) if base is not None else np.nan,
                    "cp": cp,
                    "mean_se": float(np.mean(ses[m][:, j])) if ses[m] is not None else np.nan,
                }
            )
    method_rows = [
        {
            "method": m,
            "rounds": int(np.max([r["rounds"][m] for r in ok])) if ok else 0,
            "mean_total_bytes": float(np.mean([r["bytes"][m] for r in ok])) if ok else np.nan,
            "mean_wall_time": float(np.mean([r["time"][m] for r in ok])) if ok else np.nan,
        }
        for m in methods
    ]
    return MetricsTable(rows, method_rows, len(results), len(failures), failures, est, ses)


def run_experiment(config: ExperimentConfig) -> MetricsTable:
    """Replicate loop over fresh networks, covariates and noise; deterministic in ``config.seed``."""
    reps = range(config.replicates)
    if config.n_jobs and config.n_jobs != 1:
        results = Parallel(n_jobs=config.n_jobs)(delayed(_one_replicate)(config, r) for r in reps)
    else:
        results = [_one_replicate(config, r) for r in reps]
    table = summarize(results, config.model.theta0, config.methods)
    if config.out:
        os.makedirs(config.out, exist_ok=True)
        table.to_csv(os.path.join(config.out, "metrics.csv"))
        table.methods_to_csv(os.path.join(config.out, "methods.csv"))
        meta = run_metadata(config=config.to_dict(), n_failed=table.n_failed, failures=table.failures)
        with open(os.path.join(config.out, "run.json"), "w") as fh:
            json.dump(meta, fh, indent=2, default=_json_default)
    return table


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    return str(o)


def _git_hash():
    try:
        return subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        ).stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def run_metadata(**extra):
    meta = {
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "git_hash": _git_hash(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    meta.update(extra)
    return meta


def write_csv(path, rows, fieldnames=None):
    rows = list(rows)
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def export_dataset(dataset: Dataset, directory, ids=None):
    """Write ``edges.txt``, ``data.csv`` (node, y, x1..xp) and ``id_map.csv``."""
    os.makedirs(directory, exist_ok=True)
    n = dataset.n_nodes
    ids = np.arange(n) if ids is None else np.asarray(ids)
    write_edge_list(os.path.join(directory, "edges.txt"), dataset.network.adjacency, ids)
    write_id_map(os.path.join(directory, "id_map.csv"), ids)
    header = ["node", "y"] + [f"x{j}" for j in range(1, dataset.n_features + 1)]
    with open(os.path.join(directory, "data.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(n):
            w.writerow([ids[i], repr(float(dataset.y[i]))] + [repr(float(v)) for v in dataset.X[i]])


def read_table(path, response="y", node_col="node", covariates=None):
    """Read a covariate CSV; returns ``(node_ids, y, X, covariate_names)``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigurationError(f"{path} is empty")
        cols = list(reader.fieldnames)
        if node_col not in cols or response not in cols:
            raise ConfigurationError(f"{path} must have columns {node_col!r} and {response!r}")
        covariates = covariates or [c for c in cols if c not in (node_col, response)]
        ids, y, X = [], [], []
        for lineno, row in enumerate(reader, 2):
            try:
                y.append(float(row[response]))
                X.append([float(row[c]) for c in covariates])
            except (TypeError, ValueError):
                raise ConfigurationError(f"{path}:{lineno}: non-numeric field") from None
            ids.append(row[node_col])
    return np.array(ids, dtype=object), np.array(y), np.array(X).reshape(len(y), len(covariates)), covariates


def load_dataset(edges_path, data_path, response="y", node_col="node", covariates=None, standardize=False):
    """Ingest an edge list plus covariate CSV; nodes are ordered as in the CSV.

    Returns ``(dataset, ids, covariate_names)``.
    """
    ids, y, X, names = read_table(data_path, response, node_col, covariates)
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate node ids in covariate file")
    try:
        adj, _ = read_edge_list(edges_path, ids=ids)
    except KeyError as exc:
        raise ConfigurationError(str(exc.args[0])) from None
    if standardize:
        y = (y - y.mean()) / _sd(y)
        X = (X - X.mean(axis=0)) / np.array([_sd(c) for c in X.T])
    net = row_normalize(adj)
    return Dataset(net, X, y), ids, names


def _sd(v):
    s = v.std()
    return s if s > 0 else 1.0


def estimate_real(edges_path, data_path, response="y", method="wlse", k_workers=1, infer="projected",
                  proj_dim=None, proj_seed=0, proj_sparse=None, seed=0, out=None, standardize=True,
                  node_col="node", solver=None):
    """Run a method (and inference) on files; optionally export CSV results.

    Writes ``estimates.csv`` (inference table when available),
    ``messages.csv`` and ``id_map.csv`` under ``out``.
    """
    ds, ids, names = load_dataset(edges_path, data_path, response, node_col, standardize=standardize)
    if method == "global":
        est = fit_global(ds, solver)
        res = None
        cov = None
    else:
        part = partition_uniform(ds.n_nodes, k_workers, seed=seed)
        if proj_sparse is None:
            proj_sparse = ds.n_nodes >= 100_000
        res = run_pipeline(ds, part, method, infer=infer if method != "os" else "none", proj_dim=proj_dim,
                           proj_seed=proj_seed, proj_sparse=proj_sparse, solver=solver)
        est, cov = res.estimate, res.covariance
    pnames = ["rho"] + list(names)
    if cov is not None:
        rows = summary_rows(est.theta, cov, pnames)
    else:
        rows = [{"parameter": n, "estimate": float(v)} for n, v in zip(pnames, est.theta)]
    if out:
        os.makedirs(out, exist_ok=True)
        write_csv(os.path.join(out, "estimates.csv"), rows)
        write_id_map(os.path.join(out, "id_map.csv"), ids)
        if res is not None:
            write_message_log(os.path.join(out, "messages.csv"), res.messages)
        meta = run_metadata(method=method, k_workers=k_workers, infer=infer, seed=seed, n_nodes=ds.n_nodes,
                            rounds_used=est.rounds_used, total_bytes=est.total_bytes)
        with open(os.path.join(out, "run.json"), "w") as fh:
            json.dump(meta, fh, indent=2, default=_json_default)
    return est, rows, res


def timing_report(n_values, k_workers=10, methods=("global", "wlse", "twlse"), seed=0, kind="sbm", out=None,
                  solver=None, repeats=1):
    """Wall-clock seconds per method per network size (estimation only).

    Each method is run ``repeats`` times with the method order rotated
    between repeats, and the median is reported.  The network's cached
    ``W'W`` is built before the clock starts, so the first method timed is
    not charged for it.
    """
    if repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    methods = tuple(methods)
    rows = []
    for n in n_values:
        ds = make_dataset(NetworkSpec(kind, int(n)), TrueModel(), seed=replicate_seed(seed, int(n)))
        part = partition_uniform(ds.n_nodes, k_workers, seed=seed)
        ds.network.second_order  # noqa: B018  shared precomputation
        times = {m: [] for m in methods}
        for r in range(repeats):
            shift = r % len(methods)
            for m in methods[shift:] + methods[:shift]:
                t0 = time.perf_counter()
                if m == "global":
                    fit_global(ds, solver)
                else:
                    run_pipeline(ds, part, m, solver=solver)
                times[m].append(time.perf_counter() - t0)
        rows += [{"n_nodes": int(n), "method": m, "seconds": float(np.median(times[m]))} for m in methods]
    if out:
        write_csv(out, rows)
    return rows


@dataclass
class AuditReport:
    limit_bytes: int
    peak_bytes: int = 0


@contextmanager
def allocation_audit(limit_bytes):
    """Fail if Python/numpy peak allocation inside the block exceeds ``limit_bytes``.

    Used to enforce that no dense ``N x N`` array is built: pass e.g.
    ``N * N * 8 // 100``.
    """
    report = AuditReport(int(limit_bytes))
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base = tracemalloc.get_traced_memory()[0]
    try:
        yield report
    finally:
        report.peak_bytes = tracemalloc.get_traced_memory()[1] - base
        if not was_tracing:
            tracemalloc.stop()
    if report.peak_bytes > report.limit_bytes:
        raise MemoryError(f"peak allocation {report.peak_bytes} bytes exceeds audit limit {report.limit_bytes}")
