"""Command line entry point: ``dsar {synth,fit,infer,bench,report}``."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .cluster import METHODS
from .exceptions import DSARError
from .harness import (
    ExperimentConfig,
    estimate_real,
    export_dataset,
    make_true_model,
    run_experiment,
    run_metadata,
    timing_report,
)
from .lse import SolverOptions
from .synth import NetworkSpec, make_dataset


def _add_inference(p, default):
    p.add_argument("--infer", choices=("none", "exact", "projected"), default=default)
    p.add_argument("--proj-dim", type=int, default=None, help="projection dimension (default floor(log N)+1)")
    p.add_argument("--proj-seed", type=int, default=0)
    p.add_argument("--proj-sparse", action="store_true", default=None, help="sparse sign projections")


def _add_fit_args(p, infer_default):
    p.add_argument("--edges", required=True, help="whitespace 'src dst' edge list")
    p.add_argument("--data", required=True, help="CSV with a node column, the response and covariates")
    p.add_argument("--response", default="y")
    p.add_argument("--node-col", default="node")
    p.add_argument("--method", choices=METHODS + ("global",), default="twlse")
    p.add_argument("--workers", type=int, default=1, help="number of workers K")
    p.add_argument("--seed", type=int, default=0, help="partition seed")
    p.add_argument("--no-standardize", action="store_true", help="keep raw y and X scales")
    p.add_argument("--out", default=None, help="output directory")
    _add_inference(p, infer_default)


def build_parser():
    ap = argparse.ArgumentParser(prog="dsar", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic SAR dataset")
    p.add_argument("--config", help="INI config; [network] and [model] are used")
    p.add_argument("--kind", choices=("sbm", "powerlaw"), default=None)
    p.add_argument("--n-nodes", type=int, default=None)
    p.add_argument("--noise", default=None)
    p.add_argument("--ensure-min-outdegree", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("fit", help="estimate on an edge list + covariate CSV")
    _add_fit_args(p, "none")

    p = sub.add_parser("infer", help="estimate with confidence intervals")
    _add_fit_args(p, "projected")

    p = sub.add_parser("bench", help="Monte-Carlo replication experiment")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--kind", choices=("sbm", "powerlaw"), default=None)
    p.add_argument("--n-nodes", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--method", choices=METHODS, action="append", default=None,
                   help="repeatable; the global fit is always included")
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--paper-scale", action="store_true", help="R = 500 replicates")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None, help="parallel replicates")
    p.add_argument("--ensure-min-outdegree", action="store_true")
    p.add_argument("--timing", default=None, help="comma separated N values: write timing.csv instead")
    p.add_argument("--timing-repeats", type=int, default=3, help="runs per method and N; the median is reported")
    p.add_argument("--out", default=None)
    _add_inference(p, None)

    p = sub.add_parser("report", help="print tables written by bench")
    p.add_argument("directory")
    return ap


def _solver():
    return SolverOptions()


def cmd_synth(a):
    if a.config:
        cfg = ExperimentConfig.from_ini(a.config)
        spec, model = cfg.network, cfg.model
    else:
        spec, model = NetworkSpec(), None
    if a.kind or a.n_nodes or a.ensure_min_outdegree:
        spec = NetworkSpec(
            kind=a.kind or spec.kind,
            n_nodes=a.n_nodes or spec.n_nodes,
            ensure_min_outdegree=a.ensure_min_outdegree or spec.ensure_min_outdegree,
        )
    if model is None or a.noise:
        model = make_true_model(noise=a.noise or "iid_gaussian", n_nodes=spec.n_nodes)
    ds = make_dataset(spec, model, seed=a.seed)
    export_dataset(ds, a.out)
    meta = run_metadata(command="synth", seed=a.seed, kind=spec.kind, n_nodes=spec.n_nodes,
                        theta0=model.theta0.tolist(), noise=model.noise.kind)
    with open(os.path.join(a.out, "run.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    print(f"wrote {spec.n_nodes} nodes, {ds.network.adjacency.nnz} edges to {a.out}")


def cmd_fit(a):
    est, rows, res = estimate_real(
        a.edges, a.data, response=a.response, method=a.method, k_workers=a.workers, infer=a.infer,
        proj_dim=a.proj_dim, proj_seed=a.proj_seed, proj_sparse=a.proj_sparse, seed=a.seed, out=a.out,
        standardize=not a.no_standardize, node_col=a.node_col, solver=_solver(),
    )
    cols = list(rows[0])
    print(",".join(cols))
    for r in rows:
        print(",".join(f"{r[c]:.6g}" if isinstance(r[c], (float, np.floating)) else str(r[c]) for c in cols))
    print(f"# rounds={est.rounds_used} bytes={est.total_bytes}", file=sys.stderr)


def cmd_bench(a):
    overrides = {
        "k_workers": a.workers,
        "replicates": 500 if a.paper_scale else a.replicates,
        "seed": a.seed,
        "n_jobs": a.jobs,
        "infer": a.infer,
        "proj_dim": a.proj_dim,
        "proj_seed": a.proj_seed if a.proj_seed else None,
        "proj_sparse": a.proj_sparse,
        "out": a.out,
    }
    if a.method:
        overrides["methods"] = ("global",) + tuple(dict.fromkeys(a.method))
    if a.config:
        cfg = ExperimentConfig.from_ini(a.config, **overrides)
    else:
        cfg = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    if a.kind or a.n_nodes or a.ensure_min_outdegree:
        cfg.network = NetworkSpec(
            kind=a.kind or cfg.network.kind,
            n_nodes=a.n_nodes or cfg.network.n_nodes,
            ensure_min_outdegree=a.ensure_min_outdegree or cfg.network.ensure_min_outdegree,
        )
    if a.timing:
        ns = [int(v) for v in a.timing.split(",")]
        out = os.path.join(a.out, "timing.csv") if a.out else None
        if a.out:
            os.makedirs(a.out, exist_ok=True)
        rows = timing_report(ns, cfg.k_workers, ("global",) + tuple(m for m in cfg.methods if m != "global"),
                             seed=cfg.seed, kind=cfg.network.kind, out=out, repeats=a.timing_repeats)
        for r in rows:
            print(f"{r['n_nodes']:>8d} {r['method']:6s} {r['seconds']:.3f}s")
        return
    table = run_experiment(cfg)
    print(table.format())
    if table.n_failed:
        print(f"# {table.n_failed} of {table.n_replicates} replicates failed", file=sys.stderr)


def cmd_report(a):
    path = os.path.join(a.directory, "metrics.csv")
    if not os.path.exists(path):
        raise SystemExit(f"no metrics.csv in {a.directory}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    print(f"{'method':8s} {'param':6s} {'mean':>8s} {'rmse':>8s} {'ree':>7s} {'cp':>6s}")
    for r in rows:
        def f(k, w=7):
            v = float(r[k])
            return f"{v:{w}.3f}" if np.isfinite(v) else " " * w
        print(f"{r['method']:8s} {r['parameter']:6s} {float(r['mean_estimate']):8.4f} "
              f"{float(r['rmse']):8.4f} {f('ree')} {f('cp', 6)}")
    mpath = os.path.join(a.directory, "methods.csv")
    if os.path.exists(mpath):
        with open(mpath, newline="") as fh:
            for r in csv.DictReader(fh):
                print(f"# {r['method']}: rounds={r['rounds']} bytes={float(r['mean_total_bytes']):.0f} "
                      f"time={float(r['mean_wall_time']):.3f}s")


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "infer": cmd_fit, "bench": cmd_bench, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except DSARError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
