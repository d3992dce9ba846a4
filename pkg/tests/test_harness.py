import csv
import json
import time

import numpy as np
import pytest
import scipy.sparse as sp

from dsar.cli import main
from dsar.cluster import run_pipeline
from dsar.exceptions import ConfigurationError, ConvergenceError
from dsar.harness import (
    ExperimentConfig,
    allocation_audit,
    estimate_real,
    export_dataset,
    fit_global,
    load_dataset,
    make_true_model,
    run_experiment,
    timing_report,
)
from dsar.lse import SolverOptions
from dsar.network import Dataset, Partition, partition_uniform, row_normalize
from dsar.synth import NetworkSpec, TrueModel, make_dataset


def small_cfg(**kw):
    base = dict(network=NetworkSpec("sbm", 300), k_workers=3, replicates=3, seed=4,
                methods=("global", "os", "wlse", "twlse"))
    base.update(kw)
    return ExperimentConfig(**base)


def test_ini_full(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text(
        "[network]\nkind = powerlaw\nn_nodes = 500\npl_alpha = 2.5\nensure_min_outdegree = yes\n"
        "[model]\ntheta0 = 0.3, 1.0, -1.0\nnoise = equicorrelated\n"
        "[run]\nk_workers = 4\nmethods = global, wlse\nreplicates = 7\nseed = 9\n"
        "[inference]\nmode = exact\nproj_dim = 12\n"
        "[solver]\nmax_iter = 50\nrho_low = -0.9\n"
    )
    cfg = ExperimentConfig.from_ini(str(path))
    assert cfg.network.kind == "powerlaw" and cfg.network.n_nodes == 500
    assert cfg.network.ensure_min_outdegree
    np.testing.assert_allclose(cfg.model.theta0, [0.3, 1.0, -1.0])
    assert cfg.model.noise.gamma == pytest.approx(500**-0.6)
    assert cfg.methods == ("global", "wlse") and cfg.replicates == 7 and cfg.k_workers == 4
    assert cfg.infer == "exact" and cfg.proj_dim == 12
    assert cfg.solver.max_iter == 50 and cfg.solver.rho_bounds == (-0.9, 0.99)
    assert ExperimentConfig.from_ini(str(path), replicates=2).replicates == 2


def test_ini_defaults(tmp_path):
    path = tmp_path / "empty.ini"
    path.write_text("")
    cfg = ExperimentConfig.from_ini(str(path))
    assert cfg.network.n_nodes == 2000 and cfg.k_workers == 10 and cfg.replicates == 100
    np.testing.assert_allclose(cfg.model.theta0, [0.4, 0.2, 0.4, 0.6, 0.8, 1.0])


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[run]\nreplicates = many\n",
    "[run]\nreplicates = 0\n",
    "[run]\nmethods = global, median\n",
    "[inference]\nmode = bootstrap\n",
    "[network]\nkind = lattice\n",
    "[network]\nensure_min_outdegree = maybe\n",
])
def test_ini_errors(tmp_path, text):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_ini(str(path))


def test_ini_inline_comments(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[network]\nkind = powerlaw   ; sbm | powerlaw\nsbm_p_in =   ; default\n"
                    "[inference]\nproj_sparse = auto  # chosen by size\n")
    cfg = ExperimentConfig.from_ini(str(path))
    assert cfg.network.kind == "powerlaw" and cfg.proj_sparse is None


def test_ini_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_ini(str(tmp_path / "none.ini"))


def test_heteroscedastic_model_fixed_variances():
    a = make_true_model(noise="heteroscedastic", n_nodes=100, var_range=(0.5, 2.0))
    b = make_true_model(noise="heteroscedastic", n_nodes=100, var_range=(0.5, 2.0))
    np.testing.assert_array_equal(a.noise.variances, b.noise.variances)
    assert a.noise.variances.min() >= 0.5 and a.noise.variances.max() <= 2.0


def test_fit_global_equals_single_worker(sbm_1000):
    one = Partition.from_assignments(np.zeros(1000, dtype=int), 1)
    np.testing.assert_allclose(fit_global(sbm_1000).theta, run_pipeline(sbm_1000, one, "twlse").theta, atol=1e-8)


def test_permutation_invariance(sbm_1000):
    perm = np.random.default_rng(0).permutation(1000)
    a = sbm_1000.network.adjacency[perm][:, perm]
    ds = Dataset(row_normalize(sp.csr_matrix(a)), sbm_1000.X[perm], sbm_1000.y[perm])
    np.testing.assert_allclose(fit_global(ds).theta, fit_global(sbm_1000).theta, atol=1e-10)


def test_experiment_single_replicate_global_ree():
    table = run_experiment(small_cfg(replicates=1))
    for r in table.rows:
        if r["method"] == "global":
            assert r["ree"] == pytest.approx(1.0)
            assert np.isnan(r["cp"])
        if r["method"] == "os":
            assert np.isnan(r["cp"])
    assert table.n_failed == 0


def test_experiment_deterministic_and_parallel():
    a = run_experiment(small_cfg())
    b = run_experiment(small_cfg())
    c = run_experiment(small_cfg(n_jobs=2))
    for m in ("global", "twlse"):
        np.testing.assert_array_equal(a.estimates[m], b.estimates[m])
        np.testing.assert_array_equal(a.estimates[m], c.estimates[m])


def test_adding_methods_keeps_data():
    a = run_experiment(small_cfg(methods=("global",)))
    b = run_experiment(small_cfg())
    np.testing.assert_array_equal(a.estimates["global"], b.estimates["global"])


def test_experiment_outputs(tmp_path):
    table = run_experiment(small_cfg(out=str(tmp_path)))
    with open(tmp_path / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * 6
    assert {"method", "parameter", "mean_estimate", "mc_se", "rmse", "ree", "cp", "mean_se"} <= set(rows[0])
    with open(tmp_path / "methods.csv", newline="") as fh:
        mrows = {r["method"]: r for r in csv.DictReader(fh)}
    assert mrows["twlse"]["rounds"] == "2" and mrows["wlse"]["rounds"] == "1"
    meta = json.loads((tmp_path / "run.json").read_text())
    assert meta["config"]["replicates"] == 3 and "git_hash" in meta
    assert table.get("twlse", "rho", "rmse") > 0


def test_failed_replicates_counted():
    cfg = small_cfg(solver=SolverOptions(max_iter=1, grad_tol=1e-30), methods=("global",), replicates=2)
    table = run_experiment(cfg)
    assert table.n_failed == 2 and "ConvergenceError" in table.failures[0][1]
    cfg.fail_fast = True
    with pytest.raises(ConvergenceError):
        run_experiment(cfg)


def test_export_load_roundtrip(tmp_path):
    ds = make_dataset(NetworkSpec("sbm", 200), TrueModel(), seed=3)
    export_dataset(ds, tmp_path)
    back, ids, names = load_dataset(tmp_path / "edges.txt", tmp_path / "data.csv")
    np.testing.assert_allclose(back.y, ds.y, atol=1e-10)
    np.testing.assert_allclose(back.X, ds.X, atol=1e-10)
    assert (back.network.adjacency != ds.network.adjacency).nnz == 0
    assert names == ["x1", "x2", "x3", "x4", "x5"]
    std, _, _ = load_dataset(tmp_path / "edges.txt", tmp_path / "data.csv", standardize=True)
    assert abs(std.y.mean()) < 1e-12 and std.X.std(0) == pytest.approx(np.ones(5))
    est, _, _ = estimate_real(tmp_path / "edges.txt", tmp_path / "data.csv", method="wlse", k_workers=3,
                              infer="none", seed=5, standardize=False)
    ref = run_pipeline(ds, partition_uniform(200, 3, seed=5), "wlse").theta
    np.testing.assert_allclose(est.theta, ref, atol=1e-10)


@pytest.mark.slow
def test_large_export_stays_sparse(tmp_path):
    n = 100_000
    ds = make_dataset(NetworkSpec("sbm", n), TrueModel(), seed=6)
    export_dataset(ds, tmp_path)
    del ds
    with allocation_audit(n * n * 8 // 100):
        est, rows, _ = estimate_real(tmp_path / "edges.txt", tmp_path / "data.csv", method="wlse", k_workers=16)
    assert np.isfinite([r["se"] for r in rows]).all()


@pytest.fixture
def five_node(tmp_path):
    (tmp_path / "edges.txt").write_text("a b\nb c\nc a\nd a\ne d\nb e\n")
    rows = ["node,y,x1", "a,1.0,0.5", "b,2.0,-0.3", "c,0.5,1.2", "d,-1.0,0.1", "e,0.2,-0.8"]
    (tmp_path / "data.csv").write_text("\n".join(rows) + "\n")
    return tmp_path


def test_five_node_estimate(five_node):
    out = five_node / "out"
    est, rows, res = estimate_real(five_node / "edges.txt", five_node / "data.csv", method="wlse",
                                   k_workers=1, infer="exact", out=str(out))
    assert [r["parameter"] for r in rows] == ["rho", "x1"]
    assert np.isfinite(est.theta).all()
    assert (out / "id_map.csv").read_text().splitlines()[1:] == ["0,a", "1,b", "2,c", "3,d", "4,e"]
    with open(out / "estimates.csv", newline="") as fh:
        hdr = next(csv.reader(fh))
    assert hdr == ["parameter", "estimate", "se", "ci_low", "ci_high", "p_value"]
    assert (out / "messages.csv").exists() and (out / "run.json").exists()


def test_estimate_real_errors(tmp_path, five_node):
    (tmp_path / "dup.csv").write_text("node,y,x1\na,1,2\na,2,3\n")
    with pytest.raises(ConfigurationError):
        estimate_real(five_node / "edges.txt", tmp_path / "dup.csv")
    (tmp_path / "nocol.csv").write_text("id,y\na,1\n")
    with pytest.raises(ConfigurationError):
        estimate_real(five_node / "edges.txt", tmp_path / "nocol.csv")
    (tmp_path / "text.csv").write_text("node,y,x1\na,1,two\n")
    with pytest.raises(ConfigurationError):
        estimate_real(five_node / "edges.txt", tmp_path / "text.csv")
    (tmp_path / "few.csv").write_text("node,y,x1\na,1,2\nb,2,1\n")
    with pytest.raises(ConfigurationError):
        estimate_real(five_node / "edges.txt", tmp_path / "few.csv")


def test_timing_report(tmp_path):
    rows = timing_report([200, 400], k_workers=2, methods=("global", "wlse"), out=str(tmp_path / "t.csv"))
    assert [(r["n_nodes"], r["method"]) for r in rows] == [(200, "global"), (200, "wlse"), (400, "global"),
                                                           (400, "wlse")]
    assert all(r["seconds"] > 0 for r in rows)


def test_allocation_audit():
    with allocation_audit(10_000_000) as rep:
        np.ones(1000)
    assert 0 < rep.peak_bytes < 10_000_000
    with pytest.raises(MemoryError):
        with allocation_audit(1_000_000):
            np.ones(1_000_000)


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--kind", "sbm", "--n-nodes", "300", "--seed", "1", "--out", str(data)]) == 0
    assert {p.name for p in data.iterdir()} >= {"edges.txt", "data.csv", "id_map.csv", "run.json"}
    fit_out = tmp_path / "fit"
    assert main(["fit", "--edges", str(data / "edges.txt"), "--data", str(data / "data.csv"),
                 "--method", "twlse", "--workers", "3", "--out", str(fit_out)]) == 0
    assert main(["infer", "--edges", str(data / "edges.txt"), "--data", str(data / "data.csv"),
                 "--method", "wlse", "--workers", "3", "--proj-dim", "6"]) == 0
    out = capsys.readouterr().out
    assert "parameter,estimate,se,ci_low,ci_high,p_value" in out
    bench = tmp_path / "bench"
    assert main(["bench", "--n-nodes", "300", "--workers", "3", "--method", "wlse", "--method", "twlse",
                 "--replicates", "2", "--out", str(bench)]) == 0
    assert main(["report", str(bench)]) == 0
    assert "twlse" in capsys.readouterr().out


def test_cli_bench_config_and_timing(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[network]\nn_nodes = 200\n[run]\nk_workers = 2\nreplicates = 2\nmethods = global, wlse\n")
    assert main(["bench", "--config", str(cfg), "--infer", "exact"]) == 0
    assert main(["bench", "--config", str(cfg), "--timing", "150,250"]) == 0
    assert "250" in capsys.readouterr().out


def test_cli_error_exit_code(tmp_path, capsys):
    assert main(["bench", "--config", str(tmp_path / "missing.ini")]) == 2
    assert "error:" in capsys.readouterr().err


def test_twlse_costs_more_than_wlse():
    # paired, order-alternating runs cancel drift in machine load
    for n in (2500, 10_000):
        ds = make_dataset(NetworkSpec("sbm", n), TrueModel(), seed=1)
        part = partition_uniform(n, 10, seed=0)
        ds.network.second_order  # noqa: B018

        def clock(m):
            t0 = time.perf_counter()
            run_pipeline(ds, part, m)
            return time.perf_counter() - t0

        diffs = []
        for i in range(25):
            if i % 2:
                w = clock("wlse")
                diffs.append(clock("twlse") - w)
            else:
                t = clock("twlse")
                diffs.append(t - clock("wlse"))
        assert np.median(diffs) > 0


def test_timing_scales_subquadratically():
    rows = timing_report([2500, 10_000], k_workers=10, methods=("wlse",), repeats=7)
    t = {r["n_nodes"]: r["seconds"] for r in rows}
    # four times the nodes: quadratic cost would be 16x
    assert t[10_000] / t[2500] < 8
    one = {r["method"]: r["seconds"] for r in timing_report([10_000], k_workers=1, methods=("global", "wlse"),
                                                              repeats=5)}
    assert 0.5 < one["wlse"] / one["global"] < 2


def test_timing_repeats_validated():
    with pytest.raises(ConfigurationError):
        timing_report([100], repeats=0)


@pytest.mark.slow
def test_rmse_decreases_with_n():
    rmse = []
    for n in (2000, 4000, 10_000):
        cfg = ExperimentConfig(network=NetworkSpec("sbm", n), methods=("global",), replicates=50, seed=8, infer="none")
        rmse.append(run_experiment(cfg).get("global", "rho", "rmse"))
    assert rmse[0] > rmse[1] > rmse[2]


@pytest.mark.slow
def test_global_fit_within_three_sd():
    cfg = ExperimentConfig(network=NetworkSpec("sbm", 2000), methods=("global",), replicates=100, seed=9,
                           infer="none")
    est = run_experiment(cfg).estimates["global"]
    assert np.all(np.abs(est.mean(0) - cfg.model.theta0) < 3 * est.std(0, ddof=1))


def test_global_fit_noiseless_recovers_truth():
    model = TrueModel(noise=make_true_model(sigma=0.0).noise)
    ds = make_dataset(NetworkSpec("sbm", 1500), model, seed=2)
    np.testing.assert_allclose(fit_global(ds).theta, model.theta0, atol=1e-8)
