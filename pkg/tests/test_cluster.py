import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dsar.cluster import (
    MASTER,
    AggregateEstimate,
    MessageLog,
    aggregate_os,
    aggregate_wlse,
    decode_payload,
    encode_payload,
    payload_size,
    run_pipeline,
    run_twlse,
)
from dsar.exceptions import AggregationError, ConfigurationError, WorkerFailure
from dsar.lse import LocalSummary, SolverOptions, fit_local
from dsar.network import Dataset, Partition, build_shards, partition_uniform
from oracles import small_problem


def summary(k, theta, h, n=10):
    return LocalSummary(k, np.asarray(theta, float), np.asarray(h, float), n, 1.0)


def dataset_of(net, x, y):
    return Dataset(network=net, X=x, y=y)


@settings(max_examples=40, deadline=None)
@given(arrs=st.lists(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                                elements=st.floats(allow_nan=False, allow_infinity=False)), max_size=4))
def test_payload_roundtrip(arrs):
    buf = encode_payload(arrs)
    assert len(buf) == payload_size(arrs)
    back = decode_payload(buf)
    assert len(back) == len(arrs)
    for a, b in zip(arrs, back):
        np.testing.assert_array_equal(a, b)


def test_payload_integer_arrays_and_bad_magic():
    ids = np.array([3, 1, 4], dtype=np.int64)
    (back,) = decode_payload(encode_payload([ids]))
    assert back.dtype == np.int64 and list(back) == [3, 1, 4]
    with pytest.raises(ValueError):
        decode_payload(b"XXXX\x00\x00\x00\x00")


def test_payload_size_formula():
    theta, h = np.zeros(6), np.zeros((6, 6))
    assert payload_size([theta, h]) == 8 + (5 + 8 + 48) + (5 + 16 + 288)


def test_os_two_workers():
    est = aggregate_os([summary(0, [0.3, 1.0], np.eye(2)), summary(1, [0.5, 3.0], np.eye(2))])
    np.testing.assert_allclose(est.theta, [0.4, 2.0])
    assert est.sigma2_hat is None and est.rounds_used == 1


def test_wlse_hand_example():
    # H1 = 2I, H2 = I, equal alphas: weights 2/3 and 1/3
    s = [summary(0, [0.3, 0.0], 2 * np.eye(2)), summary(1, [0.6, 3.0], np.eye(2))]
    est = aggregate_wlse(s)
    np.testing.assert_allclose(est.theta, [0.4, 1.0])
    np.testing.assert_allclose(est.sigma2_hat, 1.5 * np.eye(2))


def test_wlse_identical_hessians_is_weighted_mean():
    h = np.array([[2.0, 0.3], [0.3, 1.0]])
    s = [summary(0, [0.1, 1.0], h, n=30), summary(1, [0.4, 2.0], h, n=10)]
    np.testing.assert_allclose(aggregate_wlse(s).theta, [0.175, 1.25])


def test_wlse_single_worker():
    s = [summary(0, [0.2, -1.0], np.diag([3.0, 1.0]))]
    np.testing.assert_allclose(aggregate_wlse(s).theta, [0.2, -1.0])


def test_wlse_singular_and_empty():
    with pytest.raises(AggregationError):
        aggregate_wlse([summary(0, [0.1, 0.0], np.zeros((2, 2)))])
    with pytest.raises(AggregationError):
        aggregate_wlse([])
    with pytest.raises(AggregationError):
        aggregate_os([])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 6))
def test_wlse_normal_equations(seed, k):
    rng = np.random.default_rng(seed)
    sums = []
    for j in range(k):
        a = rng.normal(size=(3, 3))
        sums.append(summary(j, rng.normal(size=3), a @ a.T + 0.5 * np.eye(3), n=int(rng.integers(5, 50))))
    est = aggregate_wlse(sums)
    n = np.array([s.n_local for s in sums], float)
    alpha = n / n.sum()
    resid = sum(a * s.hessian_at_opt @ (est.theta - s.theta_hat) for a, s in zip(alpha, sums))
    np.testing.assert_allclose(resid, 0, atol=1e-9)


def test_message_counts_and_bytes(sbm_1000):
    part = partition_uniform(1000, 5, seed=0)
    for method, n_msgs in (("os", 5), ("wlse", 5), ("twlse", 15)):
        res = run_pipeline(sbm_1000, part, method)
        assert len(res.messages) == n_msgs
        assert res.estimate.total_bytes == sum(m.payload_bytes for m in res.messages)
        assert res.estimate.rounds_used == (2 if method == "twlse" else 1)
    kinds = [m.kind for m in res.messages]
    assert kinds.count("local_summary") == 5
    assert kinds.count("broadcast_theta") == 5
    assert kinds.count("refined_summary") == 5


def test_message_ordering(sbm_1000):
    res = run_pipeline(sbm_1000, partition_uniform(1000, 4, seed=0), "twlse")
    keys = [(m.round, m.worker_id) for m in res.messages]
    assert keys == sorted(keys)
    assert all(m.receiver == MASTER for m in res.messages if m.kind != "broadcast_theta")


def test_summary_bytes_scale_with_p_squared():
    sizes = []
    for p in (2, 8):
        w, x, y, theta, part, net = small_problem(60, 1, seed=1, p=p)
        sizes.append(fit_local(build_shards(dataset_of(net, x, y), part)[0]).byte_size)
    # theta (p+1), Hessian (p+1)^2 and two scalars, plus fixed headers
    d = [(p + 1) + (p + 1) ** 2 + 2 for p in (2, 8)]
    assert sizes[1] - sizes[0] == 8 * (d[1] - d[0])


def test_parallel_matches_serial(sbm_1000):
    part = partition_uniform(1000, 5, seed=0)
    a = run_pipeline(sbm_1000, part, "twlse", n_jobs=1)
    b = run_pipeline(sbm_1000, part, "twlse", n_jobs=4)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert a.messages == b.messages


def test_message_log_csv(tmp_path, sbm_1000):
    res = run_pipeline(sbm_1000, partition_uniform(1000, 3, seed=0), "twlse")
    log = MessageLog()
    for m in res.messages:
        log.record(m.sender, m.receiver, m.round, m.kind, m.payload_bytes)
    path = tmp_path / "messages.csv"
    log.to_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["round", "from", "to", "kind", "bytes"]
    assert rows[0]["from"] == "worker0" and rows[0]["to"] == "master"
    assert sum(int(r["bytes"]) for r in rows) == res.estimate.total_bytes


def test_single_worker_all_methods_agree():
    w, x, y, theta, part, net = small_problem(150, 1, seed=2)
    ds = dataset_of(net, x, y)
    thetas = {m: run_pipeline(ds, part, m).theta for m in ("os", "wlse", "twlse")}
    ref = fit_local(build_shards(ds, part)[0]).theta_hat
    for t in thetas.values():
        np.testing.assert_allclose(t, ref, atol=1e-8)


def test_twlse_requires_wlse_first_pass(sbm_1000_shards):
    part, shards = sbm_1000_shards
    sums = [fit_local(s) for s in shards]
    with pytest.raises(ConfigurationError):
        run_twlse(shards, sums, aggregate_os(sums))


def test_twlse_singular_worker_named():
    w, x, y, theta, part, net = small_problem(40, 2, seed=3)
    x = x.copy()
    x[part.sets[1]] = 0.0  # at rho = 0 worker 1 sees no covariate variation
    theta = np.concatenate([[0.0], theta[1:]])
    ds = dataset_of(net, x, y)
    shards = build_shards(ds, part)
    sums = [summary(k, theta, np.eye(4), n=s.n_local) for k, s in enumerate(shards)]
    first = AggregateEstimate("wlse", theta, np.eye(4), 1, 0)
    with pytest.raises(AggregationError) as info:
        run_twlse(shards, sums, first)
    assert info.value.worker_id == 1


def test_pipeline_argument_errors(sbm_1000):
    part = partition_uniform(1000, 2, seed=0)
    with pytest.raises(ConfigurationError):
        run_pipeline(sbm_1000, part, "median")
    with pytest.raises(ConfigurationError):
        run_pipeline(sbm_1000, part, "wlse", infer="bootstrap")
    with pytest.raises(ConfigurationError):
        run_pipeline(sbm_1000, part, "os", infer="exact")


def test_worker_failure_wraps_convergence(sbm_1000):
    part = partition_uniform(1000, 2, seed=0)
    with pytest.raises(WorkerFailure) as info:
        run_pipeline(sbm_1000, part, "wlse", solver=SolverOptions(max_iter=1, grad_tol=1e-30))
    assert info.value.stage == "fit"


def test_twlse_close_to_global(sbm_1000):
    one = Partition.from_assignments(np.zeros(1000, dtype=int), 1)
    glob = run_pipeline(sbm_1000, one, "wlse").theta
    tw = run_pipeline(sbm_1000, partition_uniform(1000, 5, seed=0), "twlse").theta
    os_ = run_pipeline(sbm_1000, partition_uniform(1000, 5, seed=0), "os").theta
    assert np.linalg.norm(tw - glob) < np.linalg.norm(os_ - glob)


def test_twlse_fixed_point_when_shards_share_minimizer():
    # noiseless data: every Q_k is minimized at the truth, so round two changes nothing
    w, x, y, theta, part, net = small_problem(200, 4, seed=5, noise=0.0)
    ds = dataset_of(net, x, y)
    wl = run_pipeline(ds, part, "wlse").theta
    tw = run_pipeline(ds, part, "twlse").theta
    np.testing.assert_allclose(wl, theta, atol=1e-7)
    np.testing.assert_allclose(tw, wl, atol=1e-9)
