"""Windowed statistics, utilization synthesis and the exposition format."""

import math
import re

import pytest
from hypothesis import given, strategies as st

from kisim.metrics import (MetricsWindow, UtilizationModel, export_snapshot,
                           nearest_rank_p95)
from kisim.simcore import (ClusterModel, Engine, PodPhase, Pool, PoolLimits,
                           Request, RoutePref, ServiceModel)


def brute_force_p95(values):
    if not values:
        return 0.0
    ordered = sorted(values)
    return ordered[math.ceil(0.95 * len(ordered)) - 1]


# ---- p95 ------------------------------------------------------------------

def test_p95_twenty_samples_takes_19th_order_statistic():
    window = MetricsWindow(30.0)
    for i in range(19):
        window.record_completion(1.0, 0.1)
    window.record_completion(1.0, 1.0)
    assert window.p95(1.0) == pytest.approx(0.1)


def test_p95_singleton_and_empty():
    window = MetricsWindow(30.0)
    assert window.p95(0.0) == 0.0
    window.record_completion(0.5, 0.5)
    assert window.p95(0.5) == pytest.approx(0.5)


@given(st.lists(st.floats(min_value=0.0, max_value=100.0,
                          allow_nan=False), min_size=1, max_size=1000))
def test_p95_matches_sort_oracle(latencies):
    window = MetricsWindow(1e9)
    for lat in latencies:
        window.record_completion(1.0, lat)
    assert window.p95(1.0) == brute_force_p95(latencies)


def test_samples_age_out_of_the_window():
    window = MetricsWindow(30.0)
    window.record_completion(10.0, 5.0)
    window.record_completion(35.0, 0.2)
    assert window.p95(35.0) == pytest.approx(5.0)   # 10.0 > 35-30, retained
    assert window.p95(40.5) == pytest.approx(0.2)   # old sample expired
    assert window.throughput(40.5) == pytest.approx(1 / 30.0)


# ---- throughput --------------------------------------------------------------

def test_throughput_is_completions_over_window():
    window = MetricsWindow(30.0)
    for i in range(300):
        window.record_completion(29.9, 0.1)
    assert window.throughput(30.0) == pytest.approx(10.0)
    assert window.throughput(30.0) * window.window_len_s == 300


def test_throughput_empty_window():
    assert MetricsWindow(30.0).throughput(100.0) == 0.0


# ---- utilization ---------------------------------------------------------------

def make_cluster(budget=1):
    engine = Engine()
    cluster = ClusterModel(engine, ServiceModel(), limits=PoolLimits(0, 8, 0, 8),
                           gpu_device_budget=budget, routing_pref=RoutePref.GPU_FIRST)
    return engine, cluster


def occupy(cluster, pool, n):
    pod = cluster.ready_pods(pool)[0]
    for i in range(n):
        cluster.submit(Request(id=1000 + i, arrived_at=cluster.engine.now))
    return pod


def test_gpu_utilization_levels():
    engine, cluster = make_cluster()
    model = UtilizationModel()
    assert model.gpu_utilization(cluster) == 0.0
    cluster.spawn_ready(Pool.GPU, 1)
    occupy(cluster, Pool.GPU, 8)
    assert model.gpu_utilization(cluster) == pytest.approx(1.0)


def test_gpu_utilization_half_busy():
    engine, cluster = make_cluster()
    cluster.spawn_ready(Pool.GPU, 1)
    occupy(cluster, Pool.GPU, 4)
    assert UtilizationModel().gpu_utilization(cluster) == pytest.approx(0.5)


def test_cpu_utilization_idle_and_busy_endpoints():
    model = UtilizationModel(memory_pods=0)
    engine, cluster = make_cluster()
    cluster.spawn_ready(Pool.CPU, 3)
    cpu, mem = model.cpu_mem_utilization(cluster)
    assert cpu == pytest.approx(3 * 715 / 16000)
    assert mem == pytest.approx(3 * 540e6 / (32 * 2**30))
    for pod in cluster.cpu_pods:
        for i in range(pod.concurrency_cap):
            pod.in_service.add(9000 + pod.id * 10 + i)
    cpu, _ = model.cpu_mem_utilization(cluster)
    assert cpu == pytest.approx(3 * 1062 / 16000)


def test_no_pods_reports_only_memory_pod_constants():
    model = UtilizationModel()
    engine, cluster = make_cluster()
    cpu, mem = model.cpu_mem_utilization(cluster)
    assert cpu == pytest.approx(3 * 3.0 / 16000)
    assert mem == pytest.approx(3 * 3 * 2**20 / (32 * 2**30))


def test_all_utilizations_bounded():
    model = UtilizationModel(node_millicores=100.0)  # tiny node saturates
    engine, cluster = make_cluster()
    cluster.spawn_ready(Pool.CPU, 5)
    cpu, mem = model.cpu_mem_utilization(cluster)
    assert 0.0 <= cpu <= 1.0 and 0.0 <= mem <= 1.0


# ---- exposition format ----------------------------------------------------------

_SAMPLE_RE = re.compile(
    r'^(?P<name>[a-zA-Z_:][a-zA-Z0-9_:]*)'
    r'(?:\{(?P<labels>[^}]*)\})?\s+(?P<value>\S+)$')


def parse_exposition(text):
    """Independent parser for the text format (the round-trip oracle)."""
    types = {}
    samples = {}
    for line in text.splitlines():
        if not line:
            continue
        if line.startswith("#"):
            parts = line.split()
            assert parts[1] == "TYPE", f"unexpected comment line: {line!r}"
            types[parts[2]] = parts[3]
            continue
        m = _SAMPLE_RE.match(line)
        assert m, f"unparseable sample line: {line!r}"
        labels = {}
        if m.group("labels"):
            for item in m.group("labels").split(","):
                k, v = item.split("=", 1)
                assert v.startswith('"') and v.endswith('"')
                labels[k] = v[1:-1]
        key = (m.group("name"), tuple(sorted(labels.items())))
        samples[key] = float(m.group("value"))
    return types, samples


def test_snapshot_round_trips_through_parser():
    engine, cluster = make_cluster()
    cluster.spawn_ready(Pool.CPU, 3)
    cluster.spawn_ready(Pool.GPU, 2)
    window = MetricsWindow(30.0)
    window.record_completion(1.0, 0.1)
    text = export_snapshot(window, cluster, 1.0, UtilizationModel())
    types, samples = parse_exposition(text)
    assert types == {
        "kis_p95_seconds": "gauge",
        "kis_throughput_rps": "gauge",
        "kis_gpu_util": "gauge",
        "kis_cpu_util": "gauge",
        "kis_mem_util": "gauge",
        "kis_replicas": "gauge",
    }
    assert samples[("kis_p95_seconds", ())] == pytest.approx(0.1)
    assert samples[("kis_replicas", (("pool", "gpu"),))] == 2
    assert samples[("kis_replicas", (("pool", "cpu"),))] == 3
    cpu, mem = UtilizationModel().cpu_mem_utilization(cluster)
    assert samples[("kis_cpu_util", ())] == pytest.approx(cpu)
    assert samples[("kis_mem_util", ())] == pytest.approx(mem)


def test_snapshot_simple_value_formatting():
    engine, cluster = make_cluster()
    window = MetricsWindow(30.0)
    window.record_completion(1.0, 0.1)
    text = export_snapshot(window, cluster, 1.0, UtilizationModel())
    assert "kis_p95_seconds 0.1\n" in text
