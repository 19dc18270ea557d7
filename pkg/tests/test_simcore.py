"""Engine ordering, pod lifecycle, routing and the service-time model."""

import pytest

from kisim.simcore import (ClusterModel, Engine, EventKind, Pod, PodPhase, Pool,
                           PoolLimits, Request, RoutePref, ServiceModel,
                           SimulationError)


def make_cluster(engine=None, pref=RoutePref.CPU_FIRST, budget=1,
                 limits=PoolLimits(cpu_min=0, cpu_max=8, gpu_min=0, gpu_max=8)):
    engine = engine or Engine()
    cluster = ClusterModel(engine, ServiceModel(), limits=limits,
                           gpu_device_budget=budget,
                           cpu_startup_s=5.0, gpu_startup_s=10.0,
                           routing_pref=pref)
    return engine, cluster


# ---- engine ---------------------------------------------------------------

def test_events_tie_break_by_schedule_order():
    engine = Engine()
    fired = []
    engine.schedule(5.0, EventKind.CONTROL_TICK, lambda: fired.append("A"))
    engine.schedule(5.0, EventKind.CONTROL_TICK, lambda: fired.append("B"))
    engine.run_until(5.0)
    assert fired == ["A", "B"]


def test_events_dequeue_in_time_order():
    engine = Engine()
    fired = []
    engine.schedule(7.0, EventKind.CONTROL_TICK, lambda: fired.append(7.0))
    engine.schedule(3.0, EventKind.CONTROL_TICK, lambda: fired.append(3.0))
    engine.run_until(10.0)
    assert fired == [3.0, 7.0]
    assert engine.now == 10.0


def test_scheduling_into_the_past_is_an_error():
    engine = Engine()
    engine.run_until(2.0)
    with pytest.raises(SimulationError):
        engine.schedule(1.0, EventKind.CONTROL_TICK, lambda: None)


def test_run_until_empty_queue_advances_clock_only():
    engine = Engine()
    engine.run_until(10.0)
    assert engine.now == 10.0
    assert engine.pending_events() == 0


def test_run_until_backwards_is_an_error():
    engine = Engine()
    engine.run_until(5.0)
    with pytest.raises(SimulationError):
        engine.run_until(4.0)


def test_clock_sequence_strictly_increases():
    engine = Engine()
    evs = [engine.make_event(1.0, EventKind.CONTROL_TICK, lambda: None)
           for _ in range(5)]
    seqs = [ev.seq for ev in evs]
    assert seqs == sorted(seqs)
    assert len(set(seqs)) == len(seqs)


# ---- service model ----------------------------------------------------------

def test_service_time_single_request_is_base():
    svc = ServiceModel()
    assert svc.service_time(Pool.GPU, 1) == pytest.approx(0.0816)
    assert svc.service_time(Pool.CPU, 1) == pytest.approx(0.0816)
    assert svc.contention_factor(Pool.CPU, 1) == 1.0
    assert svc.contention_factor(Pool.GPU, 1) == 1.0


def test_service_time_monotone_in_load():
    svc = ServiceModel()
    cpu_times = [svc.service_time(Pool.CPU, c) for c in range(1, svc.cpu_cap + 1)]
    gpu_times = [svc.service_time(Pool.GPU, c) for c in range(1, svc.gpu_cap + 1)]
    assert cpu_times == sorted(cpu_times)
    assert gpu_times == sorted(gpu_times)


def test_cpu_contention_dominates_gpu_pointwise():
    svc = ServiceModel()
    for c in range(2, svc.gpu_cap + 1):
        assert svc.contention_factor(Pool.CPU, c) >= svc.contention_factor(Pool.GPU, c)
    for c in range(2, svc.cpu_cap + 1):
        assert svc.service_time(Pool.CPU, c) >= svc.service_time(Pool.GPU, c)


def test_service_time_outside_cap_rejected():
    svc = ServiceModel()
    with pytest.raises(ValueError):
        svc.service_time(Pool.CPU, 0)
    with pytest.raises(ValueError):
        svc.service_time(Pool.CPU, svc.cpu_cap + 1)


# ---- pod lifecycle ----------------------------------------------------------

def test_scale_up_passes_through_starting_then_ready():
    engine, cluster = make_cluster()
    cluster.set_desired_replicas(Pool.CPU, 2)
    assert all(p.phase is PodPhase.STARTING for p in cluster.cpu_pods)
    engine.run_until(5.0)
    assert all(p.phase is PodPhase.READY for p in cluster.cpu_pods)
    assert len(cluster.cpu_pods) == 2


def test_gpu_standby_stays_pending_under_device_budget():
    engine, cluster = make_cluster(budget=1)
    cluster.set_desired_replicas(Pool.GPU, 2)
    engine.run_until(100.0)
    phases = sorted(p.phase.value for p in cluster.gpu_pods)
    assert phases == ["pending", "ready"]
    assert cluster.active_gpu_count() == 1


def test_pending_gpu_promoted_when_device_frees():
    engine, cluster = make_cluster(budget=1, pref=RoutePref.GPU_FIRST)
    cluster.set_desired_replicas(Pool.GPU, 1)
    engine.run_until(10.0)
    old_pod = cluster.gpu_pods[0]
    cluster.submit(Request(id=1, arrived_at=engine.now))  # keep it busy
    cluster.set_desired_replicas(Pool.GPU, 0)             # drain starts
    cluster.set_desired_replicas(Pool.GPU, 2)             # replacements wait
    assert [p.phase for p in cluster.gpu_pods
            if p is not old_pod] == [PodPhase.PENDING, PodPhase.PENDING]
    engine.run_until(30.0)  # drain completes, oldest standby takes the device
    assert old_pod not in cluster.gpu_pods
    phases = sorted(p.phase.value for p in cluster.gpu_pods)
    assert phases == ["pending", "ready"]
    assert cluster.active_gpu_count() == 1


def test_noop_scaling_emits_no_events():
    engine, cluster = make_cluster()
    cluster.set_desired_replicas(Pool.CPU, 3)
    engine.run_until(5.0)
    pending_before = engine.pending_events()
    cluster.set_desired_replicas(Pool.CPU, 3)
    assert engine.pending_events() == pending_before
    assert len(cluster.cpu_pods) == 3


def test_gpu_budget_never_exceeded_during_churn():
    engine, cluster = make_cluster(budget=1)
    for step, desired in enumerate([3, 1, 2, 0, 3, 2]):
        cluster.set_desired_replicas(Pool.GPU, desired)
        t_end = (step + 1) * 4.0
        while engine.now < t_end:
            assert cluster.active_gpu_count() <= cluster.gpu_device_budget
            engine.run_until(min(t_end, engine.now + 0.5))
    engine.run_until(100.0)
    assert cluster.active_gpu_count() <= cluster.gpu_device_budget


# ---- routing -----------------------------------------------------------------

def ready_pod(cluster, pool, n=1):
    cluster.set_desired_replicas(pool, n)
    cluster.engine.run_until(cluster.engine.now + 10.0)
    return cluster.ready_pods(pool)


def test_preferred_pool_wins_when_free():
    engine, cluster = make_cluster(pref=RoutePref.GPU_FIRST)
    ready_pod(cluster, Pool.GPU)
    ready_pod(cluster, Pool.CPU)
    req = Request(id=1, arrived_at=engine.now)
    cluster.submit(req)
    pod = cluster.gpu_pods[0]
    assert req.pod_id == pod.id


def test_spillover_to_other_pool_when_preferred_saturated():
    engine, cluster = make_cluster(pref=RoutePref.GPU_FIRST)
    ready_pod(cluster, Pool.GPU)
    ready_pod(cluster, Pool.CPU)
    gpu = cluster.gpu_pods[0]
    for i in range(gpu.concurrency_cap):
        cluster.submit(Request(id=100 + i, arrived_at=engine.now))
    assert gpu.free_slots() == 0
    req = Request(id=200, arrived_at=engine.now)
    cluster.submit(req)
    assert req.pod_id == cluster.cpu_pods[0].id


def test_enqueue_on_least_loaded_pod_across_pools():
    engine, cluster = make_cluster(pref=RoutePref.GPU_FIRST)
    ready_pod(cluster, Pool.GPU)
    ready_pod(cluster, Pool.CPU)
    gpu, cpu = cluster.gpu_pods[0], cluster.cpu_pods[0]
    rid = 0
    for pod in (gpu, cpu):
        for _ in range(pod.concurrency_cap):
            rid += 1
            cluster.submit(Request(id=rid, arrived_at=engine.now))
    # saturate queues asymmetrically: gpu queue 2, cpu queue 1
    gpu.queue.extend([Request(id=900, arrived_at=0.0), Request(id=901, arrived_at=0.0)])
    cpu.queue.append(Request(id=902, arrived_at=0.0))
    req = Request(id=999, arrived_at=engine.now)
    cluster.submit(req)
    assert req in cpu.queue


def test_backlog_drains_on_first_readiness():
    engine, cluster = make_cluster()
    reqs = [Request(id=i, arrived_at=0.0) for i in range(3)]
    for r in reqs:
        cluster.submit(r)
    assert len(cluster.backlog) == 3
    cluster.set_desired_replicas(Pool.CPU, 1)
    engine.run_until(5.0)
    assert not cluster.backlog
    pod = cluster.cpu_pods[0]
    assert len(pod.in_service) == pod.concurrency_cap
    assert len(pod.queue) == 1


# ---- scale-down drain ---------------------------------------------------------

def test_scale_down_drains_busy_pod_without_dropping_requests():
    engine, cluster = make_cluster()
    completed = []
    cluster.completion_listeners.append(lambda r: completed.append(r.id))
    ready_pod(cluster, Pool.CPU, 3)
    ids = list(range(1, 10))
    for i in ids:
        cluster.submit(Request(id=i, arrived_at=engine.now))
    busy = [p.id for p in cluster.cpu_pods if p.in_service]
    assert busy
    cluster.set_desired_replicas(Pool.CPU, 1)
    terminating = [p for p in cluster.cpu_pods if p.phase is PodPhase.TERMINATING]
    assert any(p.in_service for p in terminating), "a busy pod should drain"
    engine.run_until(engine.now + 30.0)
    assert sorted(completed) == ids
    assert len(cluster.cpu_pods) == 1
    assert cluster.requests_injected == cluster.requests_completed


def test_scale_down_victims_prefer_pods_without_work():
    engine, cluster = make_cluster()
    cluster.set_desired_replicas(Pool.CPU, 2)
    engine.run_until(5.0)
    cluster.set_desired_replicas(Pool.CPU, 3)  # third pod still starting
    cluster.set_desired_replicas(Pool.CPU, 2)
    # the starting pod (newest, no work) should be the victim
    assert len(cluster.cpu_pods) == 2
    assert all(p.phase is PodPhase.READY for p in cluster.cpu_pods)


# ---- conservation / latency bound --------------------------------------------

def test_conservation_under_random_churn():
    import random
    rng = random.Random(7)
    engine, cluster = make_cluster(pref=RoutePref.GPU_FIRST)
    completed = []
    cluster.completion_listeners.append(lambda r: completed.append(r))
    next_id = 0
    for _ in range(200):
        roll = rng.random()
        if roll < 0.5:
            next_id += 1
            cluster.submit(Request(id=next_id, arrived_at=engine.now))
        elif roll < 0.75:
            cluster.set_desired_replicas(Pool.CPU, rng.randint(0, 4))
        else:
            cluster.set_desired_replicas(Pool.GPU, rng.randint(0, 2))
        engine.run_until(engine.now + rng.random() * 0.4)
        assert cluster.requests_injected == (
            cluster.requests_completed + cluster.outstanding())
    cluster.set_desired_replicas(Pool.CPU, 2)
    engine.run_until(engine.now + 120.0)
    assert cluster.requests_completed == cluster.requests_injected
    assert sorted(r.id for r in completed) == list(range(1, next_id + 1))


def test_completed_latency_never_below_base_service_time():
    import random
    rng = random.Random(3)
    engine, cluster = make_cluster(pref=RoutePref.GPU_FIRST)
    svc = cluster.service
    latencies = []
    cluster.completion_listeners.append(lambda r: latencies.append(r.latency))
    cluster.set_desired_replicas(Pool.GPU, 1)
    cluster.set_desired_replicas(Pool.CPU, 2)
    engine.run_until(15.0)
    for i in range(300):
        cluster.submit(Request(id=i, arrived_at=engine.now))
        engine.run_until(engine.now + rng.random() * 0.05)
    engine.run_until(engine.now + 60.0)
    assert latencies
    assert min(latencies) >= svc.service_time(Pool.GPU, 1) - 1e-12


def test_single_request_on_idle_gpu_pod_takes_base_time():
    engine, cluster = make_cluster(pref=RoutePref.GPU_FIRST)
    done = []
    cluster.completion_listeners.append(lambda r: done.append(r))
    ready_pod(cluster, Pool.GPU)
    req = Request(id=1, arrived_at=engine.now)
    cluster.submit(req)
    engine.run_until(engine.now + 1.0)
    assert done and done[0].latency == pytest.approx(0.0816)


def test_identical_seeds_produce_identical_traces():
    def trace():
        engine, cluster = make_cluster()
        events = []
        cluster.completion_listeners.append(
            lambda r: events.append((r.id, r.completed_at, r.pod_id)))
        cluster.set_desired_replicas(Pool.CPU, 2)
        import random
        rng = random.Random(11)
        for i in range(100):
            engine.run_until(engine.now + rng.random() * 0.1)
            cluster.submit(Request(id=i, arrived_at=engine.now))
        engine.run_until(engine.now + 30.0)
        return events

    assert trace() == trace()
