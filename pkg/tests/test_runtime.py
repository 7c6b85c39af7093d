import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdgpusim.costs import ApiKind, ApiLatencyModel, TwoPointLatency, default_api_model
from mdgpusim.engine import Charge, Engine, WaitFor
from mdgpusim.presets import get_profile, load_profiles
from mdgpusim.runtime import (
    Device,
    EventMode,
    RankRuntime,
    RunSettings,
    RuntimeProfile,
)


def quiet_api(seed=0):
    """Tail-free latencies so arithmetic in tests is exact."""
    return ApiLatencyModel({
        ApiKind.KERNEL_LAUNCH: TwoPointLatency(2000.0, 2000.0, 0.0),
        ApiKind.EVENT_RECORD: TwoPointLatency(2000.0, 2000.0, 0.0),
        ApiKind.EVENT_CREATE_DESTROY: TwoPointLatency(5500.0, 5500.0, 0.0),
        ApiKind.STREAM_WAIT_EVENT: TwoPointLatency(4000.0, 4000.0, 0.0),
        ApiKind.MEMCPY_ASYNC: TwoPointLatency(3000.0, 3000.0, 0.0),
        ApiKind.HOST_SYNC_POLL: TwoPointLatency(2000.0, 2000.0, 0.0),
    }, seed=seed)


def build_rank(settings, profile=None, cores=7, api=None):
    eng = Engine()
    prof = profile or get_profile("acpp-23.10")
    dev = Device(eng, "gcd0", prof, settings)
    rt = RankRuntime(eng, "rank0", prof, settings, api or quiet_api(), cores=cores)
    return eng, dev, rt


def run_submit_burst(settings, n_nodes, dur=50_000, profile=None):
    """App submits ``n_nodes`` equal kernels to one stream, then syncs."""
    eng, dev, rt = build_rank(settings, profile=profile)
    q = dev.new_stream("q0")

    def app():
        evts = []
        for i in range(n_nodes):
            ev = yield from rt.submit(q, f"k{i}", dur)
            evts.append(ev)
        yield from rt.sync(evts)

    eng.spawn(rt.app_actor, app(), domain=rt.app_domain)
    trace = eng.run_until_idle()
    return trace, rt


def test_profiles_load_and_validate():
    profiles = load_profiles()
    assert set(profiles) == {"acpp-0.9.4", "acpp-23.10", "hip-native"}
    assert profiles["acpp-0.9.4"].submission == "deferred"
    assert profiles["acpp-23.10"].submission == "both"
    assert profiles["hip-native"].submission == "instant"
    for p in profiles.values():
        p.validate()


def test_monotonicity_guard_rejects_heavy_bookkeeping():
    with pytest.raises(ValueError):
        RuntimeProfile(
            name="bad", submission="deferred", submit_cost_ns=1000,
            flush_trigger_cost_ns=0, flush_bookkeeping_cost_ns=2000,
            per_node_flush_cost_ns=5000, notify_cost_ns=0, retire_fixed_ns=0,
            retire_rate=0.0, retire_flush_cap_ns=0, retire_sync_cap_ns=0,
        ).validate()


def test_mode_support_is_enforced():
    eng = Engine()
    with pytest.raises(ValueError):
        RankRuntime(eng, "rank0", get_profile("hip-native"),
                    RunSettings(instant_submission=False), quiet_api())
    eng2 = Engine()
    with pytest.raises(ValueError):
        RankRuntime(eng2, "rank0", get_profile("acpp-0.9.4"),
                    RunSettings(instant_submission=True), quiet_api())


def test_env_mapping_round_trip():
    s = RunSettings.from_env_mapping({
        "HIPSYCL_RT_MAX_CACHED_NODES": 5,
        "HIPSYCL_ALLOW_INSTANT_SUBMISSION": "true",
        "GPU_MAX_HW_QUEUES": 2,
        "HSA_OVERRIDE_CPU_AFFINITY_DEBUG": 1,
    })
    assert s.max_cached_nodes == 5
    assert s.instant_submission is True
    assert s.max_hw_queues == 2
    assert s.hsa_affinity_override is True
    env = s.to_env()
    assert env["HIPSYCL_RT_MAX_CACHED_NODES"] == "5"
    assert env["HIPSYCL_ALLOW_INSTANT_SUBMISSION"] == "1"
    again = RunSettings.from_env_mapping(env)
    assert again == s


def test_streams_round_robin_onto_hw_slots():
    eng = Engine()
    settings = RunSettings(max_hw_queues=4)
    dev = Device(eng, "gcd0", get_profile("acpp-23.10"), settings)
    streams = [dev.new_stream(f"s{i}") for i in range(6)]
    slots = [s.slot.name for s in streams]
    assert slots == ["gcd0.q0", "gcd0.q1", "gcd0.q2", "gcd0.q3", "gcd0.q0", "gcd0.q1"]


def test_idle_streams_occupy_slots_first_when_many_devices_visible():
    eng = Engine()
    settings = RunSettings(max_hw_queues=4, visible_devices=8)
    dev = Device(eng, "gcd0", get_profile("acpp-23.10"), settings)
    app_stream = dev.new_stream("q_loc")
    # four idle runtime streams came first, so the app lands back on slot 0
    assert len(dev.streams) == 5
    assert app_stream.slot.name == "gcd0.q0"
    # five streams on four slots: every dispatch now pays the oversub extra
    gap = dev.slots[0].dispatch_gap_ns
    assert gap > get_profile("acpp-23.10").dispatch_gap_ns


def test_single_visible_device_creates_no_idle_streams():
    eng = Engine()
    dev = Device(eng, "gcd0", get_profile("acpp-23.10"), RunSettings())
    assert dev.streams == []
    dev.new_stream("q_loc")
    assert dev.slots[0].dispatch_gap_ns == get_profile("acpp-23.10").dispatch_gap_ns


def test_same_slot_serializes_distinct_slots_overlap():
    eng = Engine()
    settings = RunSettings(max_hw_queues=2)
    prof = get_profile("acpp-23.10")
    dev = Device(eng, "gcd0", prof, settings)
    a = dev.new_stream("a")   # slot 0
    b = dev.new_stream("b")   # slot 1
    c = dev.new_stream("c")   # slot 0 again
    rt = RankRuntime(eng, "rank0", prof, settings, quiet_api())

    def app():
        e1 = yield from rt.submit(a, "ka", 100_000)
        e2 = yield from rt.submit(b, "kb", 100_000)
        e3 = yield from rt.submit(c, "kc", 100_000)
        yield from rt.sync([e1, e2, e3])

    eng.spawn(rt.app_actor, app(), domain=rt.app_domain)
    tr = eng.run_until_idle()
    recs = {r["name"]: r for r in tr.records if r["name"] in ("ka", "kb", "kc")}
    # a and b overlap on different slots; c waits for a on slot 0
    assert recs["kb"]["begin_ns"] < recs["ka"]["end_ns"]
    assert recs["kc"]["begin_ns"] >= recs["ka"]["end_ns"]


def test_deferred_holds_nodes_until_cache_exceeded():
    settings = RunSettings(max_cached_nodes=100)
    trace, rt = run_submit_burst(settings, n_nodes=5)
    # five nodes never exceeded the cache: they reached the device only
    # at the sync-triggered flush, after all submits were done
    launches = [r for r in trace.records if r["name"] == "kernel_launch"]
    submits = [r for r in trace.records if r["name"] == "submit_node"]
    assert len(launches) == 5
    assert len(submits) == 5
    assert min(l["begin_ns"] for l in launches) > max(s["end_ns"] for s in submits)
    assert all(l["actor"] == "rank0.dag-flush" for l in launches)


def test_deferred_flushes_mid_burst_once_cache_exceeded():
    settings = RunSettings(max_cached_nodes=3)
    trace, rt = run_submit_burst(settings, n_nodes=10)
    triggers = [r for r in trace.records if r["name"] == "flush_trigger"]
    # 10 submits with cache 3: flush after the 4th and 8th submit, plus
    # the sync flush for the tail
    assert len(triggers) == 3
    assert [t["args"]["nodes"] for t in triggers] == [4, 4, 2]


def test_instant_launches_from_the_app_thread():
    settings = RunSettings(instant_submission=True)
    trace, rt = run_submit_burst(settings, n_nodes=4)
    launches = [r for r in trace.records if r["name"] == "kernel_launch"]
    assert len(launches) == 4
    assert all(l["actor"] == "rank0.app" for l in launches)
    assert not any(r["name"] == "flush_trigger" for r in trace.records)
    assert not any(r["name"] == "graph_process" for r in trace.records)
    assert rt.flush_actor is None


def test_deferred_sync_pays_notify_and_retire():
    settings = RunSettings(max_cached_nodes=0)
    trace, rt = run_submit_burst(settings, n_nodes=6)
    notifies = [r for r in trace.records if r["name"] == "sync_notify"]
    retires = [r for r in trace.records if r["name"] == "graph_retire"]
    assert len(notifies) == 1
    assert notifies[0]["actor"] == "rank0.dag-monitor"
    assert len(retires) == 1
    assert retires[0]["args"]["flushes"] == 6
    prof = get_profile("acpp-23.10")
    tax = retires[0]["end_ns"] - retires[0]["begin_ns"]
    assert 0 < tax * 1.0  # charged
    # capped per sync even with many aged flushes
    assert tax <= prof.retire_sync_cap_ns * 2  # wall time under sharing


def test_instant_sync_is_a_poll():
    settings = RunSettings(instant_submission=True)
    trace, rt = run_submit_burst(settings, n_nodes=2)
    assert any(r["name"] == "host_sync_poll" for r in trace.records)
    assert not any(r["name"] == "sync_notify" for r in trace.records)


def test_hsa_worker_duty_slows_the_app_unless_overridden():
    base = RunSettings(instant_submission=True)
    t1, _ = run_submit_burst(base, n_nodes=3)
    override = RunSettings(instant_submission=True, hsa_affinity_override=True)
    t2, _ = run_submit_burst(override, n_nodes=3)
    app1 = [r for r in t1.records if r["actor"] == "rank0.app"]
    app2 = [r for r in t2.records if r["actor"] == "rank0.app"]
    # same work, but the poller shares the app core: every app charge
    # stretches by 1.75x until it is banished
    assert sum(r["end_ns"] - r["begin_ns"] for r in app1) > \
        sum(r["end_ns"] - r["begin_ns"] for r in app2)


def test_full_mode_records_per_node_and_pays_device_packets():
    cg = RunSettings(max_cached_nodes=0, event_mode=EventMode.COARSE)
    full = RunSettings(max_cached_nodes=0, event_mode=EventMode.FULL)
    t_cg, _ = run_submit_burst(cg, n_nodes=5)
    t_full, _ = run_submit_burst(full, n_nodes=5)
    recs_cg = [r for r in t_cg.records if r["name"] == "event_record"]
    recs_full = [r for r in t_full.records if r["name"] == "event_record"]
    assert len(recs_cg) == 1          # the sync marker only
    assert len(recs_full) == 1 + 5    # marker plus one per node
    packets_cg = [r for r in t_cg.records if r["name"] == "event_packet"]
    packets_full = [r for r in t_full.records if r["name"] == "event_packet"]
    assert len(packets_cg) == 0
    assert len(packets_full) == 5


def test_full_mode_never_beats_coarse():
    for mcn, instant in ((0, False), (100, False), (0, True)):
        cg = RunSettings(max_cached_nodes=mcn, instant_submission=instant,
                         event_mode=EventMode.COARSE, seed=11)
        fl = RunSettings(max_cached_nodes=mcn, instant_submission=instant,
                         event_mode=EventMode.FULL, seed=11)
        t_cg, _ = run_submit_burst(cg, n_nodes=12)
        t_fl, _ = run_submit_burst(fl, n_nodes=12)
        assert t_cg.makespan_ns <= t_fl.makespan_ns


def test_full_mode_sees_identical_launch_latencies():
    collected = {}
    for mode in (EventMode.COARSE, EventMode.FULL):
        settings = RunSettings(max_cached_nodes=0, event_mode=mode, seed=99)
        eng = Engine()
        prof = get_profile("acpp-23.10")
        dev = Device(eng, "gcd0", prof, settings)
        rt = RankRuntime(eng, "rank0", prof, settings, default_api_model(seed=99))
        q = dev.new_stream("q0")

        def app():
            evts = []
            for i in range(30):
                ev = yield from rt.submit(q, f"k{i}", 1000)
                evts.append(ev)
            yield from rt.sync(evts)

        eng.spawn(rt.app_actor, app(), domain=rt.app_domain)
        trace = eng.run_until_idle()
        collected[mode] = [r["end_ns"] - r["begin_ns"] for r in trace.records
                           if r["name"] == "kernel_launch"]
    assert collected[EventMode.COARSE] == collected[EventMode.FULL]


def test_first_launch_delay_grows_with_cache_size():
    delays = {}
    for mcn in (0, 1, 5, 20, 100):
        settings = RunSettings(max_cached_nodes=mcn)
        _, rt = run_submit_burst(settings, n_nodes=150, dur=1000)
        delays[mcn] = rt.first_launch_delay_ns()
    values = [delays[m] for m in (0, 1, 5, 20, 100)]
    assert values == sorted(values)
    assert delays[100] > delays[0]


def test_instant_delay_below_deferred_delay():
    inst = RunSettings(instant_submission=True)
    _, rt_i = run_submit_burst(inst, n_nodes=20, dur=1000)
    defe = RunSettings(max_cached_nodes=0)
    _, rt_d = run_submit_burst(defe, n_nodes=20, dur=1000)
    assert max(rt_i.launch_delays) < min(rt_d.launch_delays)


@settings(max_examples=25, deadline=None)
@given(n_nodes=st.integers(min_value=1, max_value=60),
       dur=st.integers(min_value=100, max_value=200_000),
       mcns=st.lists(st.integers(min_value=0, max_value=120), min_size=2,
                     max_size=4, unique=True))
def test_first_node_delay_monotone_in_cache_size(n_nodes, dur, mcns):
    results = []
    for mcn in sorted(mcns):
        settings = RunSettings(max_cached_nodes=mcn)
        _, rt = run_submit_burst(settings, n_nodes=n_nodes, dur=dur)
        results.append(rt.first_launch_delay_ns())
    assert results == sorted(results)


@settings(max_examples=20, deadline=None)
@given(n_nodes=st.integers(min_value=1, max_value=40),
       dur=st.integers(min_value=100, max_value=100_000),
       pair=st.tuples(st.integers(min_value=40, max_value=200),
                      st.integers(min_value=40, max_value=200)))
def test_single_batch_regime_all_arrivals_monotone(n_nodes, dur, pair):
    """When the whole burst fits in one flush for both settings, every
    node's arrival is no earlier under the larger cache."""
    lo, hi = min(pair), max(pair)
    arrivals = {}
    for mcn in (lo, hi):
        settings = RunSettings(max_cached_nodes=mcn)
        trace, rt = run_submit_burst(settings, n_nodes=n_nodes, dur=dur)
        launches = [r for r in trace.records if r["name"] == "kernel_launch"]
        arrivals[mcn] = sorted(r["end_ns"] for r in launches)
    assert all(a <= b for a, b in zip(arrivals[lo], arrivals[hi]))


def test_instant_and_deferred0_execute_streams_in_the_same_order():
    orders = {}
    for instant in (True, False):
        settings = RunSettings(instant_submission=instant, max_cached_nodes=0)
        eng = Engine()
        prof = get_profile("acpp-23.10")
        dev = Device(eng, "gcd0", prof, settings)
        qa = dev.new_stream("qa")
        qb = dev.new_stream("qb")
        rt = RankRuntime(eng, "rank0", prof, settings, quiet_api())

        def app():
            evts = []
            for i in range(12):
                q = qa if i % 3 else qb
                ev = yield from rt.submit(q, f"k{i}", 5000)
                evts.append(ev)
            yield from rt.sync(evts)

        eng.spawn(rt.app_actor, app(), domain=rt.app_domain)
        trace = eng.run_until_idle()
        per_stream = {}
        for r in trace.records:
            if r["name"].startswith("k") and "stream" in (r["args"] or {}):
                per_stream.setdefault(r["args"]["stream"], []).append(r["name"])
        orders[instant] = per_stream
    assert orders[True] == orders[False]


def test_cross_stream_dependency_blocks_the_consumer():
    settings = RunSettings(instant_submission=True, max_hw_queues=4)
    eng = Engine()
    prof = get_profile("acpp-23.10")
    dev = Device(eng, "gcd0", prof, settings)
    qa = dev.new_stream("qa")
    qb = dev.new_stream("qb")
    rt = RankRuntime(eng, "rank0", prof, settings, quiet_api())

    def app():
        e1 = yield from rt.submit(qa, "producer", 100_000)
        e2 = yield from rt.submit(qb, "consumer", 1000, deps=[e1])
        yield from rt.sync([e2])

    eng.spawn(rt.app_actor, app(), domain=rt.app_domain)
    tr = eng.run_until_idle()
    recs = {r["name"]: r for r in tr.records if r["name"] in ("producer", "consumer")}
    assert recs["consumer"]["begin_ns"] >= recs["producer"]["end_ns"]


def test_replay_determinism_with_real_api_model():
    def once():
        settings = RunSettings(max_cached_nodes=7, seed=5)
        eng = Engine()
        prof = get_profile("acpp-0.9.4")
        dev = Device(eng, "gcd0", prof, settings)
        q1 = dev.new_stream("q1")
        q2 = dev.new_stream("q2")
        rt = RankRuntime(eng, "rank0", prof, settings, default_api_model(seed=5))

        def app():
            evts = []
            for i in range(80):
                ev = yield from rt.submit(q1 if i % 2 else q2, f"k{i}", 3000 + i)
                evts.append(ev)
                if i % 17 == 0:
                    yield from rt.sync(evts)
                    evts.clear()
            yield from rt.sync(evts)

        eng.spawn(rt.app_actor, app(), domain=rt.app_domain)
        return eng.run_until_idle().to_json()

    assert once() == once()
