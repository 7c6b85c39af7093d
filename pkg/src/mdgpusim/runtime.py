"""Host-side GPU runtime behaviour: submission, flushing, queues, sync.

Two submission disciplines are modelled:

* deferred: ``submit`` records a node into a task-graph buffer on the
  application thread.  Once the buffer holds more than
  ``max_cached_nodes`` entries (or a host sync arrives) the batch is
  handed to a flush worker thread, which pays a per-batch bookkeeping
  cost plus a per-node processing cost and launch API call, then the
  node reaches its device queue.  A second worker wakes the host on
  sync and pays graph retirement costs that grow with how long each
  flushed batch has been in flight.

* instant: ``submit`` pays the launch API cost directly on the
  application thread and the node reaches its queue immediately; sync
  is a plain completion poll.  No worker threads exist.

Device side, streams are multiplexed round-robin onto a fixed number
of hardware queue slots in creation order.  Work in one slot is FIFO:
a cross-stream dependency blocks the whole slot until it resolves,
and sharing a slot serializes otherwise-independent streams.  When
more streams exist than slots, every dispatch pays a small extra
scheduling penalty.

Event-recording modes: ``COARSE`` records only the sync marker, while
``FULL`` records one event per node, paying host-side create/record
API costs on the launching thread plus a device-side packet after
every task.  Latency draws are counter-hashed per (actor, kind), so
the FULL run sees exactly the same launch latencies as the COARSE
run and can only add cost, never reshuffle it.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from .costs import ApiKind, ApiLatencyModel, ApiSampler, round_half_up
from .engine import Charge, Engine, Event, WaitFor


class EventMode(Enum):
    COARSE = "coarse"
    FULL = "full"


@dataclass
class RuntimeProfile:
    """Mechanics constants of one runtime version.

    All times in nanoseconds.  ``validate`` enforces the relation that
    keeps launch delay non-decreasing in the node-cache size: the
    per-batch worker bookkeeping must not exceed what the application
    pays per submission, otherwise batching could beat eager flushing
    even for the head-of-batch node.
    """

    name: str
    submission: str                      # "deferred", "instant" or "both"
    submit_cost_ns: int                  # app: record one node into the buffer
    flush_trigger_cost_ns: int           # app: hand the batch over
    flush_bookkeeping_cost_ns: int       # worker: per batch
    per_node_flush_cost_ns: int          # worker: per node, excl. launch API
    notify_cost_ns: int                  # monitor: wake the host after sync
    retire_fixed_ns: int                 # monitor: per flushed batch at sync
    retire_rate: float                   # extra retire ns per ns of batch age
    retire_flush_cap_ns: int
    retire_sync_cap_ns: int
    # app: extra cost per threshold-triggered flush for every other rank
    # sharing the node.  Mid-step flushes race the peers' runtime and HSA
    # threads for the shared queue doorbells; sync-point flushes happen
    # while the node quiesces and do not pay either term.  The scan term
    # is charged once per node pair in the flushed batch: dependency
    # resolution walks the batch against itself while holding the graph
    # lock, so batching submissions does not make mid-step flushes free.
    flush_contention_ns_per_peer: int = 0
    flush_contention_scan_ns: int = 0
    # traffic cutoff: the contention terms apply only when the flushed
    # batch carries less device work than this.  Small batches mean short
    # steps and dense flush traffic across the node; batches hauling big
    # kernels flush while the peers still crunch.  Zero charges every
    # threshold flush regardless of batch size.
    flush_contention_cutoff_ns: int = 0
    app_step_cpu_ns: int = 35000
    dispatch_gap_ns: int = 3800
    oversub_extra_ns: int = 450
    event_device_cost_ns: int = 7000
    mpi_msg_cpu_ns: int = 4000
    pme_comm_overlap: bool = True        # overlap PME-rank MPI with its chain
    hsa_worker_duty_milli: int = 750
    source: str = "assumed"

    def validate(self) -> "RuntimeProfile":
        for f in ("submit_cost_ns", "flush_trigger_cost_ns", "flush_bookkeeping_cost_ns",
                  "per_node_flush_cost_ns", "notify_cost_ns", "retire_fixed_ns",
                  "retire_flush_cap_ns", "retire_sync_cap_ns", "app_step_cpu_ns",
                  "dispatch_gap_ns", "oversub_extra_ns", "event_device_cost_ns",
                  "mpi_msg_cpu_ns", "flush_contention_ns_per_peer",
                  "flush_contention_scan_ns", "flush_contention_cutoff_ns"):
            if getattr(self, f) < 0:
                raise ValueError(f"{self.name}: {f} must be >= 0")
        if self.submission not in ("deferred", "instant", "both"):
            raise ValueError(f"{self.name}: bad submission mode {self.submission!r}")
        if self.retire_rate < 0:
            raise ValueError(f"{self.name}: retire_rate must be >= 0")
        if self.supports_deferred():
            budget = self.submit_cost_ns + self.flush_trigger_cost_ns
            if self.flush_bookkeeping_cost_ns > budget:
                raise ValueError(
                    f"{self.name}: flush bookkeeping ({self.flush_bookkeeping_cost_ns}) "
                    f"exceeds per-submission cost ({budget}); launch delay would "
                    f"not be monotone in the cache size")
        return self

    def supports_deferred(self) -> bool:
        return self.submission in ("deferred", "both")

    def supports_instant(self) -> bool:
        return self.submission in ("instant", "both")

    def worker_threads(self, instant: bool) -> int:
        return 0 if instant else 2

    @classmethod
    def from_mapping(cls, mapping: Dict) -> "RuntimeProfile":
        kwargs = {}
        for f in cls.__dataclass_fields__:
            if f in mapping:
                kwargs[f] = mapping[f]
        return cls(**kwargs).validate()


ENV_MAX_CACHED_NODES = "HIPSYCL_RT_MAX_CACHED_NODES"
ENV_INSTANT_SUBMISSION = "HIPSYCL_ALLOW_INSTANT_SUBMISSION"
ENV_MAX_HW_QUEUES = "GPU_MAX_HW_QUEUES"
ENV_HSA_AFFINITY = "HSA_OVERRIDE_CPU_AFFINITY_DEBUG"


@dataclass
class RunSettings:
    """Per-run knobs, named after the environment variables they model."""

    max_cached_nodes: int = 100
    instant_submission: bool = False
    max_hw_queues: int = 4
    hsa_affinity_override: bool = False
    event_mode: EventMode = EventMode.COARSE
    visible_devices: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_cached_nodes < 0:
            raise ValueError(f"{ENV_MAX_CACHED_NODES} must be >= 0")
        if self.max_hw_queues < 1:
            raise ValueError(f"{ENV_MAX_HW_QUEUES} must be >= 1")
        if self.visible_devices < 1:
            raise ValueError("at least one device must be visible")

    @classmethod
    def from_env_mapping(cls, env: Dict, **kwargs) -> "RunSettings":
        if ENV_MAX_CACHED_NODES in env:
            kwargs.setdefault("max_cached_nodes", int(env[ENV_MAX_CACHED_NODES]))
        if ENV_INSTANT_SUBMISSION in env:
            kwargs.setdefault("instant_submission", _as_bool(env[ENV_INSTANT_SUBMISSION]))
        if ENV_MAX_HW_QUEUES in env:
            kwargs.setdefault("max_hw_queues", int(env[ENV_MAX_HW_QUEUES]))
        if ENV_HSA_AFFINITY in env:
            kwargs.setdefault("hsa_affinity_override", _as_bool(env[ENV_HSA_AFFINITY]))
        return cls(**kwargs)

    def to_env(self) -> Dict[str, str]:
        return {
            ENV_MAX_CACHED_NODES: str(self.max_cached_nodes),
            ENV_INSTANT_SUBMISSION: "1" if self.instant_submission else "0",
            ENV_MAX_HW_QUEUES: str(self.max_hw_queues),
            ENV_HSA_AFFINITY: "1" if self.hsa_affinity_override else "0",
        }


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, int):
        return bool(value)
    return str(value).strip().lower() in ("1", "true", "yes", "on")


# -- device side -------------------------------------------------------------


class _DevTask:
    __slots__ = ("name", "duration_ns", "deps", "done", "args",
                 "event_packet_ns", "submit_time")

    def __init__(self, name, duration_ns, deps, done, args, event_packet_ns):
        self.name = name
        self.duration_ns = duration_ns
        self.deps = tuple(deps)
        self.done = done
        self.args = args
        self.event_packet_ns = event_packet_ns
        self.submit_time = None


class Stream:
    """An in-order submission queue, muxed onto one hardware slot."""

    def __init__(self, name: str, slot: "_Slot"):
        self.name = name
        self.slot = slot

    def enqueue(self, task: _DevTask) -> None:
        self.slot.enqueue(task, self.name)


class _Slot:
    """One hardware queue: strict FIFO over everything mapped to it."""

    def __init__(self, engine: Engine, name: str):
        self.engine = engine
        self.name = name
        self.fifo: deque = deque()
        self._wake: Optional[Event] = None
        self.dispatch_gap_ns = 0
        engine.spawn(name, self._run(), daemon=True)

    def enqueue(self, task: _DevTask, stream_name: str) -> None:
        task.args = dict(task.args or {})
        task.args["stream"] = stream_name
        self.fifo.append(task)
        if self._wake is not None and not self._wake.fired:
            self.engine.post(self._wake, 0)
            self._wake = None

    def _run(self):
        while True:
            if not self.fifo:
                self._wake = self.engine.event(f"{self.name}.wake")
                yield WaitFor(self._wake)
                continue
            task = self.fifo.popleft()
            for dep in task.deps:
                if not dep.fired:
                    yield WaitFor(dep)
            if self.dispatch_gap_ns:
                yield Charge(self.dispatch_gap_ns, "dispatch", {"for": task.name})
            yield Charge(task.duration_ns, task.name, task.args)
            if task.event_packet_ns:
                yield Charge(task.event_packet_ns, "event_packet", {"for": task.name})
            self.engine.post(task.done, 0)


class Device:
    """A GPU die: hardware queue slots plus round-robin stream creation.

    The runtime opens ``idle_streams`` of its own before the application
    creates any (it does so for every visible device), so restricting
    device visibility changes which slots application streams land on.
    """

    def __init__(self, engine: Engine, name: str, profile: RuntimeProfile,
                 settings: RunSettings):
        self.engine = engine
        self.name = name
        self.profile = profile
        self.slots = [_Slot(engine, f"{name}.q{i}")
                      for i in range(settings.max_hw_queues)]
        self.streams: List[Stream] = []
        idle = 4 if settings.visible_devices > 1 else 0
        for i in range(idle):
            self.new_stream(f"idle{i}")

    def new_stream(self, label: str) -> Stream:
        slot = self.slots[len(self.streams) % len(self.slots)]
        stream = Stream(f"{self.name}.{label}", slot)
        self.streams.append(stream)
        self._retune_dispatch()
        return stream

    def _retune_dispatch(self) -> None:
        ratio = len(self.streams) / len(self.slots)
        gap = self.profile.dispatch_gap_ns
        if ratio > 1.0:
            gap += round_half_up(self.profile.oversub_extra_ns * (ratio - 1.0))
        for slot in self.slots:
            slot.dispatch_gap_ns = gap


# -- host side ---------------------------------------------------------------


class RankRuntime:
    """Submission front-end for one rank: buffer, workers, sync taxes.

    Each simulated thread gets its own single-core domain, mirroring
    one-thread-per-core pinning.  The HSA poller thread has no core of
    its own: it lands on the application core and steals cycles there,
    unless the affinity override banishes it (modelling the debug knob
    that lets runtime threads escape the rank's mask).
    """

    def __init__(self, engine: Engine, name: str,
                 profile: RuntimeProfile, settings: RunSettings,
                 api_model: ApiLatencyModel, cores: int = 7):
        profile.validate()
        if cores < 1:
            raise ValueError("need at least one core")
        self.engine = engine
        self.name = name
        self.profile = profile
        self.settings = settings
        self.api = ApiSampler(api_model)
        self.instant = settings.instant_submission
        if self.instant and not profile.supports_instant():
            raise ValueError(f"runtime {profile.name!r} has no instant submission")
        if not self.instant and not profile.supports_deferred():
            raise ValueError(f"runtime {profile.name!r} only submits instantly")

        self.app_actor = f"{name}.app"
        self.launch_delays: List[int] = []
        self._buffer: List[Tuple[_DevTask, Stream]] = []
        self._batches: deque = deque()
        self._flush_wake: Optional[Event] = None
        self._flushes_since_sync: List[int] = []  # trigger timestamps
        self._notify_requests: deque = deque()
        self._notify_wake: Optional[Event] = None

        n_domains = min(cores, 1 + profile.worker_threads(self.instant))
        self._cores = [engine.domain(f"{name}.core{i}", 1) for i in range(n_domains)]
        self.app_domain = self._cores[0]
        if not settings.hsa_affinity_override:
            engine.add_background(self.app_domain, f"{name}.hsa-worker",
                                  profile.hsa_worker_duty_milli)
        if not self.instant:
            self.flush_actor = f"{name}.dag-flush"
            self.monitor_actor = f"{name}.dag-monitor"
            engine.spawn(self.flush_actor, self._flush_loop(),
                         domain=self._cores[1 % n_domains], daemon=True)
            engine.spawn(self.monitor_actor, self._monitor_loop(),
                         domain=self._cores[2 % n_domains], daemon=True)
        else:
            self.flush_actor = None
            self.monitor_actor = None

    # -- submission (runs on the application process) ----------------------

    def submit(self, stream: Stream, name: str, duration_ns: int,
               deps: Sequence[Event] = (), args: Optional[dict] = None):
        """Generator; ``yield from`` it on the app process.  Returns the
        completion event of the device task."""
        done = self.engine.event(f"{name}.done")
        full = self.settings.event_mode is EventMode.FULL
        task = _DevTask(name, duration_ns, deps, done, args,
                        self.profile.event_device_cost_ns if full else 0)
        task.submit_time = self.engine.now
        if self.instant:
            for _ in task.deps:
                yield Charge(self.api.draw(self.app_actor, ApiKind.STREAM_WAIT_EVENT),
                             "stream_wait_event")
            if full:
                yield Charge(self.api.draw(self.app_actor, ApiKind.EVENT_CREATE_DESTROY),
                             "event_create_destroy")
                yield Charge(self.api.draw(self.app_actor, ApiKind.EVENT_RECORD),
                             "event_record")
            yield Charge(self.api.draw(self.app_actor, ApiKind.KERNEL_LAUNCH),
                         "kernel_launch", {"node": name})
            self.launch_delays.append(self.engine.now - task.submit_time)
            stream.enqueue(task)
        else:
            yield Charge(self.profile.submit_cost_ns, "submit_node", {"node": name})
            self._buffer.append((task, stream))
            if len(self._buffer) > self.settings.max_cached_nodes:
                yield from self._trigger_flush(threshold=True)
        return done

    def _trigger_flush(self, threshold: bool = False):
        if not self._buffer:
            return
        cost = self.profile.flush_trigger_cost_ns
        if threshold:
            peers = self.settings.visible_devices - 1
            batch = len(self._buffer)
            pairs = batch * (batch - 1) // 2
            nominal = peers * (self.profile.flush_contention_ns_per_peer
                               + self.profile.flush_contention_scan_ns * pairs)
            cutoff = self.profile.flush_contention_cutoff_ns
            if cutoff > 0:
                work = sum(t.duration_ns for t, _ in self._buffer)
                if work >= cutoff:
                    nominal = 0
            cost += nominal
        yield Charge(cost, "flush_trigger",
                     {"nodes": len(self._buffer)})
        batch = self._buffer
        self._buffer = []
        self._batches.append((self.engine.now, batch))
        self._flushes_since_sync.append(self.engine.now)
        if self._flush_wake is not None and not self._flush_wake.fired:
            self.engine.post(self._flush_wake, 0)
            self._flush_wake = None

    def sync(self, events: Sequence[Event]):
        """Generator; host-side synchronization against ``events``."""
        if not self.instant:
            yield from self._trigger_flush()
        for ev in events:
            if not ev.fired:
                yield WaitFor(ev)
        if self.instant:
            yield Charge(self.api.draw(self.app_actor, ApiKind.HOST_SYNC_POLL),
                         "host_sync_poll")
        else:
            req = self.engine.event("sync_notify")
            self._notify_requests.append((req, list(self._flushes_since_sync)))
            self._flushes_since_sync.clear()
            if self._notify_wake is not None and not self._notify_wake.fired:
                self.engine.post(self._notify_wake, 0)
                self._notify_wake = None
            yield WaitFor(req)
        # sync marker bookkeeping, identical in every mode
        yield Charge(self.api.draw(self.app_actor, ApiKind.EVENT_CREATE_DESTROY),
                     "event_create_destroy")
        yield Charge(self.api.draw(self.app_actor, ApiKind.EVENT_RECORD),
                     "event_record")

    # -- worker threads -----------------------------------------------------

    def _flush_loop(self):
        full = self.settings.event_mode is EventMode.FULL
        while True:
            if not self._batches:
                self._flush_wake = self.engine.event(f"{self.name}.flush-wake")
                yield WaitFor(self._flush_wake)
                continue
            _, batch = self._batches.popleft()
            yield Charge(self.profile.flush_bookkeeping_cost_ns, "flush_bookkeeping",
                         {"nodes": len(batch)})
            for task, stream in batch:
                for _ in task.deps:
                    yield Charge(self.api.draw(self.flush_actor, ApiKind.STREAM_WAIT_EVENT),
                                 "stream_wait_event")
                if full:
                    yield Charge(self.api.draw(self.flush_actor, ApiKind.EVENT_CREATE_DESTROY),
                                 "event_create_destroy")
                    yield Charge(self.api.draw(self.flush_actor, ApiKind.EVENT_RECORD),
                                 "event_record")
                if self.profile.per_node_flush_cost_ns:
                    yield Charge(self.profile.per_node_flush_cost_ns, "graph_process",
                                 {"node": task.name})
                yield Charge(self.api.draw(self.flush_actor, ApiKind.KERNEL_LAUNCH),
                             "kernel_launch", {"node": task.name})
                self.launch_delays.append(self.engine.now - task.submit_time)
                stream.enqueue(task)

    def _monitor_loop(self):
        prof = self.profile
        while True:
            if not self._notify_requests:
                self._notify_wake = self.engine.event(f"{self.name}.monitor-wake")
                yield WaitFor(self._notify_wake)
                continue
            req, triggers = self._notify_requests.popleft()
            yield Charge(prof.notify_cost_ns, "sync_notify")
            tax = 0
            for t in triggers:
                age = self.engine.now - t
                per_flush = prof.retire_fixed_ns + round_half_up(prof.retire_rate * age)
                tax += min(per_flush, prof.retire_flush_cap_ns)
            tax = min(tax, prof.retire_sync_cap_ns)
            if tax:
                yield Charge(tax, "graph_retire", {"flushes": len(triggers)})
            self.engine.post(req, 0)

    # -- measurements --------------------------------------------------------

    def first_launch_delay_ns(self) -> Optional[int]:
        return self.launch_delays[0] if self.launch_delays else None
