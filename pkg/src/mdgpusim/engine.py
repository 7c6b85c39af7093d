"""Discrete-event core with processor-shared CPU charges.

Building blocks:

* ``Engine``     -- integer-nanosecond clock, (fire_time, seq) ordered heap
* ``Process``    -- generator coroutine spawned onto the engine
* ``Charge``     -- CPU work, slowed by other threads in the same domain
* ``Sleep``      -- plain timer, occupies no CPU
* ``WaitFor``    -- block until an Event fires, returns its payload
* ``Domain``     -- a set of cores whose occupants share cycles fluidly
* ``Trace``      -- completed charge records plus per-actor busy time

Invariants the rest of the package leans on:

* the clock is an int and never moves backwards; violations raise
  ``CausalityError`` instead of silently reordering
* two runs with identical inputs produce byte-identical traces: ties are
  broken by insertion sequence, never by hash or wall-clock state
* no floats inside the engine.  Thread duty is tracked in milli-duty
  integers and load factors are exact ``Fraction`` values, so the
  processor-sharing arithmetic replays exactly
* a drained event queue with a non-daemon process still blocked raises
  ``DeadlockError`` naming every blocked actor
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Generator, Optional

MILLI_DUTY = 1000  # duty units contributed by one fully-busy thread

_READY = "ready"
_CHARGING = "charging"
_WAITING = "waiting"
_SLEEPING = "sleeping"
_DONE = "done"


class CausalityError(RuntimeError):
    """Something was scheduled before the current simulation time."""


class DeadlockError(RuntimeError):
    """The event queue drained while non-daemon processes still wait."""

    def __init__(self, actors):
        self.actors = tuple(sorted(actors))
        super().__init__("deadlock: blocked actors: " + ", ".join(self.actors))


@dataclass
class Charge:
    """Yield to spend ``cost_ns`` of CPU work (wall time grows under sharing).

    Attributes:
        cost_ns: pure work in nanoseconds, before any slowdown
        name:    label recorded in the trace
        args:    optional JSON-safe payload stored alongside the record
    """

    cost_ns: int
    name: str
    args: Optional[dict] = None


@dataclass
class Sleep:
    """Yield to pause for ``delay_ns`` without occupying a core."""

    delay_ns: int


@dataclass
class WaitFor:
    """Yield to block until ``event`` fires; the yield evaluates to its payload."""

    event: "Event"


class Event:
    """One-shot occurrence processes can wait on."""

    __slots__ = ("name", "fired", "fire_time", "payload", "_waiters")

    def __init__(self, name: str = ""):
        self.name = name
        self.fired = False
        self.fire_time: Optional[int] = None
        self.payload: Any = None
        self._waiters: list["Process"] = []

    def __repr__(self):
        state = f"fired@{self.fire_time}" if self.fired else "pending"
        return f"Event({self.name!r}, {state})"


class Process:
    """A named generator coroutine owned by the engine."""

    __slots__ = ("name", "gen", "domain", "daemon", "state", "_waiting_on")

    def __init__(self, name: str, gen: Generator, domain: Optional["Domain"], daemon: bool):
        self.name = name
        self.gen = gen
        self.domain = domain
        self.daemon = daemon
        self.state = _READY
        self._waiting_on: Optional[Event] = None

    def __repr__(self):
        return f"Process({self.name!r}, {self.state})"


class _ChargeState:
    """An in-flight Charge tracked by its domain."""

    __slots__ = ("proc", "name", "args", "begin_ns", "remaining")

    def __init__(self, proc: Process, name: str, args, begin_ns: int, cost_ns: int):
        self.proc = proc
        self.name = name
        self.args = args
        self.begin_ns = begin_ns
        self.remaining = Fraction(cost_ns)  # work left, in exact ns


class Domain:
    """Cores shared by a set of threads under fluid processor sharing.

    The instantaneous slowdown for every occupant is
    ``max(1, total_milli_duty / (MILLI_DUTY * cores))``: active charges
    contribute a full duty each, registered background threads contribute
    their fixed duty whether or not anything else runs.
    """

    __slots__ = ("name", "cores", "background_milli", "backgrounds",
                 "active", "last_update", "pending")

    def __init__(self, name: str, cores: int):
        if cores < 1:
            raise ValueError(f"domain {name!r} needs at least one core")
        self.name = name
        self.cores = cores
        self.background_milli = 0
        self.backgrounds: list[tuple[str, int]] = []
        self.active: list[_ChargeState] = []
        self.last_update = 0
        self.pending: list = []  # heap entries holding our finish guesses

    def load(self) -> Fraction:
        total = self.background_milli + MILLI_DUTY * len(self.active)
        f = Fraction(total, MILLI_DUTY * self.cores)
        return f if f > 1 else Fraction(1)

    def __repr__(self):
        return f"Domain({self.name!r}, cores={self.cores}, active={len(self.active)})"


@dataclass
class Trace:
    """Everything a finished run left behind."""

    records: list = field(default_factory=list)
    makespan_ns: int = 0
    busy_ns: dict = field(default_factory=dict)

    def utilization(self, actor: str) -> float:
        if self.makespan_ns == 0:
            return 0.0
        return self.busy_ns.get(actor, 0) / self.makespan_ns

    def by_actor(self, actor: str) -> list:
        return [r for r in self.records if r["actor"] == actor]

    def to_json(self, indent: Optional[int] = None) -> str:
        return json.dumps({"makespan_ns": self.makespan_ns, "records": self.records},
                          indent=indent)


class Engine:
    """Event loop: spawn processes, post events, run to quiescence."""

    def __init__(self):
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self._procs: list[Process] = []
        self._domains: dict[str, Domain] = {}
        self._records: list[dict] = []
        self._busy: dict[str, int] = {}

    # -- construction -----------------------------------------------------

    def domain(self, name: str, cores: int) -> Domain:
        if name in self._domains:
            raise ValueError(f"duplicate domain {name!r}")
        dom = Domain(name, cores)
        self._domains[name] = dom
        return dom

    def add_background(self, dom: Domain, name: str, milli_duty: int) -> None:
        """Register an always-on thread (a poller, a progress thread)."""
        if milli_duty < 0:
            raise ValueError("milli_duty must be >= 0")
        self._settle(dom)
        dom.backgrounds.append((name, milli_duty))
        dom.background_milli += milli_duty
        self._domain_changed(dom)

    def spawn(self, name: str, gen: Generator, domain: Optional[Domain] = None,
              daemon: bool = False) -> Process:
        proc = Process(name, gen, domain, daemon)
        self._procs.append(proc)
        self._push(self.now, self._step, (proc, None))
        return proc

    def event(self, name: str = "") -> Event:
        return Event(name)

    # -- scheduling -------------------------------------------------------

    def post(self, event: Event, delay_ns: int = 0, payload: Any = None) -> None:
        """Fire ``event`` after ``delay_ns``."""
        if delay_ns < 0:
            raise CausalityError(f"event {event.name!r} posted {-delay_ns} ns in the past")
        if event.fired:
            raise ValueError(f"event {event.name!r} already fired")
        self._push(self.now + delay_ns, self._fire, (event, payload))

    def _push(self, when: int, fn, args) -> list:
        if when < self.now:
            raise CausalityError(f"schedule at {when} ns but clock is at {self.now} ns")
        entry = [when, self._seq, fn, args]
        heapq.heappush(self._heap, entry)
        self._seq += 1
        return entry

    # -- the loop ---------------------------------------------------------

    def run_until_idle(self, limit_ns: Optional[int] = None) -> Trace:
        while self._heap:
            when, _, fn, args = heapq.heappop(self._heap)
            if fn is None:
                continue  # cancelled: must not advance the clock
            if limit_ns is not None and when > limit_ns:
                break
            if when < self.now:
                raise CausalityError(f"event at {when} ns behind clock {self.now} ns")
            self.now = when
            fn(*args)
        blocked = [p.name for p in self._procs
                   if p.state == _WAITING and not p.daemon]
        if blocked and not self._heap:
            raise DeadlockError(blocked)
        return Trace(records=self._records, makespan_ns=self.now, busy_ns=self._busy)

    # -- event firing -----------------------------------------------------

    def _fire(self, event: Event, payload: Any) -> None:
        if event.fired:
            raise ValueError(f"event {event.name!r} fired twice")
        event.fired = True
        event.fire_time = self.now
        event.payload = payload
        waiters, event._waiters = event._waiters, []
        for proc in waiters:
            proc.state = _READY
            proc._waiting_on = None
            self._push(self.now, self._step, (proc, payload))

    # -- process stepping -------------------------------------------------

    def _step(self, proc: Process, send_value: Any) -> None:
        try:
            effect = proc.gen.send(send_value)
        except StopIteration:
            proc.state = _DONE
            return
        if isinstance(effect, Charge):
            self._start_charge(proc, effect)
        elif isinstance(effect, WaitFor):
            ev = effect.event
            if ev.fired:
                self._push(self.now, self._step, (proc, ev.payload))
            else:
                proc.state = _WAITING
                proc._waiting_on = ev
                ev._waiters.append(proc)
        elif isinstance(effect, Sleep):
            if effect.delay_ns < 0:
                raise CausalityError(f"{proc.name} slept for {effect.delay_ns} ns")
            proc.state = _SLEEPING
            self._push(self.now + effect.delay_ns, self._wake, (proc,))
        else:
            raise TypeError(f"{proc.name} yielded {effect!r}, expected Charge/Sleep/WaitFor")

    def _wake(self, proc: Process) -> None:
        proc.state = _READY
        self._step(proc, None)

    # -- charges ----------------------------------------------------------

    def _start_charge(self, proc: Process, charge: Charge) -> None:
        if charge.cost_ns < 0:
            raise ValueError(f"{proc.name} charged {charge.cost_ns} ns")
        if charge.cost_ns == 0:
            self._finish_record(proc, charge.name, charge.args, self.now, self.now)
            self._push(self.now, self._step, (proc, None))
            return
        proc.state = _CHARGING
        if proc.domain is None:
            # dedicated timeline, no sharing: completes after exactly cost_ns
            end = self.now + charge.cost_ns
            self._push(end, self._finish_dedicated,
                       (proc, charge.name, charge.args, self.now))
            return
        dom = proc.domain
        self._settle(dom)
        dom.active.append(_ChargeState(proc, charge.name, charge.args,
                                       self.now, charge.cost_ns))
        self._domain_changed(dom)

    def _finish_dedicated(self, proc: Process, name: str, args, begin: int) -> None:
        self._finish_record(proc, name, args, begin, self.now)
        self._step(proc, None)

    def _finish_record(self, proc: Process, name: str, args, begin: int, end: int) -> None:
        self._records.append({"actor": proc.name, "name": name,
                              "begin_ns": begin, "end_ns": end,
                              "args": args if args is not None else {}})
        self._busy[proc.name] = self._busy.get(proc.name, 0) + (end - begin)

    def _settle(self, dom: Domain) -> None:
        """Advance every in-flight charge in ``dom`` to the current time."""
        elapsed = self.now - dom.last_update
        if elapsed and dom.active:
            rate = 1 / dom.load()  # work per wall ns, exact
            for ch in dom.active:
                ch.remaining -= elapsed * rate
        dom.last_update = self.now

    def _domain_changed(self, dom: Domain) -> None:
        """Membership changed: drop outstanding finish guesses, reschedule."""
        for entry in dom.pending:
            entry[2] = None
        dom.pending.clear()
        if not dom.active:
            return
        load = dom.load()
        for ch in dom.active:
            finish = self.now + ch.remaining * load
            entry = self._push(max(self.now, math.ceil(finish)), self._charge_tick, (dom,))
            dom.pending.append(entry)

    def _charge_tick(self, dom: Domain) -> None:
        self._settle(dom)
        done = [ch for ch in dom.active if ch.remaining <= 0]
        if not done:
            return
        for ch in done:
            dom.active.remove(ch)
            self._finish_record(ch.proc, ch.name, ch.args, ch.begin_ns, self.now)
        self._domain_changed(dom)
        for ch in done:
            self._step(ch.proc, None)
