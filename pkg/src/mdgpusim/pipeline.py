"""MD step execution pipelines over the runtime model.

A run is organised in eras of ``nstlist`` steps: pair search happens at
era start, host synchronization happens at era boundaries (plus
whenever halo or long-range exchanges force one mid-step), and the
first era is warm-up that measurement discards.

Single rank: every kernel of a step goes to one device stream in a
fixed order; with mesh electrostatics that is eleven kernels per step.

Multi rank: one representative short-range rank is simulated and its
halo peers are mirrored (a peer's inbound halo becomes available
exactly when the representative's symmetric outbound transfer
completes, which is what symmetry gives on a homogeneous
decomposition).  Mesh systems add one real long-range rank that
receives coordinates from every short-range peer over parallel links,
runs the spread/FFT/solve/FFT/gather chain at full system size, and
returns forces.  This keeps event counts per step independent of the
total rank count, so 4096-rank sweeps stay desk-sized.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .comm import (
    CommModel,
    FORCE_BYTES_PER_ATOM,
    XYZ_BYTES_PER_ATOM,
    default_comm_model,
    slab_atoms,
)
from .costs import ApiLatencyModel, CostTable, KernelKind, default_api_model, default_cost_table
from .engine import Charge, Engine, Event, WaitFor
from .presets import SystemPreset
from .runtime import Device, RankRuntime, RunSettings, RuntimeProfile
from .topology import NodeTopology, lumi_node


def balanced_dims(n: int) -> Tuple[int, int, int]:
    """Factor a rank count into a near-cubic decomposition grid."""
    if n < 1:
        raise ValueError("need at least one rank")
    best = (n, 1, 1)
    for dz in range(1, int(round(n ** (1 / 3))) + 1):
        if n % dz:
            continue
        rest = n // dz
        for dy in range(dz, int(rest ** 0.5) + 1):
            if rest % dy:
                continue
            dx = rest // dy
            if dx >= dy:
                best_spread = max(best) - min(best)
                cand_spread = dx - dz
                if cand_spread < best_spread:
                    best = (dx, dy, dz)
    return best


class Wire:
    """A dedicated transfer link: transfers queued on it serialize."""

    def __init__(self, engine: Engine, name: str):
        self.engine = engine
        self.name = name
        self.fifo: deque = deque()
        self._wake: Optional[Event] = None
        engine.spawn(name, self._run(), daemon=True)

    def send(self, duration_ns: int, done: Event, label: str) -> None:
        self.fifo.append((duration_ns, done, label))
        if self._wake is not None and not self._wake.fired:
            self.engine.post(self._wake, 0)
            self._wake = None

    def _run(self):
        while True:
            if not self.fifo:
                self._wake = self.engine.event(f"{self.name}.wake")
                yield WaitFor(self._wake)
                continue
            duration, done, label = self.fifo.popleft()
            yield Charge(duration, label)
            self.engine.post(done, 0)


@dataclass
class RunPlan:
    """Everything a simulated run was configured with."""

    system: SystemPreset
    profile: RuntimeProfile
    settings: RunSettings
    backend: str = "sycl"
    ranks: int = 1
    n_eras: int = 3
    node: NodeTopology = field(default_factory=lumi_node)

    @property
    def pme_ranks(self) -> int:
        return 1 if (self.system.pme and self.ranks >= 2) else 0

    @property
    def pp_ranks(self) -> int:
        return self.ranks - self.pme_ranks

    @property
    def nodes_used(self) -> int:
        return (self.ranks + self.node.n_gcds - 1) // self.node.n_gcds


@dataclass
class RunReport:
    plan: RunPlan
    steps_measured: int
    ms_per_step: float
    makespan_ns: int
    era_marks: List[int]
    launch_delays: List[int]
    busy_ns: Dict[str, int]
    trace: object = None

    @property
    def ns_per_day(self) -> float:
        if self.ms_per_step == 0:
            return float("inf")
        return 86.4 * self.plan.system.dt_fs / self.ms_per_step

    @property
    def max_launch_delay_ns(self) -> int:
        return max(self.launch_delays) if self.launch_delays else 0

    @property
    def mean_launch_delay_ns(self) -> float:
        if not self.launch_delays:
            return 0.0
        return sum(self.launch_delays) / len(self.launch_delays)

    def to_row(self) -> Dict:
        p = self.plan
        return {
            "system": p.system.name,
            "atoms": p.system.atoms,
            "ranks": p.ranks,
            "nodes": p.nodes_used,
            "backend": p.backend,
            "runtime": p.profile.name,
            "max_cached_nodes": p.settings.max_cached_nodes,
            "instant": int(p.settings.instant_submission),
            "event_mode": p.settings.event_mode.value,
            "steps": self.steps_measured,
            "ms_per_step": round(self.ms_per_step, 6),
            "ns_per_day": round(self.ns_per_day, 3),
            "max_launch_delay_us": round(self.max_launch_delay_ns / 1000.0, 3),
        }


class _RankBuild:
    """Wiring for one simulated rank: device, streams, runtime front-end."""

    def __init__(self, engine, name, plan, api, gcd_index):
        self.name = name
        self.device = Device(engine, f"{name}.gcd", plan.profile, plan.settings)
        self.rt = RankRuntime(engine, name, plan.profile, plan.settings, api,
                              cores=plan.node.usable_cores_per_ccx())
        self.gcd_index = gcd_index


def simulate(plan: RunPlan, costs: Optional[CostTable] = None,
             comm: Optional[CommModel] = None,
             api: Optional[ApiLatencyModel] = None,
             keep_trace: bool = False) -> RunReport:
    """Run ``plan`` and report steady-state per-step timing."""
    costs = costs or default_cost_table()
    comm = comm or default_comm_model()
    api = api or default_api_model(seed=plan.settings.seed)
    engine = Engine()

    sys_ = plan.system
    total_steps = plan.n_eras * sys_.nstlist
    era_marks: List[int] = []
    delays: List[int] = []

    def kcost(kind: KernelKind, atoms: int) -> int:
        return costs.duration_ns(kind, atoms, plan.backend, sys_.scale_for(kind))

    if plan.ranks == 1:
        rank = _RankBuild(engine, "rank0", plan, api, gcd_index=0)
        q0 = rank.device.new_stream("q0")
        engine.spawn(rank.rt.app_actor,
                     _single_rank_app(engine, plan, rank.rt, q0, kcost,
                                      total_steps, era_marks),
                     domain=rank.rt.app_domain)
        trace = engine.run_until_idle()
        delays.extend(rank.rt.launch_delays)
    else:
        trace = _multi_rank_run(engine, plan, costs, comm, api, kcost,
                                total_steps, era_marks, delays)

    if len(era_marks) < 2:
        raise RuntimeError("need at least two eras to measure (first is warm-up)")
    window_ns = era_marks[-1] - era_marks[0]
    steps = (len(era_marks) - 1) * sys_.nstlist
    ms_per_step = window_ns / steps / 1e6
    return RunReport(plan=plan, steps_measured=steps, ms_per_step=ms_per_step,
                     makespan_ns=trace.makespan_ns, era_marks=era_marks,
                     launch_delays=delays, busy_ns=trace.busy_ns,
                     trace=trace if keep_trace else None)


# -- single rank -------------------------------------------------------------


def _single_rank_app(engine, plan, rt, q0, kcost, total_steps, era_marks):
    sys_ = plan.system
    atoms = sys_.atoms
    hip_sort = plan.backend == "hip"
    pending: List[Event] = []
    for step in range(total_steps):
        search = step % sys_.nstlist == 0
        prune = (not search) and sys_.prune_every and step % sys_.prune_every == 0
        yield Charge(plan.profile.app_step_cpu_ns, "step_cpu", {"step": step})
        if search:
            yield Charge(round(sys_.search_cpu_ns_per_atom * atoms), "pair_search_cpu")
            ev = yield from rt.submit(q0, "pair_search",
                                      kcost(KernelKind.PAIR_SEARCH, atoms))
            pending.append(ev)
        ev = yield from rt.submit(q0, "nbnxm_local", kcost(KernelKind.NBNXM_LOCAL, atoms))
        pending.append(ev)
        if prune:
            ev = yield from rt.submit(q0, "prune_only", kcost(KernelKind.PRUNE_ONLY, atoms))
            pending.append(ev)
            if hip_sort:
                ev = yield from rt.submit(
                    q0, "prune_sort",
                    round(0.3 * kcost(KernelKind.PRUNE_ONLY, atoms)))
                pending.append(ev)
        if sys_.pme:
            for name, kind in (("pme_spread", KernelKind.PME_SPREAD),
                               ("fft_3d_forward", KernelKind.FFT_3D_FORWARD),
                               ("pme_solve", KernelKind.PME_SOLVE),
                               ("fft_3d_inverse", KernelKind.FFT_3D_INVERSE),
                               ("pme_gather", KernelKind.PME_GATHER)):
                ev = yield from rt.submit(q0, name, kcost(kind, atoms))
                pending.append(ev)
        for name, kind in (("listed_forces", KernelKind.LISTED_FORCES),
                           ("reduce_forces", KernelKind.REDUCE_FORCES),
                           ("leap_frog", KernelKind.LEAP_FROG),
                           ("constraints", KernelKind.CONSTRAINTS)):
            ev = yield from rt.submit(q0, name, kcost(kind, atoms))
            pending.append(ev)
        if sys_.pme:
            ev = yield from rt.submit(q0, "grid_memset", kcost(KernelKind.GRID_MEMSET, atoms))
            pending.append(ev)
        if step % sys_.nstlist == sys_.nstlist - 1:
            yield from rt.sync(pending)
            pending = []
            era_marks.append(engine.now)


# -- multiple ranks ----------------------------------------------------------


def _multi_rank_run(engine, plan, costs, comm, api, kcost, total_steps,
                    era_marks, delays):
    sys_ = plan.system
    node = plan.node
    pp_ranks = plan.pp_ranks
    atoms_pp = max(1, sys_.atoms // pp_ranks)
    dims = balanced_dims(pp_ranks)
    halo_dims = [d for d in dims if d > 1]
    slab = slab_atoms(atoms_pp, sys_.cutoff_nm, sys_.density_per_nm3)
    # one halo pulse per split dimension, so the nonlocal pair work sees
    # the received one-sided shell, never more than the home domain
    nonlocal_atoms = min(atoms_pp, slab * len(halo_dims))

    pp = _RankBuild(engine, "pp0", plan, api, gcd_index=0)
    q_loc = pp.device.new_stream("q_loc")
    q_nl = pp.device.new_stream("q_nl") if halo_dims else None

    # neighbour rank index along each split dimension decides the link class
    neighbor_strides = []
    stride = 1
    for d in dims:
        if d > 1:
            neighbor_strides.append(stride)
        stride *= d
    halo_wires = []
    for i, peer in enumerate(neighbor_strides):
        link = node.link_class(0, peer % node.n_gcds,
                               same_node=(peer // node.n_gcds) == 0)
        halo_wires.append((Wire(engine, f"halo{i}.wire"), link))

    pme = None
    if plan.pme_ranks:
        pme_rank_index = plan.ranks - 1
        pme = _RankBuild(engine, "pme0", plan, api, gcd_index=pme_rank_index % node.n_gcds)
        q_pme = pme.device.new_stream("q_pme")
        pme_link = node.link_class(
            0, pme_rank_index % node.n_gcds,
            same_node=(pme_rank_index // node.n_gcds) == 0)
        x_wire = Wire(engine, "pme-x.wire")
        f_wire = Wire(engine, "pme-f.wire")
        x_ready = [engine.event(f"x_ready.{s}") for s in range(total_steps)]
        f_ready = [engine.event(f"f_ready.{s}") for s in range(total_steps)]
        # with comm overlap the chain hides all but one peer's transfer;
        # without it the long-range rank stages every peer serially
        comm_factor = 1 if plan.profile.pme_comm_overlap else pp_ranks
        x_bytes = atoms_pp * XYZ_BYTES_PER_ATOM * comm_factor
        f_bytes = atoms_pp * FORCE_BYTES_PER_ATOM * comm_factor

        engine.spawn(pme.rt.app_actor,
                     _pme_rank_app(engine, plan, pme.rt, q_pme, kcost, comm,
                                   pme_link, f_wire, x_ready, f_ready,
                                   f_bytes, total_steps, pp_ranks),
                     domain=pme.rt.app_domain)

    def pp_app():
        pending: List[Event] = []
        prev_constraints: Optional[Event] = None
        mpi_cpu = plan.profile.mpi_msg_cpu_ns
        for step in range(total_steps):
            search = step % sys_.nstlist == 0
            prune = (not search) and sys_.prune_every and step % sys_.prune_every == 0
            yield Charge(plan.profile.app_step_cpu_ns, "step_cpu", {"step": step})
            if search:
                yield Charge(round(sys_.search_cpu_ns_per_atom * atoms_pp),
                             "pair_search_cpu")
                ev = yield from pp.rt.submit(q_loc, "pair_search",
                                             kcost(KernelKind.PAIR_SEARCH, atoms_pp))
                pending.append(ev)

            if pme is not None:
                # coordinates must be on the host before the MPI send, so
                # this is a runtime sync point (it flushes a deferred graph)
                yield from pp.rt.sync([prev_constraints] if prev_constraints else [])
                yield Charge(mpi_cpu, "mpi_send_x")
                x_wire.send(comm.transfer_ns(pme_link, x_bytes),
                            x_ready[step], "x_transfer")

            # local-only force work goes out first; it needs no remote
            # coordinates and its stream crunches while the halo is on
            # the wire
            ev_loc = yield from pp.rt.submit(q_loc, "nbnxm_local",
                                             kcost(KernelKind.NBNXM_LOCAL, atoms_pp))
            pending.append(ev_loc)
            if prune:
                ev = yield from pp.rt.submit(q_loc, "prune_only",
                                             kcost(KernelKind.PRUNE_ONLY, atoms_pp))
                pending.append(ev)
                if plan.backend == "hip":
                    ev = yield from pp.rt.submit(
                        q_loc, "prune_sort",
                        round(0.3 * kcost(KernelKind.PRUNE_ONLY, atoms_pp)))
                    pending.append(ev)
            ev = yield from pp.rt.submit(q_loc, "listed_forces",
                                         kcost(KernelKind.LISTED_FORCES, atoms_pp))
            pending.append(ev)

            # coordinate halo, one exchange per split dimension
            unpack_evs = []
            for i, (wire, link) in enumerate(halo_wires):
                pack = yield from pp.rt.submit(
                    q_nl, f"halo_pack_x{i}", kcost(KernelKind.HALO_PACK_UNPACK, slab),
                    deps=[prev_constraints] if prev_constraints else ())
                yield from pp.rt.sync([pack])
                yield Charge(2 * mpi_cpu, "mpi_halo_x")
                t = engine.event(f"halo_x.{step}.{i}")
                wire.send(comm.transfer_ns(link, slab * XYZ_BYTES_PER_ATOM), t,
                          "halo_transfer")
                # the matching receive blocks on the host; by symmetry the
                # peer's slab lands when ours finishes crossing the link
                yield WaitFor(t)
                unpack = yield from pp.rt.submit(
                    q_nl, f"halo_unpack_x{i}",
                    kcost(KernelKind.HALO_PACK_UNPACK, slab))
                unpack_evs.append(unpack)

            ev_nl = None
            if halo_dims:
                ev_nl = yield from pp.rt.submit(
                    q_nl, "nbnxm_nonlocal",
                    kcost(KernelKind.NBNXM_NONLOCAL, nonlocal_atoms),
                    deps=unpack_evs)
                pending.append(ev_nl)

            reduce_deps = []
            if ev_nl is not None:
                reduce_deps.append(ev_nl)
            if pme is not None:
                # MPI receive of the long-range forces blocks the host; a
                # deferred runtime sits on its unflushed graph meanwhile
                yield Charge(mpi_cpu, "mpi_recv_f")
                yield WaitFor(f_ready[step])
            ev_red = yield from pp.rt.submit(q_loc, "reduce_forces",
                                             kcost(KernelKind.REDUCE_FORCES, atoms_pp),
                                             deps=reduce_deps)
            pending.append(ev_red)

            # force halo back out, then integrate
            leap_deps = []
            for i, (wire, link) in enumerate(halo_wires):
                pack = yield from pp.rt.submit(
                    q_nl, f"halo_pack_f{i}",
                    kcost(KernelKind.HALO_PACK_UNPACK, slab), deps=[ev_red])
                yield from pp.rt.sync([pack])
                yield Charge(2 * mpi_cpu, "mpi_halo_f")
                t = engine.event(f"halo_f.{step}.{i}")
                wire.send(comm.transfer_ns(link, slab * FORCE_BYTES_PER_ATOM), t,
                          "halo_transfer")
                yield WaitFor(t)
                unpack = yield from pp.rt.submit(
                    q_nl, f"halo_unpack_f{i}",
                    kcost(KernelKind.HALO_PACK_UNPACK, slab))
                leap_deps.append(unpack)
            ev = yield from pp.rt.submit(q_loc, "leap_frog",
                                         kcost(KernelKind.LEAP_FROG, atoms_pp),
                                         deps=leap_deps)
            pending.append(ev)
            ev = yield from pp.rt.submit(q_loc, "constraints",
                                         kcost(KernelKind.CONSTRAINTS, atoms_pp))
            pending.append(ev)
            prev_constraints = ev

            if step % sys_.nstlist == sys_.nstlist - 1:
                yield from pp.rt.sync(pending)
                pending = []
                era_marks.append(engine.now)

    engine.spawn(pp.rt.app_actor, pp_app(), domain=pp.rt.app_domain)
    trace = engine.run_until_idle()
    delays.extend(pp.rt.launch_delays)
    if pme is not None:
        delays.extend(pme.rt.launch_delays)
    return trace


def _pme_rank_app(engine, plan, rt, q_pme, kcost, comm, link, f_wire,
                  x_ready, f_ready, f_bytes, total_steps, pp_ranks):
    sys_ = plan.system
    mpi_cpu = plan.profile.mpi_msg_cpu_ns
    for step in range(total_steps):
        yield WaitFor(x_ready[step])
        # one receive per short-range peer; links run in parallel but the
        # progress engine works through them one message at a time
        yield Charge(pp_ranks * mpi_cpu, "mpi_recv_x", {"msgs": pp_ranks})
        evs = []
        for name, kind in (("pme_spread", KernelKind.PME_SPREAD),
                           ("fft_3d_forward", KernelKind.FFT_3D_FORWARD),
                           ("pme_solve", KernelKind.PME_SOLVE),
                           ("fft_3d_inverse", KernelKind.FFT_3D_INVERSE),
                           ("pme_gather", KernelKind.PME_GATHER)):
            ev = yield from rt.submit(q_pme, name, kcost(kind, sys_.atoms))
            evs.append(ev)
        yield from rt.sync(evs)
        yield Charge(pp_ranks * mpi_cpu, "mpi_send_f", {"msgs": pp_ranks})
        f_wire.send(comm.transfer_ns(link, f_bytes), f_ready[step], "f_transfer")
        # grid clearing is next-step preparation; it rides the in-order
        # queue behind this step's chain and off the force-return path
        yield from rt.submit(q_pme, "grid_memset",
                             kcost(KernelKind.GRID_MEMSET, sys_.atoms))
