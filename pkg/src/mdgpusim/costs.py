"""Kernel and host-API cost models.

Device-side work is priced by an affine law per kernel kind,

    duration(atoms) = multiplier(backend, kind) * (floor_ns + slope * atoms)

rounded half-up to whole nanoseconds.  The floor captures launch-grid
and bandwidth-bound fixed parts; the slope is the asymptotic per-atom
cost, so cost/atom flattens out once ``slope * atoms`` dwarfs the floor.

Host API calls (launches, event records, stream waits, ...) are priced
by a two-point distribution: a common value with probability ``1 - p``
and a tail value with probability ``p``, parameterised by its mean so the
expected cost is what the profile states.  Draws come from a counter
hash keyed on (seed, actor, kind, index), never from a sequential RNG:
two runs that issue the same Nth launch from the same actor see the
same latency even when one of them records extra events in between.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Optional, Sequence, Tuple


class KernelKind(Enum):
    NBNXM_LOCAL = "nbnxm_local"
    NBNXM_NONLOCAL = "nbnxm_nonlocal"
    PRUNE_ONLY = "prune_only"
    PAIR_SEARCH = "pair_search"
    PME_SPREAD = "pme_spread"
    PME_GATHER = "pme_gather"
    PME_SOLVE = "pme_solve"
    FFT_3D_FORWARD = "fft_3d_forward"
    FFT_3D_INVERSE = "fft_3d_inverse"
    LISTED_FORCES = "listed_forces"
    LEAP_FROG = "leap_frog"
    CONSTRAINTS = "constraints"
    REDUCE_FORCES = "reduce_forces"
    GRID_MEMSET = "grid_memset"
    HALO_PACK_UNPACK = "halo_pack_unpack"


class ApiKind(Enum):
    KERNEL_LAUNCH = "kernel_launch"
    EVENT_RECORD = "event_record"
    EVENT_CREATE_DESTROY = "event_create_destroy"
    STREAM_WAIT_EVENT = "stream_wait_event"
    MEMCPY_ASYNC = "memcpy_async"
    HOST_SYNC_POLL = "host_sync_poll"


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


@dataclass
class KernelCost:
    """Affine device cost for one kernel kind.

    Attributes:
        floor_ns:          fixed cost at zero atoms
        slope_ns_per_atom: asymptotic per-atom cost
        source:            where the numbers came from ("fitted",
                           "calibrated" or "assumed")
    """

    floor_ns: float
    slope_ns_per_atom: float
    source: str = "assumed"

    def at(self, atoms: int) -> float:
        return self.floor_ns + self.slope_ns_per_atom * atoms


def fit_affine(points: Sequence[Tuple[int, float]], clamp_floor: bool = True) -> KernelCost:
    """Least-squares affine fit of (atoms, duration_ns) samples.

    Two points give the exact interpolant.  With ``clamp_floor`` a
    negative intercept is clipped to zero and the slope refitted
    through the origin, since a negative fixed cost is meaningless.
    """
    if len(points) < 2:
        raise ValueError("need at least two samples to fit")
    n = len(points)
    sxx = sum(p[0] * p[0] for p in points)
    sxy = sum(p[0] * p[1] for p in points)
    if n == 2:
        (x1, y1), (x2, y2) = points
        if x1 == x2:
            raise ValueError("all samples at the same atom count")
        slope = (y2 - y1) / (x2 - x1)
        floor = y1 - slope * x1
    else:
        sx = sum(p[0] for p in points)
        sy = sum(p[1] for p in points)
        denom = n * sxx - sx * sx
        if denom == 0:
            raise ValueError("all samples at the same atom count")
        slope = (n * sxy - sx * sy) / denom
        floor = (sy - slope * sx) / n
    if clamp_floor and floor < 0:
        floor = 0.0
        slope = sxy / sxx
    return KernelCost(floor_ns=floor, slope_ns_per_atom=slope, source="fitted")


class CostTable:
    """Per-kind affine costs plus per-backend multipliers.

    The base table is the reference backend; other backends reuse the
    same affine shape scaled by a per-kind factor.
    """

    def __init__(self, base: Dict[KernelKind, KernelCost],
                 multipliers: Optional[Dict[str, Dict[KernelKind, float]]] = None):
        missing = [k for k in KernelKind if k not in base]
        if missing:
            raise ValueError(f"base table missing kinds: {[k.value for k in missing]}")
        self.base = dict(base)
        self.multipliers = {name: dict(table) for name, table in (multipliers or {}).items()}

    def backends(self) -> list:
        return ["sycl"] + sorted(self.multipliers)

    def multiplier(self, backend: str, kind: KernelKind) -> float:
        if backend == "sycl":
            return 1.0
        try:
            table = self.multipliers[backend]
        except KeyError:
            raise KeyError(f"unknown backend {backend!r}") from None
        return table.get(kind, 1.0)

    def duration_ns(self, kind: KernelKind, atoms: int, backend: str = "sycl",
                    scale: float = 1.0) -> int:
        cost = self.base[kind].at(atoms) * self.multiplier(backend, kind) * scale
        return round_half_up(cost)


# Measured anchors for the short-range nonbonded kernel on the native
# backend: 19.2 us at 1.5k atoms, 20 ms at 6.144 M atoms.
NBNXM_ANCHORS = ((1500, 19200.0), (6144000, 20000000.0))

# Reference-to-native ratio for the nonbonded kernel.  The base table is
# the portable backend, so the native backend divides this back out and
# reproduces the anchors above exactly.
NBNXM_BACKEND_RATIO = 1.22


def default_cost_table() -> CostTable:
    fit = fit_affine(NBNXM_ANCHORS)
    nbnxm = KernelCost(fit.floor_ns * NBNXM_BACKEND_RATIO,
                       fit.slope_ns_per_atom * NBNXM_BACKEND_RATIO,
                       source="fitted")
    base = {
        KernelKind.NBNXM_LOCAL: nbnxm,
        KernelKind.NBNXM_NONLOCAL: KernelCost(nbnxm.floor_ns, nbnxm.slope_ns_per_atom,
                                              source="fitted"),
        KernelKind.PRUNE_ONLY: KernelCost(8000.0, 1.1),
        KernelKind.PAIR_SEARCH: KernelCost(30000.0, 2.0),
        KernelKind.PME_SPREAD: KernelCost(6000.0, 0.22),
        KernelKind.PME_GATHER: KernelCost(6500.0, 0.24),
        KernelKind.PME_SOLVE: KernelCost(5000.0, 0.10),
        KernelKind.FFT_3D_FORWARD: KernelCost(6000.0, 0.16),
        KernelKind.FFT_3D_INVERSE: KernelCost(6000.0, 0.16),
        KernelKind.LISTED_FORCES: KernelCost(4000.0, 0.05),
        KernelKind.LEAP_FROG: KernelCost(2500.0, 0.12),
        KernelKind.CONSTRAINTS: KernelCost(3500.0, 0.2),
        KernelKind.REDUCE_FORCES: KernelCost(2000.0, 0.15),
        KernelKind.GRID_MEMSET: KernelCost(1500.0, 0.04),
        KernelKind.HALO_PACK_UNPACK: KernelCost(3000.0, 0.5),
    }
    # the native backend's edge is not uniform: the pair kernel ratio is
    # anchored by its measured walltimes, mesh/FFT kernels gain the most,
    # pruning is the one place the native fork is slower
    hip = {
        KernelKind.NBNXM_LOCAL: 1.0 / NBNXM_BACKEND_RATIO,
        KernelKind.NBNXM_NONLOCAL: 1.0 / NBNXM_BACKEND_RATIO,
        KernelKind.PRUNE_ONLY: 1.10,
        KernelKind.PAIR_SEARCH: 0.95,
        KernelKind.PME_SPREAD: 0.80,
        KernelKind.PME_GATHER: 0.80,
        KernelKind.PME_SOLVE: 0.80,
        KernelKind.FFT_3D_FORWARD: 0.80,
        KernelKind.FFT_3D_INVERSE: 0.80,
        KernelKind.LISTED_FORCES: 0.90,
        KernelKind.LEAP_FROG: 0.85,
        KernelKind.CONSTRAINTS: 0.85,
        KernelKind.REDUCE_FORCES: 0.85,
        KernelKind.GRID_MEMSET: 0.80,
        KernelKind.HALO_PACK_UNPACK: 0.95,
    }
    return CostTable(base, {"hip": hip})


# -- host API latency ------------------------------------------------------


@dataclass
class TwoPointLatency:
    """Latency with a rare tail: common value most of the time, ``tail_ns``
    with probability ``tail_prob``, parameterised so the mean is ``mean_ns``."""

    mean_ns: float
    tail_ns: float
    tail_prob: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.tail_prob < 1.0:
            raise ValueError("tail_prob must be in [0, 1)")
        if self.tail_prob and self.tail_ns < self.mean_ns:
            raise ValueError("tail must not undercut the mean")

    @property
    def common_ns(self) -> float:
        if self.tail_prob == 0.0:
            return self.mean_ns
        return (self.mean_ns - self.tail_prob * self.tail_ns) / (1.0 - self.tail_prob)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _splitmix64(x: int) -> int:
    x &= 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


class ApiLatencyModel:
    """Deterministic counter-hashed sampler over per-kind two-point laws."""

    def __init__(self, table: Dict[ApiKind, TwoPointLatency], seed: int = 0):
        missing = [k for k in ApiKind if k not in table]
        if missing:
            raise ValueError(f"latency table missing kinds: {[k.value for k in missing]}")
        self.table = dict(table)
        self.seed = seed & 0xFFFFFFFFFFFFFFFF

    def mean_ns(self, kind: ApiKind) -> float:
        return self.table[kind].mean_ns

    def sample(self, actor: str, kind: ApiKind, index: int) -> int:
        """The latency of the ``index``-th call of ``kind`` made by ``actor``.

        Pure in its arguments: no state is consumed, so interleaving
        extra calls of other kinds cannot shift this draw.
        """
        law = self.table[kind]
        if law.tail_prob == 0.0:
            return round_half_up(law.common_ns)
        h = _splitmix64(self.seed ^ _fnv1a64(actor.encode()))
        h = _splitmix64(h ^ (_fnv1a64(kind.value.encode()) * 0x9E3779B97F4A7C15
                             & 0xFFFFFFFFFFFFFFFF))
        h = _splitmix64(h ^ (index * 0xD1B54A32D192ED03 & 0xFFFFFFFFFFFFFFFF))
        u = h / 2.0**64
        value = law.tail_ns if u < law.tail_prob else law.common_ns
        return round_half_up(value)


class ApiSampler:
    """Auto-indexing wrapper: one monotone counter per (actor, kind)."""

    def __init__(self, model: ApiLatencyModel):
        self.model = model
        self._counters: Dict[Tuple[str, ApiKind], int] = {}

    def draw(self, actor: str, kind: ApiKind) -> int:
        key = (actor, kind)
        idx = self._counters.get(key, 0)
        self._counters[key] = idx + 1
        return self.model.sample(actor, kind, idx)


def default_api_model(seed: int = 0) -> ApiLatencyModel:
    return ApiLatencyModel({
        ApiKind.KERNEL_LAUNCH: TwoPointLatency(2000.0, 25000.0),
        ApiKind.EVENT_RECORD: TwoPointLatency(2000.0, 30000.0),
        ApiKind.EVENT_CREATE_DESTROY: TwoPointLatency(5500.0, 40000.0),
        ApiKind.STREAM_WAIT_EVENT: TwoPointLatency(4000.0, 50000.0),
        ApiKind.MEMCPY_ASYNC: TwoPointLatency(3000.0, 30000.0),
        ApiKind.HOST_SYNC_POLL: TwoPointLatency(10000.0, 30000.0),
    }, seed=seed)
