"""Shipped runtime profiles, benchmark systems and default models.

Everything numeric lives in ``data/*.cfg``; this module only parses
those files into typed objects and groups kernel kinds so per-system
scale factors can stretch whole kernel families at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Dict, List

from .config import parse_config, subsection
from .costs import KernelKind
from .runtime import RuntimeProfile

_NBNXM_GROUP = {KernelKind.NBNXM_LOCAL, KernelKind.NBNXM_NONLOCAL,
                KernelKind.PRUNE_ONLY, KernelKind.PAIR_SEARCH,
                KernelKind.HALO_PACK_UNPACK}
_PME_GROUP = {KernelKind.PME_SPREAD, KernelKind.PME_GATHER, KernelKind.PME_SOLVE,
              KernelKind.FFT_3D_FORWARD, KernelKind.FFT_3D_INVERSE,
              KernelKind.GRID_MEMSET}
_UPDATE_GROUP = {KernelKind.LEAP_FROG, KernelKind.CONSTRAINTS,
                 KernelKind.REDUCE_FORCES}


@dataclass(frozen=True)
class SystemPreset:
    """One benchmark system.

    Scale factors stretch kernel families relative to the water-box
    baseline the cost table was fitted on: denser or charged systems
    pay more per atom in specific kernel groups.
    """

    name: str
    atoms: int
    pme: bool
    cutoff_nm: float = 0.9
    density_per_nm3: float = 100.0
    dt_fs: float = 2.0
    nstlist: int = 100
    prune_every: int = 10
    search_cpu_ns_per_atom: float = 16.0
    nbnxm_scale: float = 1.0
    pme_scale: float = 1.0
    listed_scale: float = 1.0
    update_scale: float = 1.0

    def scale_for(self, kind: KernelKind) -> float:
        if kind in _NBNXM_GROUP:
            return self.nbnxm_scale
        if kind in _PME_GROUP:
            return self.pme_scale
        if kind is KernelKind.LISTED_FORCES:
            return self.listed_scale
        if kind in _UPDATE_GROUP:
            return self.update_scale
        return 1.0


def _data_text(filename: str) -> str:
    return resources.files("mdgpusim").joinpath("data", filename).read_text(encoding="utf-8")


def load_profiles() -> Dict[str, RuntimeProfile]:
    profiles = {}
    data_dir = resources.files("mdgpusim").joinpath("data")
    for entry in sorted(data_dir.iterdir(), key=lambda e: e.name):
        if entry.name.startswith("runtime-") and entry.name.endswith(".cfg"):
            mapping = parse_config(entry.read_text(encoding="utf-8"))
            profile = RuntimeProfile.from_mapping(mapping)
            profiles[profile.name] = profile
    return profiles


def get_profile(name: str) -> RuntimeProfile:
    profiles = load_profiles()
    try:
        return profiles[name]
    except KeyError:
        raise KeyError(f"unknown runtime profile {name!r}; "
                       f"have {sorted(profiles)}") from None


def load_systems() -> Dict[str, SystemPreset]:
    mapping = parse_config(_data_text("systems.cfg"))
    names = sorted({k.split(".", 1)[0] for k in mapping})
    systems = {}
    for name in names:
        fields = subsection(mapping, name)
        systems[name] = SystemPreset(name=name, **fields)
    return systems


def get_system(name: str) -> SystemPreset:
    systems = load_systems()
    try:
        return systems[name]
    except KeyError:
        raise KeyError(f"unknown system {name!r}; have {sorted(systems)}") from None


def list_profiles() -> List[str]:
    return sorted(load_profiles())


def list_systems() -> List[str]:
    return sorted(load_systems())
