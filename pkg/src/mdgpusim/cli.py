"""Command-line front end.

Verbs:
    simulate      run one scenario, print or save a CSV report
    sweep         run every scenario in a config file, cross products
                  expanded over space-separated axis values
    calibrate     fit affine kernel costs from a measured samples file
    check         compare a CSV report against published reference
                  points, exit nonzero if any point lands out of band
    plan-affinity print rank-to-device bindings for a node profile
    export-trace  run one scenario and save the full event trace JSON

All flags are long-form.  CSV reports carry a schema version in a
leading comment line, quote per RFC 4180, and are byte-stable for
fixed inputs because every simulation is deterministic in its seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import statistics
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Any, Dict, List, Optional, Tuple

from .config import ConfigError, dump_config, load_config, parse_config, require, subsection
from .costs import KernelKind, fit_affine
from .pipeline import RunPlan, RunReport, simulate
from .presets import get_profile, get_system
from .runtime import EventMode, RunSettings
from .topology import NODE_PROFILES, plan_affinity

CSV_SCHEMA = "mdgpusim-csv v1"
COLUMNS = ["scenario", "system", "atoms", "ranks", "nodes", "backend",
           "runtime", "max_cached_nodes", "instant", "event_mode", "steps",
           "ms_per_step", "ns_per_day", "gpu_utilization", "app_utilization",
           "max_launch_delay_us", "median_ms_per_step", "median_ns_per_day"]

# scenario keys that may hold several space-separated values to sweep over
AXIS_KEYS = ("system", "profile", "ranks", "max_cached_nodes", "instant",
             "event_mode", "backend")
SCALAR_KEYS = ("eras", "repetitions", "seed", "node")


# -- scenarios ----------------------------------------------------------------


@dataclass
class Scenario:
    """One resolvable benchmark run request."""

    scenario_id: str
    system: str
    profile: str
    ranks: int = 1
    backend: str = "sycl"
    max_cached_nodes: int = 100
    instant: bool = False
    event_mode: str = "coarse"
    node: str = "lumi"
    eras: int = 3
    repetitions: int = 1
    seed: int = 0
    overrides: Dict[str, Any] = field(default_factory=dict)

    def build_plan(self) -> RunPlan:
        if self.eras < 2:
            raise ConfigError(f"{self.scenario_id}: need at least 2 eras "
                              "(the first is warm-up)")
        if self.repetitions < 1:
            raise ConfigError(f"{self.scenario_id}: repetitions must be >= 1")
        system = get_system(self.system)
        profile = get_profile(self.profile)
        try:
            node = NODE_PROFILES[self.node]()
        except KeyError:
            known = ", ".join(sorted(NODE_PROFILES))
            raise ConfigError(f"{self.scenario_id}: unknown node profile "
                              f"{self.node!r}; available: {known}") from None
        settings_kwargs: Dict[str, Any] = dict(
            max_cached_nodes=self.max_cached_nodes,
            instant_submission=self.instant,
            event_mode=EventMode(self.event_mode),
            visible_devices=min(self.ranks, node.n_gcds),
            seed=self.seed)
        for key in sorted(self.overrides):
            value = self.overrides[key]
            scope, _, name = key.partition(".")
            try:
                if scope == "system" and name:
                    system = replace(system, **{name: value})
                elif scope == "profile" and name:
                    profile = replace(profile, **{name: value})
                elif scope == "settings" and name:
                    settings_kwargs[name] = value
                else:
                    raise ConfigError(
                        f"{self.scenario_id}: override {key!r} must start "
                        "with system., profile. or settings.")
            except TypeError:
                raise ConfigError(f"{self.scenario_id}: unknown {scope} "
                                  f"field {name!r}") from None
        profile.validate()
        try:
            run_settings = RunSettings(**settings_kwargs)
        except TypeError:
            bad = sorted(set(settings_kwargs) - set(RunSettings.__dataclass_fields__))
            raise ConfigError(f"{self.scenario_id}: unknown settings "
                              f"field(s) {bad}") from None
        return RunPlan(system=system, profile=profile, settings=run_settings,
                       backend=self.backend, ranks=self.ranks, node=node,
                       n_eras=self.eras)


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, int):
        return bool(value)
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _axis_values(value) -> List[str]:
    return str(value).split()


def scenarios_from_config(mapping: Dict[str, Any]) -> List[Scenario]:
    """Expand a scenario config into the cross product of its axes."""
    prefixes = sorted({k.split(".", 1)[0] for k in mapping})
    scenarios = []
    for prefix in prefixes:
        sub = subsection(mapping, prefix)
        overrides = {k[len("set."):]: v for k, v in sub.items()
                     if k.startswith("set.")}
        unknown = [k for k in sub
                   if not k.startswith("set.")
                   and k not in AXIS_KEYS and k not in SCALAR_KEYS]
        if unknown:
            raise ConfigError(f"{prefix}: unknown scenario key(s) {sorted(unknown)}")
        axes = {k: _axis_values(sub[k]) for k in AXIS_KEYS if k in sub}
        if "system" not in axes or "profile" not in axes:
            raise ConfigError(f"{prefix}: scenario needs system and profile")
        varying = [k for k in AXIS_KEYS if len(axes.get(k, ())) > 1]

        combos: List[Dict[str, str]] = [{}]
        for key in AXIS_KEYS:
            if key not in axes:
                continue
            combos = [dict(combo, **{key: v}) for combo in combos
                      for v in axes[key]]
        for combo in combos:
            suffix = "/".join(f"{k}={combo[k]}" for k in varying)
            scenarios.append(Scenario(
                scenario_id=f"{prefix}/{suffix}" if suffix else prefix,
                system=combo["system"],
                profile=combo["profile"],
                ranks=int(combo.get("ranks", 1)),
                backend=combo.get("backend", "sycl"),
                max_cached_nodes=int(combo.get("max_cached_nodes", 100)),
                instant=_as_bool(combo.get("instant", False)),
                event_mode=combo.get("event_mode", "coarse"),
                node=str(sub.get("node", "lumi")),
                eras=int(sub.get("eras", 3)),
                repetitions=int(sub.get("repetitions", 1)),
                seed=int(sub.get("seed", 0)),
                overrides=dict(overrides)))
    return scenarios


# -- running and reporting ----------------------------------------------------


def _utilizations(report: RunReport) -> Tuple[float, float]:
    span = report.makespan_ns
    if span <= 0:
        return 0.0, 0.0
    gpu = [v for k, v in report.busy_ns.items() if ".gcd.q" in k]
    app = [v for k, v in report.busy_ns.items() if k.endswith(".app")]
    gpu_u = sum(gpu) / (span * len(gpu)) if gpu else 0.0
    app_u = sum(app) / (span * len(app)) if app else 0.0
    return gpu_u, app_u


def _format_row(scenario: Scenario, report: RunReport,
                median_ms: float, median_ns: float) -> Dict[str, str]:
    base = report.to_row()
    gpu_u, app_u = _utilizations(report)
    return {
        "scenario": scenario.scenario_id,
        "system": str(base["system"]),
        "atoms": str(base["atoms"]),
        "ranks": str(base["ranks"]),
        "nodes": str(base["nodes"]),
        "backend": str(base["backend"]),
        "runtime": str(base["runtime"]),
        "max_cached_nodes": str(base["max_cached_nodes"]),
        "instant": str(base["instant"]),
        "event_mode": str(base["event_mode"]),
        "steps": str(base["steps"]),
        "ms_per_step": f"{report.ms_per_step:.6f}",
        "ns_per_day": f"{report.ns_per_day:.3f}",
        "gpu_utilization": f"{gpu_u:.4f}",
        "app_utilization": f"{app_u:.4f}",
        "max_launch_delay_us": f"{report.max_launch_delay_ns / 1000.0:.3f}",
        "median_ms_per_step": f"{median_ms:.6f}",
        "median_ns_per_day": f"{median_ns:.3f}",
    }


def run_scenario(scenario: Scenario,
                 keep_trace: bool = False) -> Tuple[List[Dict[str, str]], Any]:
    """Run every repetition of one scenario; rows plus optional trace.

    Repetition ``i`` always runs with the scenario's pinned seed, so a
    deterministic engine produces identical rows; the trace, when
    requested, comes from the first repetition.
    """
    plan = scenario.build_plan()
    reports = []
    try:
        for rep_index in range(scenario.repetitions):
            reports.append(simulate(plan, keep_trace=keep_trace and rep_index == 0))
    except RuntimeError as exc:
        raise RuntimeError(f"scenario {scenario.scenario_id}: {exc}") from exc
    median_ms = statistics.median(r.ms_per_step for r in reports)
    median_ns = statistics.median(r.ns_per_day for r in reports)
    rows = [_format_row(scenario, r, median_ms, median_ns) for r in reports]
    return rows, reports[0].trace


def render_csv(rows: List[Dict[str, str]]) -> str:
    buf = io.StringIO()
    buf.write(f"# {CSV_SCHEMA}\r\n")
    writer = csv.DictWriter(buf, fieldnames=COLUMNS)
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _emit(text: str, path: Optional[str]) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def read_report(path: str) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh.read().splitlines()
                 if ln and not ln.startswith("#")]
    return list(csv.DictReader(lines))


# -- reference comparison -----------------------------------------------------


@dataclass
class ReferencePoint:
    """One published number and the report rows it constrains."""

    point_id: str
    source: str
    metric: str
    value: float
    quote: str
    rel_tol: Optional[float] = None
    abs_tol: Optional[float] = None
    match: Dict[str, str] = field(default_factory=dict)
    baseline: Dict[str, str] = field(default_factory=dict)


def parse_reference_points(mapping: Dict[str, Any]) -> List[ReferencePoint]:
    points = []
    for pid in sorted({k.split(".", 1)[0] for k in mapping}):
        sub = subsection(mapping, pid)
        point = ReferencePoint(
            point_id=pid,
            source=str(require(sub, "source")),
            metric=str(require(sub, "metric")),
            value=float(require(sub, "value")),
            quote=str(require(sub, "quote")),
            rel_tol=float(sub["rel_tol"]) if "rel_tol" in sub else None,
            abs_tol=float(sub["abs_tol"]) if "abs_tol" in sub else None,
            match={k: str(v) for k, v in subsection(sub, "match").items()},
            baseline={k: str(v) for k, v in subsection(sub, "baseline").items()})
        if (point.rel_tol is None) == (point.abs_tol is None):
            raise ConfigError(f"{pid}: exactly one of rel_tol or abs_tol")
        if not point.quote:
            raise ConfigError(f"{pid}: quote must not be empty")
        if not point.match:
            raise ConfigError(f"{pid}: needs at least one match.* selector")
        points.append(point)
    return points


def load_bundled_references() -> List[ReferencePoint]:
    text = resources.files("mdgpusim").joinpath("data", "reference.cfg") \
                    .read_text(encoding="utf-8")
    return parse_reference_points(parse_config(text))


def _select(rows: List[Dict[str, str]], selector: Dict[str, str]):
    return [r for r in rows
            if all(r.get(col) == want for col, want in selector.items())]


def evaluate_point(point: ReferencePoint,
                   rows: List[Dict[str, str]]) -> Tuple[str, Optional[float]]:
    """Status for one point: PASS, FAIL, or MISSING (no matching rows)."""
    matched = _select(rows, point.match)
    if not matched:
        return "MISSING", None
    simulated = statistics.median(float(r[point.metric]) for r in matched)
    if point.baseline:
        base_rows = _select(rows, point.baseline)
        if not base_rows:
            return "MISSING", None
        best = max(float(r[point.metric]) for r in base_rows)
        if best == 0:
            return "FAIL", float("inf")
        simulated = simulated / best
    if point.rel_tol is not None:
        ok = abs(simulated - point.value) <= point.rel_tol * abs(point.value)
    else:
        ok = abs(simulated - point.value) <= point.abs_tol
    return ("PASS" if ok else "FAIL"), simulated


def run_check(rows: List[Dict[str, str]],
              points: List[ReferencePoint]) -> Tuple[List[str], int]:
    lines = []
    failed = missing = 0
    for point in points:
        status, simulated = evaluate_point(point, rows)
        label = f"{status} {point.point_id} [{point.source}] {point.metric}"
        if status == "MISSING":
            missing += 1
            lines.append(f"{label}: report has no rows for this point")
            continue
        rel_err = (simulated - point.value) / point.value
        tol = (f"{point.rel_tol:g} relative" if point.rel_tol is not None
               else f"{point.abs_tol:g} absolute")
        lines.append(f"{label}: simulated {simulated:.3f} vs published "
                     f"{point.value:g} ({rel_err:+.1%}, tolerance {tol})")
        failed += status == "FAIL"
    passed = len(points) - failed - missing
    lines.append(f"{passed} passed, {failed} failed, {missing} not covered "
                 f"by the report")
    return lines, failed


# -- verbs --------------------------------------------------------------------


def _parse_set(items: List[str]) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides.update(parse_config(f"{key.strip()} = {raw.strip()}"))
    return overrides


def _scenario_from_args(args, scenario_id: str) -> Scenario:
    return Scenario(
        scenario_id=scenario_id,
        system=args.system,
        profile=args.profile,
        ranks=args.ranks,
        backend=args.backend,
        max_cached_nodes=args.max_cached_nodes,
        instant=args.instant,
        event_mode=args.event_mode,
        node=args.node,
        eras=args.eras,
        repetitions=getattr(args, "repetitions", 1),
        seed=args.seed,
        overrides=_parse_set(args.set))


def cmd_simulate(args) -> int:
    scenario = _scenario_from_args(args, "cli")
    rows, trace = run_scenario(scenario, keep_trace=args.trace is not None)
    _emit(render_csv(rows), args.output)
    if args.trace is not None:
        _emit(trace.to_json(indent=2) + "\n", args.trace)
    return 0


def cmd_sweep(args) -> int:
    scenarios = scenarios_from_config(load_config(args.scenarios))
    if not scenarios:
        raise ConfigError(f"{args.scenarios}: no scenarios defined")
    rows: List[Dict[str, str]] = []
    for scenario in scenarios:
        new_rows, _ = run_scenario(scenario)
        rows.extend(new_rows)
    _emit(render_csv(rows), args.output)
    return 0


def cmd_calibrate(args) -> int:
    mapping = load_config(args.samples)
    known = {k.value for k in KernelKind}
    by_kind: Dict[str, List[Tuple[int, float]]] = {}
    for key, value in mapping.items():
        kind = key.split(".", 1)[0]
        if kind not in known:
            raise ConfigError(f"{key}: unknown kernel kind {kind!r}")
        parts = str(value).split()
        if len(parts) != 2:
            raise ConfigError(f"{key}: expected 'atoms duration_ns', "
                              f"got {value!r}")
        by_kind.setdefault(kind, []).append(
            (int(parts[0].replace("_", "")), float(parts[1])))
    if not by_kind:
        raise ConfigError(f"{args.samples}: no samples found")
    fitted: Dict[str, Any] = {}
    for kind in sorted(by_kind):
        try:
            fit = fit_affine(sorted(by_kind[kind]))
        except ValueError as exc:
            raise ConfigError(f"{kind}: {exc}") from None
        fitted[f"{kind}.floor_ns"] = round(fit.floor_ns, 3)
        fitted[f"{kind}.slope_ns_per_atom"] = round(fit.slope_ns_per_atom, 6)
    _emit(dump_config(fitted, header=f"affine kernel costs fitted from "
                                     f"{args.samples}"), args.output)
    return 0


def cmd_check(args) -> int:
    rows = read_report(args.report)
    if args.references is not None:
        points = parse_reference_points(load_config(args.references))
    else:
        points = load_bundled_references()
    if not points:
        print("no reference points loaded; nothing to check")
        return 0
    lines, failed = run_check(rows, points)
    print("\n".join(lines))
    return 1 if failed else 0


def cmd_plan_affinity(args) -> int:
    try:
        node = NODE_PROFILES[args.node]()
    except KeyError:
        known = ", ".join(sorted(NODE_PROFILES))
        raise ConfigError(f"unknown node profile {args.node!r}; "
                          f"available: {known}") from None
    plan = plan_affinity(node, args.ranks, args.threads_per_rank)
    print(f"node {node.name}: {len(plan.ranks)} ranks, "
          f"{len(plan.ranks[0].cores)} cores each")
    for binding in plan.ranks:
        cores = (f"{binding.cores[0]}-{binding.cores[-1]}"
                 if len(binding.cores) > 1 else str(binding.cores[0]))
        print(f"rank{binding.rank}: gcd={binding.gcd} ccx={binding.ccx} "
              f"nic={binding.nic} cores={cores} mask={binding.cpu_bind_mask()}")
    for line in plan.env_lines():
        print(line)
    return 0


def cmd_export_trace(args) -> int:
    scenario = _scenario_from_args(args, "trace")
    scenario.repetitions = 1
    _, trace = run_scenario(scenario, keep_trace=True)
    _emit(trace.to_json(indent=2) + "\n", args.output)
    return 0


# -- argument parsing ---------------------------------------------------------


def _add_scenario_flags(sub, with_repetitions: bool) -> None:
    sub.add_argument("--system", required=True,
                     help="benchmark system preset id")
    sub.add_argument("--profile", required=True,
                     help="runtime profile id")
    sub.add_argument("--ranks", type=int, default=1)
    sub.add_argument("--backend", default="sycl")
    sub.add_argument("--max-cached-nodes", type=int, default=100,
                     dest="max_cached_nodes")
    sub.add_argument("--instant", action="store_true",
                     help="submit work as it arrives instead of batching")
    sub.add_argument("--event-mode", choices=["coarse", "full"],
                     default="coarse", dest="event_mode")
    sub.add_argument("--node", default="lumi",
                     help="node topology profile")
    sub.add_argument("--eras", type=int, default=3,
                     help="neighbour-list eras to run; the first is warm-up")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a system., profile. or settings. field")
    if with_repetitions:
        sub.add_argument("--repetitions", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdgpusim",
        description="Deterministic simulator of GPU-offloaded MD step "
                    "execution on multi-GPU nodes")
    verbs = parser.add_subparsers(dest="verb", required=True)

    sim = verbs.add_parser("simulate", help="run one scenario")
    _add_scenario_flags(sim, with_repetitions=True)
    sim.add_argument("--output", default=None, help="CSV path (default stdout)")
    sim.add_argument("--trace", default=None,
                     help="also save the event trace JSON here")
    sim.set_defaults(func=cmd_simulate)

    sweep = verbs.add_parser("sweep", help="run a scenario matrix")
    sweep.add_argument("--scenarios", required=True,
                       help="scenario config file")
    sweep.add_argument("--output", default=None,
                       help="CSV path (default stdout)")
    sweep.set_defaults(func=cmd_sweep)

    cal = verbs.add_parser("calibrate",
                           help="fit affine kernel costs from samples")
    cal.add_argument("--samples", required=True,
                     help="config with '<kernel>.<n> = atoms duration_ns' lines")
    cal.add_argument("--output", default=None,
                     help="fitted config path (default stdout)")
    cal.set_defaults(func=cmd_calibrate)

    chk = verbs.add_parser("check",
                           help="compare a report against reference points")
    chk.add_argument("--report", required=True, help="CSV report to check")
    chk.add_argument("--references", default=None,
                     help="reference points config (default: bundled set)")
    chk.set_defaults(func=cmd_check)

    aff = verbs.add_parser("plan-affinity",
                           help="print rank-to-device bindings")
    aff.add_argument("--node", required=True, help="node topology profile")
    aff.add_argument("--ranks", type=int, required=True)
    aff.add_argument("--threads-per-rank", type=int, default=None,
                     dest="threads_per_rank")
    aff.set_defaults(func=cmd_plan_affinity)

    exp = verbs.add_parser("export-trace",
                           help="run one scenario and save its trace")
    _add_scenario_flags(exp, with_repetitions=False)
    exp.add_argument("--output", required=True, help="trace JSON path")
    exp.set_defaults(func=cmd_export_trace)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (KeyError, ValueError) as exc:
        message = exc.args[0] if exc.args else str(exc)
        print(f"error: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
