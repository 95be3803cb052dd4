"""Command-line interface: run, sweep, calibrate, validate.

Exit codes: 0 success, 2 validation failure (bad input files, flags, or
scenario invariants), 3 calibration residual above the ceiling, 4 I/O
failure. All emitted data files are pure functions of the inputs and flags.
"""
from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from . import metrics as metrics_mod
from .engine import SimulationError, simulate
from .metrics import (
    CalibrationError,
    InsufficientSamplesError,
    calibrate,
    extract,
    load_bounds,
    load_targets,
    summarize,
    ParameterBounds,
)
from .model import (
    PatternKind,
    Scenario,
    load_scenario,
    parse_pattern_base,
    save_scenario,
    scenario_from_dict,
    validate_scenario,
)
from .patterns import build_plan, save_task_graph

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CALIBRATION = 3
EXIT_IO = 4

_SUFFIXES = {"": 1.0, "B": 1.0, "KB": 1e3, "MB": 1e6, "GB": 1e9, "TB": 1e12}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def parse_bandwidth(text: str) -> Optional[float]:
    """'300KB', '2MB', '3GB' (powers of ten, per second), bare bytes/s,
    or 'full' for no migration limit."""
    token = text.strip()
    if token.lower() in ("full", "none", "unlimited"):
        return None
    m = re.fullmatch(r"([0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*([A-Za-z]*?)(?:/s)?",
                     token)
    if not m:
        raise CliError(f"cannot parse bandwidth {text!r}", EXIT_VALIDATION)
    value, unit = m.groups()
    unit = (unit or "").upper().rstrip("P").rstrip("B") + ("B" if unit else "")
    unit = unit.replace("BB", "B")
    if unit not in _SUFFIXES:
        raise CliError(f"unknown bandwidth unit in {text!r}", EXIT_VALIDATION)
    return float(value) * _SUFFIXES[unit]


def preset_path(name: str) -> Path:
    return Path(str(resources.files("sfcmig").joinpath("presets", name)))


def _load_scenario_checked(path: str) -> Scenario:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"scenario file not found: {path}", EXIT_IO)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: malformed JSON at line {exc.lineno} column "
                       f"{exc.colno}: {exc.msg}", EXIT_VALIDATION)
    try:
        return scenario_from_dict(raw)
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError(f"{path}: bad scenario field: {exc}", EXIT_VALIDATION)


def _apply_overrides(scenario: Scenario, args) -> Scenario:
    if getattr(args, "pattern", None):
        base = parse_pattern_base(args.pattern)
        aware = scenario.pattern.network_aware
        scenario = replace(scenario, pattern=PatternKind(base, aware))
    if getattr(args, "network_aware", False):
        scenario = replace(scenario,
                           pattern=PatternKind(scenario.pattern.base, True))
    if getattr(args, "bandwidth", None) is not None:
        scenario = replace(scenario,
                           migration_bandwidth_limit_bytes_per_s=parse_bandwidth(
                               args.bandwidth))
    if getattr(args, "reps", None) is not None:
        scenario = replace(scenario, repetitions=args.reps)
    if getattr(args, "seed", None) is not None:
        scenario = replace(scenario, base_seed=args.seed)
    return scenario


def _validate_or_fail(scenario: Scenario) -> None:
    problems = validate_scenario(scenario)
    if problems:
        raise CliError("scenario validation failed:\n  " + "\n  ".join(problems),
                       EXIT_VALIDATION)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory not writable: {out} ({exc})", EXIT_IO)
    return out


def _bandwidth_column(scenario: Scenario) -> float:
    return scenario.effective_bandwidth_bytes_per_s


def _run_cell(scenario: Scenario, out: Path, emit_events: bool, emit_cpu: bool,
              tag: str = "") -> list[dict]:
    """Execute all repetitions of one (pattern, bandwidth) cell; returns
    long-format rows {pattern, bandwidth, rep_index, instance, metric, value}."""
    plan = build_plan(scenario.pattern, scenario.sfc, scenario.link,
                      predump_stop_threshold_bytes=scenario.predump_stop_threshold_bytes,
                      predump_max_iters=scenario.predump_max_iters)
    rows = []
    label = scenario.pattern.label
    bw = _bandwidth_column(scenario)
    for rep in range(scenario.repetitions):
        log = simulate(scenario, plan, rep_index=rep)
        run = extract(log)

        def put(instance, metric, value):
            rows.append({"pattern": label, "bandwidth_bytes_per_s": bw,
                         "rep_index": rep, "instance": instance,
                         "metric": metric, "value": value})

        for name, m in run.per_instance.items():
            put(name, "downtime_s", m.downtime_s)
            put(name, "total_time_s", m.total_time_s)
        put("sfc", "service_downtime_s", run.service_downtime_s)
        put("sfc", "sfc_total_time_s", run.sfc_total_time_s)
        for node_id, peak in run.peak_cpu_pct.items():
            put(node_id, "peak_cpu_pct", peak)
            put(node_id, "cpu_integral_pct_s", run.cpu_integral_pct_s[node_id])

        suffix = f"{tag}_rep{rep}" if tag else f"rep{rep}"
        if emit_events:
            log.write_events_csv(out / f"events_{suffix}.csv")
        if emit_cpu:
            for node in (scenario.source, scenario.destination):
                log.write_cpu_csv(node.id, out / f"cpu_{node.id}_{suffix}.csv")
    return rows


def _write_per_run_csv(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pattern", "bandwidth_bytes_per_s", "rep_index", "instance",
                    "metric", "value"])
        for r in rows:
            w.writerow([r["pattern"], repr(float(r["bandwidth_bytes_per_s"])),
                        r["rep_index"], r["instance"], r["metric"],
                        repr(float(r["value"]))])


def _write_summary_csv(rows: list[dict], path: Path) -> bool:
    """Aggregate repetitions; returns False (no file) when reps < 2."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        key = (r["pattern"], r["bandwidth_bytes_per_s"], r["instance"], r["metric"])
        groups.setdefault(key, []).append(r["value"])
    if all(len(v) < 2 for v in groups.values()):
        return False
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pattern", "bandwidth_bytes_per_s", "instance", "metric",
                    "mean", "std", "ci95", "cv", "n"])
        for key in sorted(groups, key=lambda k: (k[0], k[1], k[2], k[3])):
            samples = groups[key]
            if len(samples) < 2:
                continue
            s = summarize(samples)
            w.writerow([key[0], repr(float(key[1])), key[2], key[3],
                        repr(s.mean), repr(s.std), repr(s.ci95), repr(s.cv), s.n])
    return True


def _write_manifest(out: Path, args: argparse.Namespace, extra: dict) -> None:
    payload = {"command": args.command,
               "args": {k: v for k, v in sorted(vars(args).items())
                        if k not in ("func",)},
               **extra}
    with open(out / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    scenario = _apply_overrides(_load_scenario_checked(args.scenario), args)
    _validate_or_fail(scenario)
    out = _out_dir(args)
    rows = _run_cell(scenario, out, args.emit_events, args.emit_cpu)
    _write_per_run_csv(rows, out / "per_run.csv")
    wrote_summary = _write_summary_csv(rows, out / "summary.csv")
    if args.emit_plan:
        plan = build_plan(scenario.pattern, scenario.sfc, scenario.link,
                          predump_stop_threshold_bytes=scenario.predump_stop_threshold_bytes,
                          predump_max_iters=scenario.predump_max_iters)
        save_task_graph(plan, out / "task_graph.json")
    _write_manifest(out, args, {"summary_written": wrote_summary})
    print(f"wrote {out / 'per_run.csv'}"
          + (f" and {out / 'summary.csv'}" if wrote_summary
             else " (summary omitted: fewer than 2 repetitions)"))
    return EXIT_OK


def cmd_sweep(args) -> int:
    scenario = _apply_overrides(_load_scenario_checked(args.scenario), args)
    bandwidth_tokens = [b for b in (args.bandwidth or "").split(",") if b.strip()]
    pattern_tokens = [p for p in (args.patterns or "").split(",") if p.strip()]
    if not bandwidth_tokens:
        raise CliError("sweep needs a non-empty --bandwidth list", EXIT_VALIDATION)
    if not pattern_tokens:
        pattern_tokens = [scenario.pattern.base.value]
    bandwidths = [parse_bandwidth(tok) for tok in bandwidth_tokens]
    patterns = [parse_pattern_base(tok) for tok in pattern_tokens]

    out = _out_dir(args)
    all_rows: list[dict] = []
    for base in patterns:
        for bw in bandwidths:
            cell = replace(scenario,
                           pattern=PatternKind(base, scenario.pattern.network_aware),
                           migration_bandwidth_limit_bytes_per_s=bw)
            _validate_or_fail(cell)
            tag = f"{cell.pattern.label}_{int(cell.effective_bandwidth_bytes_per_s)}"
            try:
                all_rows.extend(_run_cell(cell, out, args.emit_events,
                                          args.emit_cpu, tag=tag))
            except (SimulationError, metrics_mod.ExtractionError) as exc:
                raise CliError(
                    f"sweep cell (pattern={cell.pattern.label}, bandwidth={tag}) "
                    f"failed: {exc}", EXIT_VALIDATION)
    _write_per_run_csv(all_rows, out / "per_run.csv")
    wrote_summary = _write_summary_csv(all_rows, out / "summary.csv")
    _write_manifest(out, args, {"cells": len(patterns) * len(bandwidths),
                                "summary_written": wrote_summary})
    print(f"wrote {out / 'per_run.csv'} ({len(patterns) * len(bandwidths)} cells)")
    return EXIT_OK


def _default_calibration_scenario(targets) -> Scenario:
    """Two-node template matching the desk-scale testbed the tables describe."""
    from .model import InstanceSpec, InterMecLink, MecNode, PatternBase, SfcSpec

    instances = tuple(
        InstanceSpec(name=name, dirty_rate_bytes_per_s=1e5)
        for name in targets.instances)
    return Scenario(
        source=MecNode("mec-source", 100.0, "source"),
        destination=MecNode("mec-target", 100.0, "destination"),
        link=InterMecLink(capacity_bytes_per_s=3e9, latency_s=0.0,
                          reservable_fraction=0.8),
        sfc=SfcSpec(instances),
        pattern=PatternKind(PatternBase.ASYNCHRONOUS),
        repetitions=10,
        base_seed=42,
        noise_sigma=0.05,
        reconnect_delay_s=0.5,
    )


def cmd_calibrate(args) -> int:
    try:
        targets = load_targets(args.targets)
    except FileNotFoundError:
        raise CliError(f"targets file not found: {args.targets}", EXIT_IO)
    except json.JSONDecodeError as exc:
        raise CliError(f"{args.targets}: malformed JSON at line {exc.lineno}: "
                       f"{exc.msg}", EXIT_VALIDATION)
    if args.bounds:
        try:
            bounds = load_bounds(args.bounds)
        except FileNotFoundError:
            raise CliError(f"bounds file not found: {args.bounds}", EXIT_IO)
        except json.JSONDecodeError as exc:
            raise CliError(f"{args.bounds}: malformed JSON at line {exc.lineno}: "
                           f"{exc.msg}", EXIT_VALIDATION)
    else:
        bounds = ParameterBounds()

    if args.base_scenario:
        base = _load_scenario_checked(args.base_scenario)
    else:
        base = _default_calibration_scenario(targets)

    out = _out_dir(args)
    try:
        result = calibrate(targets, bounds, base)
    except CalibrationError as exc:
        raise CliError(str(exc), EXIT_VALIDATION)

    scenario_path = out / args.scenario_name
    save_scenario(result.scenario, scenario_path)
    result.write_report_csv(out / "calibration_report.csv",
                            link_capacity=base.link.capacity_bytes_per_s)
    _write_manifest(out, args, {"objective": result.objective,
                                "max_abs_relative_error":
                                    result.max_abs_relative_error})
    worst = result.max_abs_relative_error
    print(f"fitted scenario -> {scenario_path}")
    print(f"worst cell residual: {worst:.4%} (ceiling {args.residual_ceiling:.0%})")
    if worst > args.residual_ceiling:
        print("calibration residual exceeds the ceiling", file=sys.stderr)
        return EXIT_CALIBRATION
    return EXIT_OK


def cmd_validate(args) -> int:
    scenario = _load_scenario_checked(args.scenario)
    problems = validate_scenario(scenario)
    if problems:
        print("invalid scenario:")
        for p in problems:
            print(f"  {p}")
        return EXIT_VALIDATION
    print("scenario is valid")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfcmig",
        description="Discrete-event simulator of service function chain live "
                    "migration between edge nodes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--scenario", required=True, help="scenario JSON path")
        p.add_argument("--reps", type=int, help="override repetitions")
        p.add_argument("--seed", type=int, help="override base seed")
        p.add_argument("--network-aware", action="store_true",
                       help="wrap the pattern with bandwidth reservations")
        if needs_out:
            p.add_argument("--out-dir", required=True, help="output directory")
            p.add_argument("--emit-events", action="store_true",
                           help="write per-repetition event logs")
            p.add_argument("--emit-cpu", action="store_true",
                           help="write per-node CPU series")

    p_run = sub.add_parser("run", help="run one scenario cell")
    common(p_run)
    p_run.add_argument("--pattern", help="override the coordination pattern")
    p_run.add_argument("--bandwidth",
                       help="override the migration limit (e.g. 2MB, 3e9, full)")
    p_run.add_argument("--emit-plan", action="store_true",
                       help="write the task graph JSON")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a bandwidth x pattern grid")
    common(p_sweep)
    p_sweep.add_argument("--bandwidth", required=True,
                         help="comma-separated limits (e.g. 300KB,2MB,3GB)")
    p_sweep.add_argument("--patterns",
                         help="comma-separated patterns "
                              "(asynchronous,waitforme,roundrobin)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_cal = sub.add_parser("calibrate",
                           help="fit instance parameters to observed cells")
    p_cal.add_argument("--targets", required=True, help="targets JSON path")
    p_cal.add_argument("--bounds", help="parameter bounds JSON path")
    p_cal.add_argument("--base-scenario",
                       help="scenario template (defaults to a two-node link)")
    p_cal.add_argument("--out-dir", required=True)
    p_cal.add_argument("--scenario-name", default="calibrated_sfc.json",
                       help="filename for the fitted scenario")
    p_cal.add_argument("--residual-ceiling", type=float, default=0.15,
                       help="max tolerated per-cell relative error")
    p_cal.set_defaults(func=cmd_calibrate)

    p_val = sub.add_parser("validate", help="check a scenario file")
    p_val.add_argument("--scenario", required=True)
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SimulationError, metrics_mod.ExtractionError,
            InsufficientSamplesError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
