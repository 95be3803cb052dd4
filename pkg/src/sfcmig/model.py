"""Domain types for SFC live-migration scenarios, plus validation and noise."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np


class Phase(enum.Enum):
    """Migration phase of a single instance; RECONNECT is chain-level."""

    DISK_COPY = "disk_copy"
    PRE_DUMP = "pre_dump"
    DUMP = "dump"
    RESTORE = "restore"
    RECONNECT = "reconnect"

    @property
    def is_transfer(self) -> bool:
        return self in (Phase.DISK_COPY, Phase.PRE_DUMP, Phase.DUMP)


# Order in which per-phase overhead factors are drawn during perturbation.
PHASE_ORDER = (Phase.DISK_COPY, Phase.PRE_DUMP, Phase.DUMP, Phase.RESTORE, Phase.RECONNECT)


class PatternBase(enum.Enum):
    ASYNCHRONOUS = "asynchronous"
    WAIT_FOR_ME = "wait_for_me"
    ROUND_ROBIN = "round_robin"


_PATTERN_ALIASES = {
    "asynchronous": PatternBase.ASYNCHRONOUS,
    "async": PatternBase.ASYNCHRONOUS,
    "wait_for_me": PatternBase.WAIT_FOR_ME,
    "waitforme": PatternBase.WAIT_FOR_ME,
    "wait-for-me": PatternBase.WAIT_FOR_ME,
    "wfm": PatternBase.WAIT_FOR_ME,
    "round_robin": PatternBase.ROUND_ROBIN,
    "roundrobin": PatternBase.ROUND_ROBIN,
    "round-robin": PatternBase.ROUND_ROBIN,
    "rr": PatternBase.ROUND_ROBIN,
}


def parse_pattern_base(name: str) -> PatternBase:
    key = name.strip().lower()
    if key not in _PATTERN_ALIASES:
        raise ValueError(f"unknown pattern {name!r}; expected one of "
                         f"{sorted(set(a.value for a in _PATTERN_ALIASES.values()))}")
    return _PATTERN_ALIASES[key]


@dataclass(frozen=True)
class PatternKind:
    """One base coordination pattern, optionally wrapped with bandwidth reservations."""

    base: PatternBase
    network_aware: bool = False

    @property
    def label(self) -> str:
        suffix = "+aware" if self.network_aware else ""
        return self.base.value + suffix


@dataclass(frozen=True)
class InstanceSpec:
    """Migration-relevant footprint of one network function instance.

    Byte fields are transferable payloads (the disk field is a delta, not the
    full image); ``nominal_image_bytes`` is informational only and never
    shipped. ``phase_overhead_s`` holds fixed non-transfer setup time per
    phase (checkpoint tooling, rsync startup); overhead for RESTORE/RECONNECT
    is ignored since those phases have explicit durations elsewhere.
    """

    name: str
    disk_delta_bytes: float = 0.0
    mem_delta_bytes: float = 0.0
    dirty_rate_bytes_per_s: float = 0.0
    state_overhead_bytes: float = 0.0
    restore_time_s: float = 0.0
    phase_overhead_s: Mapping[Phase, float] = field(default_factory=dict)
    nominal_image_bytes: float = 0.0

    def overhead(self, phase: Phase) -> float:
        return float(self.phase_overhead_s.get(phase, 0.0))


@dataclass(frozen=True)
class SfcSpec:
    """Ordered chain of instances; chain order is traffic order and is
    preserved through planning, event logs and reports."""

    instances: tuple[InstanceSpec, ...]

    @property
    def n(self) -> int:
        return len(self.instances)

    def index_of(self, name: str) -> int:
        for i, inst in enumerate(self.instances):
            if inst.name == name:
                return i
        raise KeyError(name)


@dataclass(frozen=True)
class InterMecLink:
    capacity_bytes_per_s: float
    latency_s: float = 0.0
    reservable_fraction: float = 1.0


@dataclass(frozen=True)
class MecNode:
    id: str
    cpu_capacity_pct: float = 100.0
    role: str = ""


# Non-authoritative defaults for per-phase CPU cost on the active node.
DEFAULT_CPU_COST_PCT = {
    Phase.DISK_COPY: 25.0,
    Phase.PRE_DUMP: 30.0,
    Phase.DUMP: 35.0,
    Phase.RESTORE: 20.0,
}

DEFAULT_PREDUMP_STOP_THRESHOLD = 65536.0
DEFAULT_PREDUMP_MAX_ITERS = 5


@dataclass(frozen=True)
class Scenario:
    """Complete description of one migration experiment."""

    source: MecNode
    destination: MecNode
    link: InterMecLink
    sfc: SfcSpec
    pattern: PatternKind
    migration_bandwidth_limit_bytes_per_s: Optional[float] = None
    background_transfers: int = 0
    repetitions: int = 1
    base_seed: int = 0
    noise_sigma: float = 0.0
    predump_stop_threshold_bytes: float = DEFAULT_PREDUMP_STOP_THRESHOLD
    predump_max_iters: int = DEFAULT_PREDUMP_MAX_ITERS
    reconnect_delay_s: float = 0.0
    cpu_cost_pct: Mapping[Phase, float] = field(
        default_factory=lambda: dict(DEFAULT_CPU_COST_PCT))

    @property
    def effective_bandwidth_bytes_per_s(self) -> float:
        """Migration pool ceiling: the configured limit, else link capacity."""
        limit = self.migration_bandwidth_limit_bytes_per_s
        return self.link.capacity_bytes_per_s if limit is None else limit


def validate_scenario(s: Scenario) -> list[str]:
    """Collect every invariant violation as ``"field.path: problem"`` strings.

    An empty list means the scenario is accepted by every downstream
    operation. Violations are data, not exceptions.
    """
    bad: list[str] = []

    def check(cond, path, msg):
        if not cond:
            bad.append(f"{path}: {msg}")

    check(s.sfc.n >= 1, "sfc.instances", "chain must contain at least one instance")
    names = [i.name for i in s.sfc.instances]
    dupes = sorted({n for n in names if names.count(n) > 1})
    check(not dupes, "sfc.instances", f"instance names must be unique (duplicated: {dupes})")

    for idx, inst in enumerate(s.sfc.instances):
        p = f"sfc.instances[{idx}]"
        check(bool(inst.name), f"{p}.name", "must be non-empty")
        for fname in ("disk_delta_bytes", "mem_delta_bytes", "dirty_rate_bytes_per_s",
                      "state_overhead_bytes", "restore_time_s", "nominal_image_bytes"):
            check(getattr(inst, fname) >= 0, f"{p}.{fname}", "must be ≥ 0")
        for ph, val in inst.phase_overhead_s.items():
            check(val >= 0, f"{p}.phase_overhead_s[{ph.value}]", "must be ≥ 0")

    check(s.link.capacity_bytes_per_s > 0, "link.capacity_bytes_per_s", "must be > 0")
    check(s.link.latency_s >= 0, "link.latency_s", "must be ≥ 0")
    check(0.0 <= s.link.reservable_fraction <= 1.0,
          "link.reservable_fraction", "must be within [0, 1]")

    for label, node in (("source", s.source), ("destination", s.destination)):
        check(node.cpu_capacity_pct > 0, f"{label}.cpu_capacity_pct", "must be > 0")
        check(bool(node.id), f"{label}.id", "must be non-empty")
        if node.role:
            check(node.role == label, f"{label}.role", f"must be {label!r}")
    check(s.source.id != s.destination.id, "destination.id",
          "source and destination must be distinct nodes")

    limit = s.migration_bandwidth_limit_bytes_per_s
    if limit is not None:
        check(limit > 0, "migration_bandwidth_limit_bytes_per_s", "must be > 0 when set")
        check(limit <= s.link.capacity_bytes_per_s,
              "migration_bandwidth_limit_bytes_per_s", "limit exceeds link capacity")

    check(s.background_transfers >= 0, "background_transfers", "must be ≥ 0")
    check(s.repetitions >= 1, "repetitions", "must be ≥ 1")
    check(s.base_seed >= 0, "base_seed", "must be ≥ 0")
    check(s.noise_sigma >= 0, "noise_sigma", "must be ≥ 0")
    check(s.predump_stop_threshold_bytes >= 0, "predump_stop_threshold_bytes", "must be ≥ 0")
    check(s.predump_max_iters >= 1, "predump_max_iters", "must be ≥ 1")
    check(s.reconnect_delay_s >= 0, "reconnect_delay_s", "must be ≥ 0")
    for ph, val in s.cpu_cost_pct.items():
        check(val >= 0, f"cpu_cost_pct[{ph.value}]", "must be ≥ 0")
    return bad


def perturb(spec: InstanceSpec, rng: np.random.Generator, sigma: float) -> InstanceSpec:
    """Jitter rate/time fields by independent Normal(1, sigma^2) factors.

    Draws below 0.1 are clamped so byte/time invariants survive; payload
    sizes (disk/memory deltas) are left exact. sigma == 0 is the identity.
    Pure function of (spec, rng state, sigma).
    """
    if sigma < 0:
        raise ValueError("sigma must be ≥ 0")
    if sigma == 0:
        return spec

    def factor() -> float:
        return max(0.1, 1.0 + sigma * float(rng.standard_normal()))

    overheads = {}
    for ph in PHASE_ORDER:
        if ph in spec.phase_overhead_s:
            overheads[ph] = spec.phase_overhead_s[ph] * factor()
    return replace(
        spec,
        dirty_rate_bytes_per_s=spec.dirty_rate_bytes_per_s * factor(),
        state_overhead_bytes=spec.state_overhead_bytes * factor(),
        restore_time_s=spec.restore_time_s * factor(),
        phase_overhead_s=overheads,
    )


# ---------------------------------------------------------------------------
# JSON round-trip. Field names match the dataclass fields exactly; units are
# bytes and seconds throughout (the CLI converts suffixed values).
# ---------------------------------------------------------------------------

def _phase_map_to_json(m: Mapping[Phase, float]) -> dict:
    return {ph.value: float(v) for ph, v in m.items()}


def _phase_map_from_json(d: Mapping[str, float], where: str) -> dict:
    out = {}
    for key, val in d.items():
        try:
            out[Phase(key)] = float(val)
        except ValueError:
            raise ValueError(f"{where}: unknown phase key {key!r}") from None
    return out


def instance_to_dict(inst: InstanceSpec) -> dict:
    return {
        "name": inst.name,
        "disk_delta_bytes": inst.disk_delta_bytes,
        "mem_delta_bytes": inst.mem_delta_bytes,
        "dirty_rate_bytes_per_s": inst.dirty_rate_bytes_per_s,
        "state_overhead_bytes": inst.state_overhead_bytes,
        "restore_time_s": inst.restore_time_s,
        "phase_overhead_s": _phase_map_to_json(inst.phase_overhead_s),
        "nominal_image_bytes": inst.nominal_image_bytes,
    }


def instance_from_dict(d: Mapping, where: str = "instance") -> InstanceSpec:
    return InstanceSpec(
        name=str(d["name"]),
        disk_delta_bytes=float(d.get("disk_delta_bytes", 0.0)),
        mem_delta_bytes=float(d.get("mem_delta_bytes", 0.0)),
        dirty_rate_bytes_per_s=float(d.get("dirty_rate_bytes_per_s", 0.0)),
        state_overhead_bytes=float(d.get("state_overhead_bytes", 0.0)),
        restore_time_s=float(d.get("restore_time_s", 0.0)),
        phase_overhead_s=_phase_map_from_json(d.get("phase_overhead_s", {}), where),
        nominal_image_bytes=float(d.get("nominal_image_bytes", 0.0)),
    )


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "source": {"id": s.source.id, "cpu_capacity_pct": s.source.cpu_capacity_pct,
                   "role": s.source.role or "source"},
        "destination": {"id": s.destination.id,
                        "cpu_capacity_pct": s.destination.cpu_capacity_pct,
                        "role": s.destination.role or "destination"},
        "link": {"capacity_bytes_per_s": s.link.capacity_bytes_per_s,
                 "latency_s": s.link.latency_s,
                 "reservable_fraction": s.link.reservable_fraction},
        "sfc": {"instances": [instance_to_dict(i) for i in s.sfc.instances]},
        "pattern": {"base": s.pattern.base.value, "network_aware": s.pattern.network_aware},
        "migration_bandwidth_limit_bytes_per_s": s.migration_bandwidth_limit_bytes_per_s,
        "background_transfers": s.background_transfers,
        "repetitions": s.repetitions,
        "base_seed": s.base_seed,
        "noise_sigma": s.noise_sigma,
        "predump_stop_threshold_bytes": s.predump_stop_threshold_bytes,
        "predump_max_iters": s.predump_max_iters,
        "reconnect_delay_s": s.reconnect_delay_s,
        "cpu_cost_pct": _phase_map_to_json(s.cpu_cost_pct),
    }


def _node_from_dict(d: Mapping, default_role: str) -> MecNode:
    return MecNode(id=str(d["id"]),
                   cpu_capacity_pct=float(d.get("cpu_capacity_pct", 100.0)),
                   role=str(d.get("role", default_role)))


def scenario_from_dict(d: Mapping) -> Scenario:
    pat = d.get("pattern", "asynchronous")
    if isinstance(pat, str):
        pattern = PatternKind(parse_pattern_base(pat))
    else:
        pattern = PatternKind(parse_pattern_base(str(pat["base"])),
                              network_aware=bool(pat.get("network_aware", False)))
    limit = d.get("migration_bandwidth_limit_bytes_per_s")
    link = d["link"]
    cpu = d.get("cpu_cost_pct")
    return Scenario(
        source=_node_from_dict(d["source"], "source"),
        destination=_node_from_dict(d["destination"], "destination"),
        link=InterMecLink(capacity_bytes_per_s=float(link["capacity_bytes_per_s"]),
                          latency_s=float(link.get("latency_s", 0.0)),
                          reservable_fraction=float(link.get("reservable_fraction", 1.0))),
        sfc=SfcSpec(tuple(instance_from_dict(i, f"sfc.instances[{k}]")
                          for k, i in enumerate(d["sfc"]["instances"]))),
        pattern=pattern,
        migration_bandwidth_limit_bytes_per_s=None if limit is None else float(limit),
        background_transfers=int(d.get("background_transfers", 0)),
        repetitions=int(d.get("repetitions", 1)),
        base_seed=int(d.get("base_seed", 0)),
        noise_sigma=float(d.get("noise_sigma", 0.0)),
        predump_stop_threshold_bytes=float(
            d.get("predump_stop_threshold_bytes", DEFAULT_PREDUMP_STOP_THRESHOLD)),
        predump_max_iters=int(d.get("predump_max_iters", DEFAULT_PREDUMP_MAX_ITERS)),
        reconnect_delay_s=float(d.get("reconnect_delay_s", 0.0)),
        cpu_cost_pct=(dict(DEFAULT_CPU_COST_PCT) if cpu is None
                      else _phase_map_from_json(cpu, "cpu_cost_pct")),
    )


def load_scenario(path: str | Path) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))


def save_scenario(s: Scenario, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(s), fh, indent=2, sort_keys=True)
        fh.write("\n")
