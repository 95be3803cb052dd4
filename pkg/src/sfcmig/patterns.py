"""Coordination patterns: scenario -> task graph, plus bandwidth reservations."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .model import (
    InstanceSpec,
    InterMecLink,
    PatternBase,
    PatternKind,
    Phase,
    SfcSpec,
    DEFAULT_PREDUMP_MAX_ITERS,
    DEFAULT_PREDUMP_STOP_THRESHOLD,
)

_PHASE_CHAIN = (Phase.DISK_COPY, Phase.PRE_DUMP, Phase.DUMP, Phase.RESTORE)
RECONNECT_TASK_ID = "sfc:reconnect"
PREDUMP_BARRIER_ID = "barrier:pre_dump"


@dataclass(frozen=True)
class Task:
    id: str
    instance: str            # "" for the chain-level reconnect task
    phase: Phase
    deps: frozenset[str]
    barrier_id: Optional[str] = None


@dataclass
class TaskGraph:
    """Pattern-specific partial order over phase tasks.

    ``tasks`` is insertion-ordered (chain order, phases in execution order),
    which downstream code uses for deterministic scheduling decisions.
    """

    tasks: dict[str, Task]
    barriers: dict[str, frozenset[str]] = field(default_factory=dict)
    reservation_requests: dict[str, float] = field(default_factory=dict)
    dependants: dict[str, tuple[str, ...]] = field(init=False)

    def __post_init__(self):
        rev: dict[str, list[str]] = {}
        for task in self.tasks.values():
            for dep in task.deps:
                if dep not in self.tasks:
                    raise ValueError(f"task {task.id!r} depends on unknown {dep!r}")
                rev.setdefault(dep, []).append(task.id)
        self.dependants = {k: tuple(sorted(v)) for k, v in rev.items()}
        for bid, members in self.barriers.items():
            missing = [m for m in members if m not in self.tasks]
            if missing:
                raise ValueError(f"barrier {bid!r} references unknown tasks {missing}")
        self.topological_order()  # raises on cycles

    def topological_order(self) -> list[str]:
        """Kahn's algorithm; raises ValueError if the graph has a cycle."""
        indeg = {tid: len(t.deps) for tid, t in self.tasks.items()}
        frontier = [tid for tid, d in indeg.items() if d == 0]
        order: list[str] = []
        while frontier:
            tid = frontier.pop(0)
            order.append(tid)
            for nxt in self.dependants.get(tid, ()):
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    frontier.append(nxt)
        if len(order) != len(self.tasks):
            raise ValueError("task graph contains a cycle")
        return order


def task_id(instance: str, phase: Phase) -> str:
    return f"{instance}:{phase.value}"


def build_plan(pattern: PatternKind, sfc: SfcSpec,
               link: Optional[InterMecLink] = None,
               reservation_tolerance: float = 0.10,
               reservation_rate_tol: float = 1024.0,
               predump_stop_threshold_bytes: float = DEFAULT_PREDUMP_STOP_THRESHOLD,
               predump_max_iters: int = DEFAULT_PREDUMP_MAX_ITERS) -> TaskGraph:
    """Materialize the coordination pattern as an explicit task graph.

    Asynchronous: per-instance chains with no cross-instance edges; one
    reconnect task after every restore. Wait-For-Me: additionally one barrier
    over all pre-dumps that gates every dump. Round-Robin: a single total
    order grouped by phase. The network-aware flag attaches a minimal
    per-instance bandwidth reservation, acquired before the instance's first
    transfer and released at its restore.
    """
    tasks: dict[str, Task] = {}

    def add(instance: str, phase: Phase, deps: set[str],
            barrier_id: Optional[str] = None) -> str:
        tid = task_id(instance, phase)
        tasks[tid] = Task(tid, instance, phase, frozenset(deps), barrier_id)
        return tid

    if pattern.base is PatternBase.ROUND_ROBIN:
        prev: Optional[str] = None
        for phase in _PHASE_CHAIN:
            for inst in sfc.instances:
                deps = set()
                if prev is not None:
                    deps.add(prev)
                if phase is not _PHASE_CHAIN[0]:
                    chain_pos = _PHASE_CHAIN.index(phase)
                    deps.add(task_id(inst.name, _PHASE_CHAIN[chain_pos - 1]))
                prev = add(inst.name, phase, deps)
    else:
        barrier = pattern.base is PatternBase.WAIT_FOR_ME
        for inst in sfc.instances:
            prev = None
            for phase in _PHASE_CHAIN:
                deps = {prev} if prev else set()
                gate = (PREDUMP_BARRIER_ID
                        if barrier and phase is Phase.DUMP else None)
                prev = add(inst.name, phase, deps, barrier_id=gate)

    restores = {task_id(i.name, Phase.RESTORE) for i in sfc.instances}
    tasks[RECONNECT_TASK_ID] = Task(RECONNECT_TASK_ID, "", Phase.RECONNECT,
                                    frozenset(restores))

    barriers: dict[str, frozenset[str]] = {}
    if pattern.base is PatternBase.WAIT_FOR_ME:
        barriers[PREDUMP_BARRIER_ID] = frozenset(
            task_id(i.name, Phase.PRE_DUMP) for i in sfc.instances)

    reservations: dict[str, float] = {}
    if pattern.network_aware:
        if link is None:
            raise ValueError("network-aware planning needs the inter-node link")
        for inst in sfc.instances:
            reservations[inst.name] = compute_reservation(
                inst, link,
                tolerance=reservation_tolerance,
                rate_tol=reservation_rate_tol,
                predump_stop_threshold_bytes=predump_stop_threshold_bytes,
                predump_max_iters=predump_max_iters,
            )

    return TaskGraph(tasks=tasks, barriers=barriers,
                     reservation_requests=reservations)


def export_task_graph(plan: TaskGraph) -> list[dict]:
    """Diagnostic JSON-ready view of the plan."""
    return [
        {"task_id": t.id, "instance": t.instance, "phase": t.phase.value,
         "deps": sorted(t.deps), "barrier": t.barrier_id}
        for t in plan.tasks.values()
    ]


def save_task_graph(plan: TaskGraph, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(export_task_graph(plan), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Network-aware support: minimal reservation and the revolving grant pool
# ---------------------------------------------------------------------------

def blocking_downtime(inst: InstanceSpec, rate: float, latency_s: float,
                      predump_stop_threshold_bytes: float,
                      predump_max_iters: int) -> float:
    """Downtime if the whole migration runs at the given constant rate:
    leftover dirty set plus state overhead shipped while frozen, then the
    fixed dump overhead and restore."""
    from .engine import predump_schedule  # local import to avoid a cycle

    _, final_dirty, _ = predump_schedule(
        inst.mem_delta_bytes, inst.dirty_rate_bytes_per_s, rate,
        predump_stop_threshold_bytes, predump_max_iters)
    return ((final_dirty + inst.state_overhead_bytes) / rate
            + inst.overhead(Phase.DUMP) + latency_s + inst.restore_time_s)


def compute_reservation(inst: InstanceSpec, link: InterMecLink,
                        tolerance: float = 0.10, rate_tol: float = 1024.0,
                        predump_stop_threshold_bytes: float = DEFAULT_PREDUMP_STOP_THRESHOLD,
                        predump_max_iters: int = DEFAULT_PREDUMP_MAX_ITERS) -> float:
    """Minimal rate whose downtime stays within (1 + tolerance) of the
    full-capacity downtime, found by bisection over (0, capacity]."""
    if tolerance <= 0:
        raise ValueError("tolerance must be > 0")
    if rate_tol <= 0:
        raise ValueError("rate_tol must be > 0")
    cap = link.capacity_bytes_per_s

    def downtime(rate: float) -> float:
        return blocking_downtime(inst, rate, link.latency_s,
                                 predump_stop_threshold_bytes, predump_max_iters)

    target = (1.0 + tolerance) * downtime(cap)
    if not math.isfinite(target):
        raise ValueError("downtime at full capacity must be finite")
    if downtime(cap) > target:
        raise AssertionError("full capacity infeasible; feasibility is not monotone")

    lo, hi = 0.0, cap
    while hi - lo > rate_tol:
        mid = 0.5 * (lo + hi)
        if downtime(mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class ReservationRegistry:
    """Revolving pool of bandwidth grants on one link.

    Reservations are granted while the running total stays within the
    link's reservable fraction; otherwise callers queue and retry on
    release. Grants and releases must balance to zero by scenario end.
    """

    capacity_bytes_per_s: float
    reservable_fraction: float = 1.0
    total_reserved_bytes_per_s: float = 0.0
    active_grants: dict[str, float] = field(default_factory=dict)
    _counter: int = 0

    @property
    def reservable_bytes_per_s(self) -> float:
        return self.reservable_fraction * self.capacity_bytes_per_s

    def reserve(self, rate: float) -> Optional[str]:
        """Grant id, or None when the request must queue."""
        if rate <= 0:
            raise ValueError("reservation rate must be > 0")
        budget = self.reservable_bytes_per_s
        if self.total_reserved_bytes_per_s + rate > budget * (1 + 1e-12):
            return None
        grant = f"grant-{self._counter}"
        self._counter += 1
        self.active_grants[grant] = rate
        self.total_reserved_bytes_per_s += rate
        if self.total_reserved_bytes_per_s > budget * (1 + 1e-9):
            raise AssertionError("reservation total exceeded the reservable cap")
        return grant

    def release(self, grant_id: str) -> None:
        try:
            rate = self.active_grants.pop(grant_id)
        except KeyError:
            raise KeyError(f"release without a matching grant: {grant_id!r}") from None
        self.total_reserved_bytes_per_s -= rate
        if not self.active_grants:
            self.total_reserved_bytes_per_s = 0.0  # clear accumulated rounding
