"""Deterministic fluid-flow event simulation of chained live migrations.

Transfers progress piecewise-linearly: whenever the set of active transfers
changes, the link shares are recomputed and remaining completion times are
re-derived. One run is strictly sequential; (scenario, rep_index) fully
determines the event log.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import (
    InstanceSpec,
    MecNode,
    Phase,
    Scenario,
    perturb,
    validate_scenario,
)
from .patterns import ReservationRegistry, Task, TaskGraph


class SimulationError(RuntimeError):
    """Raised when a run cannot proceed (invalid scenario, stalled transfers)."""


class InvalidRateError(ValueError):
    """Raised when a transfer phase is evaluated at a non-positive rate."""


class EventKind(enum.Enum):
    """Event kinds; declaration order is the tie-break rank at equal times."""

    TRANSFER_COMPLETE = "TransferComplete"
    RESTORE_COMPLETE = "RestoreComplete"
    BARRIER_RELEASE = "BarrierRelease"
    TASK_READY = "TaskReady"
    FREEZE_START = "FreezeStart"
    ALLOCATION_CHANGE = "AllocationChange"
    RECONNECT_COMPLETE = "ReconnectComplete"


_KIND_RANK = {k: i for i, k in enumerate(EventKind)}


@dataclass(frozen=True)
class Event:
    time_s: float
    kind: EventKind
    instance: str = ""
    phase: Optional[Phase] = None
    detail: str = ""
    chain_index: int = 0
    seq: int = 0

    @property
    def sort_key(self):
        return (self.time_s, _KIND_RANK[self.kind], self.chain_index, self.seq)


@dataclass
class EventLog:
    """Ordered event record plus derived per-node CPU step functions.

    ``cpu_loads`` maps node id to a right-continuous (time, load_pct) step
    function clamped to [0, 100]. ``allocations`` snapshots every bandwidth
    reallocation as (time, ((instance, phase, rate), ...)); ``task_intervals``
    keeps (node, instance, phase, start, end) for CPU bookkeeping.
    """

    events: list[Event] = field(default_factory=list)
    cpu_loads: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    allocations: list[tuple[float, tuple[tuple[str, str, float], ...]]] = field(
        default_factory=list)
    task_intervals: list[tuple[str, str, Phase, float, float]] = field(
        default_factory=list)
    warnings: list[str] = field(default_factory=list)
    rep_index: int = 0

    def sorted_events(self) -> list[Event]:
        return sorted(self.events, key=lambda e: e.sort_key)

    def first(self, kind: EventKind, instance: Optional[str] = None) -> Optional[Event]:
        for ev in self.sorted_events():
            if ev.kind is kind and (instance is None or ev.instance == instance):
                return ev
        return None

    def write_events_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "kind", "instance", "phase", "detail"])
            for ev in self.sorted_events():
                w.writerow([repr(ev.time_s), ev.kind.value, ev.instance,
                            ev.phase.value if ev.phase else "", ev.detail])

    def write_cpu_csv(self, node_id: str, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "load_pct"])
            for t, load in self.cpu_loads.get(node_id, [(0.0, 0.0)]):
                w.writerow([repr(t), repr(load)])


@dataclass
class Transfer:
    """One active byte stream on the inter-node link."""

    owner: str
    phase: Phase
    chain_index: int
    requested_bytes: float
    remaining_bytes: float
    reserved_rate: Optional[float] = None
    allocated_rate: float = 0.0
    shipped_bytes: float = 0.0


@dataclass
class LinkState:
    """Mutable view of the link used by the allocator."""

    capacity_bytes_per_s: float
    migration_limit_bytes_per_s: Optional[float] = None
    background_flow_count: int = 0
    total_reserved_bytes_per_s: float = 0.0
    transfers: list[Transfer] = field(default_factory=list)


def allocate_shares(link: LinkState) -> dict[int, float]:
    """Best-effort split of the link among active transfers.

    Reserved transfers get exactly their reservation. The remaining pool
    (capacity minus everything reserved, including idle grants) is divided
    equally between unreserved migration transfers and background flows;
    a migration-wide bandwidth limit caps the aggregate taken by the
    unreserved migration side. Returns {id(transfer): rate}; the transfers'
    ``allocated_rate`` fields are updated in place.
    """
    rates: dict[int, float] = {}
    unreserved = []
    for tr in link.transfers:
        if tr.reserved_rate is not None:
            tr.allocated_rate = tr.reserved_rate
            rates[id(tr)] = tr.reserved_rate
        else:
            unreserved.append(tr)

    pool = max(0.0, link.capacity_bytes_per_s - link.total_reserved_bytes_per_s)
    claimants = len(unreserved) + link.background_flow_count
    if unreserved:
        share = pool / claimants
        limit = link.migration_limit_bytes_per_s
        if limit is not None:
            share = min(share, limit / len(unreserved))
        for tr in unreserved:
            tr.allocated_rate = share
            rates[id(tr)] = share

    background_draw = pool / claimants * link.background_flow_count if claimants else 0.0
    total = sum(rates.values()) + background_draw
    if total > link.capacity_bytes_per_s * (1 + 1e-9):
        raise SimulationError(
            f"allocation exceeds capacity: {total} > {link.capacity_bytes_per_s}")
    return rates


def predump_schedule(m0: float, dirty_rate: float, rate: float, threshold: float,
                     max_iters: int) -> tuple[list[float], float, bool]:
    """Iterative memory-copy plan at a constant rate.

    Iteration 0 ships ``m0``; each next iteration ships the bytes dirtied
    while the previous one was in flight. Stops once the next set would fit
    under ``threshold`` (converged) or after ``max_iters`` shipped iterations.
    Returns (shipped iteration bytes, first un-shipped dirty set, converged).
    """
    if rate <= 0:
        raise InvalidRateError(f"pre-dump rate must be > 0, got {rate}")
    if max_iters < 1:
        raise ValueError("max_iters must be ≥ 1")
    iterations: list[float] = []
    current = float(m0)
    while True:
        iterations.append(current)
        nxt = dirty_rate * (current / rate)
        if nxt <= threshold:
            return iterations, nxt, True
        if len(iterations) >= max_iters:
            return iterations, nxt, False
        current = nxt


def phase_duration(phase: Phase, bytes_: float, rate: float, overhead_s: float,
                   latency_s: float) -> float:
    """Duration of one phase task at a constant rate.

    Transfer phases cost bytes/rate plus fixed overhead and link latency.
    RESTORE and RECONNECT carry no transfer: their fixed duration is passed
    through ``overhead_s`` and the rate is ignored.
    """
    if not phase.is_transfer:
        return overhead_s
    if rate <= 0:
        raise InvalidRateError(f"{phase.value}: transfer rate must be > 0, got {rate}")
    return bytes_ / rate + overhead_s + latency_s


def accumulate_dirty(dirty_rate: float, wait_s: float, cap: float) -> float:
    """Bytes re-dirtied while an instance keeps running for ``wait_s``,
    capped (a working set cannot dirty more than itself)."""
    if wait_s < 0:
        raise ValueError("wait_s must be ≥ 0")
    return min(dirty_rate * wait_s, cap)


# ---------------------------------------------------------------------------
# Simulation loop internals
# ---------------------------------------------------------------------------

_BLOCKED = "blocked"
_QUEUED = "queued"      # waiting for a bandwidth reservation grant
_OVERHEAD = "overhead"  # fixed setup segment of a transfer phase
_FLUID = "fluid"        # consuming link bandwidth
_FIXED = "fixed"        # restore / reconnect fixed duration
_DONE = "done"


@dataclass
class _TaskRun:
    task: Task
    inst: Optional[InstanceSpec]
    deps_left: int
    state: str = _BLOCKED
    start_t: float = math.nan
    end_t: float = math.nan          # fixed-stage end (overhead/restore/reconnect)
    transfer: Optional[Transfer] = None
    # pre-dump iteration bookkeeping
    iter_count: int = 0
    iter_start_t: float = math.nan
    shipped_iterations: list[float] = field(default_factory=list)
    final_dirty_bytes: float = 0.0
    predump_converged: bool = True
    accrued_bytes: float = 0.0       # dump only: dirty pages from barrier waits
    complete_t: float = math.nan


class _Sim:
    def __init__(self, scenario: Scenario, plan: TaskGraph, rep_index: int):
        problems = validate_scenario(scenario)
        if problems:
            raise SimulationError("invalid scenario: " + "; ".join(problems))
        self.scenario = scenario
        self.plan = plan
        self.log = EventLog(rep_index=rep_index)
        self._seq = 0

        rng = np.random.default_rng(scenario.base_seed ^ rep_index)
        self.insts = {
            inst.name: perturb(inst, rng, scenario.noise_sigma)
            for inst in scenario.sfc.instances
        }
        self.chain_index = {inst.name: i for i, inst in enumerate(scenario.sfc.instances)}

        self.link = LinkState(
            capacity_bytes_per_s=scenario.link.capacity_bytes_per_s,
            migration_limit_bytes_per_s=scenario.migration_bandwidth_limit_bytes_per_s,
            background_flow_count=scenario.background_transfers,
        )
        self.registry = ReservationRegistry(
            capacity_bytes_per_s=scenario.link.capacity_bytes_per_s,
            reservable_fraction=scenario.link.reservable_fraction,
        )
        self.grants: dict[str, str] = {}        # instance -> grant id
        self.queued_instances: list[str] = []   # awaiting a reservation grant

        self.runs: dict[str, _TaskRun] = {}
        for task in plan.tasks.values():
            inst = self.insts.get(task.instance) if task.instance else None
            self.runs[task.id] = _TaskRun(task=task, inst=inst, deps_left=len(task.deps))
        self.first_transfer_task = {
            name: f"{name}:{Phase.DISK_COPY.value}" for name in self.insts
        }
        self.barrier_pending = {bid: set(members)
                                for bid, members in plan.barriers.items()}
        self.now = 0.0
        self.membership_dirty = False

    # -- logging helpers -----------------------------------------------------

    def _emit(self, kind: EventKind, instance: str = "", phase: Optional[Phase] = None,
              detail: str = "") -> None:
        idx = self.chain_index.get(instance, len(self.chain_index))
        self.log.events.append(Event(self.now, kind, instance, phase, detail,
                                     chain_index=idx, seq=self._seq))
        self._seq += 1

    # -- reservation handling --------------------------------------------------

    def _try_grant(self, name: str) -> bool:
        rate = self.plan.reservation_requests[name]
        grant = self.registry.reserve(rate)
        if grant is None:
            return False
        self.grants[name] = grant
        self.link.total_reserved_bytes_per_s = self.registry.total_reserved_bytes_per_s
        return True

    def _release_grant(self, name: str) -> None:
        grant = self.grants.pop(name, None)
        if grant is None:
            return
        self.registry.release(grant)
        self.link.total_reserved_bytes_per_s = self.registry.total_reserved_bytes_per_s
        # Queued migrations start as soon as freed capacity admits them.
        still_waiting = []
        for waiting in self.queued_instances:
            if self._try_grant(waiting):
                run = self.runs[self.first_transfer_task[waiting]]
                run.state = _BLOCKED
                self._start_task(run, note="granted_after_queue")
            else:
                still_waiting.append(waiting)
        self.queued_instances = still_waiting

    # -- task lifecycle ----------------------------------------------------------

    def _start_task(self, run: _TaskRun, note: str = "") -> None:
        task = run.task
        needs_grant = (bool(self.plan.reservation_requests) and task.instance
                       and task.instance not in self.grants
                       and task.id == self.first_transfer_task.get(task.instance))
        if needs_grant and not self._try_grant(task.instance):
            run.state = _QUEUED
            if task.instance not in self.queued_instances:
                self.queued_instances.append(task.instance)
            self.log.warnings.append(
                f"t={self.now}: reservation for {task.instance!r} queued")
            return

        run.state = _OVERHEAD
        run.start_t = self.now
        self._emit(EventKind.TASK_READY, task.instance, task.phase, note)

        if task.phase is Phase.DUMP:
            self._emit(EventKind.FREEZE_START, task.instance, task.phase)

        if task.phase is Phase.RESTORE:
            run.state = _FIXED
            run.end_t = self.now + run.inst.restore_time_s
            return
        if task.phase is Phase.RECONNECT:
            run.state = _FIXED
            run.end_t = self.now + self.scenario.reconnect_delay_s
            return

        fixed = run.inst.overhead(task.phase) + self.scenario.link.latency_s
        if fixed > 0:
            run.end_t = self.now + fixed
        else:
            self._enter_fluid(run)

    def _dump_payload(self, run: _TaskRun) -> tuple[float, float]:
        """Blocking-copy bytes: leftover dirty set, plus pages re-dirtied while
        the instance waited for its dump slot, plus connection state."""
        inst = run.inst
        pre = self.runs[f"{inst.name}:{Phase.PRE_DUMP.value}"]
        wait = run.start_t - pre.complete_t
        accrued = accumulate_dirty(inst.dirty_rate_bytes_per_s, wait,
                                   cap=inst.mem_delta_bytes)
        return pre.final_dirty_bytes + accrued + inst.state_overhead_bytes, accrued

    def _enter_fluid(self, run: _TaskRun) -> None:
        task, inst = run.task, run.inst
        run.state = _FLUID
        if task.phase is Phase.DISK_COPY:
            size = inst.disk_delta_bytes
        elif task.phase is Phase.PRE_DUMP:
            size = inst.mem_delta_bytes
            run.iter_count = 1
            run.iter_start_t = self.now
        else:
            size, run.accrued_bytes = self._dump_payload(run)
        reserved = self.plan.reservation_requests.get(task.instance)
        run.transfer = Transfer(owner=task.instance, phase=task.phase,
                                chain_index=self.chain_index[task.instance],
                                requested_bytes=size, remaining_bytes=size,
                                reserved_rate=reserved)
        self.link.transfers.append(run.transfer)
        self.membership_dirty = True

    def _detach_transfer(self, run: _TaskRun) -> None:
        tr = run.transfer
        drift = abs(tr.shipped_bytes - tr.requested_bytes)
        if drift > 1e-6 * max(1.0, tr.requested_bytes):
            raise SimulationError(
                f"work conservation violated for {tr.owner}/{tr.phase.value}: "
                f"shipped {tr.shipped_bytes} of {tr.requested_bytes}")
        self.link.transfers.remove(tr)
        self.membership_dirty = True
        run.transfer = None

    def _complete_task(self, run: _TaskRun, kind: EventKind, detail: str = "") -> None:
        run.state = _DONE
        run.complete_t = self.now
        self._emit(kind, run.task.instance, run.task.phase, detail)
        if run.task.phase is not Phase.RECONNECT:
            node = (self.scenario.destination.id
                    if run.task.phase is Phase.RESTORE else self.scenario.source.id)
            self.log.task_intervals.append(
                (node, run.task.instance, run.task.phase, run.start_t, self.now))
        if run.task.phase is Phase.RESTORE:
            self._release_grant(run.task.instance)
        for dep_id in self.plan.dependants.get(run.task.id, ()):
            self.runs[dep_id].deps_left -= 1
        for bid, pending in self.barrier_pending.items():
            if run.task.id in pending:
                pending.discard(run.task.id)
                if not pending:
                    self._emit(EventKind.BARRIER_RELEASE, detail=bid)

    def _barrier_open(self, task: Task) -> bool:
        return task.barrier_id is None or not self.barrier_pending[task.barrier_id]

    def _ready_runs(self) -> list[_TaskRun]:
        return [run for run in (self.runs[tid] for tid in self.plan.tasks)
                if run.state is _BLOCKED and run.deps_left == 0
                and self._barrier_open(run.task)]

    # -- pre-dump iteration hand-off ----------------------------------------------

    def _predump_iteration_done(self, run: _TaskRun) -> bool:
        """Advance iterative memory copy; True when the whole phase finished."""
        inst = run.inst
        tr = run.transfer
        elapsed = self.now - run.iter_start_t
        run.shipped_iterations.append(tr.requested_bytes)
        nxt = inst.dirty_rate_bytes_per_s * elapsed
        scen = self.scenario
        if nxt <= scen.predump_stop_threshold_bytes:
            run.final_dirty_bytes = nxt
            run.predump_converged = True
            return True
        if run.iter_count >= scen.predump_max_iters:
            run.final_dirty_bytes = nxt
            run.predump_converged = False
            self.log.warnings.append(
                f"t={self.now}: pre-dump for {inst.name!r} did not converge in "
                f"{scen.predump_max_iters} iterations (residual {nxt} B)")
            return True
        run.iter_count += 1
        run.iter_start_t = self.now
        tr.requested_bytes = nxt
        tr.remaining_bytes = nxt
        tr.shipped_bytes = 0.0
        return False

    # -- allocation --------------------------------------------------------------

    def _reallocate(self) -> None:
        allocate_shares(self.link)
        snapshot = tuple(
            (tr.owner, tr.phase.value, tr.allocated_rate)
            for tr in sorted(self.link.transfers,
                             key=lambda tr: (tr.chain_index, tr.phase.value)))
        self.log.allocations.append((self.now, snapshot))
        total = sum(r for _, _, r in snapshot)
        self._emit(EventKind.ALLOCATION_CHANGE,
                   detail=f"active={len(snapshot)};total_rate={total!r}")
        self.membership_dirty = False

    # -- main loop -----------------------------------------------------------------

    def run(self) -> EventLog:
        for ready in self._ready_runs():
            self._start_task(ready)
        if self.membership_dirty:
            self._reallocate()

        guard = 0
        max_steps = 200 * (len(self.runs) * max(1, self.scenario.predump_max_iters) + 10)
        while any(r.state is not _DONE for r in self.runs.values()):
            guard += 1
            if guard > max_steps:
                raise SimulationError("simulation did not make progress (stalled)")

            fluid = [r for r in self.runs.values() if r.state is _FLUID]
            projected: dict[str, float] = {}
            for run in fluid:
                tr = run.transfer
                if tr.remaining_bytes <= 0.0:
                    projected[run.task.id] = self.now
                elif tr.allocated_rate > 0.0:
                    projected[run.task.id] = self.now + tr.remaining_bytes / tr.allocated_rate
            t_next = math.inf
            for run in self.runs.values():
                if run.state in (_OVERHEAD, _FIXED):
                    t_next = min(t_next, run.end_t)
            if projected:
                t_next = min(t_next, min(projected.values()))
            if math.isinf(t_next):
                stuck = sorted(r.task.id for r in self.runs.values()
                               if r.state is not _DONE)
                raise SimulationError(
                    f"simulation stalled; no runnable work (pending: {', '.join(stuck)})")

            dt = t_next - self.now
            completers = {tid for tid, t in projected.items() if t <= t_next}
            for run in fluid:
                tr = run.transfer
                if run.task.id in completers:
                    tr.shipped_bytes += tr.remaining_bytes
                    tr.remaining_bytes = 0.0
                elif dt > 0:
                    moved = tr.allocated_rate * dt
                    tr.shipped_bytes += moved
                    tr.remaining_bytes = max(0.0, tr.remaining_bytes - moved)
            self.now = t_next

            # 1) fluid transfer completions, in chain order
            for run in self._in_chain_order(fluid):
                if run.task.id not in completers:
                    continue
                phase = run.task.phase
                if phase is Phase.PRE_DUMP:
                    if not self._predump_iteration_done(run):
                        continue
                    detail = (f"iterations={run.iter_count};"
                              f"final_dirty={run.final_dirty_bytes!r};"
                              f"converged={int(run.predump_converged)}")
                else:
                    detail = f"bytes={run.transfer.requested_bytes!r}"
                    if phase is Phase.DUMP and run.accrued_bytes:
                        detail += f";accrued={run.accrued_bytes!r}"
                self._detach_transfer(run)
                self._complete_task(run, EventKind.TRANSFER_COMPLETE, detail)

            # 2) fixed-stage ends: phase overheads open transfers, restores and
            #    the reconnect complete outright
            pending_fixed = [r for r in self.runs.values()
                             if r.state in (_OVERHEAD, _FIXED) and r.end_t <= self.now]
            for run in self._in_chain_order(pending_fixed):
                if run.state is _OVERHEAD:
                    self._enter_fluid(run)
                elif run.task.phase is Phase.RESTORE:
                    self._complete_task(run, EventKind.RESTORE_COMPLETE)
                else:
                    self._complete_task(run, EventKind.RECONNECT_COMPLETE)

            # 3) newly unblocked tasks start now
            for run in self._in_chain_order(self._ready_runs()):
                self._start_task(run)

            if self.membership_dirty:
                self._reallocate()

        self._build_cpu_series()
        return self.log

    def _in_chain_order(self, runs) -> list[_TaskRun]:
        return sorted(runs, key=lambda r: (
            self.chain_index.get(r.task.instance, len(self.chain_index)), r.task.id))

    # -- CPU accounting ---------------------------------------------------------

    def _build_cpu_series(self) -> None:
        costs = self.scenario.cpu_cost_pct
        for node in (self.scenario.source, self.scenario.destination):
            deltas: dict[float, float] = {0.0: 0.0}
            for node_id, _inst, phase, start, end in self.log.task_intervals:
                if node_id != node.id:
                    continue
                cost = float(costs.get(phase, 0.0))
                if cost == 0.0 or end <= start:
                    continue
                deltas[start] = deltas.get(start, 0.0) + cost
                deltas[end] = deltas.get(end, 0.0) - cost
            series: list[tuple[float, float]] = []
            load = 0.0
            for t in sorted(deltas):
                load += deltas[t]
                clamped = min(100.0, max(0.0, load))
                if series and series[-1][1] == clamped:
                    continue
                series.append((t, clamped))
            self.log.cpu_loads[node.id] = series or [(0.0, 0.0)]


def simulate(scenario: Scenario, plan: TaskGraph, rep_index: int = 0) -> EventLog:
    """Run one repetition and return its event log.

    Raises SimulationError for invalid scenarios or stalled runs; a
    non-convergent pre-dump is reported as a log warning, not an error.
    """
    return _Sim(scenario, plan, rep_index).run()


def cpu_series(log: EventLog, node: MecNode | str) -> list[tuple[float, float]]:
    """Right-continuous (time_s, load_pct) step function for one node."""
    node_id = node if isinstance(node, str) else node.id
    return list(log.cpu_loads.get(node_id, [(0.0, 0.0)]))
