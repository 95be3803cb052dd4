"""Measurements from event logs, repetition statistics, and model calibration."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import stats as _scipy_stats

from .engine import EventKind, EventLog, simulate
from .model import InstanceSpec, Phase, Scenario
from .patterns import build_plan


class ExtractionError(RuntimeError):
    """An event log is missing a record needed for a metric."""


class InsufficientSamplesError(ValueError):
    """summarize() needs at least two samples."""


class CalibrationError(RuntimeError):
    """Calibration input is unusable (missing cells, bad bounds)."""


DOWNTIME = "downtime_s"
TOTAL_TIME = "total_time_s"
METRICS = (DOWNTIME, TOTAL_TIME)


@dataclass(frozen=True)
class InstanceMetrics:
    downtime_s: float
    total_time_s: float


@dataclass(frozen=True)
class RunMetrics:
    per_instance: Mapping[str, InstanceMetrics]
    service_downtime_s: float
    sfc_total_time_s: float
    peak_cpu_pct: Mapping[str, float]
    cpu_integral_pct_s: Mapping[str, float]


@dataclass(frozen=True)
class SummaryStats:
    """Sample statistics over repetitions (std uses the n-1 denominator,
    the confidence interval half-width uses Student's t)."""

    mean: float
    std: float
    ci95: float
    cv: float
    n: int


def extract(log: EventLog) -> RunMetrics:
    """Pull the per-instance and chain-level measurements out of one log."""
    starts: dict[str, float] = {}
    freezes: dict[str, float] = {}
    restores: dict[str, float] = {}
    reconnect_t: Optional[float] = None
    for ev in log.sorted_events():
        if ev.kind is EventKind.TASK_READY and ev.instance:
            starts.setdefault(ev.instance, ev.time_s)
        elif ev.kind is EventKind.FREEZE_START:
            freezes.setdefault(ev.instance, ev.time_s)
        elif ev.kind is EventKind.RESTORE_COMPLETE:
            restores[ev.instance] = ev.time_s
        elif ev.kind is EventKind.RECONNECT_COMPLETE:
            reconnect_t = ev.time_s

    per_instance: dict[str, InstanceMetrics] = {}
    for name, start in starts.items():
        for label, record in (("FreezeStart", freezes), ("RestoreComplete", restores)):
            if name not in record:
                raise ExtractionError(f"log incomplete: no {label} for {name!r}")
        per_instance[name] = InstanceMetrics(
            downtime_s=restores[name] - freezes[name],
            total_time_s=restores[name] - start,
        )
    if not per_instance:
        raise ExtractionError("log incomplete: no instance tasks recorded")
    if reconnect_t is None:
        raise ExtractionError("log incomplete: no ReconnectComplete")

    peak = {}
    integral = {}
    for node_id, series in log.cpu_loads.items():
        peak[node_id] = max(load for _, load in series)
        area = 0.0
        for (t0, load), (t1, _) in zip(series, series[1:]):
            area += load * (t1 - t0)
        integral[node_id] = area

    return RunMetrics(
        per_instance=per_instance,
        service_downtime_s=reconnect_t - min(freezes.values()),
        sfc_total_time_s=reconnect_t - min(starts.values()),
        peak_cpu_pct=peak,
        cpu_integral_pct_s=integral,
    )


def summarize(samples: Sequence[float]) -> SummaryStats:
    """Mean, sample std, Student-t 95% CI half-width, coefficient of variation."""
    n = len(samples)
    if n < 2:
        raise InsufficientSamplesError(f"need at least 2 samples, got {n}")
    arr = np.asarray(samples, dtype=float)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1))
    t_crit = float(_scipy_stats.t.ppf(0.975, n - 1))
    ci95 = t_crit * std / math.sqrt(n)
    cv = 0.0 if std == 0.0 else std / mean
    return SummaryStats(mean=mean, std=std, ci95=ci95, cv=cv, n=n)


# ---------------------------------------------------------------------------
# Calibration against published (instance, bandwidth) -> time observations
# ---------------------------------------------------------------------------

BANDWIDTH_FULL = None  # sentinel: no migration bandwidth limit


@dataclass(frozen=True)
class CalibrationTargets:
    """Observed downtime and total time per (instance, bandwidth) cell.

    ``cells`` maps (instance, bandwidth_bytes_per_s or None for the full
    link, metric) to seconds.
    """

    cells: Mapping[tuple[str, Optional[float], str], float]

    @property
    def instances(self) -> list[str]:
        seen: dict[str, None] = {}
        for name, _, _ in self.cells:
            seen.setdefault(name)
        return list(seen)

    @property
    def bandwidths(self) -> list[Optional[float]]:
        vals = {bw for _, bw, _ in self.cells}
        return sorted(vals, key=lambda b: math.inf if b is None else b)

    def value(self, instance: str, bandwidth: Optional[float], metric: str) -> float:
        return self.cells[(instance, bandwidth, metric)]

    def missing_cells(self) -> list[tuple[str, Optional[float], str]]:
        out = []
        for name in self.instances:
            for bw in self.bandwidths:
                for metric in METRICS:
                    if (name, bw, metric) not in self.cells:
                        out.append((name, bw, metric))
        return out


def targets_from_dict(d: Mapping) -> CalibrationTargets:
    cells: dict[tuple[str, Optional[float], str], float] = {}
    for row in d["cells"]:
        name = str(row["instance"])
        bw = row.get("bandwidth_bytes_per_s")
        bw = None if bw is None else float(bw)
        for metric in METRICS:
            if metric in row:
                cells[(name, bw, metric)] = float(row[metric])
    return CalibrationTargets(cells)


def load_targets(path: str | Path) -> CalibrationTargets:
    with open(path) as fh:
        return targets_from_dict(json.load(fh))


@dataclass(frozen=True)
class ParameterBounds:
    """Per-parameter search ranges plus the pinned dirty rates.

    Six observations per instance cannot identify seven free parameters, so
    the dirty rate is not searched continuously: each instance gets a fixed
    pin, or a short list of candidate pins tried in the coarse stage.
    """

    disk_delta_bytes: tuple[float, float] = (0.0, 1e9)
    mem_delta_bytes: tuple[float, float] = (0.0, 1e9)
    state_overhead_bytes: tuple[float, float] = (0.0, 1e8)
    blocking_fixed_s: tuple[float, float] = (1e-3, 300.0)
    nonblocking_fixed_s: tuple[float, float] = (0.0, 600.0)
    dirty_rate_pins: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    default_dirty_rate_pins: tuple[float, ...] = (1e5, 1.5e5, 2.25e5, 3e5)

    def pins_for(self, instance: str) -> tuple[float, ...]:
        return tuple(self.dirty_rate_pins.get(instance, self.default_dirty_rate_pins))


def bounds_from_dict(d: Mapping) -> ParameterBounds:
    def pair(key, default):
        v = d.get(key, default)
        return (float(v[0]), float(v[1]))

    pins = {}
    for name, v in d.get("dirty_rate_pins", {}).items():
        pins[name] = tuple(float(x) for x in (v if isinstance(v, (list, tuple)) else [v]))
    default_pins = d.get("default_dirty_rate_pins", [1e5])
    if isinstance(default_pins, (int, float)):
        default_pins = [default_pins]
    return ParameterBounds(
        disk_delta_bytes=pair("disk_delta_bytes", (0.0, 1e9)),
        mem_delta_bytes=pair("mem_delta_bytes", (0.0, 1e9)),
        state_overhead_bytes=pair("state_overhead_bytes", (0.0, 1e8)),
        blocking_fixed_s=pair("blocking_fixed_s", (1e-3, 300.0)),
        nonblocking_fixed_s=pair("nonblocking_fixed_s", (0.0, 600.0)),
        dirty_rate_pins=pins,
        default_dirty_rate_pins=tuple(float(x) for x in default_pins),
    )


def load_bounds(path: str | Path) -> ParameterBounds:
    with open(path) as fh:
        return bounds_from_dict(json.load(fh))


@dataclass(frozen=True)
class ResidualCell:
    instance: str
    bandwidth_bytes_per_s: Optional[float]
    metric: str
    target: float
    simulated: float

    @property
    def relative_error(self) -> float:
        return (self.simulated - self.target) / self.target


@dataclass(frozen=True)
class CalibrationResult:
    scenario: Scenario
    residuals: tuple[ResidualCell, ...]
    objective: float

    @property
    def max_abs_relative_error(self) -> float:
        return max(abs(c.relative_error) for c in self.residuals)

    def write_report_csv(self, path: str | Path, link_capacity: float) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance", "bandwidth", "metric", "target", "simulated",
                        "relative_error"])
            for c in self.residuals:
                bw = link_capacity if c.bandwidth_bytes_per_s is None \
                    else c.bandwidth_bytes_per_s
                w.writerow([c.instance, repr(float(bw)), c.metric, repr(c.target),
                            repr(c.simulated), repr(c.relative_error)])


# Free coordinates per instance. Only the sum oh_dump + restore is
# identifiable from the tables, so it is searched as one "blocking fixed
# time" coordinate and split on emission. The disk/pre-dump overhead split
# is searched because it decides when transfers of different instances
# overlap, which sets their effective rates.
_COORDS = ("nonblocking_fixed_s", "blocking_fixed_s", "disk_delta_bytes",
           "mem_delta_bytes", "state_overhead_bytes", "disk_overhead_share")
_SHARE_COORDS = frozenset({"disk_overhead_share"})
_BLOCKING_RESTORE_SHARE = 0.8   # restore_time share of the blocking fixed time


@dataclass
class _Params:
    nonblocking_fixed_s: float
    blocking_fixed_s: float
    disk_delta_bytes: float
    mem_delta_bytes: float
    state_overhead_bytes: float
    dirty_rate_bytes_per_s: float
    disk_overhead_share: float = 0.5

    def to_instance(self, base: InstanceSpec) -> InstanceSpec:
        overheads = dict(base.phase_overhead_s)
        overheads[Phase.DISK_COPY] = self.nonblocking_fixed_s * self.disk_overhead_share
        overheads[Phase.PRE_DUMP] = self.nonblocking_fixed_s * (1 - self.disk_overhead_share)
        overheads[Phase.DUMP] = self.blocking_fixed_s * (1 - _BLOCKING_RESTORE_SHARE)
        return replace(
            base,
            disk_delta_bytes=self.disk_delta_bytes,
            mem_delta_bytes=self.mem_delta_bytes,
            state_overhead_bytes=self.state_overhead_bytes,
            restore_time_s=self.blocking_fixed_s * _BLOCKING_RESTORE_SHARE,
            dirty_rate_bytes_per_s=self.dirty_rate_bytes_per_s,
            phase_overhead_s=overheads,
        )


class _Calibrator:
    def __init__(self, targets: CalibrationTargets, bounds: ParameterBounds,
                 base_scenario: Scenario):
        missing = targets.missing_cells()
        if missing:
            pretty = ", ".join(
                f"({n}, {'full' if b is None else b:g}, {m})" if b is not None
                else f"({n}, full, {m})" for n, b, m in missing)
            raise CalibrationError(f"targets are missing cells: {pretty}")
        names = [i.name for i in base_scenario.sfc.instances]
        unknown = [n for n in targets.instances if n not in names]
        if unknown:
            raise CalibrationError(
                f"targets name instances absent from the scenario: {unknown}")
        self.targets = targets
        self.bounds = bounds
        self.base = base_scenario
        self.order = [n for n in names if n in targets.instances]
        self.bandwidths = targets.bandwidths
        self.evaluations = 0

    # -- forward model -------------------------------------------------------

    def _scenario_with(self, params: dict[str, _Params],
                       bandwidth: Optional[float]) -> Scenario:
        instances = []
        for inst in self.base.sfc.instances:
            if inst.name in params:
                instances.append(params[inst.name].to_instance(inst))
            else:
                instances.append(inst)
        return replace(
            self.base,
            sfc=replace(self.base.sfc, instances=tuple(instances)),
            migration_bandwidth_limit_bytes_per_s=bandwidth,
            noise_sigma=0.0,
            repetitions=1,
        )

    def _simulated_cells(self, params: dict[str, _Params]) \
            -> dict[tuple[str, Optional[float], str], float]:
        out = {}
        for bw in self.bandwidths:
            scen = self._scenario_with(params, bw)
            plan = build_plan(scen.pattern, scen.sfc, scen.link,
                              predump_stop_threshold_bytes=scen.predump_stop_threshold_bytes,
                              predump_max_iters=scen.predump_max_iters)
            metrics = extract(simulate(scen, plan, rep_index=0))
            self.evaluations += 1
            for name in self.order:
                m = metrics.per_instance[name]
                out[(name, bw, DOWNTIME)] = m.downtime_s
                out[(name, bw, TOTAL_TIME)] = m.total_time_s
        return out

    def _objective(self, params: dict[str, _Params],
                   downtime_weight: float = 1.0) -> float:
        sim = self._simulated_cells(params)
        total = 0.0
        for key, target in self.targets.cells.items():
            w = downtime_weight if key[2] == DOWNTIME else 1.0
            total += w * ((sim[key] - target) / target) ** 2
        return total

    # -- search ----------------------------------------------------------------

    def _initial_params(self, name: str, dirty_pin: float) -> _Params:
        # Anchor fixed times on the fastest sweep (transfer terms vanish there)
        # and byte budgets on the slowest one.
        anchor = self.bandwidths[-1]
        d_full = self.targets.value(name, anchor, DOWNTIME)
        t_full = self.targets.value(name, anchor, TOTAL_TIME)
        low = self.bandwidths[0]
        low_rate = self.base.link.capacity_bytes_per_s if low is None else low
        d_low = self.targets.value(name, low, DOWNTIME)
        t_low = self.targets.value(name, low, TOTAL_TIME)

        blocking = self._clip("blocking_fixed_s", d_full)
        nonblocking = self._clip("nonblocking_fixed_s", max(0.0, t_full - d_full))
        budget = max(0.0, (t_low - t_full)) * low_rate / max(1, len(self.order))
        payload = max(0.0, (d_low - d_full)) * low_rate
        return _Params(
            nonblocking_fixed_s=nonblocking,
            blocking_fixed_s=blocking,
            disk_delta_bytes=self._clip("disk_delta_bytes", 0.4 * budget),
            mem_delta_bytes=self._clip("mem_delta_bytes", 0.4 * budget),
            state_overhead_bytes=self._clip("state_overhead_bytes", 0.5 * payload),
            dirty_rate_bytes_per_s=dirty_pin,
        )

    def _clip(self, coord: str, value: float) -> float:
        lo, hi = getattr(self.bounds, coord)
        return min(hi, max(lo, value))

    def _candidates(self, coord: str, current: float,
                    factors: tuple[float, ...]) -> list[float]:
        if coord in _SHARE_COORDS:
            cands = {min(1.0, max(0.0, current + (f - 1.0))) for f in factors}
            cands.update((0.0, 1.0) if max(factors) >= 2.0 else ())
            return sorted(cands)
        lo, _hi = getattr(self.bounds, coord)
        cands = {self._clip(coord, current * f) for f in factors}
        cands.add(self._clip(coord, lo))
        return sorted(cands)

    def _sweep_once(self, params: dict[str, _Params], best: float,
                    factors: tuple[float, ...],
                    coords: tuple[str, ...] = _COORDS,
                    downtime_weight: float = 1.0) -> tuple[float, bool]:
        improved = False
        for name in self.order:
            for coord in coords:
                current = getattr(params[name], coord)
                for cand in self._candidates(coord, current, factors):
                    if cand == current:
                        continue
                    setattr(params[name], coord, cand)
                    trial = self._objective(params, downtime_weight)
                    if trial < best - 1e-15:
                        best = trial
                        current = cand
                        improved = True
                    else:
                        setattr(params[name], coord, current)
        return best, improved

    def _descend(self, params: dict[str, _Params], sweeps: int) -> float:
        """Coarse multiplicative descent, then a shrinking pattern search."""
        best = self._objective(params)
        ladder = (0.25, 0.5, 0.8, 0.95, 1.05, 1.25, 2.0, 4.0)
        for _ in range(sweeps):
            best, improved = self._sweep_once(params, best, ladder)
            if not improved:
                break
        for scale in (0.1, 0.03, 0.01, 0.003, 0.001):
            factors = (1.0 + scale, 1.0 / (1.0 + scale))
            for _ in range(sweeps):
                best, improved = self._sweep_once(params, best, factors)
                if not improved:
                    break
        return best

    def _descend_totals(self, params: dict[str, _Params],
                        downtime_weight: float = 25.0) -> float:
        """Trim the total-time residuals after the downtime polish; the
        weighted objective rejects moves that would unpin the downtimes."""
        best = self._objective(params, downtime_weight)
        for scale in (0.2, 0.05, 0.01, 0.003):
            factors = (1.0 + scale, 1.0 / (1.0 + scale))
            for _ in range(8):
                best, improved = self._sweep_once(
                    params, best, factors, downtime_weight=downtime_weight)
                if not improved:
                    break
        return best

    # Downtime cells must land much tighter than the 15% ceiling because the
    # scenario's bandwidth-sweep downtime RATIOS are part of its contract;
    # the published 2 MB/s-to-full ratio leaves almost no room (1.099 vs the
    # 1.10 bound), so the fastest sweep aims a hair high, the others a hair
    # low, keeping fitted ratios on the conservative side of the observed ones.
    _DOWNTIME_WEIGHT = 8.0
    _DOWNTIME_BIAS = 0.003

    def _goal(self, name: str, bw, metric: str) -> float:
        target = self.targets.value(name, bw, metric)
        if metric != DOWNTIME:
            return target
        fastest = self.bandwidths[-1]
        return target * (1 + self._DOWNTIME_BIAS if bw == fastest
                         else 1 - self._DOWNTIME_BIAS)

    def _weighted_residuals(self, params: dict[str, _Params],
                            name: str) -> np.ndarray:
        sim = self._simulated_cells(params)
        out = []
        for bw in self.bandwidths:
            for metric in METRICS:
                goal = self._goal(name, bw, metric)
                w = self._DOWNTIME_WEIGHT if metric == DOWNTIME else 1.0
                out.append(w * (sim[(name, bw, metric)] - goal) / goal)
        return np.asarray(out)

    _GN_COORDS = ("nonblocking_fixed_s", "blocking_fixed_s", "disk_delta_bytes",
                  "mem_delta_bytes", "state_overhead_bytes", "disk_overhead_share")

    def _set_coord(self, p: _Params, coord: str, value: float) -> None:
        if coord in _SHARE_COORDS:
            setattr(p, coord, min(1.0, max(0.0, value)))
        else:
            setattr(p, coord, self._clip(coord, value))

    def _gauss_newton_instance(self, params: dict[str, _Params], name: str,
                               iters: int = 14) -> float:
        """Damped Gauss-Newton on one instance's six cells (weighted)."""
        p = params[name]
        norm = float(np.sum(self._weighted_residuals(params, name) ** 2))
        for _ in range(iters):
            r0 = self._weighted_residuals(params, name)
            if float(np.max(np.abs(r0))) < 5e-4:
                break
            cols = []
            saved = {c: getattr(p, c) for c in self._GN_COORDS}
            for coord in self._GN_COORDS:
                current = saved[coord]
                step = 0.02 if coord in _SHARE_COORDS else max(abs(current) * 0.02, 1e-3)
                self._set_coord(p, coord, current + step)
                actual = getattr(p, coord) - current
                if actual == 0.0:
                    cols.append(np.zeros_like(r0))
                else:
                    cols.append((self._weighted_residuals(params, name) - r0) / actual)
                setattr(p, coord, current)
            jac = np.column_stack(cols)
            delta, *_ = np.linalg.lstsq(jac, -r0, rcond=None)

            improved = False
            for damping in (1.0, 0.5, 0.25, 0.1):
                for coord, d in zip(self._GN_COORDS, delta):
                    current = saved[coord]
                    limit = 0.25 if coord in _SHARE_COORDS \
                        else max(abs(current) * 0.6, 1e-3)
                    self._set_coord(p, coord,
                                    current + float(np.clip(d * damping, -limit, limit)))
                trial = float(np.sum(self._weighted_residuals(params, name) ** 2))
                if trial < norm - 1e-15:
                    norm = trial
                    improved = True
                    break
                for coord in self._GN_COORDS:
                    setattr(p, coord, saved[coord])
            if not improved:
                break
        return norm

    def _refine(self, params: dict[str, _Params]) -> None:
        """Per-instance Gauss-Newton, multi-started over the memory scale
        (the byte cells admit several roots; lighter memory ships fewer
        pre-dump bytes and usually fits the totals better)."""
        threshold = self.base.predump_stop_threshold_bytes
        for _round in range(2):
            for name in self.order:
                p = params[name]
                starts = [p.mem_delta_bytes]
                starts += [p.mem_delta_bytes * f for f in (0.1, 0.01)]
                starts.append(max(threshold, 1.0))
                best_norm = math.inf
                best_state: Optional[dict] = None
                for m0 in starts:
                    state0 = dict(vars(p))
                    self._set_coord(p, "mem_delta_bytes", m0)
                    norm = self._gauss_newton_instance(params, name)
                    if norm < best_norm:
                        best_norm = norm
                        best_state = dict(vars(p))
                    for k, v in state0.items():
                        setattr(p, k, v)
                for k, v in best_state.items():
                    setattr(p, k, v)

    def fit(self, descent_sweeps: int = 12, refine_top: int = 2) -> CalibrationResult:
        # Screen the dirty-rate pin combinations cheaply, then fully refine
        # the most promising starts (the objective has distinct basins).
        screened: list[tuple[float, dict[str, _Params]]] = []
        for pins in self._pin_combinations():
            params = {name: self._initial_params(name, pins[name])
                      for name in self.order}
            self._coarse_stage(params)
            best = self._objective(params)
            for _ in range(3):
                best, improved = self._sweep_once(
                    params, best, (0.25, 0.5, 0.8, 0.95, 1.05, 1.25, 2.0, 4.0))
                if not improved:
                    break
            screened.append((best, {n: _Params(**vars(p)) for n, p in params.items()}))
        screened.sort(key=lambda pair: pair[0])

        best_params: Optional[dict[str, _Params]] = None
        best_obj = math.inf
        for _, start in screened[:max(1, refine_top)]:
            self._descend(start, sweeps=descent_sweeps)
            self._refine(start)
            obj = self._objective(start, downtime_weight=self._DOWNTIME_WEIGHT ** 2)
            if obj < best_obj:
                best_obj = obj
                best_params = start
        assert best_params is not None
        best_obj = self._objective(best_params)

        sim = self._simulated_cells(best_params)
        residuals = tuple(
            ResidualCell(name, bw, metric,
                         target=self.targets.value(name, bw, metric),
                         simulated=sim[(name, bw, metric)])
            for name in self.order
            for bw in self.bandwidths
            for metric in METRICS
        )
        scenario = self._scenario_with(best_params, None)
        scenario = replace(scenario,
                           repetitions=self.base.repetitions,
                           noise_sigma=self.base.noise_sigma)
        return CalibrationResult(scenario=scenario, residuals=residuals,
                                 objective=best_obj)

    def _pin_combinations(self) -> list[dict[str, float]]:
        combos: list[dict[str, float]] = [{}]
        for name in self.order:
            expanded = []
            for combo in combos:
                for pin in self.bounds.pins_for(name):
                    nxt = dict(combo)
                    nxt[name] = pin
                    expanded.append(nxt)
            combos = expanded
        return combos

    def _coarse_stage(self, params: dict[str, _Params]) -> None:
        """Short grid over the byte payloads, instance by instance."""
        for name in self.order:
            base_m = params[name].mem_delta_bytes or 1e6
            base_s = params[name].state_overhead_bytes or 1e5
            grid_m = [self._clip("mem_delta_bytes", base_m * f)
                      for f in (0.01, 0.1, 0.5, 1.0, 2.0, 10.0)]
            grid_s = [self._clip("state_overhead_bytes", base_s * f)
                      for f in (0.01, 0.1, 0.5, 1.0, 2.0)]
            best = self._objective(params)
            best_pair = (params[name].mem_delta_bytes,
                         params[name].state_overhead_bytes)
            for m in grid_m:
                for s in grid_s:
                    params[name].mem_delta_bytes = m
                    params[name].state_overhead_bytes = s
                    trial = self._objective(params)
                    if trial < best:
                        best = trial
                        best_pair = (m, s)
            params[name].mem_delta_bytes = best_pair[0]
            params[name].state_overhead_bytes = best_pair[1]


def calibrate(targets: CalibrationTargets, bounds: ParameterBounds,
              base_scenario: Scenario, descent_sweeps: int = 14) -> CalibrationResult:
    """Fit transfer payloads and fixed times so noise-free simulation matches
    the observed cells; minimizes the sum of squared relative errors by a
    coarse payload grid refined with coordinate descent. Dirty rates stay
    pinned (see ParameterBounds). Reports per-cell residuals."""
    return _Calibrator(targets, bounds, base_scenario).fit(descent_sweeps)
