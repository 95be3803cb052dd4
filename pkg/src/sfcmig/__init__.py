"""Discrete-event simulator of service function chain live migration."""

from .model import (
    InstanceSpec,
    InterMecLink,
    MecNode,
    PatternBase,
    PatternKind,
    Phase,
    Scenario,
    SfcSpec,
    load_scenario,
    parse_pattern_base,
    perturb,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
    validate_scenario,
)
from .patterns import (
    ReservationRegistry,
    Task,
    TaskGraph,
    build_plan,
    compute_reservation,
    export_task_graph,
)
from .engine import (
    Event,
    EventKind,
    EventLog,
    LinkState,
    SimulationError,
    InvalidRateError,
    Transfer,
    accumulate_dirty,
    allocate_shares,
    cpu_series,
    phase_duration,
    predump_schedule,
    simulate,
)
from .metrics import (
    CalibrationResult,
    CalibrationTargets,
    ExtractionError,
    InstanceMetrics,
    InsufficientSamplesError,
    ParameterBounds,
    RunMetrics,
    SummaryStats,
    calibrate,
    extract,
    load_bounds,
    load_targets,
    summarize,
)

__version__ = "0.1.0"
