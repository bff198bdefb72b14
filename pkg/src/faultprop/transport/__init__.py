"""Non-blocking point-to-point transport and its deterministic simulator."""

from .explorer import ExplorationResult, Explorer, dependent, explore
from .faults import FaultEvent, FaultParseError, FaultScript, MessagePattern, parse_faults
from .simulator import (
    Endpoint,
    RunResult,
    SimulationCrash,
    Simulator,
    StepInfo,
    run,
    seeded_chooser,
)
from .trace import Trace, TraceRecord
from .types import (
    ANY_SOURCE,
    PROC_FAILED,
    PROC_FAILED_PENDING,
    TRUNCATION,
    CollectiveCancelError,
    Envelope,
    Request,
    RequestKind,
    RequestState,
    TransportUsageError,
)

__all__ = [
    "ANY_SOURCE", "PROC_FAILED", "PROC_FAILED_PENDING", "TRUNCATION",
    "CollectiveCancelError", "Endpoint", "Envelope", "ExplorationResult", "Explorer",
    "FaultEvent", "FaultParseError", "FaultScript", "MessagePattern", "Request",
    "RequestKind", "RequestState", "RunResult", "SimulationCrash", "Simulator",
    "StepInfo", "Trace", "TraceRecord", "TransportUsageError", "dependent", "explore",
    "parse_faults", "run", "seeded_chooser",
]
