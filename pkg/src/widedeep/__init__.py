"""Wide-and-deep research agent runtime with a deterministic simulation bench."""

from .executor import HardFailure, RunConfig, TaskSpec, run, sweep
from .scheduler import SchedulePolicy, ScheduleDirective, compliance, schedule
from .trace import AgentTrace, FinalAnswer, Observation, Query, Step, ToolCall

__all__ = [
    "AgentTrace",
    "FinalAnswer",
    "HardFailure",
    "Observation",
    "Query",
    "RunConfig",
    "SchedulePolicy",
    "ScheduleDirective",
    "Step",
    "TaskSpec",
    "ToolCall",
    "compliance",
    "run",
    "schedule",
    "sweep",
]

__version__ = "0.1.0"
