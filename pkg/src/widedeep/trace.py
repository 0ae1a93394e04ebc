"""Agent trace data model and its JSON persistence.

A trace is the ordered record ``<X, U_1, (R_1, A_1, O_1), ..., U_T, (R_T, Y)>``:
the rendered query, then one :class:`Step` per model turn. Tool-calling
steps carry a non-empty call set and the index-aligned observations; the
last step carries no calls and the trace's :class:`FinalAnswer` is attached
alongside it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

OBSERVATION_STATUSES = ("ok", "tool_error", "timeout")


class TraceError(Exception):
    """Base class for trace invariant violations."""


class IndexGap(TraceError):
    pass


class AlreadyFinalized(TraceError):
    pass


class NotFinalized(TraceError):
    pass


class InvalidStep(TraceError):
    pass


@dataclass(frozen=True)
class Query:
    system_text: str
    question: str
    task_id: str

    def __post_init__(self) -> None:
        if not self.system_text:
            raise TraceError("system_text must be non-empty")
        if self.question not in self.system_text:
            raise TraceError("system_text must embed the question verbatim")


@dataclass(frozen=True)
class ToolCall:
    call_id: str
    tool_name: str
    arguments: str  # serialized JSON, as on the wire


@dataclass(frozen=True)
class Observation:
    call_id: str
    status: str
    content: str
    latency: float = 0.0
    cost_units: float = 0.0

    def __post_init__(self) -> None:
        if self.status not in OBSERVATION_STATUSES:
            raise TraceError(f"unknown observation status {self.status!r}")
        if self.latency < 0 or self.cost_units < 0:
            raise TraceError("latency and cost_units must be nonnegative")


@dataclass(frozen=True)
class FinalAnswer:
    thought: str
    answer: str
    forced: bool = False


@dataclass
class Step:
    index: int
    reasoning: str = ""
    calls: list[ToolCall] = field(default_factory=list)
    observations: list[Observation] = field(default_factory=list)
    injected_user_message: str | None = None
    token_usage: dict[str, int] = field(
        default_factory=lambda: {"prompt_tokens": 0, "completion_tokens": 0}
    )
    # Scheduled window in force for this step, e.g. {"min_calls": 3, "max_calls": 4, "mode": "fixed_window"}.
    directive: dict[str, Any] | None = None
    reprompts: int = 0

    @property
    def is_final(self) -> bool:
        return not self.calls


@dataclass
class AgentTrace:
    query: Query
    steps: list[Step] = field(default_factory=list)
    final: FinalAnswer | None = None
    config_fingerprint: str = ""
    failure: str | None = None
    wall_clock: float = 0.0

    @property
    def task_id(self) -> str:
        return self.query.task_id

    @property
    def finalized(self) -> bool:
        return self.final is not None


def _check_step(trace: AgentTrace, step: Step) -> None:
    expected = len(trace.steps) + 1
    if step.index != expected:
        raise IndexGap(f"expected step index {expected}, got {step.index}")
    if len(step.observations) != len(step.calls):
        raise InvalidStep(
            f"step {step.index}: {len(step.calls)} calls but {len(step.observations)} observations"
        )
    seen = {c.call_id for s in trace.steps for c in s.calls}
    for call, obs in zip(step.calls, step.observations):
        if call.call_id in seen:
            raise InvalidStep(f"duplicate call_id {call.call_id!r}")
        seen.add(call.call_id)
        if obs.call_id != call.call_id:
            raise InvalidStep(
                f"observation {obs.call_id!r} does not pair with call {call.call_id!r}"
            )


def append_step(trace: AgentTrace, step: Step) -> AgentTrace:
    """Append a tool-calling step. The trace is mutated and returned."""
    if trace.finalized:
        raise AlreadyFinalized(f"trace {trace.task_id} already has a final answer")
    if step.is_final:
        raise InvalidStep("non-final steps need at least one tool call; use finalize()")
    _check_step(trace, step)
    trace.steps.append(step)
    return trace


def finalize(trace: AgentTrace, step: Step, final: FinalAnswer) -> AgentTrace:
    """Append the answer step (no calls) and attach ``final``."""
    if trace.finalized:
        raise AlreadyFinalized(f"trace {trace.task_id} already has a final answer")
    if not step.is_final:
        raise InvalidStep("the final step must not carry tool calls")
    if not final.answer:
        raise InvalidStep("final answer must be non-empty")
    _check_step(trace, step)
    trace.steps.append(step)
    trace.final = final
    return trace


def trace_stats(trace: AgentTrace) -> dict[str, Any]:
    if not trace.finalized:
        raise NotFinalized(f"trace {trace.task_id} has no final answer")
    prompt = sum(s.token_usage.get("prompt_tokens", 0) for s in trace.steps)
    completion = sum(s.token_usage.get("completion_tokens", 0) for s in trace.steps)
    return {
        "turns": len(trace.steps),
        "calls_per_turn": [len(s.calls) for s in trace.steps if not s.is_final],
        "total_tokens": prompt + completion,
        "prompt_tokens": prompt,
        "completion_tokens": completion,
        "total_cost_units": sum(o.cost_units for s in trace.steps for o in s.observations),
    }


# -- serialization -----------------------------------------------------------


def trace_to_dict(trace: AgentTrace) -> dict[str, Any]:
    return {
        "task_id": trace.task_id,
        "config_fingerprint": trace.config_fingerprint,
        "query": {
            "system_text": trace.query.system_text,
            "question": trace.query.question,
            "task_id": trace.query.task_id,
        },
        "steps": [
            {
                "index": s.index,
                "injected_user_message": s.injected_user_message,
                "reasoning": s.reasoning,
                "calls": [
                    {"call_id": c.call_id, "tool_name": c.tool_name, "arguments": c.arguments}
                    for c in s.calls
                ],
                "observations": [
                    {
                        "call_id": o.call_id,
                        "status": o.status,
                        "content": o.content,
                        "latency": o.latency,
                        "cost_units": o.cost_units,
                    }
                    for o in s.observations
                ],
                "token_usage": dict(s.token_usage),
                "directive": s.directive,
                "reprompts": s.reprompts,
            }
            for s in trace.steps
        ],
        "final": None
        if trace.final is None
        else {
            "thought": trace.final.thought,
            "answer": trace.final.answer,
            "forced": trace.final.forced,
        },
        "failure": trace.failure,
        "wall_clock": trace.wall_clock,
    }


def trace_from_dict(data: dict[str, Any]) -> AgentTrace:
    q = data["query"]
    trace = AgentTrace(
        query=Query(q["system_text"], q["question"], q["task_id"]),
        config_fingerprint=data.get("config_fingerprint", ""),
        failure=data.get("failure"),
        wall_clock=data.get("wall_clock", 0.0),
    )
    raw_steps = data.get("steps", [])
    final = data.get("final")
    for i, raw in enumerate(raw_steps):
        step = Step(
            index=raw["index"],
            reasoning=raw.get("reasoning", ""),
            calls=[ToolCall(**c) for c in raw.get("calls", [])],
            observations=[Observation(**o) for o in raw.get("observations", [])],
            injected_user_message=raw.get("injected_user_message"),
            token_usage=dict(raw.get("token_usage", {})),
            directive=raw.get("directive"),
            reprompts=raw.get("reprompts", 0),
        )
        last = i == len(raw_steps) - 1
        if last and final is not None:
            finalize(trace, step, FinalAnswer(**final))
        else:
            append_step(trace, step)
    if final is not None and trace.final is None:
        raise TraceError("final answer present but no final step")
    return trace


def serialize_trace(trace: AgentTrace) -> str:
    # One JSON document on one line, so a .trace file is also valid JSON Lines.
    return json.dumps(trace_to_dict(trace), ensure_ascii=False, separators=(",", ":"))


def deserialize_trace(text: str) -> AgentTrace:
    return trace_from_dict(json.loads(text))


def save_trace(trace: AgentTrace, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(serialize_trace(trace) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def load_trace(path: str | Path) -> AgentTrace:
    return deserialize_trace(Path(path).read_text(encoding="utf-8"))
