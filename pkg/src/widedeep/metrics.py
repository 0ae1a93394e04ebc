"""Aggregate traces into accuracy / turns / calls-per-turn / cost reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .scheduler import SchedulePolicy, ScheduleDirective, compliance, schedule
from .trace import AgentTrace, trace_stats

SUMMARY_COLUMNS = ("cell", "accuracy", "avg_turns", "avg_calls_per_turn", "total_cost_units", "wall_clock")


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    prompt_token_rate: float = 0.0
    completion_token_rate: float = 0.0
    tool_call_rates: dict[str, float] = field(default_factory=dict)
    tool_unit_rate: float = 0.0  # price per observation cost unit (search credits, summarizer tokens)

    def __post_init__(self) -> None:
        rates = [self.prompt_token_rate, self.completion_token_rate, self.tool_unit_rate,
                 *self.tool_call_rates.values()]
        if any(r < 0 for r in rates):
            raise ValueError("cost rates must be >= 0")


@dataclass
class RunMetrics:
    n: int
    completed: int
    graded: int
    accuracy: float
    avg_turns: float
    avg_calls_per_turn: float
    tool_steps: int
    tool_calls: int
    prompt_tokens: int
    completion_tokens: int
    tool_cost_units: float
    total_cost: float
    wall_clock: float
    compliance_violations: int
    expected: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _step_violations(trace: AgentTrace) -> int:
    bad = 0
    for step in trace.steps:
        if step.is_final or not step.directive:
            continue
        d = ScheduleDirective(step.directive["min_calls"], step.directive["max_calls"], step.directive["mode"])
        ok, _ = compliance(d, len(step.calls))
        bad += not ok
    return bad


def aggregate(
    traces: Sequence[AgentTrace],
    grades: Sequence[bool | None],
    cost: CostModel | None = None,
    *,
    expected: int | None = None,
) -> RunMetrics:
    """Summarize one cell.

    Accuracy is over graded traces (``None`` grades are skipped; hard
    failures should be passed as ``False``). Turn averages count only
    finalized traces, answer turn included.
    """
    if len(traces) != len(grades):
        raise LengthMismatch(f"{len(traces)} traces but {len(grades)} grades")
    if not traces:
        raise LengthMismatch("aggregate needs at least one trace")
    cost = cost or CostModel()
    graded = [g for g in grades if g is not None]
    finished = [t for t in traces if t.finalized]
    turns = [trace_stats(t)["turns"] for t in finished]
    call_counts = [len(s.calls) for t in traces for s in t.steps if not s.is_final]
    prompt = sum(s.token_usage.get("prompt_tokens", 0) for t in traces for s in t.steps)
    completion = sum(s.token_usage.get("completion_tokens", 0) for t in traces for s in t.steps)
    units = sum(o.cost_units for t in traces for s in t.steps for o in s.observations)
    per_call = sum(cost.tool_call_rates.get(c.tool_name, 0.0) for t in traces for s in t.steps for c in s.calls)
    total = (prompt * cost.prompt_token_rate + completion * cost.completion_token_rate
             + per_call + units * cost.tool_unit_rate)
    return RunMetrics(
        n=len(traces),
        completed=len(finished),
        graded=len(graded),
        accuracy=sum(graded) / len(graded) if graded else math.nan,
        avg_turns=sum(turns) / len(turns) if turns else math.nan,
        avg_calls_per_turn=sum(call_counts) / len(call_counts) if call_counts else 0.0,
        tool_steps=len(call_counts),
        tool_calls=sum(call_counts),
        prompt_tokens=prompt,
        completion_tokens=completion,
        tool_cost_units=units,
        total_cost=total,
        wall_clock=sum(t.wall_clock for t in traces) / len(traces),
        compliance_violations=sum(_step_violations(t) for t in traces),
        expected=expected,
    )


def empty_metrics(expected: int) -> RunMetrics:
    """Metrics for a cell where no task produced a trace."""
    return RunMetrics(n=0, completed=0, graded=0, accuracy=math.nan, avg_turns=math.nan,
                      avg_calls_per_turn=0.0, tool_steps=0, tool_calls=0, prompt_tokens=0,
                      completion_tokens=0, tool_cost_units=0.0, total_cost=0.0, wall_clock=0.0,
                      compliance_violations=0, expected=expected)


def calls_per_turn_series(traces: Sequence[AgentTrace], policy: SchedulePolicy) -> list[dict[str, Any]]:
    """Mean call count at each step index over the traces still calling tools there."""
    if not traces:
        raise ValueError("calls_per_turn_series needs at least one trace")
    horizon = max(len(t.steps) for t in traces)
    series = []
    for t in range(1, horizon + 1):
        counts = [len(tr.steps[t - 1].calls) for tr in traces
                  if len(tr.steps) >= t and not tr.steps[t - 1].is_final]
        if not counts:
            continue
        d = schedule(policy, t)
        series.append({
            "t": t,
            "mean_calls": sum(counts) / len(counts),
            "active": len(counts),
            "specified": d.min_calls,
            "window": [d.min_calls, d.max_calls],
        })
    return series


def _fmt_number(x: float) -> str:
    if math.isnan(x):
        return "-"
    if abs(x - round(x)) < 1e-9:
        return str(int(round(x)))
    return f"{x:.1f}"


def format_cell(m: RunMetrics) -> str:
    """Grid cell text: ``"68 (23.8)"`` is accuracy percent and mean turns."""
    acc = _fmt_number(m.accuracy * 100) if not math.isnan(m.accuracy) else "-"
    turns = "-" if math.isnan(m.avg_turns) else f"{m.avg_turns:.1f}"
    text = f"{acc} ({turns})"
    total = m.expected if m.expected is not None else m.n
    if m.completed < total:
        text += f" [{m.completed}/{total}]"
    return text


@dataclass
class CellSummary:
    cell_id: str
    policy: str
    max_steps: int | None
    metrics: RunMetrics


def _tsv(rows: list[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def summary_rows(cells: Sequence[CellSummary]) -> list[list[str]]:
    rows = [list(SUMMARY_COLUMNS)]
    for c in cells:
        m = c.metrics
        rows.append([
            c.cell_id,
            "-" if math.isnan(m.accuracy) else f"{m.accuracy:.4f}",
            "-" if math.isnan(m.avg_turns) else f"{m.avg_turns:.2f}",
            f"{m.avg_calls_per_turn:.2f}",
            f"{m.total_cost:.4f}",
            f"{m.wall_clock:.3f}",
        ])
    return rows


def grid_rows(cells: Sequence[CellSummary]) -> list[list[str]]:
    """Rows = scheduler policy, columns = max-step limit, cells = ``format_cell``."""
    policies = list(dict.fromkeys(c.policy for c in cells))
    limits = sorted({c.max_steps for c in cells}, key=lambda v: (v is None, v or 0))
    lookup = {(c.policy, c.max_steps): c for c in cells}
    header = [""] + [f"{s} iters" if s is not None else "task budget" for s in limits]
    rows = [header]
    for p in policies:
        row = [p]
        for s in limits:
            cell = lookup.get((p, s))
            row.append(format_cell(cell.metrics) if cell else "-")
        rows.append(row)
    return rows


def emit_summary(cells: Sequence[CellSummary], out_dir: str | Path | None = None) -> dict[str, Any]:
    """Render ``summary.table`` (per-cell columns), ``summary.grid`` (policy x step-limit layout) and ``summary.json``."""
    if not cells:
        raise ValueError("emit_summary needs at least one cell")
    table = _tsv(summary_rows(cells))
    grid = _tsv(grid_rows(cells))
    export = {
        "columns": list(SUMMARY_COLUMNS),
        "cells": [
            {"cell": c.cell_id, "policy": c.policy, "max_steps": c.max_steps,
             "display": format_cell(c.metrics), **c.metrics.to_dict()}
            for c in cells
        ],
    }
    out: dict[str, Any] = {"table": table, "grid": grid, "export": export}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "summary.table").write_text(table, encoding="utf-8")
        (out_dir / "summary.grid").write_text(grid, encoding="utf-8")
        # NaN is not valid JSON; export it as null.
        clean = json.loads(json.dumps(export), parse_constant=lambda _: None)
        (out_dir / "summary.json").write_text(json.dumps(clean, indent=2), encoding="utf-8")
        out.update(table_path=out_dir / "summary.table", grid_path=out_dir / "summary.grid",
                   json_path=out_dir / "summary.json")
    return out
