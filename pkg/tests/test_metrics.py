from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from strategies import build_trace, traces
from widedeep import metrics as mx
from widedeep.scheduler import SchedulePolicy
from widedeep.trace import AgentTrace, Query, trace_stats


def table1_cell(n=25, correct=17, turns_total=595):
    base, extra = divmod(turns_total, n)
    turns = [base + (1 if i < extra else 0) for i in range(n)]
    traces_ = [build_trace(f"t{i}", t) for i, t in enumerate(turns)]
    grades = [i < correct for i in range(n)]
    return traces_, grades


def test_format_cell_reconstruction():
    traces_, grades = table1_cell()
    m = mx.aggregate(traces_, grades)
    assert m.accuracy == pytest.approx(0.68) and m.avg_turns == pytest.approx(23.8)
    assert mx.format_cell(m) == "68 (23.8)"


def test_format_cell_variants():
    traces_, grades = table1_cell(n=8, correct=5, turns_total=40)
    assert mx.format_cell(mx.aggregate(traces_, grades)) == "62.5 (5.0)"
    assert mx.format_cell(mx.aggregate(traces_, grades, expected=10)) == "62.5 (5.0) [8/10]"
    assert mx.format_cell(mx.aggregate(traces_, [None] * 8)) == "- (5.0)"


def test_aggregate_counts():
    ts = [build_trace("a", 3, 2, cost=0.5, usage=(10, 1)), build_trace("b", 2, 4, cost=0.5, usage=(10, 1))]
    cost = mx.CostModel(prompt_token_rate=0.01, completion_token_rate=0.1, tool_call_rates={"search": 2.0},
                        tool_unit_rate=1.0)
    m = mx.aggregate(ts, [True, None], cost)
    assert (m.n, m.completed, m.graded, m.accuracy) == (2, 2, 1, 1.0)
    assert m.avg_turns == 2.5
    assert m.tool_steps == 3 and m.tool_calls == 8 and m.avg_calls_per_turn == pytest.approx(8 / 3)
    assert m.prompt_tokens == 50 and m.completion_tokens == 5
    assert m.tool_cost_units == 4.0
    assert m.total_cost == pytest.approx(50 * 0.01 + 5 * 0.1 + 8 * 2.0 + 4.0)
    assert m.compliance_violations == 0


def test_unfinished_traces_count_as_failures():
    done = build_trace("a", 3)
    stuck = AgentTrace(Query("Task: b?", "b?", "b"), failure="ModelUnavailable")
    m = mx.aggregate([done, stuck], [True, False])
    assert m.accuracy == 0.5 and m.completed == 1 and m.avg_turns == 3


def test_aggregate_validation():
    with pytest.raises(mx.LengthMismatch):
        mx.aggregate([build_trace("a", 2)], [True, False])
    with pytest.raises(mx.LengthMismatch):
        mx.aggregate([], [])
    with pytest.raises(ValueError):
        mx.CostModel(prompt_token_rate=-1)


def test_compliance_violations_counted():
    t = build_trace("a", 3, 2)
    t.steps[0].directive = {"min_calls": 3, "max_calls": 4, "mode": "fixed_window"}
    assert mx.aggregate([t], [True]).compliance_violations == 1


@settings(max_examples=60, deadline=None)
@given(st.lists(traces(), min_size=1, max_size=5))
def test_aggregate_matches_recount(ts):
    m = mx.aggregate(ts, [None] * len(ts))
    stats = [trace_stats(t) for t in ts]
    assert m.tool_cost_units == pytest.approx(sum(s["total_cost_units"] for s in stats))
    assert m.prompt_tokens + m.completion_tokens == sum(s["total_tokens"] for s in stats)
    assert m.avg_turns == pytest.approx(sum(s["turns"] for s in stats) / len(ts))
    # Cost is additive over cells: aggregating a union equals the sum of parts.
    cost = mx.CostModel(0.001, 0.002, {"search": 0.5}, 0.25)
    whole = mx.aggregate(ts, [None] * len(ts), cost).total_cost
    parts = sum(mx.aggregate([t], [None], cost).total_cost for t in ts)
    assert whole == pytest.approx(parts)


def test_calls_per_turn_series():
    ts = [build_trace("a", 4, 3), build_trace("b", 2, 2)]
    series = mx.calls_per_turn_series(ts, SchedulePolicy("descending"))
    assert [(s["t"], s["mean_calls"], s["active"]) for s in series] == [(1, 2.5, 2), (2, 3.0, 1), (3, 3.0, 1)]
    assert series[0]["specified"] == 3 and series[0]["window"] == [3, 4]


def test_emit_summary(tmp_path):
    cells = []
    for policy, k in (("constant:1", 1), ("constant:3", 3)):
        for limit in (10, 100):
            traces_, grades = table1_cell(n=5, correct=k + (limit == 100), turns_total=5 * (limit // 10))
            cells.append(mx.CellSummary(f"{policy}@{limit}", policy, limit, mx.aggregate(traces_, grades)))
    out = mx.emit_summary(cells, tmp_path)
    table = (tmp_path / "summary.table").read_text().splitlines()
    assert table[0].split("\t") == list(mx.SUMMARY_COLUMNS)
    assert len(table) == 5
    grid = [r.split("\t") for r in (tmp_path / "summary.grid").read_text().splitlines()]
    assert grid[0] == ["", "10 iters", "100 iters"]
    assert grid[1] == ["constant:1", "20 (1.0)", "40 (10.0)"]
    assert grid[2] == ["constant:3", "60 (1.0)", "80 (10.0)"]
    export = json.loads((tmp_path / "summary.json").read_text())
    assert export["cells"][0]["display"] == "20 (1.0)"
    assert out["table_path"] == tmp_path / "summary.table"


def test_emit_summary_nan_becomes_null(tmp_path):
    cell = mx.CellSummary("x", "constant:1", 5, mx.aggregate([build_trace("a", 2)], [None]))
    mx.emit_summary([cell], tmp_path)
    assert json.loads((tmp_path / "summary.json").read_text())["cells"][0]["accuracy"] is None
    empty = mx.empty_metrics(3)
    assert math.isnan(empty.accuracy) and mx.format_cell(empty) == "- (-) [0/3]"
