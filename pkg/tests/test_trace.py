from __future__ import annotations

import json

import pytest
from hypothesis import given, settings

from strategies import traces
from widedeep.trace import (
    AlreadyFinalized, FinalAnswer, IndexGap, InvalidStep, NotFinalized, Observation, Query, Step, ToolCall,
    AgentTrace, TraceError, append_step, deserialize_trace, finalize, load_trace, save_trace, serialize_trace,
    trace_stats,
)


def _query():
    return Query("Task: what is 2+2?", "what is 2+2?", "t1")


def _tool_step(index, *ids, usage=(10, 5), cost=1.0):
    calls = [ToolCall(i, "search", '{"query": "x"}') for i in ids]
    obs = [Observation(i, "ok", "result", cost_units=cost) for i in ids]
    return Step(index, "thinking", calls, obs, "U", {"prompt_tokens": usage[0], "completion_tokens": usage[1]})


def test_query_requires_question_in_system_text():
    with pytest.raises(TraceError):
        Query("unrelated", "question", "t")
    with pytest.raises(TraceError):
        Query("", "", "t")


def test_observation_rejects_bad_status_and_negative_values():
    with pytest.raises(TraceError):
        Observation("a", "weird", "")
    with pytest.raises(TraceError):
        Observation("a", "ok", "", latency=-1)
    with pytest.raises(TraceError):
        Observation("a", "ok", "", cost_units=-0.5)


def test_append_and_finalize_happy_path():
    trace = AgentTrace(_query())
    append_step(trace, _tool_step(1, "a", "b"))
    append_step(trace, _tool_step(2, "c"))
    finalize(trace, Step(3, "done"), FinalAnswer("t", "4"))
    stats = trace_stats(trace)
    assert stats["turns"] == 3
    assert stats["calls_per_turn"] == [2, 1]
    assert stats["prompt_tokens"] == 20
    assert stats["completion_tokens"] == 10
    assert stats["total_tokens"] == 30
    assert stats["total_cost_units"] == 3.0


def test_index_gap_rejected():
    trace = AgentTrace(_query())
    with pytest.raises(IndexGap):
        append_step(trace, _tool_step(2, "a"))


def test_unpaired_observations_rejected():
    trace = AgentTrace(_query())
    step = _tool_step(1, "a", "b")
    step.observations = step.observations[:1]
    with pytest.raises(InvalidStep):
        append_step(trace, step)
    step = _tool_step(1, "a", "b")
    step.observations = list(reversed(step.observations))
    with pytest.raises(InvalidStep):
        append_step(trace, step)


def test_duplicate_call_ids_across_steps_rejected():
    trace = AgentTrace(_query())
    append_step(trace, _tool_step(1, "a"))
    with pytest.raises(InvalidStep):
        append_step(trace, _tool_step(2, "a"))


def test_final_step_rules():
    trace = AgentTrace(_query())
    with pytest.raises(InvalidStep):
        append_step(trace, Step(1))
    with pytest.raises(InvalidStep):
        finalize(trace, _tool_step(1, "a"), FinalAnswer("t", "x"))
    with pytest.raises(InvalidStep):
        finalize(trace, Step(1), FinalAnswer("t", ""))
    finalize(trace, Step(1), FinalAnswer("t", "x"))
    with pytest.raises(AlreadyFinalized):
        append_step(trace, _tool_step(2, "b"))
    with pytest.raises(AlreadyFinalized):
        finalize(trace, Step(2), FinalAnswer("t", "y"))


def test_stats_requires_final():
    with pytest.raises(NotFinalized):
        trace_stats(AgentTrace(_query()))


def test_serialized_form_is_one_json_line():
    trace = AgentTrace(_query())
    append_step(trace, _tool_step(1, "a"))
    finalize(trace, Step(2), FinalAnswer("t", "ünïcode"))
    text = serialize_trace(trace)
    assert "\n" not in text
    data = json.loads(text)
    assert set(data) == {"task_id", "config_fingerprint", "query", "steps", "final", "failure", "wall_clock"}
    assert "ünïcode" in text


def test_save_load(tmp_path):
    trace = AgentTrace(_query())
    append_step(trace, _tool_step(1, "a"))
    finalize(trace, Step(2), FinalAnswer("t", "4", forced=True))
    path = save_trace(trace, tmp_path / "sub" / "t1.trace")
    assert path.read_text().endswith("\n")
    again = load_trace(path)
    assert again == trace
    assert not list(tmp_path.rglob("*.tmp"))


def test_loader_revalidates():
    trace = AgentTrace(_query())
    append_step(trace, _tool_step(1, "a"))
    finalize(trace, Step(2), FinalAnswer("t", "4"))
    data = json.loads(serialize_trace(trace))
    data["steps"][1]["index"] = 5
    with pytest.raises(IndexGap):
        deserialize_trace(json.dumps(data))


@settings(max_examples=150, deadline=None)
@given(traces(finalized=True))
def test_roundtrip_property(trace):
    text = serialize_trace(trace)
    again = deserialize_trace(text)
    assert again == trace
    assert serialize_trace(again) == text


@settings(max_examples=50, deadline=None)
@given(traces(finalized=False))
def test_roundtrip_unfinished(trace):
    assert deserialize_trace(serialize_trace(trace)) == trace


@settings(max_examples=100, deadline=None)
@given(traces())
def test_cost_additivity(trace):
    # Total cost is the sum over steps of per-step observation cost.
    per_step = [sum(o.cost_units for o in s.observations) for s in trace.steps]
    assert trace_stats(trace)["total_cost_units"] == pytest.approx(sum(per_step))
