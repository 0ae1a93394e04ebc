from __future__ import annotations

import json
import time

import httpx
import pytest
from hypothesis import given, settings, strategies as st

from widedeep import toolkit as tk
from widedeep.trace import ToolCall


def call(cid, name="sleep", **args):
    return ToolCall(cid, name, json.dumps(args))


def sleep_registry(**kw):
    reg = tk.ToolRegistry()
    reg.register(tk.sleep_tool(**kw))
    return reg


# -- registry / dispatch -------------------------------------------------------

def test_registry_exposure_and_schemas():
    reg = tk.ToolRegistry()
    reg.register(tk.sleep_tool("a"))
    reg.register(tk.sleep_tool("b"))
    with pytest.raises(ValueError):
        reg.register(tk.sleep_tool("a"))
    assert reg.exposed == ["a", "b"]
    only_b = reg.expose(["b"])
    assert only_b.exposed == ["b"]
    assert [s["function"]["name"] for s in only_b.schemas()] == ["b"]
    assert only_b.schemas()[0]["type"] == "function"
    with pytest.raises(ValueError):
        reg.expose(["c"])


def test_results_are_index_aligned():
    reg = sleep_registry()
    calls = [call(f"c{i}", seconds=0.05 * (5 - i), echo=str(i)) for i in range(5)]
    obs = tk.execute_parallel(reg, calls)
    assert [o.call_id for o in obs] == [c.call_id for c in calls]
    assert [o.content for o in obs] == [str(i) for i in range(5)]
    assert all(o.status == "ok" for o in obs)


def test_failure_is_isolated():
    obs = tk.execute_parallel(sleep_registry(), [call("a", echo="x"), call("b", fail=True, echo="y"), call("c")])
    assert [o.status for o in obs] == ["ok", "tool_error", "ok"]
    assert "injected failure" in obs[1].content


def test_bad_arguments_become_tool_errors():
    reg = sleep_registry()
    obs = tk.execute_parallel(reg, [
        ToolCall("a", "sleep", "{not json"),
        ToolCall("b", "sleep", '{"seconds": "soon"}'),
        ToolCall("c", "sleep", "[1]"),
        ToolCall("d", "sleep", ""),
    ])
    assert [o.status for o in obs] == ["tool_error", "tool_error", "tool_error", "ok"]


def test_unknown_and_unexposed_tools():
    reg = tk.ToolRegistry()
    reg.register(tk.sleep_tool("a"))
    reg.register(tk.sleep_tool("python"))
    reg = reg.expose(["a"])
    obs = tk.execute_parallel(reg, [call("1", "python"), call("2", "nope"), call("3", "a")])
    assert obs[0].status == "tool_error" and "not exposed" in obs[0].content and "available tools: a" in obs[0].content
    assert obs[1].status == "tool_error" and "not registered" in obs[1].content
    assert obs[2].status == "ok"


def test_timeout_does_not_block_siblings():
    reg = sleep_registry(timeout=0.3)
    t0 = time.monotonic()
    obs = tk.execute_parallel(reg, [call("slow", seconds=2.0), call("fast", seconds=0.05)])
    elapsed = time.monotonic() - t0
    assert [o.status for o in obs] == ["timeout", "ok"]
    assert obs[0].latency == pytest.approx(0.3)
    assert elapsed < 1.0


def test_parallel_latency_is_max_not_sum():
    reg = sleep_registry()
    for _ in range(3):
        t0 = time.monotonic()
        obs = tk.execute_parallel(reg, [call(f"c{i}", seconds=0.2) for i in range(8)])
        elapsed = time.monotonic() - t0
        assert elapsed < 0.45
        assert all(0.19 <= o.latency < 0.45 for o in obs)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        tk.execute_parallel(sleep_registry(), [])


def test_cost_model():
    tool = tk.Tool(tk.ToolSpec("t", "d", {"type": "object"}, cost_model=tk.CostRates(2.0, 0.5)),
                   lambda: tk.ToolOutput("x" * 40, 3.0))
    reg = tk.ToolRegistry()
    reg.register(tool)
    (obs,) = tk.execute_parallel(reg, [ToolCall("a", "t", "{}")])
    assert obs.cost_units == 2.0 + 0.5 * 10 + 3.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.text(max_size=10)), min_size=1, max_size=12))
def test_batch_cost_is_sum_of_parts(spec):
    reg = sleep_registry()
    calls = [call(f"c{i}", fail=fail, echo=echo) for i, (fail, echo) in enumerate(spec)]
    batch = tk.execute_parallel(reg, calls)
    singles = [tk.execute_parallel(reg, [c])[0] for c in calls]
    assert sum(o.cost_units for o in batch) == pytest.approx(sum(o.cost_units for o in singles))
    assert [o.status for o in batch] == [o.status for o in singles]


# -- search --------------------------------------------------------------------

INDEX = {"eiffel": [{"title": "B", "url": "https://b", "snippet": "s", "rank": 2},
                    {"title": "A", "url": "https://a", "snippet": "s", "rank": 1}]}


def test_fixture_search_ranking_and_miss():
    backend = tk.FixtureSearch(INDEX)
    out = tk.search(backend, "Eiffel tower height", 10)
    assert [r["title"] for r in out] == ["A", "B"] and [r["rank"] for r in out] == [1, 2]
    assert tk.search(backend, "eiffel", 1) == [out[0]]
    assert tk.search(backend, "louvre") == []


@pytest.mark.parametrize("query,n", [("", 5), ("  ", 5), ("q", 0), ("q", 11)])
def test_search_validation(query, n):
    with pytest.raises(ValueError):
        tk.search(tk.FixtureSearch({}), query, n)


def test_serper_mapping_and_errors():
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["key"] = request.headers["x-api-key"]
        return httpx.Response(200, json={"organic": [
            {"title": "T", "link": "https://x", "snippet": "S", "position": 1},
            {"title": "U", "link": "https://y", "snippet": "S2"},
        ]})

    backend = tk.SerperSearch("K", client=httpx.Client(transport=httpx.MockTransport(handler)))
    out = backend.search("q", 2)
    assert seen == {"body": {"q": "q", "num": 2}, "key": "K"}
    assert out == [{"title": "T", "url": "https://x", "snippet": "S", "rank": 1},
                   {"title": "U", "url": "https://y", "snippet": "S2", "rank": 2}]
    bad = tk.SerperSearch("K", client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(500))))
    with pytest.raises(tk.UpstreamError):
        bad.search("q", 2)


def test_search_tool_observation():
    reg = tk.ToolRegistry()
    reg.register(tk.search_tool(tk.FixtureSearch(INDEX)))
    (obs,) = tk.execute_parallel(reg, [ToolCall("a", "search", '{"query": "eiffel"}')])
    assert obs.status == "ok"
    assert json.loads(obs.content)[0]["title"] == "A"
    assert obs.cost_units == 1.0


# -- scrape + summarize -------------------------------------------------------------

class CountingSummarizer:
    def __init__(self, text="summary"):
        self.calls = 0
        self.text = text

    def __call__(self, content, query):
        self.calls += 1
        return self.text, 4.0


def test_scrape_summarizes():
    summ = CountingSummarizer()
    out = tk.scrape_and_summarize(tk.FixtureReader({"https://a": "page"}), summ, "https://a", "what")
    assert out == {"summary": "summary", "fetched": True, "cost_units": 4.0}


def test_empty_page_guard():
    summ = CountingSummarizer("hallucinated answer")
    reader = tk.FixtureReader({"https://a": "  \n"})
    out = tk.scrape_and_summarize(reader, summ, "https://a", "what")
    assert out["summary"] == tk.EMPTY_CONTENT_MARKER and out["fetched"] is False
    assert summ.calls == 0
    out = tk.scrape_and_summarize(reader, summ, "https://a", "what", empty_guard=False)
    assert out["summary"] == "hallucinated answer" and summ.calls == 1


def test_scrape_caps_summary():
    out = tk.scrape_and_summarize(tk.FixtureReader({"https://a": "p"}), lambda c, q: "é" * 100,
                                  "https://a", "q", cap_bytes=11)
    assert out["summary"] == "é" * 5


@pytest.mark.parametrize("url,query", [("ftp://a", "q"), ("not a url", "q"), ("https://a", "")])
def test_scrape_validation(url, query):
    with pytest.raises(ValueError):
        tk.scrape_and_summarize(tk.FixtureReader({}), CountingSummarizer(), url, query)


def test_scrape_failures_map_to_tool_error():
    def broken(content, query):
        raise RuntimeError("model down")

    reg = tk.ToolRegistry()
    reg.register(tk.scrape_tool(tk.FixtureReader({"https://a": "x"}), broken))
    obs = tk.execute_parallel(reg, [
        ToolCall("1", "scrape", json.dumps({"url": "https://missing", "extraction_query": "q"})),
        ToolCall("2", "scrape", json.dumps({"url": "https://a", "extraction_query": "q"})),
    ])
    assert [o.status for o in obs] == ["tool_error", "tool_error"]
    assert "FetchFailed" in obs[0].content and "SummarizerFailed" in obs[1].content


def test_jina_reader():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, text="page text")

    reader = tk.JinaReader("J", client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert reader.fetch("https://site.test/x") == "page text"
    assert seen == {"url": "https://r.jina.ai/https://site.test/x", "auth": "Bearer J"}


def test_llm_summarizer_uses_extraction_prompt():
    class Fake:
        def complete_text(self, messages, params=None):
            self.messages = messages
            return "found", {"prompt_tokens": 10, "completion_tokens": 2}

    fake = Fake()
    text, units = tk.LLMSummarizer(fake, unit_per_token=0.5)("content", "population of Lyon")
    assert text == "found" and units == 6.0
    assert "population of Lyon" in fake.messages[0].content
    assert fake.messages[1].content == "content"


# -- code interpreter -----------------------------------------------------------------

def test_interpreter_basic():
    out = tk.code_interpreter("print(2+2)")
    assert out == {"stdout": "4\n", "stderr": "", "exit_status": 0, "truncated": False}


def test_interpreter_stdin_and_error_exit():
    assert tk.code_interpreter("print(input()[::-1])", "abc")["stdout"] == "cba\n"
    out = tk.code_interpreter("raise SystemExit(3)")
    assert out["exit_status"] == 3
    out = tk.code_interpreter("1/0")
    assert out["exit_status"] == 1 and "ZeroDivisionError" in out["stderr"]


def test_interpreter_cpu_limit():
    t0 = time.monotonic()
    with pytest.raises(tk.ToolTimeout) as info:
        tk.code_interpreter("while True: pass", limits=tk.SandboxLimits(cpu_seconds=1))
    assert info.value.result["exit_status"] == "killed"
    assert time.monotonic() - t0 < 10


def test_interpreter_output_cap():
    out = tk.code_interpreter("import sys; sys.stdout.write('x' * 10_000_000)")
    assert out["truncated"] is True
    assert len(out["stdout"]) == 64 * 1024
    assert out["exit_status"] == 0


def test_interpreter_memory_limit():
    out = tk.code_interpreter("b = bytearray(600 * 1024 * 1024)", limits=tk.SandboxLimits(memory_bytes=256 << 20))
    assert out["exit_status"] != 0 and "MemoryError" in out["stderr"]


def test_interpreter_missing_binary():
    with pytest.raises(tk.SandboxUnavailable):
        tk.code_interpreter("print(1)", command=("/nonexistent/python",))


def test_python_tool_timeout_status():
    reg = tk.ToolRegistry()
    reg.register(tk.python_tool(tk.SandboxLimits(cpu_seconds=1)))
    obs = tk.execute_parallel(reg, [ToolCall("a", "python", json.dumps({"code": "while True: pass"})),
                                    ToolCall("b", "python", json.dumps({"code": "print(6*7)"}))])
    assert obs[0].status == "timeout"
    assert json.loads(obs[0].content)["exit_status"] == "killed"
    assert obs[1].status == "ok" and json.loads(obs[1].content)["stdout"] == "42\n"
