"""Tool environment: search, scrape-and-summarize, code interpreter.

Every tool is a :class:`Tool` (spec + callable) held in a
:class:`ToolRegistry`. :func:`execute_parallel` runs one step's call set
concurrently and always returns one :class:`Observation` per call, in call
order. Tool failures become observation statuses; they never raise out of a
batch.
"""

from __future__ import annotations

import concurrent.futures as cf
import json
import logging
import math
import os
import resource
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence
from urllib.parse import urlparse

import httpx
import jsonschema

from .prompting import TemplateSet, render_summarizer
from .trace import Observation, ToolCall

logger = logging.getLogger(__name__)

SEARCH = "search"
SCRAPE = "scrape"
PYTHON = "python"

# Exposure presets: information-seeking tasks get search + scrape; reasoning-heavy tasks get all three.
EXPOSURE_PRESETS: dict[str, frozenset[str]] = {
    "browse": frozenset({SEARCH, SCRAPE}),
    "all": frozenset({SEARCH, SCRAPE, PYTHON}),
    "none": frozenset(),
}

EMPTY_CONTENT_MARKER = "[EMPTY PAGE: the scraper returned no content for this URL; nothing was summarized]"
SUMMARY_CAP_BYTES = 4096 * 4
MAX_SEARCH_RESULTS = 10


class ToolError(Exception):
    """A tool failed; becomes an observation with status ``tool_error``."""


class ToolTimeout(ToolError):
    def __init__(self, message: str, result: Any = None) -> None:
        super().__init__(message)
        self.result = result


class UpstreamError(ToolError):
    pass


class FetchFailed(ToolError):
    pass


class SummarizerFailed(ToolError):
    pass


class SandboxUnavailable(ToolError):
    pass


class UnknownTool(ToolError):
    pass


@dataclass(frozen=True)
class CostRates:
    per_call_units: float = 0.0
    per_result_token_units: float = 0.0

    def __post_init__(self) -> None:
        if self.per_call_units < 0 or self.per_result_token_units < 0:
            raise ValueError("cost rates must be nonnegative")


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    argument_schema: dict
    timeout: float = 60.0
    cost_model: CostRates = CostRates()

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError(f"tool {self.name}: timeout must be > 0")

    def wire_schema(self) -> dict:
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": self.argument_schema,
            },
        }


@dataclass
class ToolOutput:
    content: str
    cost_units: float = 0.0  # extra units beyond the tool's cost rates, e.g. summarizer tokens


@dataclass
class Tool:
    spec: ToolSpec
    fn: Callable[..., str | ToolOutput]


@dataclass
class ToolRegistry:
    tools: dict[str, Tool] = field(default_factory=dict)
    exposure: frozenset[str] | None = None  # None exposes everything registered

    def register(self, tool: Tool) -> Tool:
        if tool.spec.name in self.tools:
            raise ValueError(f"tool {tool.spec.name!r} already registered")
        self.tools[tool.spec.name] = tool
        return tool

    def expose(self, names: Iterable[str]) -> ToolRegistry:
        names = frozenset(names)
        missing = names - set(self.tools)
        if missing:
            raise ValueError(f"cannot expose unregistered tools: {sorted(missing)}")
        return ToolRegistry(self.tools, names)

    @property
    def exposed(self) -> list[str]:
        names = self.tools if self.exposure is None else self.exposure
        return sorted(names)

    def schemas(self) -> list[dict]:
        return [self.tools[n].spec.wire_schema() for n in self.exposed]


def approx_tokens(text: str) -> int:
    return math.ceil(len(text.encode("utf-8")) / 4)


_VALIDATORS: dict[int, tuple[dict, Any]] = {}


def _validator(spec: ToolSpec):
    # Building a validator per call costs ~2 ms; cache by schema identity (the schema is kept alive).
    schema = spec.argument_schema
    hit = _VALIDATORS.get(id(schema))
    if hit is None or hit[0] is not schema:
        hit = _VALIDATORS[id(schema)] = (schema, jsonschema.validators.validator_for(schema)(schema))
    return hit[1]


def _invoke(tool: Tool, call: ToolCall) -> tuple[str, str, float]:
    """Run one call; returns (status, content, extra_cost_units)."""
    try:
        args = json.loads(call.arguments) if call.arguments.strip() else {}
        if not isinstance(args, dict):
            raise ToolError("arguments must be a JSON object")
        _validator(tool.spec).validate(args)
    except json.JSONDecodeError as exc:
        return "tool_error", f"invalid JSON arguments: {exc}", 0.0
    except jsonschema.ValidationError as exc:
        return "tool_error", f"invalid arguments: {exc.message}", 0.0
    except ToolError as exc:
        return "tool_error", str(exc), 0.0
    try:
        out = tool.fn(**args)
    except ToolTimeout as exc:
        content = str(exc)
        if exc.result is not None:
            content = json.dumps(exc.result, ensure_ascii=False) if not isinstance(exc.result, str) else exc.result
        return "timeout", content, 0.0
    except TimeoutError as exc:
        return "timeout", f"timed out: {exc}", 0.0
    except Exception as exc:  # noqa: BLE001 - any tool failure becomes an observation
        return "tool_error", f"{type(exc).__name__}: {exc}", 0.0
    if isinstance(out, ToolOutput):
        return "ok", out.content, out.cost_units
    return "ok", str(out), 0.0


def _observation(tool: Tool | None, call: ToolCall, status: str, content: str,
                 latency: float, extra: float) -> Observation:
    cost = 0.0
    if tool is not None:
        rates = tool.spec.cost_model
        cost = rates.per_call_units + rates.per_result_token_units * approx_tokens(content) + extra
    return Observation(call.call_id, status, content, max(latency, 0.0), cost)


_POOL: cf.ThreadPoolExecutor | None = None
_POOL_LOCK = threading.Lock()
POOL_WORKERS = 256


def _shared_pool() -> cf.ThreadPoolExecutor:
    # Threads are spawned lazily and reused across batches; starting fresh threads per step is slow.
    global _POOL
    with _POOL_LOCK:
        if _POOL is None:
            _POOL = cf.ThreadPoolExecutor(max_workers=POOL_WORKERS, thread_name_prefix="tool")
        return _POOL


def execute_parallel(registry: ToolRegistry, calls: Sequence[ToolCall]) -> list[Observation]:
    """Run ``calls`` concurrently; the result is index-aligned with ``calls``.

    Each call gets its own deadline measured from batch start. A call that
    overruns is reported as ``timeout``; its worker is abandoned, not waited
    for, so it cannot hold up the siblings.
    """
    if not calls:
        raise ValueError("execute_parallel needs at least one call")
    exposed = set(registry.exposed)
    results: list[Observation | None] = [None] * len(calls)
    pending: dict[int, tuple[cf.Future, Tool, float]] = {}

    pool = _shared_pool()
    start = time.monotonic()
    for i, call in enumerate(calls):
        tool = registry.tools.get(call.tool_name)
        if tool is None or call.tool_name not in exposed:
            reason = "is not registered" if tool is None else "is not exposed for this task"
            results[i] = Observation(
                call.call_id,
                "tool_error",
                f"UnknownTool: {call.tool_name!r} {reason}; available tools: {', '.join(sorted(exposed)) or 'none'}",
            )
            continue

        def timed(tool=tool, call=call):
            t0 = time.monotonic()
            status, content, extra = _invoke(tool, call)
            return status, content, extra, time.monotonic() - t0

        pending[i] = (pool.submit(timed), tool, start + tool.spec.timeout)

    for i, (future, tool, deadline) in pending.items():
        call = calls[i]
        try:
            status, content, extra, latency = future.result(timeout=max(0.0, deadline - time.monotonic()))
        except cf.TimeoutError:
            future.cancel()
            results[i] = _observation(
                tool, call, "timeout", f"tool {tool.spec.name!r} exceeded its {tool.spec.timeout:g}s timeout",
                tool.spec.timeout, 0.0,
            )
            continue
        results[i] = _observation(tool, call, status, content, latency, extra)
    return results  # type: ignore[return-value]


# -- search ------------------------------------------------------------------


class SearchBackend(Protocol):
    def search(self, query: str, num_results: int) -> list[dict]: ...


class SerperSearch:
    """Google search through a Serper-style JSON endpoint."""

    def __init__(self, api_key: str, endpoint: str = "https://google.serper.dev/search",
                 client: httpx.Client | None = None, max_concurrent: int = 16, timeout: float = 30.0) -> None:
        self.endpoint = endpoint
        self._api_key = api_key
        self._client = client or httpx.Client(timeout=timeout)
        self._slots = threading.BoundedSemaphore(max_concurrent)

    def search(self, query: str, num_results: int) -> list[dict]:
        try:
            with self._slots:
                resp = self._client.post(
                    self.endpoint,
                    json={"q": query, "num": num_results},
                    headers={"X-API-KEY": self._api_key, "Content-Type": "application/json"},
                )
        except httpx.TimeoutException as exc:
            raise ToolTimeout(f"search timed out: {exc}") from exc
        except httpx.TransportError as exc:
            raise UpstreamError(f"search transport error: {exc}") from exc
        if resp.status_code >= 400:
            raise UpstreamError(f"search backend returned {resp.status_code}: {resp.text[:200]}")
        organic = resp.json().get("organic") or []
        return [
            {
                "title": item.get("title", ""),
                "url": item.get("link", ""),
                "snippet": item.get("snippet", ""),
                "rank": int(item.get("position", i + 1)),
            }
            for i, item in enumerate(organic[:num_results])
        ]


class FixtureSearch:
    """Search over a fixed index mapping query patterns to result lists.

    A pattern matches when it occurs (case-insensitively) in the query; the
    first matching pattern wins.
    """

    def __init__(self, index: Mapping[str, list[dict]]) -> None:
        self.index = dict(index)

    @classmethod
    def from_file(cls, path) -> FixtureSearch:
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def search(self, query: str, num_results: int) -> list[dict]:
        q = query.lower()
        for pattern, results in self.index.items():
            if pattern.lower() in q:
                ranked = sorted(results, key=lambda r: r.get("rank", 0))
                return [dict(r, rank=i + 1) for i, r in enumerate(ranked[:num_results])]
        return []


def search(backend: SearchBackend, query: str, num_results: int = MAX_SEARCH_RESULTS) -> list[dict]:
    if not query or not query.strip():
        raise ValueError("search query must be non-empty")
    if not 1 <= num_results <= MAX_SEARCH_RESULTS:
        raise ValueError(f"num_results must be in 1..{MAX_SEARCH_RESULTS}")
    return backend.search(query, num_results)


# -- scrape + summarize ------------------------------------------------------


class ReaderBackend(Protocol):
    def fetch(self, url: str) -> str: ...


class JinaReader:
    """Page reader through a JINA-style ``<endpoint>/<url>`` text endpoint."""

    def __init__(self, api_key: str | None = None, endpoint: str = "https://r.jina.ai/",
                 client: httpx.Client | None = None, max_concurrent: int = 16, timeout: float = 60.0) -> None:
        self.endpoint = endpoint.rstrip("/") + "/"
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout, follow_redirects=True)
        self._slots = threading.BoundedSemaphore(max_concurrent)

    def fetch(self, url: str) -> str:
        try:
            with self._slots:
                resp = self._client.get(self.endpoint + url, headers=self._headers)
        except httpx.TimeoutException as exc:
            raise ToolTimeout(f"fetch timed out: {exc}") from exc
        except httpx.TransportError as exc:
            raise FetchFailed(f"fetch transport error: {exc}") from exc
        if resp.status_code >= 400:
            raise FetchFailed(f"reader returned {resp.status_code} for {url}")
        return resp.text


class FixtureReader:
    def __init__(self, pages: Mapping[str, str]) -> None:
        self.pages = dict(pages)

    def fetch(self, url: str) -> str:
        if url not in self.pages:
            raise FetchFailed(f"no fixture page for {url}")
        return self.pages[url]


Summarizer = Callable[[str, str], "str | tuple[str, float]"]


class LLMSummarizer:
    """Summarizes page content with a chat model and the pinned extraction prompt."""

    def __init__(self, model, templates: TemplateSet | None = None, params: dict | None = None,
                 unit_per_token: float = 0.0) -> None:
        self.model = model
        self.templates = templates
        self.params = params or {}
        self.unit_per_token = unit_per_token

    def __call__(self, content: str, extraction_query: str) -> tuple[str, float]:
        from .model import ChatMessage, ModelError

        prompt = render_summarizer(extraction_query, self.templates)
        messages = [
            ChatMessage("system", prompt),
            ChatMessage("user", content),
        ]
        try:
            text, usage = self.model.complete_text(messages, self.params)
        except ModelError as exc:
            raise SummarizerFailed(str(exc)) from exc
        tokens = usage["prompt_tokens"] + usage["completion_tokens"]
        return text, tokens * self.unit_per_token


def _valid_url(url: str) -> bool:
    parsed = urlparse(url)
    return parsed.scheme in ("http", "https") and bool(parsed.netloc)


def _cap_bytes(text: str, cap: int) -> str:
    raw = text.encode("utf-8")
    if len(raw) <= cap:
        return text
    return raw[:cap].decode("utf-8", errors="ignore")


def scrape_and_summarize(
    reader: ReaderBackend,
    summarizer: Summarizer,
    url: str,
    extraction_query: str,
    *,
    empty_guard: bool = True,
    cap_bytes: int = SUMMARY_CAP_BYTES,
) -> dict[str, Any]:
    """Fetch ``url`` and extract what answers ``extraction_query``.

    With ``empty_guard`` on, an empty page is reported as such and the
    summarizer is never shown it (summarizers asked about nothing tend to
    invent an answer). Turning the guard off reproduces that failure mode.
    """
    if not _valid_url(url):
        raise ValueError(f"invalid URL {url!r}")
    if not extraction_query or not extraction_query.strip():
        raise ValueError("extraction_query must be non-empty")
    content = reader.fetch(url)
    if empty_guard and not content.strip():
        return {"summary": EMPTY_CONTENT_MARKER, "fetched": False, "cost_units": 0.0}
    try:
        out = summarizer(content, extraction_query)
    except SummarizerFailed:
        raise
    except Exception as exc:  # noqa: BLE001
        raise SummarizerFailed(f"{type(exc).__name__}: {exc}") from exc
    text, units = out if isinstance(out, tuple) else (out, 0.0)
    return {"summary": _cap_bytes(text, cap_bytes), "fetched": bool(content.strip()), "cost_units": units}


# -- code interpreter --------------------------------------------------------


@dataclass(frozen=True)
class SandboxLimits:
    cpu_seconds: float = 10.0
    memory_bytes: int = 1 << 30
    wall_seconds: float | None = None  # default: 3 * cpu + 2
    output_cap: int = 64 * 1024


def _drain(stream, cap: int, sink: dict, key: str) -> None:
    kept = bytearray()
    total = 0
    while True:
        chunk = stream.read(65536)
        if not chunk:
            break
        total += len(chunk)
        room = cap - len(kept)
        if room > 0:
            kept.extend(chunk[:room])
    sink[key] = bytes(kept)
    sink[key + "_total"] = total


def code_interpreter(
    source: str,
    stdin: str = "",
    limits: SandboxLimits | None = None,
    *,
    command: Sequence[str] = (sys.executable, "-I"),
) -> dict[str, Any]:
    """Run ``source`` in a child interpreter under CPU/memory rlimits.

    Returns ``{stdout, stderr, exit_status, truncated}``. On CPU or wall-clock
    overrun the process group is killed and :class:`ToolTimeout` is raised
    with the partial result attached.
    """
    if not source or not source.strip():
        raise ValueError("source must be non-empty")
    limits = limits or SandboxLimits()
    wall = limits.wall_seconds if limits.wall_seconds is not None else 3 * limits.cpu_seconds + 2
    cpu = max(1, math.ceil(limits.cpu_seconds))

    def preexec() -> None:
        resource.setrlimit(resource.RLIMIT_CPU, (cpu, cpu + 1))
        if limits.memory_bytes:
            resource.setrlimit(resource.RLIMIT_AS, (limits.memory_bytes, limits.memory_bytes))
        resource.setrlimit(resource.RLIMIT_CORE, (0, 0))

    env = {"PATH": os.environ.get("PATH", "/usr/bin:/bin"), "PYTHONIOENCODING": "utf-8", "LANG": "C.UTF-8"}
    with tempfile.TemporaryDirectory(prefix="wd-sandbox-") as workdir:
        script = os.path.join(workdir, "main.py")
        with open(script, "w", encoding="utf-8") as fh:
            fh.write(source)
        try:
            proc = subprocess.Popen(
                [*command, script],
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                cwd=workdir,
                env=env,
                preexec_fn=preexec,
                start_new_session=True,
            )
        except (FileNotFoundError, PermissionError) as exc:
            raise SandboxUnavailable(f"cannot start interpreter {command[0]!r}: {exc}") from exc

        sink: dict[str, Any] = {}
        readers = [
            threading.Thread(target=_drain, args=(proc.stdout, limits.output_cap, sink, "stdout"), daemon=True),
            threading.Thread(target=_drain, args=(proc.stderr, limits.output_cap, sink, "stderr"), daemon=True),
        ]
        for t in readers:
            t.start()
        try:
            proc.stdin.write(stdin.encode("utf-8"))
            proc.stdin.close()
        except BrokenPipeError:
            pass

        killed = False
        try:
            proc.wait(timeout=wall)
        except subprocess.TimeoutExpired:
            killed = True
            os.killpg(proc.pid, signal.SIGKILL)
            proc.wait()
        for t in readers:
            t.join()

    rc = proc.returncode
    if rc in (-signal.SIGXCPU, -signal.SIGKILL):
        killed = True
    truncated = sink["stdout_total"] > limits.output_cap or sink["stderr_total"] > limits.output_cap
    result = {
        "stdout": sink["stdout"].decode("utf-8", errors="replace"),
        "stderr": sink["stderr"].decode("utf-8", errors="replace"),
        "exit_status": "killed" if killed else rc,
        "truncated": truncated,
    }
    if killed:
        raise ToolTimeout(f"process killed after exceeding limits (cpu {cpu}s, wall {wall:g}s)", result)
    return result


# -- registry builders -------------------------------------------------------

SEARCH_SCHEMA = {
    "type": "object",
    "properties": {
        "query": {"type": "string", "description": "Search query."},
        "num_results": {"type": "integer", "minimum": 1, "maximum": MAX_SEARCH_RESULTS},
    },
    "required": ["query"],
}

SCRAPE_SCHEMA = {
    "type": "object",
    "properties": {
        "url": {"type": "string", "description": "Page URL to read."},
        "extraction_query": {"type": "string", "description": "What to extract from the page."},
    },
    "required": ["url", "extraction_query"],
}

PYTHON_SCHEMA = {
    "type": "object",
    "properties": {
        "code": {"type": "string", "description": "Python source to execute; print results to stdout."},
        "stdin": {"type": "string"},
    },
    "required": ["code"],
}


def search_tool(backend: SearchBackend, *, timeout: float = 30.0, num_results: int = MAX_SEARCH_RESULTS,
                cost: CostRates = CostRates(per_call_units=1.0)) -> Tool:
    default_n = num_results

    def run(query: str, num_results: int = default_n) -> str:
        return json.dumps(search(backend, query, num_results), ensure_ascii=False)

    spec = ToolSpec(SEARCH, "Search the web with Google and return ranked results.", SEARCH_SCHEMA, timeout, cost)
    return Tool(spec, run)


def scrape_tool(reader: ReaderBackend, summarizer: Summarizer, *, timeout: float = 120.0,
                empty_guard: bool = True, cap_bytes: int = SUMMARY_CAP_BYTES,
                cost: CostRates = CostRates(per_call_units=1.0)) -> Tool:
    def run(url: str, extraction_query: str) -> ToolOutput:
        out = scrape_and_summarize(reader, summarizer, url, extraction_query,
                                   empty_guard=empty_guard, cap_bytes=cap_bytes)
        return ToolOutput(out["summary"], out["cost_units"])

    spec = ToolSpec(
        SCRAPE,
        "Read the full content of a web page and extract the information requested by extraction_query.",
        SCRAPE_SCHEMA, timeout, cost,
    )
    return Tool(spec, run)


def python_tool(limits: SandboxLimits | None = None, *, command: Sequence[str] = (sys.executable, "-I"),
                cost: CostRates = CostRates()) -> Tool:
    limits = limits or SandboxLimits()
    wall = limits.wall_seconds if limits.wall_seconds is not None else 3 * limits.cpu_seconds + 2

    def run(code: str, stdin: str = "") -> str:
        return json.dumps(code_interpreter(code, stdin, limits, command=command), ensure_ascii=False)

    spec = ToolSpec(PYTHON, "Execute Python code in a sandboxed interpreter.", PYTHON_SCHEMA, wall + 5, cost)
    return Tool(spec, run)


def default_registry(search_backend: SearchBackend, reader: ReaderBackend, summarizer: Summarizer,
                     *, limits: SandboxLimits | None = None, empty_guard: bool = True) -> ToolRegistry:
    registry = ToolRegistry()
    registry.register(search_tool(search_backend))
    registry.register(scrape_tool(reader, summarizer, empty_guard=empty_guard))
    registry.register(python_tool(limits))
    return registry


def sleep_tool(name: str = "sleep", *, timeout: float = 5.0, cost: CostRates = CostRates(per_call_units=1.0)) -> Tool:
    """Mock tool that sleeps ``seconds`` and echoes; ``fail=true`` raises."""

    def run(seconds: float = 0.0, fail: bool = False, echo: str = "") -> str:
        time.sleep(seconds)
        if fail:
            raise ToolError(f"injected failure ({echo})")
        return echo or f"slept {seconds}"

    schema = {
        "type": "object",
        "properties": {"seconds": {"type": "number"}, "fail": {"type": "boolean"}, "echo": {"type": "string"}},
    }
    return Tool(ToolSpec(name, "Sleep for a while, then echo.", schema, timeout, cost), run)
