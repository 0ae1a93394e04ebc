"""Deterministic synthetic research environment and scripted planner.

A synthetic task asks for the sum of ``F`` independent facts. The mock
search tool answers single-key lookups (optionally corrupted at a seeded
rate) and returns nothing for keyword-stuffed queries naming more than two
keys. A scripted planner, plugged into the real executor in place of the
LLM, reads tool results back out of the chat history and decides what to
look up next.

Corruption is counter-based: whether lookup ``(seed, key, phrasing)`` is
corrupted is a pure hash of those three numbers, so it does not depend on
call order or thread timing, and the same function vectorizes over numpy
arrays for Monte-Carlo checks.
"""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .executor import RunConfig, TaskSpec, run
from .model import ChatMessage, ModelTurn
from .scheduler import SchedulePolicy
from .toolkit import CostRates, Tool, ToolRegistry, ToolSpec, SEARCH_SCHEMA, SEARCH
from .trace import AgentTrace, ToolCall

KEY_RE = re.compile(r"\bfact-\d{2}-[a-z]{3}\b")
SNIPPET_RE = re.compile(r"^(fact-\d{2}-[a-z]{3}) = (\d+)$")
WIDTH_RE = re.compile(r"at least (\d+) but (?:not more|no more) than (\d+)")

MAX_KEYS_PER_QUERY = 2
VALUE_LO, VALUE_SPAN = 100, 900

# Phrasings for redundant lookups; index = attempt number seen by the environment.
PHRASINGS = (
    "{key} value",
    "what is the value of {key}",
    "{key} official record",
    "{key} figure source",
    "lookup {key}",
    "{key} reported number",
    "{key} verified value",
    "{key} reference entry",
)

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_STREAM_CORRUPT = 0x9E3779B97F4A7C15
_STREAM_OFFSET = 0xD1B54A32D192ED03


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK
    return x ^ (x >> np.uint64(31))


def _hash(stream: int, seed, key_index, attempt) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = _splitmix64(np.asarray(seed, dtype=np.uint64) ^ np.uint64(stream))
        h = _splitmix64(h ^ np.asarray(key_index, dtype=np.uint64))
        return _splitmix64(h ^ np.asarray(attempt, dtype=np.uint64))


def lookup_uniform(seed, key_index, attempt) -> np.ndarray:
    """Uniform [0, 1) draw deciding corruption of one lookup; broadcasts over arrays."""
    h = _hash(_STREAM_CORRUPT, seed, key_index, attempt)
    return (h >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def corrupted_offset(seed, key_index, attempt) -> np.ndarray:
    """Nonzero offset in 1..VALUE_SPAN-1 applied to a corrupted value."""
    h = _hash(_STREAM_OFFSET, seed, key_index, attempt)
    return (h % np.uint64(VALUE_SPAN - 1)).astype(np.int64) + 1


def phrasing_attempt(query: str, key: str) -> int:
    """Attempt number for a lookup query: its phrasing index, or a stable hash for unknown phrasings."""
    template = " ".join(query.replace(key, "{key}").lower().split())
    for i, phrasing in enumerate(PHRASINGS):
        if template == phrasing:
            return i
    return len(PHRASINGS) + zlib.crc32(template.encode())


@dataclass
class SyntheticTask:
    task_id: str
    seed: int
    fact_keys: list[str]
    values: list[int]
    unreliable_rate: float
    distractors: dict[str, int] = field(default_factory=dict)

    @property
    def answer(self) -> str:
        return answer_rule(self.values)

    @property
    def question(self) -> str:
        keys = ", ".join(self.fact_keys)
        return (
            f"Look up the value of each of the following {len(self.fact_keys)} facts and report their sum: "
            f"{keys}. Answer with the number only."
        )

    def key_index(self, key: str) -> int:
        return self.fact_keys.index(key)

    def lookup(self, key: str, attempt: int) -> int:
        """Value returned by the environment for ``key`` on this attempt."""
        if key in self.distractors:
            return self.distractors[key]
        i = self.key_index(key)
        true = self.values[i]
        if self.unreliable_rate > 0 and float(lookup_uniform(self.seed, i, attempt)) < self.unreliable_rate:
            off = int(corrupted_offset(self.seed, i, attempt))
            return VALUE_LO + (true - VALUE_LO + off) % VALUE_SPAN
        return true

    def to_taskspec(self, max_steps: int = 100) -> TaskSpec:
        return TaskSpec(
            task_id=self.task_id,
            question=self.question,
            answer_key=self.answer,
            exposure=[SEARCH],
            max_steps=max_steps,
            bench={"seed": self.seed, "facts": len(self.fact_keys), "unreliable_rate": self.unreliable_rate},
        )


def answer_rule(values: Sequence[int]) -> str:
    return str(int(sum(values)))


def generate_task(seed: int, F: int, unreliable_rate: float = 0.0) -> SyntheticTask:
    if F < 1:
        raise ValueError("F must be >= 1")
    if F > 100:
        raise ValueError("F must be <= 100")
    if not 0 <= unreliable_rate < 1:
        raise ValueError("unreliable_rate must be in [0, 1)")
    rng = np.random.default_rng([seed, F])
    letters = "abcdefghijklmnopqrstuvwxyz"
    keys, distractors = [], {}
    for i in range(F):
        tag = "".join(rng.choice(list(letters), size=3))
        key = f"fact-{i:02d}-{tag}"
        keys.append(key)
        near = tag[:2] + letters[(letters.index(tag[2]) + 1) % 26]
        distractors[f"fact-{i:02d}-{near}"] = int(rng.integers(VALUE_LO, VALUE_LO + VALUE_SPAN))
    values = [int(v) for v in rng.integers(VALUE_LO, VALUE_LO + VALUE_SPAN, size=F)]
    return SyntheticTask(
        task_id=f"bench-s{seed}-f{F}-r{unreliable_rate:g}",
        seed=seed,
        fact_keys=keys,
        values=values,
        unreliable_rate=unreliable_rate,
        distractors=distractors,
    )


def task_from_spec(spec: TaskSpec) -> SyntheticTask:
    if not spec.bench:
        raise ValueError(f"task {spec.task_id} is not a bench task")
    b = spec.bench
    return generate_task(int(b["seed"]), int(b["facts"]), float(b.get("unreliable_rate", 0.0)))


def grade(answer: str, key: str) -> dict[str, bool]:
    """Normalized exact match: case-folded, trimmed, whitespace collapsed."""

    def norm(s: str) -> str:
        return " ".join(s.casefold().split())

    a = norm(answer)
    return {"correct": a != "unknown" and a == norm(key)}


# -- environment -------------------------------------------------------------


class BenchSearch:
    """Mock search over one synthetic task's fact index."""

    def __init__(self, task: SyntheticTask) -> None:
        self.task = task

    def search(self, query: str, num_results: int = 10) -> list[dict]:
        known = set(self.task.fact_keys) | set(self.task.distractors)
        keys = list(dict.fromkeys(k for k in KEY_RE.findall(query) if k in known))
        if not keys or len(keys) > MAX_KEYS_PER_QUERY:
            return []
        results = []
        for key in keys:
            value = self.task.lookup(key, phrasing_attempt(query, key))
            results.append({"title": f"Record {key}", "url": f"https://facts.example/{key}",
                            "snippet": f"{key} = {value}"})
            # A near-miss entry ranks just below every real hit.
            for dkey, dval in self.task.distractors.items():
                if dkey[:8] == key[:8] and dkey != key:
                    results.append({"title": f"Record {dkey}", "url": f"https://facts.example/{dkey}",
                                    "snippet": f"{dkey} = {dval}"})
        return [dict(r, rank=i + 1) for i, r in enumerate(results[:num_results])]


def bench_registry(task: SyntheticTask, *, timeout: float = 5.0) -> ToolRegistry:
    backend = BenchSearch(task)

    def run_search(query: str, num_results: int = 10) -> str:
        if not query.strip():
            raise ValueError("search query must be non-empty")
        return json.dumps(backend.search(query, num_results))

    spec = ToolSpec(SEARCH, "Search the fact index.", SEARCH_SCHEMA, timeout, CostRates(per_call_units=1.0))
    registry = ToolRegistry()
    registry.register(Tool(spec, run_search))
    return registry


# -- scripted planner --------------------------------------------------------

STRATEGIES = ("sequential", "parallel", "redundant", "stuffed", "follow")


@dataclass(frozen=True)
class Strategy:
    """``sequential``, ``parallel(m)``, ``redundant(k)``, ``stuffed`` or ``follow``.

    ``stuffed`` crams every unknown key into one query per step;
    ``follow`` takes its width from the injected count instruction.
    """

    kind: str
    width: int = 1

    def __post_init__(self) -> None:
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.width < 1:
            raise ValueError("strategy width must be >= 1")
        if self.kind == "redundant" and self.width > len(PHRASINGS):
            raise ValueError(f"redundant(k) supports k <= {len(PHRASINGS)}")

    @classmethod
    def parse(cls, text: str) -> Strategy:
        m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*(\d+)\s*\)|:(\d+))?\s*", text)
        if not m:
            raise ValueError(f"bad strategy {text!r}")
        kind, width = m.group(1), m.group(2) or m.group(3)
        return cls(kind, int(width) if width else 1)

    def policy(self) -> SchedulePolicy:
        if self.kind in ("parallel", "redundant"):
            return SchedulePolicy("constant", self.width)
        return SchedulePolicy("constant", 1)

    def __str__(self) -> str:
        return f"{self.kind}({self.width})" if self.kind in ("parallel", "redundant") else self.kind


def observed_values(history: Sequence[ChatMessage], keys: Sequence[str]) -> dict[str, list[int]]:
    """Per key, the value reported by each lookup that targeted it, in call order."""
    wanted = set(keys)
    targets: dict[str, str | None] = {}
    for msg in history:
        if msg.role == "assistant" and msg.tool_calls:
            for call in msg.tool_calls:
                try:
                    query = json.loads(call.arguments).get("query", "")
                except (ValueError, AttributeError):
                    query = ""
                hits = [k for k in KEY_RE.findall(query) if k in wanted]
                targets[call.call_id] = hits[0] if len(hits) == 1 else None
    seen: dict[str, list[int]] = {k: [] for k in keys}
    for msg in history:
        if msg.role != "tool":
            continue
        try:
            results = json.loads(msg.content)
        except ValueError:
            continue
        if not isinstance(results, list):
            continue
        target = targets.get(msg.tool_call_id)
        for r in results:
            m = SNIPPET_RE.match(str(r.get("snippet", ""))) if isinstance(r, dict) else None
            if not m or m.group(1) not in wanted:
                continue
            if target is None or m.group(1) == target:
                seen[m.group(1)].append(int(m.group(2)))
    return seen


def majority(values: Sequence[int], k: int) -> int | None:
    need = k // 2 + 1
    for v in dict.fromkeys(values):
        if values.count(v) >= need:
            return v
    return None


class PlannerModel:
    """Scripted stand-in for the LLM, driven entirely by the chat history."""

    def __init__(self, strategy: Strategy | str) -> None:
        self.strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
        self.completions = 0

    def _keys(self, history) -> list[str]:
        marker = "**Your Task**"
        text = history[0].content
        task = text[text.index(marker):] if marker in text else text
        return list(dict.fromkeys(KEY_RE.findall(task.split("**How You Work**")[0])))

    def _width(self, history) -> int:
        if self.strategy.kind != "follow":
            return self.strategy.width
        last = history[-1].content if history[-1].role == "user" else ""
        m = WIDTH_RE.search(last)
        return int(m.group(1)) if m else 1

    def _usage(self, history, n_calls: int) -> dict[str, int]:
        prompt = sum(len(m.content) for m in history) // 4
        return {"prompt_tokens": prompt, "completion_tokens": 30 + 20 * n_calls}

    def resolve(self, history) -> tuple[dict[str, int], list[str], list[str]]:
        """Return (known values, keys still to query, keys that can no longer be resolved)."""
        keys = self._keys(history)
        seen = observed_values(history, keys)
        known, todo, dead = {}, [], []
        k = self.strategy.width if self.strategy.kind == "redundant" else 1
        for key in keys:
            vals = seen[key]
            if self.strategy.kind == "redundant":
                if len(vals) < k:
                    todo.append(key)
                    continue
                winner = majority(vals[:k], k)
                if winner is None:
                    dead.append(key)
                else:
                    known[key] = winner
            elif vals:
                known[key] = vals[0]
            else:
                todo.append(key)
        return known, todo, dead

    def _final(self, history, known, keys, n_calls=0) -> ModelTurn:
        if len(known) == len(keys):
            answer = answer_rule([known[k] for k in keys])
            thought = f"Collected all {len(keys)} facts and summed them."
        else:
            answer = "unknown"
            thought = f"Only {len(known)} of {len(keys)} facts could be established."
        payload = {"thought": thought, "answer": answer}
        return ModelTurn(final_payload=payload, usage=self._usage(history, n_calls), content=json.dumps(payload))

    def complete(self, history, tool_schemas, params=None) -> ModelTurn:
        self.completions += 1
        keys = self._keys(history)
        known, todo, dead = self.resolve(history)
        if not tool_schemas or not todo:
            return self._final(history, known, keys)
        step = sum(1 for m in history if m.role == "assistant") + 1
        queries: list[str] = []
        kind = self.strategy.kind
        if kind == "stuffed":
            queries.append("value of " + " ".join(todo))
        elif kind == "redundant":
            key = todo[0]
            have = len(observed_values(history, [key])[key])
            for j in range(have, self.strategy.width):
                queries.append(PHRASINGS[j].format(key=key))
        else:
            width = 1 if kind == "sequential" else self._width(history)
            queries.extend(PHRASINGS[0].format(key=key) for key in todo[:width])
        calls = [
            ToolCall(f"call_{step}_{i}", SEARCH, json.dumps({"query": q}))
            for i, q in enumerate(queries, 1)
        ]
        return ModelTurn(
            reasoning_text=f"{len(known)}/{len(keys)} facts known; querying {len(calls)}.",
            tool_calls=calls,
            usage=self._usage(history, len(calls)),
        )


def planner_run(task: SyntheticTask, strategy: Strategy | str, max_steps: int,
                config: RunConfig | None = None) -> AgentTrace:
    """Run the planner through the real executor. Out-of-budget runs answer ``unknown``."""
    strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
    if config is None:
        config = RunConfig(max_steps=max_steps, policy=strategy.policy(), model=f"planner:{strategy}")
    return run(task.to_taskspec(max_steps), config, PlannerModel(strategy), bench_registry(task))


def fact_recall(task: SyntheticTask, trace: AgentTrace) -> float:
    """Fraction of the task's facts whose value appeared in any observation."""
    found = set()
    for step in trace.steps:
        for obs in step.observations:
            try:
                results = json.loads(obs.content)
            except ValueError:
                continue
            for r in results if isinstance(results, list) else []:
                m = SNIPPET_RE.match(str(r.get("snippet", "")))
                if m and m.group(1) in task.fact_keys:
                    found.add(m.group(1))
    return len(found) / len(task.fact_keys)


# -- closed forms and Monte-Carlo --------------------------------------------


def expected_turns(F: int, m: int) -> int:
    return math.ceil(F / m) + 1


def majority_success_prob(rate: float, k: int = 3) -> float:
    """P(at least floor(k/2)+1 of k independent lookups are uncorrupted)."""
    need = k // 2 + 1
    return sum(math.comb(k, j) * (1 - rate) ** j * rate ** (k - j) for j in range(need, k + 1))


def closed_form_accuracy(rate: float, F: int, strategy: Strategy | str) -> float:
    strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
    if strategy.kind == "redundant":
        return majority_success_prob(rate, strategy.width) ** F
    return (1 - rate) ** F


def monte_carlo_accuracy(rate: float, F: int, strategy: Strategy | str, seeds: Sequence[int]) -> float:
    """Task accuracy from the corruption hash alone, vectorized over seeds (no executor)."""
    strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
    k = strategy.width if strategy.kind == "redundant" else 1
    s = np.asarray(seeds, dtype=np.uint64)[:, None, None]
    f = np.arange(F, dtype=np.uint64)[None, :, None]
    a = np.arange(k, dtype=np.uint64)[None, None, :]
    ok = lookup_uniform(s, f, a) >= rate
    per_key = ok.sum(axis=2) >= (k // 2 + 1)
    return float(per_key.all(axis=1).mean())


def bench_accuracy(strategy: Strategy | str, seeds: Sequence[int], F: int, rate: float,
                   max_steps: int) -> float:
    """Accuracy of the planner through the executor over ``seeds``."""
    hits = 0
    for seed in seeds:
        task = generate_task(seed, F, rate)
        trace = planner_run(task, strategy, max_steps)
        hits += grade(trace.final.answer, task.answer)["correct"]
    return hits / len(seeds)

