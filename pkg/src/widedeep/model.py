"""Model interface: OpenAI-compatible chat client and a scripted stand-in.

Both expose ``complete(history, tool_schemas, params) -> ModelTurn``. A turn
either carries tool calls or a parsed ``{"thought", "answer"}`` payload;
anything else raises :class:`MalformedResponse` so the executor can decide
what to do with it.
"""

from __future__ import annotations

import copy
import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

import httpx

from .trace import ToolCall

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")


class ModelError(Exception):
    retryable = False


class TransportError(ModelError):
    retryable = True


class RateLimited(ModelError):
    retryable = True

    def __init__(self, message: str, retry_after: float | None = None) -> None:
        super().__init__(message)
        self.retry_after = retry_after


class RequestRejected(ModelError):
    """The endpoint refused the request (4xx other than 429)."""


class ModelUnavailable(ModelError):
    """Retries exhausted."""


class MalformedResponse(ModelError):
    def __init__(self, message: str, content: str = "", usage: dict[str, int] | None = None,
                 tool_calls: list[ToolCall] | None = None) -> None:
        super().__init__(message)
        self.content = content
        self.usage = usage or {"prompt_tokens": 0, "completion_tokens": 0}
        self.tool_calls = tool_calls or []


class ScriptExhausted(ModelError):
    pass


class ParseFailure(ValueError):
    pass


@dataclass
class ChatMessage:
    role: str
    content: str = ""
    tool_calls: list[ToolCall] | None = None
    tool_call_id: str | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "tool" and not self.tool_call_id:
            raise ValueError("tool messages need a tool_call_id")
        if self.tool_calls and self.role != "assistant":
            raise ValueError("only assistant messages carry tool calls")

    def to_wire(self) -> dict[str, Any]:
        if self.role == "tool":
            return {"role": "tool", "tool_call_id": self.tool_call_id, "content": self.content}
        if self.role == "assistant" and self.tool_calls:
            return {
                "role": "assistant",
                "content": self.content or None,
                "tool_calls": [
                    {
                        "id": c.call_id,
                        "type": "function",
                        "function": {"name": c.tool_name, "arguments": c.arguments},
                    }
                    for c in self.tool_calls
                ],
            }
        return {"role": self.role, "content": self.content}


@dataclass
class ModelTurn:
    reasoning_text: str = ""
    tool_calls: list[ToolCall] = field(default_factory=list)
    final_payload: dict[str, str] | None = None
    usage: dict[str, int] = field(default_factory=lambda: {"prompt_tokens": 0, "completion_tokens": 0})
    content: str = ""

    def __post_init__(self) -> None:
        if self.tool_calls and self.final_payload is not None:
            raise ValueError("a turn carries tool calls or a final payload, not both")


class Model(Protocol):
    def complete(
        self, history: Sequence[ChatMessage], tool_schemas: Sequence[dict], params: dict | None = None
    ) -> ModelTurn: ...


def parse_final_answer(text: str) -> dict[str, str]:
    """Find the first JSON object in ``text`` holding both ``thought`` and ``answer``.

    Surrounding prose and code fences are ignored; nested objects are searched
    too, so an answer object wrapped in another object is still found.
    """
    decoder = json.JSONDecoder(strict=False)
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict) and "thought" in obj and "answer" in obj:
            answer = obj["answer"]
            if not isinstance(answer, str):
                answer = json.dumps(answer, ensure_ascii=False)
            return {"thought": str(obj["thought"]), "answer": answer}
        pos = text.find("{", pos + 1)
    raise ParseFailure("no JSON object with both 'thought' and 'answer'")


def _check_history(history: Sequence[ChatMessage]) -> None:
    if not history or history[0].role != "system":
        raise ValueError("history must begin with the system message")
    if any(m.role == "system" for m in history[1:]):
        raise ValueError("history must contain exactly one system message")


def _usage(raw: dict | None) -> dict[str, int]:
    raw = raw or {}
    return {
        "prompt_tokens": int(raw.get("prompt_tokens") or 0),
        "completion_tokens": int(raw.get("completion_tokens") or 0),
    }


# -- scripted model ----------------------------------------------------------


class ScriptedModel:
    """Replays a fixed list of turns and records every history it is shown.

    Script entries are :class:`ModelTurn` objects or raw assistant strings;
    strings go through :func:`parse_final_answer` like real model output.
    """

    def __init__(self, script: Sequence[ModelTurn | str]) -> None:
        if not script:
            raise ValueError("script must be non-empty")
        last = script[-1]
        if isinstance(last, ModelTurn) and last.final_payload is None:
            raise ValueError("the last scripted turn must carry a final payload")
        self.script = list(script)
        self.histories: list[list[ChatMessage]] = []
        self.tool_schemas_seen: list[list[dict]] = []
        self.params_seen: list[dict] = []
        self._cursor = 0
        self._lock = threading.Lock()

    @property
    def completions(self) -> int:
        return self._cursor

    def complete(self, history, tool_schemas, params=None) -> ModelTurn:
        _check_history(history)
        with self._lock:
            if self._cursor >= len(self.script):
                raise ScriptExhausted(f"script has only {len(self.script)} turns")
            entry = self.script[self._cursor]
            self._cursor += 1
            self.histories.append(copy.deepcopy(list(history)))
            self.tool_schemas_seen.append(list(tool_schemas))
            self.params_seen.append(dict(params or {}))
        if isinstance(entry, ModelTurn):
            return copy.deepcopy(entry)
        try:
            payload = parse_final_answer(entry)
        except ParseFailure:
            raise MalformedResponse("scripted text has no final payload", content=entry) from None
        return ModelTurn(final_payload=payload, content=entry)


def scripted_model(script: Sequence[ModelTurn | str]) -> ScriptedModel:
    return ScriptedModel(script)


def load_script(path) -> ScriptedModel:
    """Build a :class:`ScriptedModel` from a JSON fixture.

    Each entry is ``{"content": str}`` (parsed like real output) or
    ``{"reasoning": str, "tool_calls": [{"name", "arguments", "id"?}],
    "final": {"thought", "answer"}, "usage": {...}}``.
    """
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    script: list[ModelTurn | str] = []
    counter = 0
    for entry in raw:
        if "content" in entry and "tool_calls" not in entry and "final" not in entry:
            script.append(entry["content"])
            continue
        calls = []
        for c in entry.get("tool_calls", []):
            counter += 1
            args = c.get("arguments", {})
            calls.append(ToolCall(
                call_id=c.get("id", f"call_{counter}"),
                tool_name=c["name"],
                arguments=args if isinstance(args, str) else json.dumps(args, ensure_ascii=False),
            ))
        script.append(ModelTurn(
            reasoning_text=entry.get("reasoning", ""),
            tool_calls=calls,
            final_payload=entry.get("final"),
            usage=_usage(entry.get("usage")),
        ))
    return ScriptedModel(script)


# -- OpenAI-compatible HTTP client -------------------------------------------


class OpenAIChatModel:
    """Chat-completions client for any OpenAI-compatible endpoint.

    Transport failures and 429s are retried with exponential backoff and
    jitter; after ``max_attempts`` the call raises :class:`ModelUnavailable`.
    A successfully parsed turn is never retried.
    """

    def __init__(
        self,
        model: str,
        endpoint: str,
        api_key: str | None = None,
        *,
        params: dict | None = None,
        max_attempts: int = 5,
        backoff_base: float = 1.0,
        backoff_max: float = 60.0,
        timeout: float = 600.0,
        max_in_flight: int = 8,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ) -> None:
        self.model = model
        self.url = endpoint.rstrip("/") + "/chat/completions"
        self.params = dict(params or {})
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_max = backoff_max
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._sleep = sleep
        self._rng = rng or random.Random()

    def __repr__(self) -> str:
        return f"OpenAIChatModel(model={self.model!r}, url={self.url!r})"

    def build_request(self, history, tool_schemas, params=None) -> dict[str, Any]:
        body: dict[str, Any] = {"model": self.model, "messages": [m.to_wire() for m in history]}
        body.update(self.params)
        body.update(params or {})
        if tool_schemas:
            body["tools"] = list(tool_schemas)
        else:
            for key in ("tools", "tool_choice", "parallel_tool_calls"):
                body.pop(key, None)
        return body

    @staticmethod
    def parse_response(body: dict[str, Any]) -> ModelTurn:
        try:
            message = body["choices"][0]["message"]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponse("response has no choices[0].message") from None
        usage = _usage(body.get("usage"))
        content = message.get("content") or ""
        reasoning = message.get("reasoning_content") or message.get("reasoning") or ""
        calls = []
        for raw in message.get("tool_calls") or []:
            fn = raw.get("function") or {}
            args = fn.get("arguments", "")
            if not isinstance(args, str):
                args = json.dumps(args, ensure_ascii=False)
            if not raw.get("id") or not fn.get("name"):
                raise MalformedResponse("tool call without id or function name", content, usage)
            calls.append(ToolCall(raw["id"], fn["name"], args))
        if calls:
            return ModelTurn(reasoning_text=reasoning or content, tool_calls=calls, usage=usage, content=content)
        try:
            payload = parse_final_answer(content)
        except ParseFailure:
            raise MalformedResponse("neither tool calls nor a final answer", content, usage) from None
        return ModelTurn(reasoning_text=reasoning, final_payload=payload, usage=usage, content=content)

    def _post(self, body: dict) -> dict:
        try:
            resp = self._client.post(self.url, json=body, headers=self._headers)
        except httpx.TransportError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code == 429:
            retry_after = resp.headers.get("retry-after")
            try:
                delay = float(retry_after) if retry_after else None
            except ValueError:
                delay = None
            raise RateLimited("rate limited (429)", delay)
        if resp.status_code >= 500:
            raise TransportError(f"upstream {resp.status_code}")
        if resp.status_code >= 400:
            raise RequestRejected(f"request rejected ({resp.status_code}): {resp.text[:500]}")
        try:
            return resp.json()
        except ValueError:
            raise MalformedResponse("response body is not JSON") from None

    def _backoff(self, attempt: int, hint: float | None) -> float:
        delay = min(self.backoff_max, self.backoff_base * 2 ** (attempt - 1))
        delay *= 0.5 + self._rng.random() / 2
        return max(delay, hint or 0.0)

    def _request(self, body: dict) -> dict:
        last: ModelError | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                with self._slots:
                    return self._post(body)
            except (TransportError, RateLimited) as exc:
                last = exc
                if attempt == self.max_attempts:
                    break
                delay = self._backoff(attempt, getattr(exc, "retry_after", None))
                logger.warning("model call failed (%s), retry %d in %.1fs", exc, attempt, delay)
                self._sleep(delay)
        raise ModelUnavailable(f"gave up after {self.max_attempts} attempts: {last}")

    def complete(self, history, tool_schemas, params=None) -> ModelTurn:
        _check_history(history)
        return self.parse_response(self._request(self.build_request(history, tool_schemas, params)))

    def complete_text(self, messages: Sequence[ChatMessage], params=None) -> tuple[str, dict[str, int]]:
        """Plain completion without tools; used by the scrape summarizer."""
        body = self._request(self.build_request(messages, [], params))
        try:
            content = body["choices"][0]["message"].get("content") or ""
        except (KeyError, IndexError, TypeError):
            raise MalformedResponse("response has no choices[0].message") from None
        return content, _usage(body.get("usage"))
