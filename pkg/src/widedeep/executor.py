"""The agent loop and the sweep runner.

One run alternates: inject the step's user message, ask the model, execute
the returned call set in parallel, append the step. When the step budget is
spent without an answer, the force-answer message is sent and one more
completion is requested with tools disabled.
"""

from __future__ import annotations

import concurrent.futures as cf
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from . import prompting
from .model import ChatMessage, MalformedResponse, Model, ModelError, ModelTurn
from .scheduler import AUTOMATIC, SchedulePolicy, ScheduleDirective, compliance, schedule
from .toolkit import EXPOSURE_PRESETS, ToolRegistry, execute_parallel
from .trace import AgentTrace, FinalAnswer, Query, Step, ToolCall, append_step, finalize, save_trace

logger = logging.getLogger(__name__)

DEFAULT_DATE = _dt.date(2025, 1, 1)


class HardFailure(Exception):
    """The run ended without an answer; ``trace`` holds what was recorded."""

    def __init__(self, message: str, trace: AgentTrace | None = None) -> None:
        super().__init__(message)
        self.trace = trace


def resolve_exposure(exposure: str | Iterable[str] | None) -> frozenset[str]:
    if exposure is None:
        return EXPOSURE_PRESETS["browse"]
    if isinstance(exposure, str):
        if exposure in EXPOSURE_PRESETS:
            return EXPOSURE_PRESETS[exposure]
        return frozenset(x.strip() for x in exposure.split(",") if x.strip())
    return frozenset(exposure)


@dataclass
class TaskSpec:
    task_id: str
    question: str
    answer_key: str | None = None
    exposure: str | list[str] = "browse"
    max_steps: int = 100
    bench: dict[str, Any] | None = None  # synthetic-bench parameters; absent for real benchmark items

    def __post_init__(self) -> None:
        if not self.question:
            raise ValueError(f"task {self.task_id}: question must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        out = {
            "task_id": self.task_id,
            "question": self.question,
            "answer_key": self.answer_key,
            "exposure": self.exposure,
            "max_steps": self.max_steps,
        }
        if self.bench is not None:
            out["bench"] = self.bench
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TaskSpec:
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def load_tasks(path: str | Path) -> list[TaskSpec]:
    """Load tasks from a ``.json`` file (object or list), a ``.jsonl`` file, or a directory of those."""
    path = Path(path)
    if path.is_dir():
        tasks: list[TaskSpec] = []
        for child in sorted(path.iterdir()):
            if child.suffix in (".json", ".jsonl"):
                tasks.extend(load_tasks(child))
        return tasks
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".jsonl":
        return [TaskSpec.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
    data = json.loads(text)
    if isinstance(data, list):
        return [TaskSpec.from_dict(d) for d in data]
    return [TaskSpec.from_dict(data)]


@dataclass
class RunConfig:
    max_steps: int | None = None  # None: use the task's own budget
    policy: SchedulePolicy = field(default_factory=lambda: SchedulePolicy("constant", 3))
    exposure: frozenset[str] | None = None  # None: use the task's exposure
    model: str = "scripted"
    plain_sequential: bool = False
    strict_compliance: bool = False
    reprompt_on_malformed: bool = True
    count_in_system: bool = False  # the rejected alternative: count instruction in the system prompt
    decoding: dict[str, Any] = field(default_factory=dict)
    instruction: str = prompting.DEFAULT_INSTRUCTION
    date: _dt.date | str = DEFAULT_DATE
    templates: prompting.TemplateSet | None = None

    def __post_init__(self) -> None:
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def cell_id(self) -> str:
        steps = self.max_steps if self.max_steps is not None else "task"
        label = str(self.policy).replace(":", "-")
        if self.plain_sequential:
            label += "-plain"
        return f"{label}@{steps}"

    def fingerprint_inputs(self) -> dict[str, Any]:
        tpl = self.templates or prompting.default_templates()
        date = self.date if isinstance(self.date, str) else self.date.isoformat()
        return {
            "max_steps": self.max_steps,
            "policy": str(self.policy),
            "exposure": sorted(self.exposure) if self.exposure is not None else None,
            "model": self.model,
            "plain_sequential": self.plain_sequential,
            "strict_compliance": self.strict_compliance,
            "reprompt_on_malformed": self.reprompt_on_malformed,
            "count_in_system": self.count_in_system,
            "decoding": self.decoding,
            "instruction": self.instruction,
            "date": date,
            "templates": tpl.fingerprint,
            "templates_overridden": sorted(tpl.overridden),
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.fingerprint_inputs(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def handle_noncompliance(
    turn: ModelTurn, directive: ScheduleDirective, *, strict: bool = False, already_reprompted: bool = False
) -> tuple[str, dict[str, Any] | None]:
    """Decide what to do with a tool-calling turn outside the scheduled window.

    Returns ``(action, record)``; action is ``"proceed"`` or ``"reprompt"``
    and record is ``None`` for compliant turns. Non-compliant calls are
    executed as issued by default; ``strict`` allows one re-prompt per step.
    """
    if not turn.tool_calls:
        raise ValueError("handle_noncompliance expects a tool-calling turn")
    ok, deviation = compliance(directive, len(turn.tool_calls))
    if ok:
        return "proceed", None
    record = {
        "observed": len(turn.tool_calls),
        "window": [directive.min_calls, directive.max_calls],
        "deviation": deviation,
    }
    if strict and not already_reprompted:
        return "reprompt", record
    return "proceed", record


def _add_usage(total: dict[str, int], usage: dict[str, int]) -> None:
    for key in ("prompt_tokens", "completion_tokens"):
        total[key] = total.get(key, 0) + int(usage.get(key, 0))


def _join(message: str, extra: str) -> str:
    return f"{message} {extra}" if message else extra


class _BudgetSpent(Exception):
    """The step budget ran out while a turn still needed a re-prompt."""

    def __init__(self, usage: dict[str, int]) -> None:
        super().__init__("step budget spent")
        self.usage = usage


class _Runner:
    def __init__(self, task: TaskSpec, config: RunConfig, model: Model, registry: ToolRegistry) -> None:
        self.task = task
        self.used = 0  # completions charged to the step budget
        self.config = config
        self.model = model
        self.templates = config.templates or prompting.default_templates()
        self.max_steps = config.max_steps if config.max_steps is not None else task.max_steps
        exposure = config.exposure if config.exposure is not None else resolve_exposure(task.exposure)
        missing = exposure - set(registry.tools)
        if missing:
            raise ValueError(f"exposure names unregistered tools: {sorted(missing)}")
        self.registry = registry.expose(exposure)
        self.tool_schemas = self.registry.schemas()
        self.params = dict(config.decoding)
        if self.tool_schemas:
            self.params["parallel_tool_calls"] = not config.plain_sequential

    # -- message composition --

    def system_text(self) -> str:
        instruction = self.config.instruction
        if self.config.count_in_system:
            first = schedule(self.config.policy, 1)
            if first.mode == AUTOMATIC:
                control = self.templates.bodies["automatic_control"]
            else:
                control = prompting.render_count_control(first.min_calls, self.templates)
            instruction = f"{instruction}\n\n{control}"
        return prompting.render_system(self.config.date, instruction, self.task.question,
                                       self.max_steps, self.templates)

    def step_message(self, t: int, directive: ScheduleDirective) -> str:
        remaining = self.max_steps - self.used
        plain = self.config.plain_sequential or self.config.count_in_system or not self.tool_schemas
        if plain:
            return prompting.render_countdown(remaining, self.templates)
        return prompting.render_step_message(directive, remaining, self.templates)

    # -- loop --

    def run(self) -> AgentTrace:
        started = time.monotonic()
        trace = AgentTrace(
            query=Query(self.system_text(), self.task.question, self.task.task_id),
            config_fingerprint=self.config.fingerprint(),
        )
        history: list[ChatMessage] = [ChatMessage("system", trace.query.system_text)]
        try:
            self._loop(trace, history)
        except HardFailure as exc:
            trace.failure = str(exc)
            exc.trace = trace
            raise
        except ModelError as exc:
            trace.failure = f"{type(exc).__name__}: {exc}"
            raise HardFailure(trace.failure, trace) from exc
        finally:
            trace.wall_clock = time.monotonic() - started
        return trace

    def _loop(self, trace: AgentTrace, history: list[ChatMessage]) -> None:
        t = 1
        used_ids: set[str] = set()
        carried = {"prompt_tokens": 0, "completion_tokens": 0}
        while True:
            # Every completion before the forced one spends budget, re-prompts included.
            forced = self.used >= self.max_steps
            if forced:
                directive = None
                message = prompting.render_force_answer(self.templates)
                tools: list[dict] = []
            else:
                directive = schedule(self.config.policy, t)
                message = self.step_message(t, directive)
                tools = self.tool_schemas

            try:
                turn, sent, usage, reprompts = self._complete_step(history, message, directive, tools, forced)
            except _BudgetSpent as exc:
                # The last unit went to an unusable turn; its usage moves to the forced answer step.
                _add_usage(carried, exc.usage)
                continue
            _add_usage(usage, carried)
            carried = {"prompt_tokens": 0, "completion_tokens": 0}
            step = Step(
                index=t,
                injected_user_message=sent,
                reasoning=turn.reasoning_text,
                token_usage=usage,
                directive=directive.to_dict() if directive is not None else None,
                reprompts=reprompts,
            )
            history.append(ChatMessage("user", sent))

            if turn.final_payload is not None:
                final = FinalAnswer(turn.final_payload["thought"], turn.final_payload["answer"], forced)
                finalize(trace, step, final)
                return

            calls = []
            for i, call in enumerate(turn.tool_calls, 1):
                call_id = call.call_id
                if not call_id or call_id in used_ids:
                    call_id = f"call_{t}_{i}"
                used_ids.add(call_id)
                calls.append(ToolCall(call_id, call.tool_name, call.arguments))
            step.calls = calls
            step.observations = execute_parallel(self.registry, calls)
            append_step(trace, step)
            history.append(ChatMessage("assistant", turn.content, tool_calls=calls))
            for obs in step.observations:
                history.append(ChatMessage("tool", obs.content, tool_call_id=obs.call_id))
            t += 1

    def _complete_step(self, history, message, directive, tools, forced):
        """Request one turn, applying at most one format re-prompt and one count re-prompt."""
        usage = {"prompt_tokens": 0, "completion_tokens": 0}
        sent = message
        format_retry = count_retry = False

        def budget_left() -> bool:
            return forced or self.used < self.max_steps

        while True:
            if not forced:
                self.used += 1
            try:
                turn = self.model.complete([*history, ChatMessage("user", sent)], tools, self.params)
            except MalformedResponse as exc:
                _add_usage(usage, exc.usage)
                if self.config.reprompt_on_malformed and not format_retry:
                    if not budget_left():
                        raise _BudgetSpent(usage) from exc
                    format_retry = True
                    sent = _join(message, prompting.CORRECTION_FORMAT)
                    continue
                raise HardFailure(f"malformed model response: {exc}") from exc
            _add_usage(usage, turn.usage)

            if turn.final_payload is not None and not turn.final_payload.get("answer"):
                if not format_retry:
                    if not budget_left():
                        raise _BudgetSpent(usage)
                    format_retry = True
                    sent = _join(message, prompting.CORRECTION_FORMAT)
                    continue
                raise HardFailure("model returned an empty final answer")

            if turn.tool_calls and not tools:
                # Tools are disabled (forced answer or no-tool run): calls are rejected, asked once more.
                if not format_retry:
                    if not budget_left():
                        raise _BudgetSpent(usage)
                    format_retry = True
                    sent = message if forced else _join(message, prompting.CORRECTION_FORMAT)
                    continue
                raise HardFailure("model kept calling tools with tools disabled")

            if turn.tool_calls and directive is not None and not self.config.plain_sequential:
                action, record = handle_noncompliance(
                    turn, directive, strict=self.config.strict_compliance, already_reprompted=count_retry
                )
                if record is not None:
                    logger.info("task %s: non-compliant call count %s", self.task.task_id, record)
                if action == "reprompt" and budget_left():
                    count_retry = True
                    sent = _join(message, prompting.correction_for(directive))
                    continue
            return turn, sent, usage, int(format_retry) + int(count_retry)


def run(
    task: TaskSpec,
    config: RunConfig,
    model: Model,
    registry: ToolRegistry,
    *,
    out_path: str | Path | None = None,
) -> AgentTrace:
    """Run one task to completion. Raises :class:`HardFailure` (trace attached) if no answer."""
    runner = _Runner(task, config, model, registry)
    try:
        trace = runner.run()
    except HardFailure as exc:
        if out_path is not None and exc.trace is not None:
            save_trace(exc.trace, out_path)
        raise
    if out_path is not None:
        save_trace(trace, out_path)
    return trace


# -- sweeps ------------------------------------------------------------------

_SAFE = re.compile(r"[^A-Za-z0-9_.@-]+")


def safe_name(text: str) -> str:
    return _SAFE.sub("_", text)


@dataclass
class CellResult:
    cell_id: str
    config: RunConfig
    traces: list[AgentTrace]
    grades: list[bool | None]
    failures: list[str]


def sweep(
    tasks: Sequence[TaskSpec],
    grid: Sequence[RunConfig],
    parallel_tasks: int = 1,
    *,
    model_factory: Callable[[TaskSpec, RunConfig], Model],
    registry_factory: Callable[[TaskSpec], ToolRegistry],
    run_dir: str | Path = "runs",
    sweep_id: str | None = None,
    resume: bool = False,
    grader: Callable[[str, str], bool] | None = None,
    cost=None,
) -> Path:
    """Run every task under every config; returns the path of ``summary.table``."""
    from . import metrics
    from .simbench import grade as default_grade
    from .trace import load_trace

    if not grid:
        raise ValueError("sweep grid must be non-empty")
    if not tasks:
        raise ValueError("sweep needs at least one task")
    if parallel_tasks < 1:
        raise ValueError("parallel_tasks must be >= 1")
    grader = grader or (lambda answer, key: default_grade(answer, key)["correct"])
    sweep_id = sweep_id or _dt.datetime.now().strftime("sweep-%Y%m%d-%H%M%S")
    root = Path(run_dir) / safe_name(sweep_id)
    root.mkdir(parents=True, exist_ok=True)

    def one(task: TaskSpec, config: RunConfig, cell_dir: Path) -> tuple[AgentTrace | None, str | None]:
        path = cell_dir / f"{safe_name(task.task_id)}.trace"
        if resume and path.exists():
            trace = load_trace(path)
            return trace, trace.failure
        try:
            return run(task, config, model_factory(task, config), registry_factory(task), out_path=path), None
        except HardFailure as exc:
            logger.warning("task %s in %s hard-failed: %s", task.task_id, cell_dir.name, exc)
            return exc.trace, str(exc)
        except Exception as exc:  # noqa: BLE001 - a broken cell must not stop the sweep
            logger.exception("task %s in %s crashed", task.task_id, cell_dir.name)
            return None, f"{type(exc).__name__}: {exc}"

    cells: list[CellResult] = []
    seen: set[str] = set()
    with cf.ThreadPoolExecutor(max_workers=parallel_tasks) as pool:
        for config in grid:
            cell_id = config.cell_id
            if cell_id in seen:
                raise ValueError(f"duplicate grid cell {cell_id}")
            seen.add(cell_id)
            cell_dir = root / safe_name(cell_id)
            cell_dir.mkdir(parents=True, exist_ok=True)
            (cell_dir / "config.json").write_text(
                json.dumps({"cell_id": cell_id, **config.fingerprint_inputs(),
                            "fingerprint": config.fingerprint()}, indent=2, sort_keys=True)
            )
            futures = [pool.submit(one, task, config, cell_dir) for task in tasks]
            traces, grades, failures = [], [], []
            for task, fut in zip(tasks, futures):
                trace, failure = fut.result()
                if failure is not None:
                    failures.append(f"{task.task_id}: {failure}")
                if trace is None:
                    continue
                traces.append(trace)
                if task.answer_key is None:
                    grades.append(None)
                elif trace.final is None:
                    grades.append(False)
                else:
                    grades.append(bool(grader(trace.final.answer, task.answer_key)))
            cells.append(CellResult(cell_id, config, traces, grades, failures))

    summaries = []
    for cell in cells:
        if cell.traces:
            m = metrics.aggregate(cell.traces, cell.grades, cost, expected=len(tasks))
        else:
            m = metrics.empty_metrics(len(tasks))
        summaries.append(metrics.CellSummary(
            cell_id=cell.cell_id,
            policy=str(cell.config.policy) + ("-plain" if cell.config.plain_sequential else ""),
            max_steps=cell.config.max_steps,
            metrics=m,
        ))
    return metrics.emit_summary(summaries, root)["table_path"]
