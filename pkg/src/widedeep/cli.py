"""Command-line entry point.

    widedeep run TASK_FILE [options]
    widedeep sweep TASKS --schedulers constant:1,constant:3 --max-steps-grid 10,25
    widedeep bench generate|check ...
    widedeep render-prompts [--date YYYY-MM-DD]
    widedeep summarize RUN_DIR

Settings resolve as flags > --config file > WIDEDEEP_* environment > defaults.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

from . import metrics, prompting
from .executor import HardFailure, RunConfig, TaskSpec, load_tasks, resolve_exposure, run, safe_name, sweep
from .model import OpenAIChatModel, load_script
from .scheduler import PolicyError, SchedulePolicy
from .trace import load_trace, trace_stats

EXIT_OK, EXIT_USAGE, EXIT_HARD_FAILURE, EXIT_PARTIAL = 0, 2, 3, 4

DEFAULTS: dict[str, Any] = {
    "model": None,
    "endpoint": "https://api.openai.com/v1",
    "api_key_env": "OPENAI_API_KEY",
    "scheduler": "constant:3",
    "max_steps": None,
    "exposure": None,
    "parallel_tasks": 1,
    "strict_compliance": False,
    "plain_sequential": False,
    "count_in_system": False,
    "scripted": None,
    "seed": 0,
    "decoding": {},
    "instruction": prompting.DEFAULT_INSTRUCTION,
    "date": None,
    "templates": None,
    "search_endpoint": "https://google.serper.dev/search",
    "search_key_env": "SERPER_API_KEY",
    "reader_endpoint": "https://r.jina.ai/",
    "reader_key_env": "JINA_API_KEY",
    "summarizer_model": "gemini-2.5-flash",
    "summarizer_endpoint": None,
    "search_fixture": None,
    "page_fixture": None,
    "no_empty_guard": False,
}
_BOOL_KEYS = {k for k, v in DEFAULTS.items() if isinstance(v, bool)}
_INT_KEYS = {"max_steps", "parallel_tasks", "seed"}


class UsageError(Exception):
    pass


def _coerce(key: str, value: Any) -> Any:
    if value is None:
        return None
    if key in _BOOL_KEYS and isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if key in _INT_KEYS:
        return int(value)
    if key == "decoding" and isinstance(value, str):
        return json.loads(value)
    return value


def resolve_settings(args: argparse.Namespace, environ=os.environ) -> dict[str, Any]:
    settings = dict(DEFAULTS)
    for key in DEFAULTS:
        env = environ.get(f"WIDEDEEP_{key.upper()}")
        if env is not None:
            settings[key] = _coerce(key, env)
    config_path = getattr(args, "config", None)
    if config_path:
        data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        for key, value in data.items():
            settings[key] = _coerce(key, value)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            settings[key] = _coerce(key, value)
    return settings


def _parse_date(text: str | None) -> _dt.date:
    if not text:
        return _dt.date.today()
    try:
        return _dt.date.fromisoformat(text)
    except ValueError:
        raise UsageError(f"--date must be YYYY-MM-DD, got {text!r}") from None


def build_run_config(settings: dict[str, Any], *, scheduler: str | None = None,
                     max_steps: int | None = None) -> RunConfig:
    try:
        policy = SchedulePolicy.parse(scheduler or settings["scheduler"])
    except PolicyError as exc:
        raise UsageError(str(exc)) from None
    templates = prompting.TemplateSet.load(settings["templates"]) if settings["templates"] else None
    exposure = resolve_exposure(settings["exposure"]) if settings["exposure"] is not None else None
    model = settings["model"] or (f"scripted:{settings['scripted']}" if settings["scripted"] else "unset")
    return RunConfig(
        max_steps=max_steps if max_steps is not None else settings["max_steps"],
        policy=policy,
        exposure=exposure,
        model=model,
        plain_sequential=settings["plain_sequential"],
        strict_compliance=settings["strict_compliance"],
        count_in_system=settings["count_in_system"],
        decoding=settings["decoding"],
        instruction=settings["instruction"],
        date=_parse_date(settings["date"]),
        templates=templates,
    )


# -- factories ---------------------------------------------------------------


def _is_planner(scripted: str | None) -> bool:
    return bool(scripted) and scripted.split(":", 1)[0] == "planner"


def model_factory(settings: dict[str, Any]):
    scripted = settings["scripted"]
    if _is_planner(scripted):
        from .simbench import PlannerModel

        strategy = scripted.split(":", 1)[1] if ":" in scripted else "follow"
        return lambda task, config: PlannerModel(strategy)
    if scripted:
        path = Path(scripted)
        if not path.exists():
            raise UsageError(f"scripted fixture not found: {path}")
        return lambda task, config: load_script(path)
    if not settings["model"]:
        raise UsageError("no model configured: pass --model NAME (and --endpoint) or --scripted FIXTURE")
    key_env = settings["api_key_env"]
    key = os.environ.get(key_env)
    if not key:
        raise UsageError(f"missing API key: set the {key_env} environment variable "
                         f"(or choose another variable with --api-key-env)")
    shared = OpenAIChatModel(settings["model"], settings["endpoint"], key)
    return lambda task, config: shared


def registry_factory(settings: dict[str, Any]):
    from . import toolkit
    from .simbench import bench_registry, task_from_spec

    def offline_backends():
        index = json.loads(Path(settings["search_fixture"]).read_text()) if settings["search_fixture"] else {}
        pages = json.loads(Path(settings["page_fixture"]).read_text()) if settings["page_fixture"] else {}
        return toolkit.FixtureSearch(index), toolkit.FixtureReader(pages), (lambda content, query: content)

    def live_backends():
        search_key = os.environ.get(settings["search_key_env"])
        if not search_key:
            raise UsageError(f"missing search API key: set {settings['search_key_env']}")
        llm_key = os.environ.get(settings["api_key_env"])
        summarizer_model = OpenAIChatModel(
            settings["summarizer_model"], settings["summarizer_endpoint"] or settings["endpoint"], llm_key
        )
        return (
            toolkit.SerperSearch(search_key, settings["search_endpoint"]),
            toolkit.JinaReader(os.environ.get(settings["reader_key_env"]), settings["reader_endpoint"]),
            toolkit.LLMSummarizer(summarizer_model),
        )

    offline = bool(settings["scripted"]) or settings["search_fixture"] or settings["page_fixture"]
    cache: dict[str, Any] = {}

    def make(task: TaskSpec):
        if task.bench is not None and settings["scripted"]:
            return bench_registry(task_from_spec(task))
        if "backends" not in cache:
            cache["backends"] = offline_backends() if offline else live_backends()
        search_backend, reader, summarizer = cache["backends"]
        return toolkit.default_registry(search_backend, reader, summarizer,
                                        empty_guard=not settings["no_empty_guard"])

    return make


# -- commands ----------------------------------------------------------------


def cmd_run(args) -> int:
    settings = resolve_settings(args)
    config = build_run_config(settings)
    if args.print_config:
        print(json.dumps({"settings": settings, "fingerprint_inputs": config.fingerprint_inputs(),
                          "config_fingerprint": config.fingerprint()}, indent=2, sort_keys=True, default=str))
        return EXIT_OK
    tasks = load_tasks(args.task_file)
    if len(tasks) != 1:
        raise UsageError(f"run expects one task, {args.task_file} holds {len(tasks)}; use sweep")
    task = tasks[0]
    make_model, make_registry = model_factory(settings), registry_factory(settings)
    out = Path(args.out) if args.out else Path(args.run_dir) / "single" / f"{safe_name(task.task_id)}.trace"
    try:
        trace = run(task, config, make_model(task, config), make_registry(task), out_path=out)
    except HardFailure as exc:
        print(f"hard failure: {exc}", file=sys.stderr)
        print(f"trace: {out}", file=sys.stderr)
        return EXIT_HARD_FAILURE
    stats = trace_stats(trace)
    m = metrics.aggregate([trace], [None])
    print(f"answer: {trace.final.answer}")
    print(f"forced: {str(trace.final.forced).lower()}")
    print(f"turns: {stats['turns']}")
    print(f"calls_per_turn: {stats['calls_per_turn']}")
    print(f"tokens: {stats['total_tokens']}")
    print(f"tool_cost_units: {m.tool_cost_units:g}")
    if task.answer_key is not None:
        from .simbench import grade

        print(f"correct: {str(grade(trace.final.answer, task.answer_key)['correct']).lower()}")
    print(f"trace: {out}")
    return EXIT_OK


def _split(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def cmd_sweep(args) -> int:
    settings = resolve_settings(args)
    schedulers = _split(args.schedulers) if args.schedulers else []
    limits = [int(x) for x in _split(args.max_steps_grid)] if args.max_steps_grid else []
    if not schedulers or not limits:
        raise UsageError("sweep needs a non-empty grid: --schedulers and --max-steps-grid")
    grid = [build_run_config(settings, scheduler=s, max_steps=n) for s in schedulers for n in limits]
    tasks = load_tasks(args.tasks)
    if not tasks:
        raise UsageError(f"no tasks found in {args.tasks}")
    path = sweep(
        tasks, grid, settings["parallel_tasks"],
        model_factory=model_factory(settings),
        registry_factory=registry_factory(settings),
        run_dir=args.run_dir,
        sweep_id=args.sweep_id,
        resume=args.resume,
    )
    print(path.parent.joinpath("summary.grid").read_text(), end="")
    print(f"summary: {path}")
    export = json.loads(path.parent.joinpath("summary.json").read_text())
    partial = [c for c in export["cells"] if c["completed"] < (c["expected"] or c["n"])]
    if all(c["completed"] == 0 for c in export["cells"]):
        return EXIT_HARD_FAILURE
    if partial and args.strict:
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_render_prompts(args) -> int:
    settings = resolve_settings(args)
    templates = prompting.TemplateSet.load(settings["templates"]) if settings["templates"] else None
    from .scheduler import schedule

    date = _parse_date(settings["date"])
    max_steps = settings["max_steps"] or 100
    if templates is not None and templates.overridden:
        print(f"# NOTE: overridden templates in use: {', '.join(templates.overridden)}; golden guarantees do not apply")
    sections = [
        ("system", prompting.render_system(date, settings["instruction"], args.question, max_steps, templates)),
        ("count_control", prompting.render_count_control(args.m, templates)),
        ("countdown", prompting.render_step_message(schedule(SchedulePolicy("constant", args.m), 1), args.n, templates)),
        ("automatic_control", (templates or prompting.default_templates()).bodies["automatic_control"]),
        ("automatic_step", prompting.render_step_message(schedule(SchedulePolicy("automatic"), 1), args.n, templates)),
        ("force_answer", prompting.render_force_answer(templates)),
    ]
    for name, body in sections:
        print(f"===== {name} =====")
        print(body)
    return EXIT_OK


def cmd_summarize(args) -> int:
    root = Path(args.run_dir)
    cells = []
    for cell_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        cfg_path = cell_dir / "config.json"
        cfg = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}
        traces = [load_trace(p) for p in sorted(cell_dir.glob("*.trace"))]
        if not traces:
            continue
        keys = {}
        if args.tasks:
            keys = {t.task_id: t.answer_key for t in load_tasks(args.tasks)}
        from .simbench import grade

        grades = []
        for tr in traces:
            key = keys.get(tr.task_id)
            if key is None:
                grades.append(None)
            else:
                grades.append(tr.final is not None and grade(tr.final.answer, key)["correct"])
        policy = cfg.get("policy", cell_dir.name) + ("-plain" if cfg.get("plain_sequential") else "")
        cells.append(metrics.CellSummary(cfg.get("cell_id", cell_dir.name), policy, cfg.get("max_steps"),
                                         metrics.aggregate(traces, grades)))
    if not cells:
        raise UsageError(f"no traces under {root}")
    out = metrics.emit_summary(cells, root)
    print(out["grid"], end="")
    print(f"summary: {out['table_path']}")
    return EXIT_OK


def cmd_bench_generate(args) -> int:
    from .simbench import generate_task

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        task = generate_task(args.seed + i, args.facts, args.rate)
        spec = task.to_taskspec(args.max_steps)
        (out / f"{safe_name(spec.task_id)}.json").write_text(json.dumps(spec.to_dict(), indent=2))
    print(f"wrote {args.n} tasks to {out}")
    return EXIT_OK


def cmd_bench_check(args) -> int:
    from . import simbench as sb

    ok_all = True

    def report(name: str, ok: bool, detail: str) -> None:
        nonlocal ok_all
        ok_all &= ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")

    bad = [(F, m) for F in range(1, 21) for m in range(1, 9)
           if len(sb.planner_run(sb.generate_task(F * 100 + m, F), sb.Strategy("parallel", m), 100).steps)
           != sb.expected_turns(F, m)]
    report("turn law", not bad, f"{160 - len(bad)}/160 (F, m) pairs give ceil(F/m)+1 turns")

    acc3 = sb.bench_accuracy("parallel(3)", range(args.seeds), 12, 0.0, 5)
    acc1 = sb.bench_accuracy("sequential", range(args.seeds), 12, 0.0, 5)
    report("width under tight budget", acc3 == 1.0 and acc1 == 0.0,
           f"F=12 max_steps=5: m=3 -> {acc3:.2f}, m=1 -> {acc1:.2f}")

    red = sb.bench_accuracy("redundant(3)", range(args.redundancy_seeds), 6, 0.3, 10)
    seq = sb.bench_accuracy("sequential", range(args.redundancy_seeds), 6, 0.3, 10)
    pred = sb.closed_form_accuracy(0.3, 6, "redundant(3)")
    report("redundancy", red - seq >= 0.10 and abs(red - pred) <= 0.02,
           f"redundant(3) {red:.3f} vs sequential {seq:.3f}; closed form {pred:.3f}")

    task = sb.generate_task(args.seed, 6)
    stuffed = sb.fact_recall(task, sb.planner_run(task, "stuffed", 7))
    split = sb.fact_recall(task, sb.planner_run(task, "parallel(6)", 7))
    report("decomposition recall", stuffed == 0.0 and split == 1.0,
           f"keyword-stuffed {stuffed:.0%}, decomposed {split:.0%}")
    return EXIT_OK if ok_all else EXIT_HARD_FAILURE


# -- parser ------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--model", help="model name on the OpenAI-compatible endpoint")
    p.add_argument("--endpoint", help="base URL of the chat-completions endpoint")
    p.add_argument("--api-key-env", dest="api_key_env", help="environment variable holding the API key")
    p.add_argument("--scheduler", help="constant:k | ascending | descending | automatic")
    p.add_argument("--max-steps", dest="max_steps", type=int, help="step budget before the forced answer")
    p.add_argument("--exposure", help="browse | all | none | comma-separated tool names")
    p.add_argument("--parallel-tasks", dest="parallel_tasks", type=int, help="tasks run concurrently in a sweep")
    p.add_argument("--strict-compliance", dest="strict_compliance", action="store_true",
                   help="re-prompt once when the call count falls outside the window")
    p.add_argument("--plain-sequential", dest="plain_sequential", action="store_true",
                   help="classic single-call baseline: no count instruction, no parallel calls")
    p.add_argument("--count-in-system", dest="count_in_system", action="store_true",
                   help="put the count instruction in the system prompt instead of each step")
    p.add_argument("--scripted", help="scripted model: JSON fixture path, or 'planner[:strategy]' for bench tasks")
    p.add_argument("--seed", type=int)
    p.add_argument("--decoding", help="JSON map of vendor decoding params, e.g. '{\"reasoning_effort\": \"medium\"}'")
    p.add_argument("--instruction", help="text for the system prompt's role section")
    p.add_argument("--date", help="fixed date YYYY-MM-DD for the system prompt")
    p.add_argument("--templates", help="directory with template overrides")
    p.add_argument("--search-fixture", dest="search_fixture", help="offline search index JSON")
    p.add_argument("--page-fixture", dest="page_fixture", help="offline page contents JSON (url -> text)")
    p.add_argument("--no-empty-guard", dest="no_empty_guard", action="store_true",
                   help="let the summarizer see empty pages")
    p.add_argument("--run-dir", dest="run_dir", default="runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="widedeep", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one task")
    p.add_argument("task_file")
    _add_run_flags(p)
    p.add_argument("--out", help="trace output path")
    p.add_argument("--print-config", dest="print_config", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run tasks over a scheduler x max-steps grid")
    p.add_argument("tasks", help="task file or directory")
    _add_run_flags(p)
    p.add_argument("--schedulers", help="comma-separated scheduler list")
    p.add_argument("--max-steps-grid", dest="max_steps_grid", help="comma-separated step budgets")
    p.add_argument("--sweep-id", dest="sweep_id")
    p.add_argument("--resume", action="store_true", help="reuse traces already on disk")
    p.add_argument("--strict", action="store_true", help="exit 4 when any cell is incomplete")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("render-prompts", help="print every rendered template")
    p.add_argument("--config")
    p.add_argument("--date")
    p.add_argument("--templates")
    p.add_argument("--instruction")
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--question", default="QUESTION")
    p.add_argument("-m", type=int, default=3, help="count window lower bound")
    p.add_argument("-n", type=int, default=42, help="steps remaining")
    p.set_defaults(func=cmd_render_prompts)

    p = sub.add_parser("summarize", help="rebuild summary files from a sweep directory")
    p.add_argument("run_dir")
    p.add_argument("--tasks", help="task file/dir with answer keys for grading")
    p.set_defaults(func=cmd_summarize)

    bench = sub.add_parser("bench", help="synthetic bench")
    bsub = bench.add_subparsers(dest="bench_command", required=True)
    p = bsub.add_parser("generate", help="write synthetic task files")
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int, default=50)
    p.add_argument("--facts", "-F", type=int, default=12)
    p.add_argument("--rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=100)
    p.set_defaults(func=cmd_bench_generate)
    p = bsub.add_parser("check", help="verify the bench's structural laws")
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--redundancy-seeds", dest="redundancy_seeds", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"widedeep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
