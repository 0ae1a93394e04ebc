"""Prompt rendering.

Templates live as plain-text data files under ``widedeep/templates`` so they
can be audited and overridden. Placeholders use ``{{NAME}}``; rendering is a
literal substitution and nothing else in the body is touched.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .scheduler import AUTOMATIC, ScheduleDirective

PLACEHOLDERS: dict[str, frozenset[str]] = {
    "system": frozenset({"FORMATTED_DATE", "INSTRUCTION", "QUESTION", "MAX_STEPS"}),
    "count_control": frozenset({"m", "m_plus_1"}),
    "countdown": frozenset({"n", "m", "m_plus_1"}),
    "automatic_control": frozenset(),
    "force_answer": frozenset(),
    "summarizer": frozenset({"EXTRACTION_QUERY"}),
}

DEFAULT_INSTRUCTION = (
    "You are a deep research agent: search the web, read sources carefully and "
    "verify facts before answering."
)

CORRECTION_COUNT = (
    "Your previous response did not respect this instruction. "
    "Make between {lo} and {hi} function calls in a single response."
)
CORRECTION_FORMAT = "Respond with function calls or the final answer format."

_PLACEHOLDER_RE = re.compile(r"\{\{([A-Za-z_][A-Za-z0-9_]*)\}\}")


class TemplateError(ValueError):
    pass


class EmptyQuestion(ValueError):
    pass


def _substitute(body: str, values: dict[str, object]) -> str:
    def repl(match: re.Match) -> str:
        return str(values[match.group(1)])

    return _PLACEHOLDER_RE.sub(repl, body)


def format_date(day: _dt.date) -> str:
    """``Wednesday, January 1, 2025``."""
    return f"{day:%A}, {day:%B} {day.day}, {day.year}"


@dataclass
class TemplateSet:
    bodies: dict[str, str]
    overridden: list[str] = field(default_factory=list)

    @classmethod
    def load(cls, override_dir: str | Path | None = None) -> TemplateSet:
        pkg = resources.files("widedeep") / "templates"
        bodies = {name: (pkg / f"{name}.txt").read_text(encoding="utf-8") for name in PLACEHOLDERS}
        overridden = []
        if override_dir is not None:
            for name in PLACEHOLDERS:
                path = Path(override_dir) / f"{name}.txt"
                if path.exists():
                    bodies[name] = path.read_text(encoding="utf-8")
                    overridden.append(name)
        tset = cls(bodies, overridden)
        tset.validate()
        return tset

    def validate(self) -> None:
        for name, expected in PLACEHOLDERS.items():
            found = set(_PLACEHOLDER_RE.findall(self.bodies[name]))
            if found != expected:
                raise TemplateError(
                    f"template {name!r} has placeholders {sorted(found)}, expected {sorted(expected)}"
                )
        if not self.bodies["countdown"].endswith(self.bodies["count_control"]):
            raise TemplateError("countdown template must end with the count-control sentence")

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.bodies):
            h.update(name.encode())
            h.update(b"\0")
            h.update(self.bodies[name].encode())
            h.update(b"\0")
        return h.hexdigest()[:16]

    @property
    def countdown_prefix(self) -> str:
        body = self.bodies["countdown"]
        return body[: len(body) - len(self.bodies["count_control"])]


_DEFAULT: TemplateSet | None = None


def default_templates() -> TemplateSet:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = TemplateSet.load()
    return _DEFAULT


def render_system(
    date: _dt.date | str,
    instruction: str,
    question: str,
    max_steps: int,
    templates: TemplateSet | None = None,
) -> str:
    if not question:
        raise EmptyQuestion("question must be non-empty")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    tpl = templates or default_templates()
    if isinstance(date, _dt.date):
        date = format_date(date)
    return _substitute(
        tpl.bodies["system"],
        {"FORMATTED_DATE": date, "INSTRUCTION": instruction, "QUESTION": question, "MAX_STEPS": max_steps},
    )


def render_count_control(m: int, templates: TemplateSet | None = None) -> str:
    tpl = templates or default_templates()
    return _substitute(tpl.bodies["count_control"], {"m": m, "m_plus_1": m + 1})


def render_countdown(n: int, templates: TemplateSet | None = None) -> str:
    """The remaining-budget sentence alone, without a count instruction."""
    tpl = templates or default_templates()
    return _substitute(tpl.countdown_prefix, {"n": n}).rstrip()


def render_step_message(
    directive: ScheduleDirective, steps_remaining: int, templates: TemplateSet | None = None
) -> str:
    if steps_remaining < 1:
        raise ValueError("steps_remaining must be >= 1")
    tpl = templates or default_templates()
    if directive.mode == AUTOMATIC:
        prefix = _substitute(tpl.countdown_prefix, {"n": steps_remaining})
        return prefix + tpl.bodies["automatic_control"]
    return _substitute(
        tpl.bodies["countdown"],
        {"n": steps_remaining, "m": directive.min_calls, "m_plus_1": directive.max_calls},
    )


def render_force_answer(templates: TemplateSet | None = None) -> str:
    return (templates or default_templates()).bodies["force_answer"]


def render_summarizer(extraction_query: str, templates: TemplateSet | None = None) -> str:
    tpl = templates or default_templates()
    return _substitute(tpl.bodies["summarizer"], {"EXTRACTION_QUERY": extraction_query})


def correction_for(directive: ScheduleDirective) -> str:
    return CORRECTION_COUNT.format(lo=directive.min_calls, hi=directive.max_calls)


def has_placeholder(text: str) -> bool:
    return bool(_PLACEHOLDER_RE.search(text))
