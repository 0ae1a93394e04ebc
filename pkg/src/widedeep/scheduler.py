"""Tool-call schedulers: map a step index to the allowed call-count window."""

from __future__ import annotations

from dataclasses import dataclass

FIXED_WINDOW = "fixed_window"
AUTOMATIC = "automatic"

POLICY_KINDS = ("constant", "ascending", "descending", "automatic")

# Upper bounds of the piecewise segments: t <= 25, 25 < t <= 50, t > 50.
_ASCENDING = ((25, 1), (50, 2), (None, 3))
_DESCENDING = ((25, 3), (50, 2), (None, 1))


class InvalidStep(ValueError):
    pass


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleDirective:
    min_calls: int
    max_calls: int
    mode: str = FIXED_WINDOW

    def __post_init__(self) -> None:
        if self.mode == FIXED_WINDOW:
            if self.min_calls < 0 or self.max_calls != self.min_calls + 1:
                raise PolicyError(f"fixed window must be (m, m+1), got {self.as_tuple()}")
        elif self.mode == AUTOMATIC:
            if (self.min_calls, self.max_calls) != (1, 4):
                raise PolicyError(f"automatic window is (1, 4), got {self.as_tuple()}")
        else:
            raise PolicyError(f"unknown directive mode {self.mode!r}")

    def as_tuple(self) -> tuple[int, int]:
        return (self.min_calls, self.max_calls)

    def to_dict(self) -> dict:
        return {"min_calls": self.min_calls, "max_calls": self.max_calls, "mode": self.mode}


@dataclass(frozen=True)
class SchedulePolicy:
    kind: str
    k: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise PolicyError(f"unknown scheduler {self.kind!r}")
        if self.kind == "constant":
            if self.k is None or self.k < 1:
                raise PolicyError("constant scheduler needs k >= 1")
        elif self.k is not None:
            raise PolicyError(f"{self.kind} scheduler takes no k")

    @classmethod
    def parse(cls, text: str) -> SchedulePolicy:
        """Parse ``constant:k | ascending | descending | automatic``."""
        text = text.strip().lower()
        if text.startswith("constant"):
            _, sep, k = text.partition(":")
            if not sep:
                raise PolicyError("constant scheduler needs a count, e.g. constant:3")
            try:
                return cls("constant", int(k))
            except ValueError:
                raise PolicyError(f"bad constant count {k!r}") from None
        return cls(text)

    def __str__(self) -> str:
        return f"constant:{self.k}" if self.kind == "constant" else self.kind


def _piecewise(table, t: int) -> int:
    for bound, m in table:
        if bound is None or t <= bound:
            return m
    raise AssertionError("unreachable")


def schedule(policy: SchedulePolicy, t: int) -> ScheduleDirective:
    if t < 1:
        raise InvalidStep(f"step index must be >= 1, got {t}")
    if policy.kind == "automatic":
        return ScheduleDirective(1, 4, AUTOMATIC)
    if policy.kind == "constant":
        m = policy.k
    elif policy.kind == "ascending":
        m = _piecewise(_ASCENDING, t)
    else:
        m = _piecewise(_DESCENDING, t)
    return ScheduleDirective(m, m + 1, FIXED_WINDOW)


def compliance(directive: ScheduleDirective, observed_calls: int) -> tuple[bool, int]:
    """Return ``(compliant, deviation)``; deviation is the signed distance to the window."""
    if observed_calls < 0:
        raise ValueError("observed_calls must be >= 0")
    if observed_calls < directive.min_calls:
        return False, observed_calls - directive.min_calls
    if observed_calls > directive.max_calls:
        return False, observed_calls - directive.max_calls
    return True, 0
