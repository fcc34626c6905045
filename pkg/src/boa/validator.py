"""Compare a command's output with a stored reference.

Lines matching any ignore pattern are dropped from both sides before the
line-by-line comparison.  In numeric mode, whitespace-separated tokens that
look like decimal numbers compare within ``abs_tol + rel_tol * |reference|``.
"""

from __future__ import annotations

import difflib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ExpectationError
from .session import Outcome, Session
from ._util import load_toml, tomllib

NUMBER_RE = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")


@dataclass
class Expectation:
    name: str
    command: str
    reference: str
    ignore_patterns: list[str] = field(default_factory=list)
    numeric_mode: bool = False
    rel_tol: float = 1e-9
    abs_tol: float = 1e-12

    def __post_init__(self):
        if not (self.rel_tol >= 0 and self.abs_tol >= 0):
            raise ExpectationError(f"{self.name}: tolerances must be non-negative")
        try:
            self._ignore = [re.compile(p) for p in self.ignore_patterns]
        except re.error as exc:
            raise ExpectationError(f"{self.name}: bad ignore pattern: {exc}") from None

    def filtered(self, text: str) -> list[tuple[int, str]]:
        return filter_lines(text, self._ignore)


def load_expectation(path) -> Expectation:
    path = Path(path)
    try:
        doc = load_toml(path)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ExpectationError(f"{path}: {exc}") from None
    try:
        ref = path.parent / doc["reference_file"]
        reference = ref.read_text(encoding="utf-8")
        return Expectation(
            name=doc["name"],
            command=doc["command"],
            reference=reference,
            ignore_patterns=list(doc.get("ignore", [])),
            numeric_mode=bool(doc.get("numeric", False)),
            rel_tol=float(doc.get("rel_tol", 1e-9)),
            abs_tol=float(doc.get("abs_tol", 1e-12)),
        )
    except KeyError as exc:
        raise ExpectationError(f"{path}: missing key {exc}") from None
    except OSError as exc:
        raise ExpectationError(f"{path}: cannot read reference: {exc}") from None


@dataclass(frozen=True)
class Pass:
    ok = True


@dataclass(frozen=True)
class Fail:
    """First point where the filtered outputs disagree.

    Line numbers refer to the unfiltered texts; ``None`` means that side
    ran out of lines.
    """

    actual_line_no: int | None
    reference_line_no: int | None
    actual_line: str | None
    reference_line: str | None
    ok = False

    def describe(self) -> str:
        def side(no, text):
            return "<end of output>" if no is None else f"line {no}: {text}"
        return (f"actual    {side(self.actual_line_no, self.actual_line)}\n"
                f"reference {side(self.reference_line_no, self.reference_line)}")


@dataclass(frozen=True)
class CommandFailed:
    status: int | None
    outcome: str = "Completed"
    ok = False


def filter_lines(text: str, ignore) -> list[tuple[int, str]]:
    return [(no, line) for no, line in enumerate(text.splitlines(), 1)
            if not any(p.search(line) for p in ignore)]


def numbers_close(actual: float, reference: float, rel_tol: float, abs_tol: float) -> bool:
    if math.isinf(actual) or math.isinf(reference):
        return actual == reference
    return abs(actual - reference) <= abs_tol + rel_tol * abs(reference)


def lines_match(actual: str, reference: str, numeric: bool, rel_tol: float, abs_tol: float) -> bool:
    if not numeric:
        return actual == reference
    a_tokens, r_tokens = actual.split(), reference.split()
    if len(a_tokens) != len(r_tokens):
        return False
    for a, r in zip(a_tokens, r_tokens):
        if NUMBER_RE.fullmatch(a) and NUMBER_RE.fullmatch(r):
            if not numbers_close(float(a), float(r), rel_tol, abs_tol):
                return False
        elif a != r:
            return False
    return True


def compare(actual: str, expectation: Expectation) -> Pass | Fail:
    got = expectation.filtered(actual)
    want = expectation.filtered(expectation.reference)
    for i in range(max(len(got), len(want))):
        if i >= len(got) or i >= len(want):
            a = got[i] if i < len(got) else (None, None)
            r = want[i] if i < len(want) else (None, None)
            return Fail(a[0], r[0], a[1], r[1])
        (a_no, a_line), (r_no, r_line) = got[i], want[i]
        if not lines_match(a_line, r_line, expectation.numeric_mode,
                           expectation.rel_tol, expectation.abs_tol):
            return Fail(a_no, r_no, a_line, r_line)
    return Pass()


def full_diff(actual: str, expectation: Expectation) -> str:
    got = [line for _, line in expectation.filtered(actual)]
    want = [line for _, line in expectation.filtered(expectation.reference)]
    return "\n".join(difflib.unified_diff(want, got, "reference", "actual", lineterm=""))


def validate(expectation: Expectation, session: Session, timeout: float | None = None):
    """Run the expectation's command in *session* and compare its stdout."""
    action = session.execute(expectation.command, timeout)
    if action.outcome is not Outcome.COMPLETED:
        return CommandFailed(None, action.outcome.value)
    if action.exit_status != 0:
        return CommandFailed(action.exit_status)
    return compare(action.stdout.decode("utf-8", errors="replace"), expectation)
