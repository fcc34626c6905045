"""Build-output classification and reporting.

Every input line is tried against an ordered rule set; the first rule that
matches turns the line into a :class:`Diagnostic`.  Lines are independent,
so scanning is a plain map over lines.
"""

from __future__ import annotations

import enum
import html
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CorruptRecord, RuleError, RuleSetMismatch
from ._util import canonical_json, tomllib


class Severity(enum.Enum):
    ERROR = "error"
    WARNING = "warning"
    INFO = "info"
    NOTE = "note"


SEVERITIES = list(Severity)


@dataclass(frozen=True)
class Rule:
    id: str
    pattern: re.Pattern
    severity: Severity

    @classmethod
    def make(cls, id: str, pattern: str, severity) -> Rule:
        try:
            compiled = re.compile(pattern)
        except re.error as exc:
            raise RuleError(f"rule {id!r}: bad pattern: {exc}") from None
        try:
            sev = Severity(str(severity).lower())
        except ValueError:
            raise RuleError(f"rule {id!r}: unknown severity {severity!r}") from None
        return cls(id, compiled, sev)


@dataclass(frozen=True)
class RuleSet:
    name: str
    rules: tuple[Rule, ...]

    def __post_init__(self):
        ids = [r.id for r in self.rules]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise RuleError(f"rule set {self.name!r}: duplicate rule ids {sorted(dup)}")

    def match(self, line: str) -> tuple[Rule, re.Match] | None:
        for rule in self.rules:
            m = rule.pattern.search(line)
            if m:
                return rule, m
        return None


def _gcc(kind: str) -> str:
    return rf"^(?P<file>[^:\s]+):(?P<line>\d+):(?:\d+:)? {kind}:\s*(?P<msg>.*)$"


GCC_CLASSIC = RuleSet("gcc-classic", (
    Rule.make("gcc-error", _gcc("error"), "error"),
    Rule.make("gcc-warning", _gcc("warning"), "warning"),
    Rule.make("ld-undefined", r"^.*\bundefined reference to\b", "error"),
))

BUILTIN_RULESETS = {GCC_CLASSIC.name: GCC_CLASSIC}


def parse_ruleset(text: str, name: str = "custom") -> RuleSet:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise RuleError(f"rule set {name!r}: {exc}") from None
    rules = []
    for i, entry in enumerate(doc.get("rule", []), 1):
        try:
            rules.append(Rule.make(entry["id"], entry["pattern"], entry["severity"]))
        except KeyError as exc:
            raise RuleError(f"rule set {name!r}: rule #{i} lacks {exc}") from None
    return RuleSet(doc.get("name", name), tuple(rules))


def load_ruleset(ref) -> RuleSet:
    """A builtin rule set name or a path to a TOML file of ``[[rule]]`` tables."""
    if str(ref) in BUILTIN_RULESETS:
        return BUILTIN_RULESETS[str(ref)]
    path = Path(ref)
    if not path.is_file():
        raise RuleError(f"no builtin rule set or file named {str(ref)!r}")
    return parse_ruleset(path.read_text(encoding="utf-8"), path.stem)


@dataclass(frozen=True)
class Diagnostic:
    severity: Severity
    message: str
    rule_id: str
    source_line_no: int
    file: str | None = None
    line: int | None = None

    def to_dict(self) -> dict:
        return {"severity": self.severity.value, "message": self.message, "rule_id": self.rule_id,
                "source_line_no": self.source_line_no, "file": self.file, "line": self.line}

    @classmethod
    def from_dict(cls, d: dict) -> Diagnostic:
        return cls(Severity(d["severity"]), d["message"], d["rule_id"], d["source_line_no"],
                   d.get("file"), d.get("line"))


def _zero_counts() -> dict[Severity, int]:
    return {s: 0 for s in SEVERITIES}


@dataclass
class Report:
    build_id: str
    ruleset: str
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def counts(self) -> dict[Severity, int]:
        counts = _zero_counts()
        for d in self.diagnostics:
            counts[d.severity] += 1
        return counts

    @property
    def per_file(self) -> dict[str, dict[Severity, int]]:
        table: dict[str, dict[Severity, int]] = {}
        for d in self.diagnostics:
            if d.file is not None:
                table.setdefault(d.file, _zero_counts())[d.severity] += 1
        return table

    @property
    def errors(self) -> int:
        return self.counts[Severity.ERROR]

    @property
    def warnings(self) -> int:
        return self.counts[Severity.WARNING]

    def to_dict(self) -> dict:
        def named(counts):
            return {s.value: n for s, n in counts.items()}
        return {
            "build_id": self.build_id,
            "ruleset": self.ruleset,
            "counts": named(self.counts),
            "per_file": {f: named(c) for f, c in self.per_file.items()},
            "diagnostics": [d.to_dict() for d in self.diagnostics],
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> Report:
        report = cls(doc["build_id"], doc["ruleset"],
                     [Diagnostic.from_dict(d) for d in doc.get("diagnostics", [])])
        if "counts" in doc and doc["counts"] != report.to_dict()["counts"]:
            raise CorruptRecord("report counts disagree with its diagnostics")
        return report


def load_report(path) -> Report:
    try:
        return Report.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptRecord(f"{path}: not a report ({exc})") from None


def classify(line: str, rules: RuleSet, line_no: int) -> Diagnostic | None:
    hit = rules.match(line)
    if hit is None:
        return None
    rule, m = hit
    groups = m.groupdict()
    message = (groups.get("msg") or "").strip() or line.strip() or rule.id
    line_num = groups.get("line")
    return Diagnostic(
        severity=rule.severity,
        message=message,
        rule_id=rule.id,
        source_line_no=line_no,
        file=groups.get("file") or None,
        line=int(line_num) if line_num and int(line_num) > 0 else None,
    )


def split_lines(log_text) -> list[str]:
    if isinstance(log_text, (bytes, bytearray)):
        log_text = bytes(log_text).decode("utf-8", errors="replace")
    lines = log_text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [ln[:-1] if ln.endswith("\r") else ln for ln in lines]


def scan(log_text, rules: RuleSet, build_id: str = "build") -> Report:
    diagnostics = []
    for no, line in enumerate(split_lines(log_text), 1):
        d = classify(line, rules, no)
        if d is not None:
            diagnostics.append(d)
    return Report(build_id, rules.name, diagnostics)


def normalize_message(message: str) -> str:
    return re.sub(r"\s+", " ", re.sub(r"\d+", "", message)).strip()


def diff_key(d: Diagnostic) -> tuple:
    return d.rule_id, d.file, normalize_message(d.message)


@dataclass
class ReportDiff:
    new: list[Diagnostic]
    fixed: list[Diagnostic]
    persisting: list[Diagnostic]

    def to_dict(self) -> dict:
        return {k: [d.to_dict() for d in getattr(self, k)] for k in ("new", "fixed", "persisting")}


def diff_reports(old: Report, new: Report) -> ReportDiff:
    """Match diagnostics by (rule, file, normalized message), ignoring line numbers.

    The first ``min(old, new)`` occurrences of a key persist; surplus
    occurrences in *new* are new, surplus in *old* are fixed.
    """
    if old.ruleset != new.ruleset:
        raise RuleSetMismatch(f"reports use different rule sets: {old.ruleset!r} vs {new.ruleset!r}")
    old_counts = Counter(diff_key(d) for d in old.diagnostics)
    new_counts = Counter(diff_key(d) for d in new.diagnostics)

    persisting, added = [], []
    seen: Counter = Counter()
    for d in new.diagnostics:
        k = diff_key(d)
        seen[k] += 1
        (persisting if seen[k] <= old_counts[k] else added).append(d)
    fixed = []
    seen.clear()
    for d in old.diagnostics:
        k = diff_key(d)
        seen[k] += 1
        if seen[k] > new_counts[k]:
            fixed.append(d)
    return ReportDiff(added, fixed, persisting)


def _top_files(report: Report, n: int = 10):
    rows = report.per_file.items()
    return sorted(rows, key=lambda kv: (-kv[1][Severity.ERROR], -kv[1][Severity.WARNING], kv[0]))[:n]


def totals_line(report: Report) -> str:
    c = report.counts
    return (f"errors: {c[Severity.ERROR]} warnings: {c[Severity.WARNING]} "
            f"info: {c[Severity.INFO]} notes: {c[Severity.NOTE]}")


def render_text(report: Report) -> str:
    out = [f"build: {report.build_id} (rules: {report.ruleset})", totals_line(report)]
    top = _top_files(report)
    if top:
        out.append("")
        out.append(f"{'errors':>6} {'warnings':>8}  file")
        for name, c in top:
            out.append(f"{c[Severity.ERROR]:>6} {c[Severity.WARNING]:>8}  {name}")
    return "\n".join(out) + "\n"


def render_html(report: Report) -> str:
    e = html.escape
    c = report.counts
    rows = "\n".join(
        f"<tr><td>{e(name)}</td>" + "".join(f"<td>{fc[s]}</td>" for s in SEVERITIES) + "</tr>"
        for name, fc in _top_files(report)
    )
    diags = "\n".join(
        f'<tr class="{d.severity.value}"><td>{d.source_line_no}</td><td>{d.severity.value}</td>'
        f"<td>{e(d.file or '')}</td><td>{'' if d.line is None else d.line}</td>"
        f"<td>{e(d.rule_id)}</td><td>{e(d.message)}</td></tr>"
        for d in report.diagnostics
    )
    heads = "".join(f"<th>{s.value}</th>" for s in SEVERITIES)
    return f"""<!DOCTYPE html>
<html>
<head>
<meta charset="utf-8">
<title>Build report {e(report.build_id)}</title>
<style>
body {{ font-family: sans-serif; }}
table {{ border-collapse: collapse; margin-bottom: 1.5em; }}
td, th {{ border: 1px solid #999; padding: 2px 6px; text-align: left; }}
tr.error td {{ background: #fdd; }}
tr.warning td {{ background: #ffd; }}
</style>
</head>
<body>
<h1>Build report {e(report.build_id)}</h1>
<p>Rule set: {e(report.ruleset)}</p>
<h2>Totals</h2>
<table>
<tr>{heads}</tr>
<tr>{"".join(f"<td>{c[s]}</td>" for s in SEVERITIES)}</tr>
</table>
<h2>Files</h2>
<table>
<tr><th>file</th>{heads}</tr>
{rows}
</table>
<h2>Diagnostics</h2>
<table>
<tr><th>log line</th><th>severity</th><th>file</th><th>line</th><th>rule</th><th>message</th></tr>
{diags}
</table>
</body>
</html>
"""


# -- session logs ---------------------------------------------------------------

@dataclass(frozen=True)
class LogEntry:
    seq: int
    started_at: str
    outcome: str
    exit_status: int | None
    command: str
    stdout: bytes
    stderr: bytes


_ENTRY_RE = re.compile(rb"^== (\d+) (\S+) (\S+) exit=(\d+|NA)$")
_BLOCK_RE = re.compile(rb"^--- (stdout|stderr) \((\d+)\)$")


def is_session_log(data: bytes) -> bool:
    return data.startswith(b"# boa-session-log 1\n")


def read_session_log(data: bytes) -> list[LogEntry]:
    """Parse a session log back into its entries."""
    from .session import LOG_HEADER, unescape_command

    if not data.startswith(LOG_HEADER):
        raise CorruptRecord("not a session log (missing header)")
    pos = len(LOG_HEADER)

    def next_line() -> bytes:
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise CorruptRecord(f"truncated session log at byte {pos}")
        line, pos = data[pos:end], end + 1
        return line

    entries = []
    while pos < len(data):
        m = _ENTRY_RE.match(next_line())
        if not m:
            raise CorruptRecord(f"bad entry header near byte {pos}")
        cmd_line = next_line()
        if not cmd_line.startswith(b"$ "):
            raise CorruptRecord(f"missing command line near byte {pos}")
        blocks = {}
        for expected in (b"stdout", b"stderr"):
            b = _BLOCK_RE.match(next_line())
            if not b or b.group(1) != expected:
                raise CorruptRecord(f"missing {expected.decode()} block near byte {pos}")
            size = int(b.group(2))
            blocks[expected] = data[pos:pos + size]
            pos += size
            if size and not blocks[expected].endswith(b"\n"):
                pos += 1
            if next_line() != b"---":
                raise CorruptRecord(f"unterminated {expected.decode()} block near byte {pos}")
        status = m.group(4)
        entries.append(LogEntry(
            seq=int(m.group(1)),
            started_at=m.group(2).decode(),
            outcome=m.group(3).decode(),
            exit_status=None if status == b"NA" else int(status),
            command=unescape_command(cmd_line[2:].decode("utf-8")),
            stdout=blocks[b"stdout"],
            stderr=blocks[b"stderr"],
        ))
    return entries


def session_log_output(data: bytes) -> bytes:
    """Captured stdout and stderr of every entry, in order."""
    chunks = []
    for entry in read_session_log(data):
        for block in (entry.stdout, entry.stderr):
            if block:
                chunks.append(block if block.endswith(b"\n") else block + b"\n")
    return b"".join(chunks)


def load_log(path) -> bytes:
    return Path(path).read_bytes()


__all__ = [
    "Severity", "Rule", "RuleSet", "GCC_CLASSIC", "BUILTIN_RULESETS", "load_ruleset", "parse_ruleset",
    "Diagnostic", "Report", "ReportDiff", "scan", "diff_reports", "render_text", "render_html",
    "read_session_log", "session_log_output", "is_session_log", "load_report", "normalize_message",
]
