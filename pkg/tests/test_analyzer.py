from __future__ import annotations

import json
import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boa.analyzer import (
    GCC_CLASSIC,
    Diagnostic,
    Report,
    Rule,
    RuleSet,
    Severity,
    diff_reports,
    load_ruleset,
    normalize_message,
    parse_ruleset,
    render_html,
    render_text,
    scan,
)
from boa.errors import RuleError, RuleSetMismatch

CORPUS = Path(__file__).parent / "data" / "build_corpus.log"


def _is_word(ch: str) -> bool:
    return ch.isalnum() or ch == "_"


def oracle_severity(line: str) -> str | None:
    """Hand-rolled classifier mirroring gcc-classic without its regexes."""
    head, sep, rest = line.partition(":")
    if sep and head and not any(c.isspace() for c in head):
        num, sep2, rest2 = rest.partition(":")
        if sep2 and num.isdigit() and num.isascii():
            col, sep3, rest3 = rest2.partition(":")
            candidates = [rest2]
            if sep3 and col.isdigit() and col.isascii():
                candidates.append(rest3)
            for kind in ("error", "warning"):
                if any(c.startswith(f" {kind}:") for c in candidates):
                    return kind
    needle = "undefined reference to"
    start = line.find(needle)
    while start >= 0:
        end = start + len(needle)
        if (start == 0 or not _is_word(line[start - 1])) and (end == len(line) or not _is_word(line[end])):
            return "error"
        start = line.find(needle, start + 1)
    return None


def oracle_counts(data: bytes) -> dict[str, int]:
    counts = {"error": 0, "warning": 0, "info": 0, "note": 0}
    for raw in data.split(b"\n")[:-1] if data.endswith(b"\n") else data.split(b"\n"):
        line = raw.decode("utf-8", errors="replace").removesuffix("\r")
        sev = oracle_severity(line)
        if sev:
            counts[sev] += 1
    return counts


def diag(rule="r", file="a.cc", msg="m", sev=Severity.WARNING, line=1, no=1):
    return Diagnostic(sev, msg, rule, no, file, line)


def random_report(rng: random.Random, n: int) -> Report:
    out = []
    for i in range(n):
        out.append(diag(rule=rng.choice(["gcc-error", "gcc-warning"]),
                        file=rng.choice(["a.cc", "b.cc", None]),
                        msg=rng.choice(["unused x", "unused  x 12", "bad cast", "missing ;"]),
                        sev=rng.choice([Severity.ERROR, Severity.WARNING]),
                        line=rng.randint(1, 99), no=i + 1))
    return Report("r", "gcc-classic", out)


class TestScan:
    def test_empty(self):
        r = scan(b"", GCC_CLASSIC, "b")
        assert all(v == 0 for v in r.counts.values()) and r.diagnostics == []

    def test_gcc_warning(self):
        r = scan(b"x.cc:12: warning: unused variable\n", GCC_CLASSIC, "b")
        assert r.counts[Severity.WARNING] == 1
        (d,) = r.diagnostics
        assert (d.file, d.line, d.severity, d.message) == ("x.cc", 12, Severity.WARNING, "unused variable")

    def test_with_column(self):
        (d,) = scan("a/b.cc:7:3: error: expected ';'", GCC_CLASSIC).diagnostics
        assert (d.file, d.line, d.rule_id) == ("a/b.cc", 7, "gcc-error")

    def test_undefined_reference(self):
        (d,) = scan("Event.o: In function `f': undefined reference to `g'", GCC_CLASSIC).diagnostics
        assert d.severity is Severity.ERROR and d.file is None and d.line is None

    def test_noise_unmatched(self):
        text = "make[1]: Entering directory\ncollect2: ld returned 1 exit status\n"
        assert scan(text, GCC_CLASSIC).diagnostics == []

    def test_corpus_matches_oracle(self):
        data = CORPUS.read_bytes()
        assert data.count(b"\n") >= 200
        r = scan(data, GCC_CLASSIC, "corpus")
        assert {s.value: n for s, n in r.counts.items()} == oracle_counts(data)
        assert r.errors > 10 and r.warnings > 10

    def test_oracle_agrees_per_line(self):
        for line in CORPUS.read_bytes().decode("utf-8", errors="replace").split("\n"):
            line = line.removesuffix("\r")
            got = scan(line, GCC_CLASSIC).diagnostics
            assert (got[0].severity.value if got else None) == oracle_severity(line), line

    def test_first_match_wins(self):
        rules = RuleSet("t", (Rule.make("first", r"boom", "warning"), Rule.make("second", r"bo+m", "error")))
        (d,) = scan("a boom here", rules).diagnostics
        assert d.rule_id == "first" and d.severity is Severity.WARNING
        (d,) = scan("a booom here", rules).diagnostics
        assert d.rule_id == "second"

    @settings(max_examples=50)
    @given(st.permutations(CORPUS.read_bytes().decode("utf-8", errors="replace").split("\n")[:60]))
    def test_permutation_invariant(self, lines):
        base = CORPUS.read_bytes().decode("utf-8", errors="replace").split("\n")[:60]
        a = scan("\n".join(base), GCC_CLASSIC)
        b = scan("\n".join(lines), GCC_CLASSIC)
        assert a.counts == b.counts
        key = lambda d: (d.rule_id, d.file, d.line, d.message)  # noqa: E731
        assert sorted(map(key, a.diagnostics)) == sorted(map(key, b.diagnostics))

    def test_counts_consistent(self):
        r = scan(CORPUS.read_bytes(), GCC_CLASSIC)
        doc = r.to_dict()
        for sev in Severity:
            assert doc["counts"][sev.value] == sum(d.severity is sev for d in r.diagnostics)
            assert sum(c[sev.value] for c in doc["per_file"].values()) <= doc["counts"][sev.value]

    def test_json_round_trip(self):
        r = scan(CORPUS.read_bytes(), GCC_CLASSIC, "corpus")
        assert Report.from_dict(json.loads(r.to_json())) == r


class TestRuleSets:
    def test_toml(self, tmp_path):
        path = tmp_path / "mine.toml"
        path.write_text('[[rule]]\nid = "todo"\npattern = "TODO"\nseverity = "note"\n'
                        '[[rule]]\nid = "ftl"\npattern = "^FATAL (?P<msg>.*)"\nseverity = "Error"\n')
        rs = load_ruleset(path)
        assert rs.name == "mine" and [r.id for r in rs.rules] == ["todo", "ftl"]
        (d,) = scan("FATAL disk full", rs).diagnostics
        assert d.message == "disk full" and d.severity is Severity.ERROR

    def test_builtin(self):
        assert load_ruleset("gcc-classic") is GCC_CLASSIC

    @pytest.mark.parametrize("body", [
        '[[rule]]\nid = "a"\npattern = "("\nseverity = "error"\n',
        '[[rule]]\nid = "a"\npattern = "x"\nseverity = "fatal"\n',
        '[[rule]]\nid = "a"\npattern = "x"\n',
        '[[rule]]\nid = "a"\npattern = "x"\nseverity = "info"\n[[rule]]\nid = "a"\npattern = "y"\nseverity = "info"\n',
    ])
    def test_invalid(self, body):
        with pytest.raises(RuleError):
            parse_ruleset(body)


class TestDiff:
    def test_identity(self):
        r = scan(CORPUS.read_bytes(), GCC_CLASSIC)
        d = diff_reports(r, r)
        assert d.new == [] and d.fixed == [] and d.persisting == r.diagnostics

    def test_from_empty(self):
        r = scan(CORPUS.read_bytes(), GCC_CLASSIC)
        assert diff_reports(Report("e", "gcc-classic"), r).new == r.diagnostics

    def test_ignores_line_numbers_and_digits(self):
        old = Report("o", "x", [diag(line=3, msg="unused  x 12")])
        new = Report("n", "x", [diag(line=40, msg="unused x 7")])
        d = diff_reports(old, new)
        assert d.new == [] and d.fixed == [] and len(d.persisting) == 1
        assert normalize_message("a  1 b\t22 c") == "a b c"

    def test_multiplicity(self):
        old = Report("o", "x", [diag(no=1), diag(no=2), diag(no=3)])
        new = Report("n", "x", [diag(no=1)])
        d = diff_reports(old, new)
        assert (len(d.new), len(d.fixed), len(d.persisting)) == (0, 2, 1)

    def test_mismatch(self):
        with pytest.raises(RuleSetMismatch):
            diff_reports(Report("a", "x"), Report("b", "y"))

    def test_random_partitions(self):
        rng = random.Random(9)
        for _ in range(100):
            a, b = random_report(rng, rng.randint(0, 15)), random_report(rng, rng.randint(0, 15))
            d = diff_reports(a, b)
            assert len(d.new) + len(d.persisting) == len(b.diagnostics)
            assert len(d.fixed) + len(d.persisting) == len(a.diagnostics)
            swapped = diff_reports(b, a)
            assert swapped.new == d.fixed and swapped.fixed == d.new


class TestRender:
    def test_empty_text(self):
        text = render_text(Report("b", "gcc-classic"))
        assert "errors: 0" in text and "warnings: 0" in text

    def test_totals_line(self):
        r = Report("b", "x", [diag(), diag(), diag(sev=Severity.ERROR)])
        assert "errors: 1 warnings: 2" in render_text(r)

    def test_top_ten_files(self):
        ds = [diag(file=f"f{i:02d}.cc", sev=Severity.ERROR if i % 3 == 0 else Severity.WARNING, no=i)
              for i in range(30) for _ in range(i % 4 + 1)]
        text = render_text(Report("b", "x", ds))
        rows = [ln for ln in text.splitlines() if ln.endswith(".cc")]
        assert len(rows) == 10
        errors = [int(r.split()[0]) for r in rows]
        assert errors == sorted(errors, reverse=True)

    def test_pure(self):
        r = scan(CORPUS.read_bytes(), GCC_CLASSIC)
        assert render_text(r) == render_text(r)
        assert render_html(r) == render_html(r)

    def test_html_escapes(self):
        r = scan("a.cc:1: error: expected '<' before '&'", GCC_CLASSIC)
        page = render_html(r)
        assert page.startswith("<!DOCTYPE html>") and "&lt;" in page and "&amp;" in page
        assert "<script" not in page and "http" not in page
