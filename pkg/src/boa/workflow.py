"""Scenarios: declarative, branching step sequences run in one shell session.

A scenario file looks like::

    name = "nightly"
    domain = "cms"

    [[step]]
    id = "build"
    action = "build"            # install | build | run | analyze | validate
    project = "toolbox"
    version = "1.2"
    platform = "linux-2.4/gcc-3.2"
    on_success = "next"         # next | stop | <step id>
    on_failure = "report"       # next | stop | abort | <step id>

    [[step]]
    id = "report"
    action = "analyze"
    log = "session"             # the live session's captured output, or a file
    rules = "gcc-classic"
    max_errors = 0

Every step may run at most ``max_visits`` times (default 1).  A branch
cycle is accepted only if each cycle passes through a step that sets
``max_visits`` explicitly.
"""

from __future__ import annotations

import cmd
import datetime as _dt
import logging
import shlex
import sys
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import analyzer, validator
from .adapters import AdapterConfig, InstallAddress, execute_plan, plan_install
from .errors import (
    BoaError,
    CycleWithoutRetryBound,
    ParseError,
    ScenarioError,
    UnresolvedStepRef,
)
from .model import PlatformId, ProjectKind, Status, check_token
from .session import DEFAULT_TIMEOUT, Session, State, open_session, render_session_log, write_session_log
from .store import Store
from ._util import canonical_json, tomllib, utcnow

log = logging.getLogger(__name__)

NEXT, STOP, ABORT = "next", "stop", "abort"
ACTIONS = {
    "install": ("project", "version", "platform"),
    "build": ("project", "version", "platform"),
    "run": ("command",),
    "analyze": (),
    "validate": ("expectation",),
}
_STEP_KEYS = {"id", "action", "on_success", "on_failure", "max_visits", "fresh_session"}
_OPTIONAL = {"analyze": {"log", "rules", "max_errors", "max_warnings"}}


@dataclass
class Step:
    id: str
    action: str
    params: dict
    on_success: str = NEXT
    on_failure: str = ABORT
    max_visits: int = 1
    explicit_bound: bool = False
    fresh_session: bool = False


@dataclass
class Scenario:
    name: str
    domain_name: str
    steps: list[Step]
    source: Path | None = None

    def index(self, step_id: str) -> int:
        for i, step in enumerate(self.steps):
            if step.id == step_id:
                return i
        raise UnresolvedStepRef(step_id)

    def successors(self, i: int) -> list[int]:
        step = self.steps[i]
        out = []
        for target in (step.on_success, step.on_failure):
            if target == NEXT:
                if i + 1 < len(self.steps):
                    out.append(i + 1)
            elif target not in (STOP, ABORT):
                out.append(self.index(target))
        return out


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{source}: {exc}") from None
    try:
        name = check_token(doc["name"], "scenario name")
        domain = check_token(doc["domain"], "domain name")
    except KeyError as exc:
        raise ParseError(f"{source}: missing top-level key {exc}") from None
    except BoaError as exc:
        raise ParseError(f"{source}: {exc}") from None
    raw_steps = doc.get("step", [])
    if not raw_steps:
        raise ParseError(f"{source}: scenario has no [[step]] tables")

    steps = []
    for n, raw in enumerate(raw_steps, 1):
        where = f"{source}: step #{n}"
        try:
            step_id = check_token(raw["id"], "step id")
            action = raw["action"]
        except KeyError as exc:
            raise ParseError(f"{where}: missing key {exc}") from None
        except BoaError as exc:
            raise ParseError(f"{where}: {exc}") from None
        if step_id in (NEXT, STOP, ABORT):
            raise ParseError(f"{where}: {step_id!r} is reserved")
        if action not in ACTIONS:
            raise ParseError(f"{where}: unknown action {action!r} (expected one of {', '.join(ACTIONS)})")
        params = {k: v for k, v in raw.items() if k not in _STEP_KEYS}
        missing = [k for k in ACTIONS[action] if k not in params]
        if missing:
            raise ParseError(f"{where} ({action}): missing {', '.join(missing)}")
        extra = set(params) - set(ACTIONS[action]) - _OPTIONAL.get(action, set())
        if extra:
            raise ParseError(f"{where} ({action}): unexpected keys {sorted(extra)}")
        if "platform" in params:
            try:
                PlatformId.parse(params["platform"])
            except BoaError as exc:
                raise ParseError(f"{where}: {exc}") from None
        max_visits = raw.get("max_visits", 1)
        if not isinstance(max_visits, int) or max_visits < 1:
            raise ParseError(f"{where}: max_visits must be a positive integer")
        on_failure = raw.get("on_failure", ABORT)
        on_success = raw.get("on_success", NEXT)
        if on_success == ABORT:
            raise ParseError(f"{where}: on_success cannot be 'abort'")
        steps.append(Step(step_id, action, params, on_success, on_failure, max_visits,
                          "max_visits" in raw, bool(raw.get("fresh_session", False))))

    ids = [s.id for s in steps]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise ParseError(f"{source}: duplicate step ids {dup}")
    scenario = Scenario(name, domain, steps)
    for step in steps:
        for target in (step.on_success, step.on_failure):
            if target not in (NEXT, STOP, ABORT) and target not in ids:
                raise UnresolvedStepRef(target, step.id)
    _check_cycles(scenario)
    return scenario


def _check_cycles(scenario: Scenario) -> None:
    # a cycle made only of steps without an explicit max_visits is unbounded
    unbounded = {i for i, s in enumerate(scenario.steps) if not s.explicit_bound}
    color = dict.fromkeys(unbounded, 0)

    def visit(i, path):
        color[i] = 1
        path.append(i)
        for j in scenario.successors(i):
            if j not in unbounded:
                continue
            if color[j] == 1:
                cycle = [scenario.steps[k].id for k in path[path.index(j):]]
                raise CycleWithoutRetryBound(
                    f"steps {' -> '.join(cycle + cycle[:1])} form a loop; "
                    "set max_visits on one of them to bound it")
            if color[j] == 0:
                visit(j, path)
        path.pop()
        color[i] = 2

    for i in sorted(unbounded):
        if color[i] == 0:
            visit(i, [])


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
    scenario = parse_scenario(text, str(path))
    scenario.source = path
    return scenario


# -- running ------------------------------------------------------------------------

@dataclass
class RunConfig:
    adapters: AdapterConfig = field(default_factory=AdapterConfig.default)
    runs_dir: Path = Path("runs")
    base_dir: Path | None = None
    shell: str | None = None
    timeout: float = DEFAULT_TIMEOUT
    env: dict[str, str] = field(default_factory=dict)


@dataclass
class StepOutcome:
    id: str
    outcome: str
    detail: str = ""


@dataclass
class RunSummary:
    scenario: str
    domain: str
    overall: str
    steps: list[StepOutcome]
    session_logs: list[str]
    reports: list[str]
    halt_reason: str = ""
    run_dir: Path | None = None

    @property
    def executed(self) -> list[str]:
        return [s.id for s in self.steps if s.outcome != "Skipped"]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "domain": self.domain,
            "overall": self.overall,
            "steps": [{"id": s.id, "outcome": s.outcome, "detail": s.detail} for s in self.steps],
            "session_logs": self.session_logs,
            "reports": self.reports,
            "halt_reason": self.halt_reason,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def make_run_dir(runs_dir: Path, name: str, now: _dt.datetime | None = None) -> Path:
    stamp = (now or utcnow()).strftime("%Y%m%dT%H%M%SZ")
    runs_dir.mkdir(parents=True, exist_ok=True)
    for n in range(1000):
        candidate = runs_dir / (f"{name}-{stamp}" if n == 0 else f"{name}-{stamp}-{n}")
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            continue
    raise ScenarioError(f"cannot allocate a run directory under {runs_dir}")


class _Runner:
    def __init__(self, scenario: Scenario, store: Store, config: RunConfig):
        self.scenario = scenario
        self.store = store
        self.config = config
        self.base = Path(config.base_dir or (scenario.source.parent if scenario.source else Path.cwd()))
        self.run_dir = make_run_dir(Path(config.runs_dir), scenario.name)
        self.session_logs: list[str] = []
        self.reports: list[str] = []
        self.session: Session | None = None

    def _resolve(self, ref) -> Path:
        p = Path(ref)
        return p if p.is_absolute() else self.base / p

    def _log_name(self) -> str:
        n = len(self.session_logs) + 1
        return "session.log" if n == 1 else f"session-{n}.log"

    def open(self) -> None:
        self.session = open_session(self.config.shell, self.base, self.config.env, self.config.timeout)
        self.session_logs.append(self._log_name())

    def close(self) -> None:
        if self.session is not None:
            self.session.close()
            write_session_log(self.session, self.run_dir / self.session_logs[-1])
            self.session = None

    @property
    def log_ref(self) -> str:
        return str(self.run_dir / self.session_logs[-1])

    def run_step(self, step: Step, visit: int) -> tuple[bool, str]:
        try:
            return getattr(self, f"_do_{step.action}")(step, visit)
        except BoaError as exc:
            return False, f"{type(exc).__name__}: {exc}"

    def _do_run(self, step, visit):
        rec = self.session.execute(step.params["command"])
        if rec.exit_status is None:
            return False, rec.outcome.value
        return rec.exit_status == 0, f"exit {rec.exit_status}"

    def _install(self, step, rebuild: bool):
        p = step.params
        domain = self.store.load_domain(self.scenario.domain_name)
        project = domain.project(p["project"])
        version = project.version(p["version"])
        platform = PlatformId.parse(p["platform"])
        if rebuild and project.kind is not ProjectKind.SOURCE_BUILT:
            return False, f"{project.name} is a {project.kind.value} project and cannot be built"
        plan = plan_install(project, version, platform, domain, self.config.adapters)
        status = version.record(platform).status
        if status is Status.INSTALLED:
            if not rebuild:
                return True, "already installed"
            self.store.update_installation(domain.name, project.name, version.label, platform,
                                           Status.REMOVED, session_log_ref=self.log_ref)
        addr = InstallAddress(domain.name, project.name, version.label, platform)
        record = execute_plan(plan, self.session, self.store, addr, session_log_ref=self.log_ref)
        if record.status is Status.INSTALLED:
            return True, "Installed"
        return False, record.failure_reason or record.status.value

    def _do_install(self, step, visit):
        return self._install(step, rebuild=False)

    def _do_build(self, step, visit):
        return self._install(step, rebuild=True)

    def _do_analyze(self, step, visit):
        p = step.params
        ref = p.get("log", "session")
        if ref == "session":
            data = analyzer.session_log_output(render_session_log(self.session.actions))
        else:
            try:
                data = self._resolve(ref).read_bytes()
            except OSError as exc:
                return False, f"cannot read log {ref}: {exc.strerror}"
            if analyzer.is_session_log(data):
                data = analyzer.session_log_output(data)
        rules_ref = p.get("rules", "gcc-classic")
        rules = analyzer.load_ruleset(rules_ref if rules_ref in analyzer.BUILTIN_RULESETS
                                      else self._resolve(rules_ref))
        report = analyzer.scan(data, rules, f"{self.scenario.name}/{step.id}")
        name = f"report-{step.id}.json" if visit == 1 else f"report-{step.id}-{visit}.json"
        (self.run_dir / name).write_text(report.to_json(), encoding="utf-8")
        self.reports.append(name)
        max_errors = p.get("max_errors", 0)
        max_warnings = p.get("max_warnings")
        ok = report.errors <= max_errors and (max_warnings is None or report.warnings <= max_warnings)
        return ok, f"errors={report.errors} warnings={report.warnings}"

    def _do_validate(self, step, visit):
        exp = validator.load_expectation(self._resolve(step.params["expectation"]))
        result = validator.validate(exp, self.session)
        if isinstance(result, validator.Fail):
            return False, "output differs: " + result.describe().replace("\n", "; ")
        if isinstance(result, validator.CommandFailed):
            return False, f"command failed ({result.status if result.status is not None else result.outcome})"
        return True, "pass"

    def run(self) -> RunSummary:
        steps = self.scenario.steps
        outcomes: list[StepOutcome] = []
        visits: Counter = Counter()
        overall, halt = "Success", ""
        i: int | None = 0
        self.open()
        try:
            while i is not None:
                step = steps[i]
                if visits[step.id] >= step.max_visits:
                    overall, halt = "Failure", f"step {step.id!r} exceeded max_visits={step.max_visits}"
                    break
                visits[step.id] += 1
                if step.fresh_session and outcomes:
                    self.close()
                    self.open()
                log.info("step %s (%s), visit %d", step.id, step.action, visits[step.id])
                ok, detail = self.run_step(step, visits[step.id])
                outcomes.append(StepOutcome(step.id, "Success" if ok else "Failure", detail))
                if self.session.state is State.BROKEN:
                    overall, halt = "Aborted", f"session broken during step {step.id!r}"
                    break
                target = step.on_success if ok else step.on_failure
                if target == ABORT:
                    overall, halt = "Aborted", f"step {step.id!r} failed"
                    break
                if target == STOP or (target == NEXT and i + 1 >= len(steps)):
                    overall = "Success" if ok else "Failure"
                    break
                i = i + 1 if target == NEXT else self.scenario.index(target)
        finally:
            self.close()
        ran = {o.id for o in outcomes}
        outcomes += [StepOutcome(s.id, "Skipped") for s in steps if s.id not in ran]
        summary = RunSummary(self.scenario.name, self.scenario.domain_name, overall, outcomes,
                             list(self.session_logs), list(self.reports), halt, self.run_dir)
        (self.run_dir / "summary.json").write_text(summary.to_json(), encoding="utf-8")
        return summary


def run_scenario(scenario: Scenario, store: Store, config: RunConfig | None = None) -> RunSummary:
    """Execute *scenario* without manual intervention.

    Step failures never raise; they steer the branch taken and end up in
    the returned summary (also written to ``<run dir>/summary.json``).
    """
    store.load_domain(scenario.domain_name)
    return _Runner(scenario, store, config or RunConfig()).run()


# -- interactive mode ------------------------------------------------------------------

class BoaShell(cmd.Cmd):
    """Interactive BOA shell.  Type help or ? to list commands."""

    intro = ""

    def __init__(self, store: Store, domain_name: str, dispatch: Callable[[list[str]], int] | None,
                 session: Session, stdin=None, stdout=None):
        super().__init__(stdin=stdin, stdout=stdout)
        if stdin is not None:
            self.use_rawinput = False
        interactive = (stdin or sys.stdin).isatty()
        self.prompt = f"boa:{domain_name}> " if interactive else ""
        self.store = store
        self.domain_name = domain_name
        self.dispatch = dispatch
        self.session = session

    def _say(self, text: str) -> None:
        self.stdout.write(text if text.endswith("\n") or not text else text + "\n")

    def emptyline(self):
        return False

    def do_exec(self, arg):
        """exec <command>: run a shell command in the live session"""
        try:
            rec = self.session.execute(arg)
        except BoaError as exc:
            self._say(f"error: {exc}")
            return False
        self._say(rec.stdout.decode("utf-8", errors="replace"))
        if rec.stderr:
            self._say(rec.stderr.decode("utf-8", errors="replace"))
        if not rec.ok:
            self._say(f"[{rec.outcome.value} exit={rec.exit_status if rec.exit_status is not None else 'NA'}]")
        return False

    def do_status(self, arg):
        """status: installation status of every project version in the domain"""
        try:
            domain = self.store.load_domain(self.domain_name)
        except BoaError as exc:
            self._say(f"error: {exc}")
            return False
        self._say(f"session: {self.session.state.value}, {len(self.session.actions)} actions")
        for project in domain.projects:
            for version in project.versions:
                for platform in domain.platforms:
                    rec = version.record(platform)
                    self._say(f"{project.name} {version.label} {platform} {rec.status.value}")
        return False

    def do_log(self, arg):
        """log: the session's action log so far"""
        for rec in self.session.actions:
            status = rec.exit_status if rec.exit_status is not None else "NA"
            self._say(f"{rec.seq:>3} {rec.outcome.value} exit={status}  {rec.command}")
        return False

    def do_quit(self, arg):
        """quit: close the session and leave"""
        return True

    do_exit = do_quit

    def do_EOF(self, arg):
        return True

    def default(self, line):
        try:
            argv = shlex.split(line)
        except ValueError as exc:
            self._say(f"error: {exc}")
            return False
        if self.dispatch is None or not argv or argv[0] not in _CLI_VERBS:
            self._say(f"unknown command: {argv[0] if argv else line} (try 'help')")
            return False
        self.dispatch(argv)
        return False


_CLI_VERBS = {"domain", "project", "version", "install", "build", "analyze", "diff", "validate", "run"}


def interactive_session(store: Store, domain_name: str, *, dispatch=None, stdin=None, stdout=None,
                        config: RunConfig | None = None, log_path=None) -> int:
    """Read-eval loop sharing one live session; returns 0 on quit or EOF."""
    config = config or RunConfig()
    store.load_domain(domain_name)
    session = open_session(config.shell, config.base_dir, config.env, config.timeout)
    shell = BoaShell(store, domain_name, dispatch, session, stdin, stdout)
    try:
        shell.cmdloop()
    finally:
        session.close()
        if log_path is None:
            log_path = make_run_dir(Path(config.runs_dir), f"shell-{domain_name}") / "session.log"
        write_session_log(session, log_path)
    return 0
