"""``boa`` command line.

Exit status: 0 success, 1 domain-level failure (failed install, build,
validation or threshold), 2 usage error, 3 store or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, analyzer, validator
from .adapters import AdapterConfig, InstallAddress, execute_plan, plan_install
from .errors import BoaError, InputError, InvalidDomain
from .model import (
    PlatformId,
    Project,
    ProjectKind,
    Status,
    Version,
    add_project,
    new_domain,
    parse_requirement,
    resolve_install_order,
)
from .session import open_session, write_session_log
from .store import encode_domain, open_store
from .workflow import RunConfig, interactive_session, load_scenario, run_scenario
from ._util import canonical_json, utcnow

log = logging.getLogger("boa")


class UsageError(InputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _pairs(items, what: str) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"{what} must look like KEY=VALUE, got {item!r}")
        out[key] = value
    return out


def _use_color(mode: str, stream) -> bool:
    if mode == "always":
        return True
    if mode == "never" or os.environ.get("NO_COLOR"):
        return False
    return hasattr(stream, "isatty") and stream.isatty()


def _paint(text: str, code: str, on: bool) -> str:
    return f"\033[{code}m{text}\033[0m" if on else text


# -- domain administration ---------------------------------------------------------

def cmd_domain_init(args):
    store = open_store(args.store, create_if_missing=True)
    if args.name in store.list_domains():
        raise InvalidDomain(f"domain {args.name!r} already exists")
    domain = new_domain(args.name, args.root, args.platform)
    domain.site_settings.update(_pairs(args.setting, "--setting"))
    domain.bootstrap_tools = [parse_requirement(t) for t in args.tool or []]
    store.save_domain(domain)
    print(f"created domain {domain.name} ({len(domain.platforms)} platform(s))")
    return 0


def cmd_domain_list(args):
    for name in open_store(args.store).list_domains():
        print(name)
    return 0


def cmd_domain_show(args):
    domain = open_store(args.store).load_domain(args.name)
    if args.json:
        sys.stdout.write(canonical_json(encode_domain(domain)))
        return 0
    print(f"domain {domain.name}")
    for key, value in domain.site_settings.items():
        print(f"  {key} = {value}")
    print("  platforms: " + ", ".join(str(p) for p in domain.platforms))
    if domain.bootstrap_tools:
        print("  bootstrap tools: " + ", ".join(f"{n}{'' if str(c) == '*' else c}"
                                                 for n, c in domain.bootstrap_tools))
    for p in domain.projects:
        deps = ", ".join(f"{n}{'' if str(c) == '*' else c}" for n, c in p.dependencies)
        print(f"  project {p.name} [{p.kind.value}] {p.origin}" + (f" (needs {deps})" if deps else ""))
        for v in p.versions:
            states = ", ".join(f"{plat}: {v.record(plat).status.value}" for plat in domain.platforms)
            print(f"    {v.label}  {states}")
    return 0


def cmd_project_add(args):
    project = Project(
        name=args.name,
        kind=ProjectKind(args.kind),
        origin=args.origin,
        versions=[Version(label) for label in args.version or []],
        dependencies=[parse_requirement(r) for r in args.depends or []],
        required_tools=[parse_requirement(r) for r in args.tool or []],
    )
    store = open_store(args.store)
    store.modify_domain(args.domain, lambda d: add_project(d, project))
    print(f"added project {project.name} to {args.domain}")
    return 0


def cmd_version_add(args):
    version = Version(args.label, _pairs(args.config, "--config"))

    def change(domain):
        domain.project(args.project).add_version(version)
        return domain

    open_store(args.store).modify_domain(args.domain, change)
    print(f"added version {args.label} to {args.project}")
    return 0


# -- install / build -------------------------------------------------------------------

def _install(args, rebuild: bool) -> int:
    store = open_store(args.store)
    domain = store.load_domain(args.domain)
    if args.platform:
        platform = args.platform
    elif len(domain.platforms) == 1:
        platform = domain.platforms[0]
    else:
        raise UsageError("domain has several platforms; pass --platform")
    plat = PlatformId.parse(platform)
    target = domain.project(args.project)
    target.version(args.version)
    if rebuild and target.kind is not ProjectKind.SOURCE_BUILT:
        raise UsageError(f"{target.name} is a {target.kind.value} project; use install")
    order = ([(args.project, args.version)] if args.no_deps
             else resolve_install_order(domain, [(args.project, args.version)]))
    config = AdapterConfig.load(args.adapters) if args.adapters else AdapterConfig.default()

    log_path = Path(args.log) if args.log else (
        store.root_path / "logs" / f"{args.domain}-{args.project}-{args.version}-"
        f"{utcnow().strftime('%Y%m%dT%H%M%SZ')}.log")
    log_path = log_path.resolve()
    status = 0
    with open_session(None, args.workdir, default_timeout=args.timeout) as session:
        for name, label in order:
            domain = store.load_domain(args.domain)
            project = domain.project(name)
            version = project.version(label)
            current = version.record(plat).status
            is_target = (name, label) == (args.project, args.version)
            if current is Status.INSTALLED:
                if not (rebuild and is_target):
                    print(f"{name} {label} {plat}: already installed")
                    continue
                store.update_installation(domain.name, name, label, plat, Status.REMOVED,
                                          session_log_ref=str(log_path))
            plan = plan_install(project, version, plat, domain, config)
            record = execute_plan(plan, session, store, InstallAddress(domain.name, name, label, plat),
                                  session_log_ref=str(log_path))
            if record.status is Status.INSTALLED:
                print(f"{name} {label} {plat}: Installed")
            else:
                print(f"{name} {label} {plat}: Failed ({record.failure_reason})", file=sys.stderr)
                status = 1
                break
    write_session_log(session, log_path)
    print(f"session log: {log_path}")
    return status


def cmd_install(args):
    return _install(args, rebuild=False)


def cmd_build(args):
    return _install(args, rebuild=True)


# -- analysis -------------------------------------------------------------------------

def cmd_analyze(args):
    if args.log in (None, "-"):
        data = sys.stdin.buffer.read()
        build_id = args.build_id or "stdin"
    else:
        data = Path(args.log).read_bytes()
        build_id = args.build_id or Path(args.log).name
    if not args.raw and analyzer.is_session_log(data):
        data = analyzer.session_log_output(data)
    report = analyzer.scan(data, analyzer.load_ruleset(args.rules), build_id)
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    if args.html:
        Path(args.html).write_text(analyzer.render_html(report), encoding="utf-8")
    if args.json:
        sys.stdout.write(text)
    else:
        out = analyzer.render_text(report)
        if _use_color(args.color, sys.stdout) and report.errors:
            out = out.replace(analyzer.totals_line(report), _paint(analyzer.totals_line(report), "31", True))
        sys.stdout.write(out)

    failures = []
    if args.max_errors is not None and report.errors > args.max_errors:
        failures.append(f"error threshold exceeded: {report.errors} errors > --max-errors {args.max_errors}")
    if args.max_warnings is not None and report.warnings > args.max_warnings:
        failures.append(f"warning threshold exceeded: {report.warnings} warnings > "
                        f"--max-warnings {args.max_warnings}")
    for msg in failures:
        print(f"boa: {msg}", file=sys.stderr)
    return 1 if failures else 0


def cmd_diff(args):
    old = analyzer.load_report(args.old)
    new = analyzer.load_report(args.new)
    result = analyzer.diff_reports(old, new)
    if args.json:
        sys.stdout.write(canonical_json(result.to_dict()))
    else:
        print(f"new: {len(result.new)} fixed: {len(result.fixed)} persisting: {len(result.persisting)}")
        for label, items in (("+", result.new), ("-", result.fixed)):
            for d in items:
                where = f"{d.file}:{d.line}: " if d.file else ""
                print(f"{label} [{d.severity.value}] {where}{d.message}")
    return 1 if (args.fail_on_new and result.new) else 0


def cmd_validate(args):
    exp = validator.load_expectation(args.expectation)
    workdir = args.workdir or Path(args.expectation).resolve().parent
    with open_session(None, workdir, default_timeout=args.timeout) as session:
        result = validator.validate(exp, session)
        actual = session.actions[-1].stdout.decode("utf-8", errors="replace")
    if isinstance(result, validator.Pass):
        print(f"{exp.name}: pass")
        return 0
    if isinstance(result, validator.CommandFailed):
        what = result.status if result.status is not None else result.outcome
        print(f"{exp.name}: command failed ({what})", file=sys.stderr)
        return 1
    print(f"{exp.name}: FAIL", file=sys.stderr)
    print(validator.full_diff(actual, exp) if args.full_diff else result.describe())
    return 1


# -- scenarios -------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    return RunConfig(
        adapters=AdapterConfig.load(args.adapters) if args.adapters else AdapterConfig.default(),
        runs_dir=Path(args.runs_dir),
        base_dir=Path(args.workdir) if getattr(args, "workdir", None) else None,
        timeout=args.timeout,
    )


def cmd_run(args):
    scenario = load_scenario(args.scenario)
    summary = run_scenario(scenario, open_store(args.store), _run_config(args))
    if args.json:
        sys.stdout.write(summary.to_json())
    else:
        for s in summary.steps:
            print(f"{s.id:<20} {s.outcome:<8} {s.detail}")
        print(f"overall: {summary.overall}" + (f" ({summary.halt_reason})" if summary.halt_reason else ""))
        print(f"run directory: {summary.run_dir}")
    return 0 if summary.overall == "Success" else 1


def cmd_shell(args):
    store = open_store(args.store)

    def dispatch(argv):
        return main(["--store", str(store.root_path), *argv])

    return interactive_session(store, args.domain, dispatch=dispatch, config=_run_config(args),
                               log_path=args.log)


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="boa", description="Automated builds, installs and output analysis.")
    p.add_argument("--version", action="version", version=f"boa {__version__}")
    p.add_argument("--store", help="store directory (default: $BOA_STORE or ./boa-store)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="count", default=0)
    p.add_argument("--color", choices=("auto", "always", "never"), default="auto")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    dom = sub.add_parser("domain", help="create and inspect domains")
    dsub = dom.add_subparsers(dest="domain_command", metavar="ACTION", parser_class=_Parser)
    dsub.required = True
    d = dsub.add_parser("init", help="create a domain (and the store if needed)")
    d.add_argument("name")
    d.add_argument("--root", required=True, help="absolute install root")
    d.add_argument("--platform", action="append", required=True, help="os-version/compiler, repeatable")
    d.add_argument("--setting", action="append", metavar="KEY=VALUE", help="extra site setting")
    d.add_argument("--tool", action="append", metavar="NAME[==V|>=V]", help="bootstrap tool")
    d.set_defaults(func=cmd_domain_init)
    d = dsub.add_parser("list", help="list domains in the store")
    d.set_defaults(func=cmd_domain_list)
    d = dsub.add_parser("show", help="show one domain")
    d.add_argument("name")
    d.add_argument("--json", action="store_true", help="print the stored document")
    d.set_defaults(func=cmd_domain_show)

    proj = sub.add_parser("project", help="manage projects")
    psub = proj.add_subparsers(dest="project_command", metavar="ACTION", parser_class=_Parser)
    psub.required = True
    d = psub.add_parser("add", help="add a project to a domain")
    d.add_argument("domain")
    d.add_argument("name")
    d.add_argument("--kind", required=True, choices=[k.value for k in ProjectKind])
    d.add_argument("--origin", default="", help="source repository or package cache")
    d.add_argument("--version", action="append", metavar="LABEL", help="initial version, repeatable")
    d.add_argument("--depends", action="append", metavar="PROJECT[==V|>=V]")
    d.add_argument("--tool", action="append", metavar="NAME[==V|>=V]", help="required tool")
    d.set_defaults(func=cmd_project_add)

    ver = sub.add_parser("version", help="manage versions")
    vsub = ver.add_subparsers(dest="version_command", metavar="ACTION", parser_class=_Parser)
    vsub.required = True
    d = vsub.add_parser("add", help="add a version to a project")
    d.add_argument("domain")
    d.add_argument("project")
    d.add_argument("label")
    d.add_argument("--config", action="append", metavar="KEY=VALUE", help="configuration entry")
    d.set_defaults(func=cmd_version_add)

    for name, func, text in (("install", cmd_install, "install a version and its dependencies"),
                             ("build", cmd_build, "rebuild a source-built version from sources")):
        d = sub.add_parser(name, help=text)
        d.add_argument("domain")
        d.add_argument("project")
        d.add_argument("version")
        d.add_argument("--platform")
        d.add_argument("--adapters", help="adapter templates (TOML)")
        d.add_argument("--no-deps", action="store_true", help="skip the dependency closure")
        d.add_argument("--log", help="session log path (default: <store>/logs/...)")
        d.add_argument("--workdir", help="session working directory")
        d.add_argument("--timeout", type=float, default=600.0, help="per-command timeout, seconds")
        d.set_defaults(func=func)

    d = sub.add_parser("analyze", help="classify build output")
    d.add_argument("log", nargs="?", help="log file, session log, or - for stdin")
    d.add_argument("--rules", default="gcc-classic", help="builtin rule set or TOML file")
    d.add_argument("--max-errors", type=int)
    d.add_argument("--max-warnings", type=int)
    d.add_argument("--build-id")
    d.add_argument("--json", action="store_true", help="print the report as JSON")
    d.add_argument("--report", help="write the JSON report here")
    d.add_argument("--html", help="write an HTML page here")
    d.add_argument("--raw", action="store_true", help="scan session logs verbatim")
    d.set_defaults(func=cmd_analyze)

    d = sub.add_parser("diff", help="compare two reports")
    d.add_argument("old")
    d.add_argument("new")
    d.add_argument("--json", action="store_true")
    d.add_argument("--fail-on-new", action="store_true", help="exit 1 when new diagnostics appear")
    d.set_defaults(func=cmd_diff)

    d = sub.add_parser("validate", help="check a command's output against a reference")
    d.add_argument("expectation", help="expectation TOML file")
    d.add_argument("--full-diff", action="store_true", help="print a unified diff on failure")
    d.add_argument("--workdir")
    d.add_argument("--timeout", type=float, default=600.0)
    d.set_defaults(func=cmd_validate)

    d = sub.add_parser("run", help="run a scenario")
    d.add_argument("scenario")
    d.add_argument("--adapters")
    d.add_argument("--runs-dir", default="runs")
    d.add_argument("--workdir")
    d.add_argument("--timeout", type=float, default=600.0)
    d.add_argument("--json", action="store_true", help="print summary.json")
    d.set_defaults(func=cmd_run)

    d = sub.add_parser("shell", help="interactive session")
    d.add_argument("domain")
    d.add_argument("--adapters")
    d.add_argument("--runs-dir", default="runs")
    d.add_argument("--workdir")
    d.add_argument("--timeout", type=float, default=600.0)
    d.add_argument("--log", help="where to write the session log on exit")
    d.set_defaults(func=cmd_shell)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    args.store = args.store or os.environ.get("BOA_STORE") or "boa-store"
    level = logging.WARNING - 10 * args.verbose + 10 * args.quiet
    logging.basicConfig(level=max(level, logging.DEBUG), format="boa: %(message)s")
    try:
        return args.func(args)
    except BoaError as exc:
        print(f"boa: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"boa: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
