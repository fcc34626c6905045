"""Turn install requests into session commands.

Source-built projects go through fetch, configure, build and register;
package-cache projects skip the build.  Each phase is one command template
with ``{origin} {project} {version} {install_root} {platform}``
placeholders, substituted shell-quoted.
"""

from __future__ import annotations

import enum
import shlex
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

from .errors import MissingTemplate, UnresolvedPlaceholder
from .model import Domain, InstallationRecord, PlatformId, Project, ProjectKind, Status, Version
from .session import Outcome, Session
from ._util import load_toml

PLACEHOLDERS = frozenset({"origin", "project", "version", "install_root", "platform"})


class Phase(enum.Enum):
    FETCH = "Fetch"
    CONFIGURE = "Configure"
    BUILD = "Build"
    REGISTER = "Register"

    @property
    def key(self) -> str:
        return self.value.lower()


PHASES = {
    ProjectKind.SOURCE_BUILT: (Phase.FETCH, Phase.CONFIGURE, Phase.BUILD, Phase.REGISTER),
    ProjectKind.PACKAGE_CACHE: (Phase.FETCH, Phase.CONFIGURE, Phase.REGISTER),
}

# status reached once the phase's command exits 0; Fetching is entered
# before the first step runs
PHASE_STATUS = {
    Phase.FETCH: Status.FETCHING,
    Phase.CONFIGURE: Status.CONFIGURED,
    Phase.BUILD: Status.BUILDING,
    Phase.REGISTER: Status.INSTALLED,
}


@dataclass(frozen=True)
class InstallPlanStep:
    phase: Phase
    command: str
    expected_status: Status


@dataclass
class KindTemplates:
    fetch: str | None = None
    configure: str | None = None
    build: str | None = None
    register: str | None = None
    preamble: list[str] = field(default_factory=list)

    def template(self, phase: Phase) -> str | None:
        return getattr(self, phase.key)


@dataclass
class AdapterConfig:
    source_built: KindTemplates = field(default_factory=KindTemplates)
    package_cache: KindTemplates = field(default_factory=KindTemplates)

    def __post_init__(self):
        for kind in ProjectKind:
            t = self.for_kind(kind)
            for text in [t.template(p) for p in Phase] + list(t.preamble):
                if text is not None:
                    check_template(text)

    def for_kind(self, kind: ProjectKind) -> KindTemplates:
        return self.source_built if kind is ProjectKind.SOURCE_BUILT else self.package_cache

    @classmethod
    def from_dict(cls, doc: dict) -> AdapterConfig:
        def kind(table):
            table = dict(table or {})
            preamble = table.pop("preamble", [])
            unknown = set(table) - {p.key for p in Phase}
            if unknown:
                raise MissingTemplate(f"unknown adapter keys: {sorted(unknown)}")
            return KindTemplates(preamble=list(preamble), **table)
        return cls(kind(doc.get("source-built")), kind(doc.get("package-cache")))

    @classmethod
    def load(cls, path) -> AdapterConfig:
        return cls.from_dict(load_toml(path))

    @classmethod
    def default(cls) -> AdapterConfig:
        # stand-ins for the site's real fetch/bootstrap/package tools
        return cls(
            KindTemplates(
                fetch="boa-fetch-source {origin} {project} {version} {install_root}/{platform}",
                configure="boa-bootstrap {project} {version} {install_root}/{platform}",
                build="boa-build {project} {version} {platform}",
                register="boa-register {project} {version} {platform}",
            ),
            KindTemplates(
                fetch="boa-fetch-package {origin} {project} {version}",
                configure="boa-unpack {project} {version} {install_root}/{platform}",
                register="boa-register {project} {version} {platform}",
            ),
        )


def check_template(text: str) -> None:
    try:
        fields = [f for _, f, _, _ in string.Formatter().parse(text) if f is not None]
    except ValueError as exc:
        raise UnresolvedPlaceholder(f"malformed template {text!r}: {exc}") from None
    for name in fields:
        if name not in PLACEHOLDERS:
            raise UnresolvedPlaceholder(f"unknown placeholder {{{name}}} in template {text!r}")


def substitute(text: str, values: dict[str, str]) -> str:
    check_template(text)
    return text.format(**{k: shlex.quote(v) for k, v in values.items()})


def plan_install(project: Project, version: Version, platform, domain: Domain,
                 config: AdapterConfig) -> list[InstallPlanStep]:
    """Fully substituted steps for one (project, version, platform).

    Preamble commands are folded into the first step with ``&&``.
    """
    platform = PlatformId.parse(platform)
    templates = config.for_kind(project.kind)
    values = {
        "origin": project.origin,
        "project": project.name,
        "version": version.label,
        "install_root": domain.install_root,
        "platform": str(platform),
    }
    steps = []
    for phase in PHASES[project.kind]:
        text = templates.template(phase)
        if not text:
            raise MissingTemplate(f"no {phase.key} template for {project.kind.value} projects")
        steps.append(InstallPlanStep(phase, substitute(text, values), PHASE_STATUS[phase]))
    if templates.preamble:
        pre = [substitute(t, values) for t in templates.preamble]
        first = steps[0]
        steps[0] = InstallPlanStep(first.phase, " && ".join(pre + [first.command]),
                                   first.expected_status)
    return steps


class InstallAddress(NamedTuple):
    domain: str
    project: str
    version: str
    platform: PlatformId


def execute_plan(plan: list[InstallPlanStep], session: Session, store, address: InstallAddress,
                 session_log_ref: str | None = None, timeout: float | None = None
                 ) -> InstallationRecord:
    """Run *plan* in *session*, persisting each status change.

    Stops at the first step that does not exit 0 and records the
    installation as Failed with a reason naming the phase.
    """
    if not plan:
        raise MissingTemplate("empty install plan")
    addr = InstallAddress(address[0], address[1], address[2], PlatformId.parse(address[3]))

    def update(status, detail=None):
        return store.update_installation(addr.domain, addr.project, addr.version, addr.platform,
                                         status, detail, session_log_ref=session_log_ref)

    record = update(Status.FETCHING)
    for step in plan:
        action = session.execute(step.command, timeout)
        if action.outcome is Outcome.TIMED_OUT:
            return update(Status.FAILED, f"{step.phase.value} timed out")
        if action.outcome is Outcome.SHELL_DIED:
            return update(Status.FAILED, f"{step.phase.value}: shell died")
        if action.exit_status != 0:
            return update(Status.FAILED, f"{step.phase.value} exited with status {action.exit_status}")
        if step.expected_status is not record.status:
            record = update(step.expected_status)
    return record


def write_mock_backend(directory, fail: dict[str, int] | None = None) -> Path:
    """Create ``boa-*`` stand-in scripts in *directory* for tests and demos.

    Each script appends its name and arguments to ``calls.log`` in the same
    directory.  ``fail`` maps a script name to the exit status it returns.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fail = fail or {}
    names = ["boa-fetch-source", "boa-bootstrap", "boa-build", "boa-register",
             "boa-fetch-package", "boa-unpack"]
    for name in names:
        script = directory / name
        script.write_text(
            "#!/bin/sh\n"
            f'echo "{name} $*" >> {shlex.quote(str(directory / "calls.log"))}\n'
            f'echo "{name}: $*"\n'
            f"exit {int(fail.get(name, 0))}\n"
        )
        script.chmod(0o755)
    return directory
