"""Domain object model and install-order resolution.

A Domain is the site-level root: settings, target platforms, projects and
the bootstrap tools it needs.  Projects carry an ordered list of versions;
each version tracks one InstallationRecord per platform.  Everything here
is a plain value; persistence lives in :mod:`boa.store`.
"""

from __future__ import annotations

import copy
import datetime as _dt
import enum
import os
import re
from dataclasses import dataclass, field, replace

from .errors import (
    DependencyCycle,
    DuplicateProject,
    EmptyPlatformSet,
    IllegalTransition,
    InvalidDomain,
    InvalidName,
    InvalidPlatform,
    UnknownProject,
    UnknownVersion,
    UnsatisfiableConstraint,
)
from ._util import utcnow

TOKEN_RE = re.compile(r"[A-Za-z0-9._+-]+")


def check_token(value, what: str = "name") -> str:
    if not isinstance(value, str) or not TOKEN_RE.fullmatch(value):
        raise InvalidName(f"invalid {what} {value!r}: expected [A-Za-z0-9._+-]+")
    return value


@dataclass(frozen=True, order=True)
class PlatformId:
    """(os name, os version, compiler), written ``os-version/compiler``.

    The os name may not contain ``-`` since the first dash separates it
    from the version in the string form.
    """

    os_name: str
    os_version: str
    compiler: str

    def __post_init__(self):
        for label, value in (("os name", self.os_name), ("os version", self.os_version),
                             ("compiler", self.compiler)):
            if not isinstance(value, str) or not TOKEN_RE.fullmatch(value):
                raise InvalidPlatform(f"invalid platform {label} {value!r}")
        if "-" in self.os_name:
            raise InvalidPlatform(f"platform os name may not contain '-': {self.os_name!r}")

    def __str__(self) -> str:
        return f"{self.os_name}-{self.os_version}/{self.compiler}"

    @classmethod
    def parse(cls, text: str) -> PlatformId:
        if isinstance(text, PlatformId):
            return text
        head, sep, compiler = str(text).partition("/")
        os_name, dash, os_version = head.partition("-")
        if not sep or not dash:
            raise InvalidPlatform(f"invalid platform {text!r}: expected os-version/compiler")
        return cls(os_name, os_version, compiler)


class ProjectKind(enum.Enum):
    SOURCE_BUILT = "source-built"
    PACKAGE_CACHE = "package-cache"


class Status(enum.Enum):
    NOT_INSTALLED = "NotInstalled"
    FETCHING = "Fetching"
    CONFIGURED = "Configured"
    BUILDING = "Building"
    INSTALLED = "Installed"
    FAILED = "Failed"
    REMOVED = "Removed"


LEGAL_TRANSITIONS: dict[Status, frozenset[Status]] = {
    Status.NOT_INSTALLED: frozenset({Status.FETCHING}),
    Status.FETCHING: frozenset({Status.CONFIGURED, Status.FAILED}),
    Status.CONFIGURED: frozenset({Status.BUILDING, Status.INSTALLED, Status.FAILED}),
    Status.BUILDING: frozenset({Status.INSTALLED, Status.FAILED}),
    Status.FAILED: frozenset({Status.FETCHING}),
    Status.INSTALLED: frozenset({Status.REMOVED}),
    Status.REMOVED: frozenset({Status.FETCHING}),
}

_FINISHING = frozenset({Status.INSTALLED, Status.FAILED, Status.REMOVED})


class Op(enum.Enum):
    EXACT = "=="
    AT_LEAST = ">="
    ANY = "*"


@dataclass(frozen=True)
class VersionConstraint:
    op: Op = Op.ANY
    label: str = ""

    def __post_init__(self):
        if self.op is Op.ANY:
            if self.label:
                raise InvalidName("an Any constraint takes no label")
        else:
            check_token(self.label, "version label")

    def __str__(self) -> str:
        return "*" if self.op is Op.ANY else f"{self.op.value}{self.label}"

    @classmethod
    def parse(cls, text: str) -> VersionConstraint:
        text = text.strip()
        if text in ("", "*"):
            return cls()
        for op in (Op.EXACT, Op.AT_LEAST):
            if text.startswith(op.value):
                return cls(op, text[len(op.value):])
        raise InvalidName(f"invalid version constraint {text!r}")

    def allowed(self, labels: list[str]) -> list[str]:
        """Subset of *labels* (oldest first) satisfying the constraint."""
        if self.op is Op.ANY:
            return list(labels)
        if self.label not in labels:
            return []
        if self.op is Op.EXACT:
            return [self.label]
        return labels[labels.index(self.label):]


def parse_requirement(text: str) -> tuple[str, VersionConstraint]:
    """``name``, ``name==label`` or ``name>=label``."""
    m = re.fullmatch(r"\s*([A-Za-z0-9._+-]+?)\s*((?:==|>=).*)?", text)
    if not m:
        raise InvalidName(f"invalid requirement {text!r}")
    return m.group(1), VersionConstraint.parse(m.group(2) or "*")


def format_requirement(name: str, constraint: VersionConstraint) -> str:
    return name if constraint.op is Op.ANY else f"{name}{constraint}"


@dataclass(frozen=True)
class InstallationRecord:
    platform: PlatformId
    status: Status = Status.NOT_INSTALLED
    started_at: _dt.datetime | None = None
    finished_at: _dt.datetime | None = None
    session_log_ref: str | None = None
    failure_reason: str | None = None

    def __post_init__(self):
        if (self.status is Status.FAILED) != bool(self.failure_reason):
            raise InvalidDomain("failure_reason must be set exactly when status is Failed")


@dataclass
class Version:
    label: str
    configuration: dict[str, str] = field(default_factory=dict)
    installations: dict[PlatformId, InstallationRecord] = field(default_factory=dict)

    def __post_init__(self):
        check_token(self.label, "version label")

    def record(self, platform: PlatformId) -> InstallationRecord:
        return self.installations.get(platform) or InstallationRecord(platform)


@dataclass
class Project:
    name: str
    kind: ProjectKind
    origin: str = ""
    versions: list[Version] = field(default_factory=list)
    dependencies: list[tuple[str, VersionConstraint]] = field(default_factory=list)
    required_tools: list[tuple[str, VersionConstraint]] = field(default_factory=list)

    def __post_init__(self):
        check_token(self.name, "project name")
        self.kind = ProjectKind(self.kind)
        labels = [v.label for v in self.versions]
        if len(set(labels)) != len(labels):
            raise InvalidDomain(f"duplicate version labels in project {self.name!r}")
        if any(dep == self.name for dep, _ in self.dependencies):
            raise InvalidDomain(f"project {self.name!r} depends on itself")

    @property
    def labels(self) -> list[str]:
        return [v.label for v in self.versions]

    def version(self, label: str) -> Version:
        for v in self.versions:
            if v.label == label:
                return v
        raise UnknownVersion(f"project {self.name!r} has no version {label!r}")

    def add_version(self, version: Version) -> None:
        if version.label in self.labels:
            raise InvalidDomain(f"project {self.name!r} already has version {version.label!r}")
        self.versions.append(version)


@dataclass
class Domain:
    name: str
    site_settings: dict[str, str]
    platforms: list[PlatformId]
    projects: list[Project] = field(default_factory=list)
    bootstrap_tools: list[tuple[str, VersionConstraint]] = field(default_factory=list)

    def __post_init__(self):
        check_token(self.name, "domain name")
        if not self.platforms:
            raise EmptyPlatformSet("a domain needs at least one platform")
        if len(set(self.platforms)) != len(self.platforms):
            raise InvalidDomain("duplicate platforms")
        root = self.site_settings.get("install_root")
        if not root or not os.path.isabs(root):
            raise InvalidDomain(f"install_root must be an absolute path, got {root!r}")
        names = self.project_names
        if len(set(names)) != len(names):
            raise InvalidDomain("duplicate project names")

    @property
    def install_root(self) -> str:
        return self.site_settings["install_root"]

    @property
    def project_names(self) -> list[str]:
        return [p.name for p in self.projects]

    def project(self, name: str) -> Project:
        for p in self.projects:
            if p.name == name:
                return p
        raise UnknownProject(f"domain {self.name!r} has no project {name!r}")


def new_domain(name: str, install_root: str, platforms) -> Domain:
    check_token(name, "domain name")
    plats = sorted({PlatformId.parse(p) for p in platforms})
    if not plats:
        raise EmptyPlatformSet("a domain needs at least one platform")
    if not isinstance(install_root, str) or not os.path.isabs(install_root):
        raise InvalidDomain(f"install_root must be an absolute path, got {install_root!r}")
    return Domain(name, {"install_root": install_root}, plats)


def add_project(domain: Domain, project: Project) -> Domain:
    if project.name in domain.project_names:
        raise DuplicateProject(f"project {project.name!r} already in domain {domain.name!r}")
    out = copy.deepcopy(domain)
    out.projects.append(copy.deepcopy(project))
    return out


def transition(record: InstallationRecord, new_status: Status, *, reason: str | None = None,
               session_log_ref: str | None = None, now: _dt.datetime | None = None
               ) -> InstallationRecord:
    """Move *record* to *new_status*; raises IllegalTransition off the table."""
    new_status = Status(new_status)
    if new_status not in LEGAL_TRANSITIONS[record.status]:
        raise IllegalTransition(record.status, new_status)
    now = now or utcnow()
    changes: dict = {"status": new_status, "failure_reason": None}
    if new_status is Status.FAILED:
        changes["failure_reason"] = reason or "unspecified failure"
    if new_status is Status.FETCHING:
        changes["started_at"] = now
        changes["finished_at"] = None
    elif new_status in _FINISHING:
        changes["finished_at"] = now
    if session_log_ref is not None:
        changes["session_log_ref"] = session_log_ref
    return replace(record, **changes)


def prerequisites(domain: Domain, project: Project) -> list[tuple[str, VersionConstraint]]:
    """Dependencies plus any tools that the domain itself provides.

    Tools not named as projects are assumed to come with the host.  Domain
    bootstrap tools that are package-cache projects precede every other
    project.
    """
    names = set(domain.project_names)
    out = list(project.dependencies)
    out += [(n, c) for n, c in project.required_tools if n in names and n != project.name]
    boot = [(n, c) for n, c in domain.bootstrap_tools
            if n in names and domain.project(n).kind is ProjectKind.PACKAGE_CACHE]
    if project.name not in {n for n, _ in boot}:
        out += boot
    return out


def resolve_install_order(domain: Domain, targets) -> list[tuple[str, str]]:
    """Dependency closure of *targets* in install order.

    Each project in the closure gets one version: the newest (last stored)
    label allowed by every constraint placed on it.  Ready projects are
    emitted in domain project-list order.
    """
    constraints: dict[str, list[VersionConstraint]] = {}
    closure: list[str] = []
    pending: list[str] = []
    for name, label in targets:
        project = domain.project(name)
        project.version(label)
        constraints.setdefault(name, []).append(VersionConstraint(Op.EXACT, label))
        pending.append(name)

    seen: set[str] = set()
    while pending:
        name = pending.pop()
        if name in seen:
            continue
        seen.add(name)
        closure.append(name)
        for dep, constraint in prerequisites(domain, domain.project(name)):
            domain.project(dep)
            constraints.setdefault(dep, []).append(constraint)
            pending.append(dep)

    chosen: dict[str, str] = {}
    for name in closure:
        labels = domain.project(name).labels
        allowed = labels
        for c in constraints[name]:
            allowed = [label for label in allowed if label in c.allowed(labels)]
        if not allowed:
            raise UnsatisfiableConstraint(name, [str(c) for c in constraints[name]], labels)
        chosen[name] = allowed[-1]

    rank = {name: i for i, name in enumerate(domain.project_names)}
    deps = {name: {d for d, _ in prerequisites(domain, domain.project(name))} for name in closure}
    remaining = set(closure)
    order: list[str] = []
    while remaining:
        ready = sorted((n for n in remaining if not deps[n] & remaining), key=rank.__getitem__)
        if not ready:
            raise DependencyCycle(_find_cycle(remaining, deps, rank))
        # one at a time so the tie-break is applied to every choice
        order.append(ready[0])
        remaining.discard(ready[0])
    return [(name, chosen[name]) for name in order]


def _find_cycle(nodes: set[str], deps: dict[str, set[str]], rank: dict[str, int]) -> list[str]:
    # every remaining node has an unresolved dependency, so walking always
    # revisits a node eventually
    node = min(nodes, key=rank.__getitem__)
    path: list[str] = []
    index: dict[str, int] = {}
    while node not in index:
        index[node] = len(path)
        path.append(node)
        node = min(deps[node] & nodes, key=rank.__getitem__)
    return path[index[node]:]
