"""Generators shared by the test modules."""

from __future__ import annotations

import datetime as dt
import random
import string

from boa.model import (
    Domain,
    InstallationRecord,
    Op,
    PlatformId,
    Project,
    ProjectKind,
    Status,
    Version,
    VersionConstraint,
)

TOKEN_CHARS = string.ascii_letters + string.digits + "._+-"
PLATFORMS = [
    PlatformId("linux", "2.4", "gcc-3.2"),
    PlatformId("linux", "2.6", "gcc-3.4.3"),
    PlatformId("slc3", "3.0.4", "gcc-3.2.3"),
    PlatformId("sunos", "5.8", "CC-5.4"),
    PlatformId("macosx", "10.3", "gcc-3.3"),
]


def token(rng: random.Random, lo: int = 1, hi: int = 8) -> str:
    return "".join(rng.choice(TOKEN_CHARS) for _ in range(rng.randint(lo, hi)))


def text(rng: random.Random) -> str:
    alphabet = string.printable + "äöü€µ漢字"
    return "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 12)))


def timestamp(rng: random.Random) -> dt.datetime:
    return dt.datetime(2004, 1, 1, tzinfo=dt.timezone.utc) + dt.timedelta(seconds=rng.randint(0, 10**9))


def random_record(rng: random.Random, platform: PlatformId) -> InstallationRecord:
    status = rng.choice(list(Status))
    return InstallationRecord(
        platform=platform,
        status=status,
        started_at=timestamp(rng) if rng.random() < 0.7 else None,
        finished_at=timestamp(rng) if rng.random() < 0.5 else None,
        session_log_ref=f"/logs/{token(rng)}.log" if rng.random() < 0.5 else None,
        failure_reason=("Build exited with status " + str(rng.randint(1, 255))) if status is Status.FAILED else None,
    )


def random_constraint(rng: random.Random, labels: list[str]) -> VersionConstraint:
    op = rng.choice(list(Op))
    if op is Op.ANY or not labels:
        return VersionConstraint()
    return VersionConstraint(op, rng.choice(labels))


def random_domain(rng: random.Random, max_projects: int = 6) -> Domain:
    platforms = rng.sample(PLATFORMS, rng.randint(1, len(PLATFORMS)))
    names = list(dict.fromkeys(token(rng) for _ in range(rng.randint(0, max_projects))))
    projects = []
    for i, name in enumerate(names):
        labels = list(dict.fromkeys(token(rng) for _ in range(rng.randint(0, 4))))
        versions = []
        for label in labels:
            config = {token(rng): text(rng) for _ in range(rng.randint(0, 3))}
            installs = {p: random_record(rng, p) for p in platforms if rng.random() < 0.5}
            versions.append(Version(label, config, installs))
        deps = []
        for dep in rng.sample(names[:i], rng.randint(0, i)):
            dep_labels = next(p.labels for p in projects if p.name == dep)
            deps.append((dep, random_constraint(rng, dep_labels)))
        tools = [(token(rng), random_constraint(rng, [token(rng)])) for _ in range(rng.randint(0, 3))]
        projects.append(Project(name, rng.choice(list(ProjectKind)), text(rng), versions, deps, tools))
    settings = {"install_root": "/opt/" + token(rng)}
    settings.update({token(rng): text(rng) for _ in range(rng.randint(0, 3))})
    tools = [(token(rng), random_constraint(rng, [token(rng)])) for _ in range(rng.randint(0, 3))]
    return Domain(token(rng), settings, platforms, projects, tools)


def random_dag(rng: random.Random, n: int, edge_p: float = 0.35):
    """Domain of *n* projects with acyclic dependencies (Any constraints).

    Returns (domain, edges) with edges as (depender, dependee) pairs.
    """
    names = [f"p{i}" for i in range(n)]
    topo = names[:]
    rng.shuffle(topo)
    edges = [(topo[j], topo[i]) for i in range(n) for j in range(i + 1, n) if rng.random() < edge_p]
    listing = names[:]
    rng.shuffle(listing)
    projects = []
    for name in listing:
        versions = [Version(f"v{k}") for k in range(rng.randint(1, 3))]
        deps = [(b, VersionConstraint()) for a, b in edges if a == name]
        projects.append(Project(name, ProjectKind.SOURCE_BUILT, "", versions, deps))
    return Domain("dag", {"install_root": "/opt/sw"}, [PLATFORMS[0]], projects), edges
