"""File-backed store for whole domains.

Layout under the store root::

    boa-store.toml          marker: format version and creation time
    domains/<name>.json     canonical JSON document, one per domain
    domains/<name>.json.bak previous generation
    domains/<name>.lock     advisory writer lock (holder pid + timestamp)

Saves write a temp file next to the target and rename it into place, so a
reader always sees either the old or the new complete document.
"""

from __future__ import annotations

import contextlib
import errno
import json
import logging
import os
import tempfile
import time
from pathlib import Path

from .errors import (
    BoaError,
    CorruptRecord,
    IncompatibleStoreVersion,
    NotAStore,
    ReadOnlyStore,
    StoreLocked,
    UnknownDomain,
    UnknownPlatform,
)
from .model import (
    Domain,
    InstallationRecord,
    PlatformId,
    Project,
    Status,
    Version,
    VersionConstraint,
    check_token,
    format_requirement,
    parse_requirement,
    transition,
)
from ._util import canonical_json, format_ts, parse_ts, tomllib, utcnow

log = logging.getLogger(__name__)

MARKER = "boa-store.toml"
FORMAT_VERSION = 1


# -- encoding -------------------------------------------------------------------

def _reqs(items) -> list[str]:
    return [format_requirement(name, c) for name, c in items]


def encode_record(rec: InstallationRecord) -> dict:
    return {
        "platform": str(rec.platform),
        "status": rec.status.value,
        "started_at": format_ts(rec.started_at),
        "finished_at": format_ts(rec.finished_at),
        "session_log_ref": rec.session_log_ref,
        "failure_reason": rec.failure_reason,
    }


def encode_domain(domain: Domain) -> dict:
    return {
        "name": domain.name,
        "site_settings": dict(domain.site_settings),
        "platforms": [str(p) for p in domain.platforms],
        "bootstrap_tools": _reqs(domain.bootstrap_tools),
        "projects": [
            {
                "name": p.name,
                "kind": p.kind.value,
                "origin": p.origin,
                "dependencies": _reqs(p.dependencies),
                "required_tools": _reqs(p.required_tools),
                "versions": [
                    {
                        "label": v.label,
                        "configuration": dict(v.configuration),
                        "installations": [encode_record(r) for _, r in
                                          sorted(v.installations.items(), key=lambda kv: str(kv[0]))],
                    }
                    for v in p.versions
                ],
            }
            for p in domain.projects
        ],
    }


def decode_domain(doc: dict) -> Domain:
    def record(d):
        return InstallationRecord(
            platform=PlatformId.parse(d["platform"]),
            status=Status(d["status"]),
            started_at=parse_ts(d.get("started_at")),
            finished_at=parse_ts(d.get("finished_at")),
            session_log_ref=d.get("session_log_ref"),
            failure_reason=d.get("failure_reason"),
        )

    def version(d):
        recs = [record(r) for r in d.get("installations", [])]
        installs = {r.platform: r for r in recs}
        if len(installs) != len(recs):
            raise ValueError(f"version {d['label']!r}: more than one installation per platform")
        return Version(d["label"], dict(d.get("configuration", {})), installs)

    projects = [
        Project(
            name=p["name"],
            kind=p["kind"],
            origin=p.get("origin", ""),
            versions=[version(v) for v in p.get("versions", [])],
            dependencies=[parse_requirement(r) for r in p.get("dependencies", [])],
            required_tools=[parse_requirement(r) for r in p.get("required_tools", [])],
        )
        for p in doc.get("projects", [])
    ]
    domain = Domain(
        name=doc["name"],
        site_settings=dict(doc["site_settings"]),
        platforms=[PlatformId.parse(p) for p in doc["platforms"]],
        projects=projects,
        bootstrap_tools=[parse_requirement(r) for r in doc.get("bootstrap_tools", [])],
    )
    names = set(domain.project_names)
    for p in domain.projects:
        for dep, _ in p.dependencies:
            if dep not in names:
                raise ValueError(f"project {p.name!r} depends on unknown project {dep!r}")
        for v in p.versions:
            for plat in v.installations:
                if plat not in domain.platforms:
                    raise ValueError(f"installation on undeclared platform {plat}")
    return domain


# -- locking ----------------------------------------------------------------------

def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _lock_holder(path: Path) -> int | None:
    try:
        first = path.read_text().split()
        return int(first[0])
    except (OSError, ValueError, IndexError):
        return None


@contextlib.contextmanager
def domain_lock(path: Path, timeout: float = 2.0, break_stale: bool = False):
    """Hold ``path`` as an O_EXCL lock file; polls until *timeout*."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        except FileExistsError:
            holder = _lock_holder(path)
            if holder is not None and not _pid_alive(holder) and break_stale:
                log.warning("breaking stale lock %s held by dead pid %d", path, holder)
                with contextlib.suppress(FileNotFoundError):
                    path.unlink()
                continue
            if time.monotonic() >= deadline:
                state = "stale, pass break_stale" if holder and not _pid_alive(holder) else "held"
                raise StoreLocked(f"{path.name} is {state} (pid {holder})") from None
            time.sleep(0.02)
            continue
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()} {format_ts(utcnow())}\n")
        break
    try:
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            path.unlink()


def atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# -- the store ----------------------------------------------------------------------

class Store:
    """Handle on one store directory.  Use :func:`open_store` to get one."""

    def __init__(self, root_path, read_only: bool = False, lock_timeout: float = 2.0,
                 break_stale: bool = False):
        self.root_path = Path(root_path).resolve()
        self.read_only = read_only
        self.lock_timeout = lock_timeout
        self.break_stale = break_stale

    def __repr__(self):
        return f"Store({str(self.root_path)!r}, read_only={self.read_only})"

    @property
    def domains_dir(self) -> Path:
        return self.root_path / "domains"

    def domain_path(self, name: str) -> Path:
        return self.domains_dir / f"{check_token(name, 'domain name')}.json"

    def lock(self, name: str):
        return domain_lock(self.domains_dir / f"{name}.lock", self.lock_timeout, self.break_stale)

    def _require_writable(self):
        if self.read_only:
            raise ReadOnlyStore(f"store {self.root_path} is read-only")

    def _write(self, domain: Domain) -> None:
        path = self.domain_path(domain.name)
        data = canonical_json(encode_domain(domain)).encode("utf-8")
        try:
            previous = path.read_bytes()
        except FileNotFoundError:
            previous = None
        if previous is not None:
            atomic_write(path.with_name(path.name + ".bak"), previous)
        atomic_write(path, data)

    def save_domain(self, domain: Domain) -> None:
        self._require_writable()
        with self.lock(domain.name):
            self._write(domain)

    def modify_domain(self, name: str, change) -> Domain:
        """Apply ``change(domain) -> domain`` under the domain lock and save."""
        self._require_writable()
        with self.lock(name):
            domain = change(self.load_domain(name))
            self._write(domain)
        return domain

    def load_domain(self, name: str) -> Domain:
        path = self.domain_path(name)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise UnknownDomain(f"no domain {name!r} in store {self.root_path}") from None
        try:
            doc = json.loads(text)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CorruptRecord(f"{path.name}: not valid JSON ({exc})") from None
        try:
            domain = decode_domain(doc)
        except (BoaError, KeyError, TypeError, ValueError, AttributeError) as exc:
            what = f"missing key {exc}" if isinstance(exc, KeyError) else str(exc)
            raise CorruptRecord(f"{path.name}: {what}") from None
        if domain.name != name:
            raise CorruptRecord(f"{path.name}: document names domain {domain.name!r}")
        return domain

    def list_domains(self) -> list[str]:
        return sorted(p.name[:-len(".json")] for p in self.domains_dir.glob("*.json")
                      if not p.name.startswith("."))

    def update_installation(self, domain_name: str, project: str, version_label: str,
                            platform, new_status, detail: str | None = None, *,
                            session_log_ref: str | None = None, now=None) -> InstallationRecord:
        """Validated read-modify-write of one installation record.

        *detail* is the failure reason when moving to Failed.
        """
        self._require_writable()
        platform = PlatformId.parse(platform)
        with self.lock(domain_name):
            domain = self.load_domain(domain_name)
            if platform not in domain.platforms:
                raise UnknownPlatform(f"domain {domain_name!r} has no platform {platform}")
            version = domain.project(project).version(version_label)
            record = transition(version.record(platform), Status(new_status), reason=detail,
                                session_log_ref=session_log_ref, now=now)
            version.installations[platform] = record
            self._write(domain)
        return record


def open_store(root_path, create_if_missing: bool = False, **kwargs) -> Store:
    root = Path(root_path)
    marker = root / MARKER
    if not marker.is_file():
        if not create_if_missing:
            raise NotAStore(f"{root} is not a BOA store (no {MARKER})")
        if kwargs.get("read_only"):
            raise ReadOnlyStore(f"cannot create read-only store at {root}")
        try:
            (root / "domains").mkdir(parents=True, exist_ok=True)
            marker.write_text(f'format = {FORMAT_VERSION}\ncreated_at = "{format_ts(utcnow())}"\n')
        except OSError as exc:
            if exc.errno in (errno.ENOTDIR, errno.EEXIST):
                raise NotAStore(f"{root} is not a directory") from None
            raise
    else:
        try:
            meta = tomllib.loads(marker.read_text())
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise IncompatibleStoreVersion(f"unreadable store marker: {exc}") from None
        if meta.get("format") != FORMAT_VERSION:
            raise IncompatibleStoreVersion(
                f"store format {meta.get('format')!r} is not supported (expected {FORMAT_VERSION})")
        if not (root / "domains").is_dir():
            raise NotAStore(f"{root} has a marker but no domains/ directory")
    return Store(root, **kwargs)
