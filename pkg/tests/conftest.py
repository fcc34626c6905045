from __future__ import annotations

import pytest

from boa.adapters import write_mock_backend
from boa.model import PlatformId, Project, ProjectKind, Version, add_project, new_domain
from boa.store import open_store

ACCEPTANCE: list[tuple[str, bool, str]] = []

PLATFORM = PlatformId.parse("linux-2.4/gcc-3.2")


@pytest.fixture
def acceptance():
    """Record one line per acceptance criterion for the terminal summary."""
    def record(name: str, ok: bool, detail: str = ""):
        ACCEPTANCE.append((name, ok, detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))


@pytest.fixture
def store(tmp_path):
    return open_store(tmp_path / "store", create_if_missing=True)


@pytest.fixture
def mock_bin(tmp_path):
    return write_mock_backend(tmp_path / "mock")


@pytest.fixture
def cms(store, tmp_path):
    """A saved domain with one source-built and one package-cache project."""
    d = new_domain("cms", str(tmp_path / "sw"), [PLATFORM])
    d = add_project(d, Project("toolbox", ProjectKind.SOURCE_BUILT, "cvs://repo/toolbox",
                               [Version("1.0"), Version("1.1")]))
    d = add_project(d, Project("gcc", ProjectKind.PACKAGE_CACHE, "http://cache/gcc", [Version("3.2")]))
    store.save_domain(d)
    return d
