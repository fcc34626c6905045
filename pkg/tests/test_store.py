from __future__ import annotations

import json
import os
import random
import subprocess
import sys
import threading
import time
import datetime as dt
from pathlib import Path

import pytest

from boa import store as store_mod
from boa.errors import (
    CorruptRecord,
    IllegalTransition,
    IncompatibleStoreVersion,
    NotAStore,
    ReadOnlyStore,
    StoreLocked,
    UnknownDomain,
    UnknownProject,
)
from boa.model import PlatformId, Status, new_domain, transition
from boa.store import decode_domain, encode_domain, open_store
from helpers import random_domain

P = PlatformId.parse("linux-2.4/gcc-3.2")


def snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestOpen:
    def test_create(self, tmp_path):
        s = open_store(tmp_path, create_if_missing=True)
        assert (tmp_path / "boa-store.toml").is_file()
        assert (tmp_path / "domains").is_dir()
        assert "format = 1" in (tmp_path / "boa-store.toml").read_text()
        assert s.list_domains() == []

    def test_not_a_store(self, tmp_path):
        with pytest.raises(NotAStore):
            open_store(tmp_path, create_if_missing=False)

    def test_unknown_format(self, tmp_path):
        open_store(tmp_path, create_if_missing=True)
        (tmp_path / "boa-store.toml").write_text("format = 2\n")
        with pytest.raises(IncompatibleStoreVersion):
            open_store(tmp_path)

    def test_independent_instances(self, tmp_path):
        a = open_store(tmp_path / "a", create_if_missing=True)
        b = open_store(tmp_path / "b", create_if_missing=True)
        b.save_domain(new_domain("other", "/opt/b", [P]))
        before = snapshot(tmp_path / "b")
        a.save_domain(new_domain("cms", "/opt/a", [P]))
        a.save_domain(new_domain("cms", "/opt/a2", [P]))
        assert snapshot(tmp_path / "b") == before
        assert a.list_domains() == ["cms"] and b.list_domains() == ["other"]


class TestSaveLoad:
    def test_round_trip_random(self, store):
        rng = random.Random(1)
        for _ in range(50):
            d = random_domain(rng)
            store.save_domain(d)
            assert store.load_domain(d.name) == d

    def test_canonical_layout(self, store, cms):
        raw = store.domain_path("cms").read_text(encoding="utf-8")
        doc = json.loads(raw)
        assert raw == json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
        assert raw.endswith("}\n")

    def test_deterministic(self, store, cms):
        first = store.domain_path("cms").read_bytes()
        store.save_domain(store.load_domain("cms"))
        assert store.domain_path("cms").read_bytes() == first

    def test_backup(self, store):
        store.save_domain(new_domain("cms", "/opt/one", [P]))
        first = store.domain_path("cms").read_bytes()
        store.save_domain(new_domain("cms", "/opt/two", [P]))
        bak = store.domain_path("cms").with_name("cms.json.bak")
        assert bak.read_bytes() == first

    def test_unknown(self, store):
        with pytest.raises(UnknownDomain):
            store.load_domain("nope")

    def test_truncated(self, store, cms):
        path = store.domain_path("cms")
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(CorruptRecord):
            store.load_domain("cms")

    def test_invariant_violation_named(self, store, cms):
        path = store.domain_path("cms")
        doc = json.loads(path.read_text())
        doc["site_settings"]["install_root"] = "relative"
        path.write_text(json.dumps(doc))
        with pytest.raises(CorruptRecord, match="install_root"):
            store.load_domain("cms")

    def test_read_only(self, tmp_path, cms):
        ro = open_store(tmp_path / "store", read_only=True)
        assert ro.load_domain("cms") == cms
        with pytest.raises(ReadOnlyStore):
            ro.save_domain(cms)

    def test_list_sorted(self, store):
        assert store.list_domains() == []
        store.save_domain(new_domain("b", "/opt", [P]))
        store.save_domain(new_domain("a", "/opt", [P]))
        assert store.list_domains() == ["a", "b"]
        rng = random.Random(3)
        names = {f"d{rng.randint(0, 10**6)}" for _ in range(25)}
        for n in names:
            store.save_domain(new_domain(n, "/opt", [P]))
        assert store.list_domains() == sorted(names | {"a", "b"})


class TestCrashSafety:
    class Crash(BaseException):
        pass

    @pytest.mark.parametrize("crash_on", ["fsync", "replace-bak", "replace-main"])
    def test_interrupted_save(self, store, monkeypatch, crash_on):
        old = new_domain("cms", "/opt/old", [P])
        store.save_domain(old)
        old_bytes = store.domain_path("cms").read_bytes()
        new = new_domain("cms", "/opt/new", [P])
        real_replace, real_fsync = os.replace, os.fsync
        calls = []

        def fake_replace(src, dst):
            calls.append(dst)
            which = "replace-bak" if str(dst).endswith(".bak") else "replace-main"
            if which == crash_on:
                raise self.Crash()
            return real_replace(src, dst)

        def fake_fsync(fd):
            if crash_on == "fsync":
                raise self.Crash()
            return real_fsync(fd)

        monkeypatch.setattr(store_mod.os, "replace", fake_replace)
        monkeypatch.setattr(store_mod.os, "fsync", fake_fsync)
        with pytest.raises(self.Crash):
            store.save_domain(new)
        monkeypatch.undo()
        assert store.domain_path("cms").read_bytes() == old_bytes
        assert store.load_domain("cms") == old
        assert not list(store.domains_dir.glob(".*.tmp"))

    def test_killed_writer(self, tmp_path):
        """SIGKILL a saving process at random moments; the document stays whole."""
        st = open_store(tmp_path / "s", create_if_missing=True)
        st.save_domain(new_domain("cms", "/opt/r0", [P]))
        script = (
            "import sys\n"
            "from boa.store import open_store\n"
            "from boa.model import new_domain, PlatformId\n"
            "s = open_store(sys.argv[1], break_stale=True)\n"
            "i = 0\n"
            "while True:\n"
            "    i += 1\n"
            "    s.save_domain(new_domain('cms', '/opt/r%d' % i, [PlatformId.parse('linux-2.4/gcc-3.2')]))\n"
        )
        rng = random.Random(5)
        for _ in range(5):
            proc = subprocess.Popen([sys.executable, "-c", script, str(st.root_path)])
            time.sleep(0.3 + rng.random() * 0.3)
            proc.kill()
            proc.wait()
            d = st.load_domain("cms")
            assert d.install_root.startswith("/opt/r")


class TestLocking:
    def test_held_by_other_process(self, tmp_path, cms):
        st = open_store(tmp_path / "store", lock_timeout=0.2)
        holder = subprocess.Popen(
            [sys.executable, "-c",
             "import sys, time\n"
             "from boa.store import open_store\n"
             "s = open_store(sys.argv[1])\n"
             "with s.lock('cms'):\n"
             "    print('held', flush=True)\n"
             "    time.sleep(30)\n",
             str(st.root_path)],
            stdout=subprocess.PIPE, text=True)
        try:
            assert holder.stdout.readline().strip() == "held"
            with pytest.raises(StoreLocked):
                st.save_domain(cms)
        finally:
            holder.kill()
            holder.wait()

    def test_stale_lock(self, tmp_path, cms):
        dead = subprocess.Popen([sys.executable, "-c", "pass"])
        dead.wait()
        lock = tmp_path / "store" / "domains" / "cms.lock"
        lock.write_text(f"{dead.pid} 2005-01-01T00:00:00Z\n")
        with pytest.raises(StoreLocked, match="stale"):
            open_store(tmp_path / "store", lock_timeout=0.1).save_domain(cms)
        open_store(tmp_path / "store", lock_timeout=0.1, break_stale=True).save_domain(cms)
        assert not lock.exists()

    def test_concurrent_updates_serialize(self, store, cms):
        results = []

        def go(project, version):
            results.append(store.update_installation("cms", project, version, P, Status.FETCHING))

        threads = [threading.Thread(target=go, args=a) for a in (("toolbox", "1.0"), ("gcc", "3.2"))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        d = store.load_domain("cms")
        assert d.project("toolbox").version("1.0").record(P).status is Status.FETCHING
        assert d.project("gcc").version("3.2").record(P).status is Status.FETCHING


class TestUpdateInstallation:
    def test_fresh_fetching(self, store, cms):
        rec = store.update_installation("cms", "toolbox", "1.0", P, Status.FETCHING)
        assert rec.status is Status.FETCHING
        assert store.load_domain("cms").project("toolbox").version("1.0").installations[P] == rec

    def test_illegal_leaves_file(self, store, cms):
        for s in (Status.FETCHING, Status.CONFIGURED, Status.INSTALLED):
            store.update_installation("cms", "gcc", "3.2", P, s)
        before = store.domain_path("cms").read_bytes()
        with pytest.raises(IllegalTransition):
            store.update_installation("cms", "gcc", "3.2", P, Status.BUILDING)
        assert store.domain_path("cms").read_bytes() == before

    def test_unknown_addresses(self, store, cms):
        with pytest.raises(UnknownDomain):
            store.update_installation("nope", "gcc", "3.2", P, Status.FETCHING)
        with pytest.raises(UnknownProject):
            store.update_installation("cms", "nope", "3.2", P, Status.FETCHING)

    def test_replay(self, store, cms):
        rng = random.Random(11)
        t = dt.datetime(2005, 3, 1, tzinfo=dt.timezone.utc)
        addresses = [("toolbox", "1.0"), ("toolbox", "1.1"), ("gcc", "3.2")]
        applied = []
        for k in range(60):
            project, label = rng.choice(addresses)
            rec = store.load_domain("cms").project(project).version(label).record(P)
            nxt = rng.choice(sorted(store_mod.Status, key=lambda s: s.value))
            now = t + dt.timedelta(minutes=k)
            try:
                store.update_installation("cms", project, label, P, nxt, "reason", now=now)
            except IllegalTransition:
                continue
            applied.append((project, label, nxt, now))
        assert len(applied) > 10
        replay = cms
        for project, label, nxt, now in applied:
            v = replay.project(project).version(label)
            v.installations[P] = transition(v.record(P), nxt, reason="reason", now=now)
        assert store.load_domain("cms") == replay
        assert decode_domain(encode_domain(replay)) == replay
