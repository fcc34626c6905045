"""Persistent shell sessions.

A :class:`Session` owns one long-lived shell process.  Commands are written
to the shell's stdin one at a time, each wrapped so that

* the command itself reads from an empty, never-closed pipe (fd 8), so a
  command waiting for terminal input blocks until the timeout instead of
  swallowing the rest of the command stream;
* once it finishes, the shell prints ``BOA-RC <nonce> <status>`` to a
  dedicated status pipe (fd 9), keeping stdout and stderr clean.

Because every command runs in the same shell, ``export``, ``cd`` and
``umask`` carry over to later commands.  User commands must not touch
fds 8 and 9.
"""

from __future__ import annotations

import contextlib
import datetime as _dt
import enum
import fcntl
import logging
import os
import re
import secrets
import selectors
import shlex
import signal
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidCommand, SessionClosed, SpawnFailed
from ._util import format_ts, utcnow

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 600.0
CLOSE_GRACE = 5.0
STDIN_FD = 8
STATUS_FD = 9
LOG_HEADER = b"# boa-session-log 1\n"

SENTINEL_RE = re.compile(rb"^BOA-RC ([0-9a-f]{32}) (\d{1,3})$", re.M)


class Outcome(enum.Enum):
    COMPLETED = "Completed"
    TIMED_OUT = "TimedOut"
    SHELL_DIED = "ShellDied"


class State(enum.Enum):
    OPEN = "Open"
    CLOSED = "Closed"
    BROKEN = "Broken"


@dataclass(frozen=True)
class ActionRecord:
    seq: int
    command: str
    started_at: _dt.datetime
    finished_at: _dt.datetime
    exit_status: int | None
    stdout: bytes
    stderr: bytes
    outcome: Outcome

    @property
    def ok(self) -> bool:
        return self.outcome is Outcome.COMPLETED and self.exit_status == 0


def _find_status(buf: bytearray, nonce: str) -> int | None:
    for m in SENTINEL_RE.finditer(bytes(buf)):
        if m.group(1).decode() == nonce:
            return int(m.group(2))
    return None


def _high_dup(fd: int) -> int:
    # move pipe ends above the fixed child fds so dup2 targets never collide
    new = fcntl.fcntl(fd, fcntl.F_DUPFD_CLOEXEC, 10)
    os.close(fd)
    return new


class Session:
    """One shell process executing commands consecutively.

    Prefer :func:`open_session`; sessions are context managers that close
    on exit.
    """

    def __init__(self, shell_program: str = "/bin/sh", working_dir=None,
                 env_overrides: dict[str, str] | None = None,
                 default_timeout: float = DEFAULT_TIMEOUT):
        self.shell_program = shell_program
        self.working_dir = str(Path(working_dir or os.getcwd()).resolve())
        self.default_timeout = default_timeout
        self.state = State.OPEN
        self.actions: list[ActionRecord] = []
        self._returncode: int | None = None
        self._spawn(env_overrides or {})

    def __repr__(self):
        return f"<Session {self.shell_program} pid={self.pid} {self.state.value} actions={len(self.actions)}>"

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- process plumbing ---------------------------------------------------------

    def _spawn(self, env_overrides: dict[str, str]) -> None:
        prog = self.shell_program
        if not (os.path.isfile(prog) and os.access(prog, os.X_OK)):
            raise SpawnFailed(f"shell {prog!r} is missing or not executable")
        if not os.path.isdir(self.working_dir):
            raise SpawnFailed(f"working directory {self.working_dir!r} does not exist")
        env = dict(os.environ)
        env.update({str(k): str(v) for k, v in env_overrides.items()})

        cmd_r, cmd_w = os.pipe()
        out_r, out_w = os.pipe()
        err_r, err_w = os.pipe()
        st_r, st_w = os.pipe()
        empty_r, empty_w = os.pipe()
        child_ends = [_high_dup(fd) for fd in (cmd_r, out_w, err_w, empty_r, st_w)]
        actions = [(os.POSIX_SPAWN_DUP2, src, dst)
                   for src, dst in zip(child_ends, (0, 1, 2, STDIN_FD, STATUS_FD))]
        try:
            self.pid = os.posix_spawn(prog, [prog], env, file_actions=actions, setsid=True)
        except OSError as exc:
            for fd in (cmd_w, out_r, err_r, st_r, empty_w):
                os.close(fd)
            raise SpawnFailed(f"cannot start {prog!r}: {exc}") from None
        finally:
            for fd in child_ends:
                os.close(fd)

        self._stdin = cmd_w
        self._stdout = out_r
        self._stderr = err_r
        self._status = st_r
        # write end of the empty stdin pipe; held open so reads block
        self._empty = empty_w
        for fd in (cmd_w, out_r, err_r, st_r):
            os.set_blocking(fd, False)

        outcome, rc, _, err = self._run(f"cd {shlex.quote(self.working_dir)}", 30.0)
        if outcome is not Outcome.COMPLETED or rc != 0:
            self._kill()
            self._release()
            raise SpawnFailed(f"{prog!r} did not start a working shell: "
                              f"{err.decode(errors='replace').strip() or outcome.value}")

    def _poll(self) -> bool:
        """True once the shell has exited (and been reaped)."""
        if self._returncode is not None:
            return True
        try:
            pid, status = os.waitpid(self.pid, os.WNOHANG)
        except ChildProcessError:
            self._returncode = -1
            return True
        if pid == 0:
            return False
        self._returncode = os.waitstatus_to_exitcode(status)
        return True

    def _kill(self) -> None:
        with contextlib.suppress(ProcessLookupError, PermissionError):
            os.killpg(self.pid, signal.SIGKILL)
        deadline = time.monotonic() + CLOSE_GRACE
        while not self._poll() and time.monotonic() < deadline:
            time.sleep(0.01)

    def _release(self) -> None:
        for name in ("_stdin", "_stdout", "_stderr", "_status", "_empty"):
            fd = getattr(self, name, None)
            if fd is not None:
                with contextlib.suppress(OSError):
                    os.close(fd)
                setattr(self, name, None)

    @staticmethod
    def _drain(fd: int, sink: bytearray) -> bool:
        """Read whatever is buffered on *fd*; returns False at EOF."""
        while True:
            try:
                chunk = os.read(fd, 65536)
            except BlockingIOError:
                return True
            if not chunk:
                return False
            sink += chunk

    def _run(self, command: str, timeout: float):
        nonce = secrets.token_hex(16)
        body = command if command.strip() else ":"
        script = (f"{{ {body}\n}} 0<&{STDIN_FD}\n"
                  f"printf 'BOA-RC %s %d\\n' {nonce} $? >&{STATUS_FD}\n").encode("utf-8")
        out, err, status = bytearray(), bytearray(), bytearray()
        sinks = {self._stdout: out, self._stderr: err, self._status: status}
        pending = memoryview(script)
        deadline = time.monotonic() + timeout

        sel = selectors.DefaultSelector()
        for fd in sinks:
            sel.register(fd, selectors.EVENT_READ)
        sel.register(self._stdin, selectors.EVENT_WRITE)
        writing = True
        try:
            while True:
                rc = _find_status(status, nonce)
                if rc is not None:
                    self._drain(self._stdout, out)
                    self._drain(self._stderr, err)
                    return Outcome.COMPLETED, rc, bytes(out), bytes(err)

                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._drain(self._stdout, out)
                    self._drain(self._stderr, err)
                    return Outcome.TIMED_OUT, None, bytes(out), bytes(err)

                for key, _ in sel.select(min(remaining, 0.2)):
                    fd = key.fd
                    if fd == self._stdin:
                        try:
                            n = os.write(fd, pending)
                        except BlockingIOError:
                            continue
                        except BrokenPipeError:
                            n = len(pending)
                        pending = pending[n:]
                        if not pending:
                            sel.unregister(fd)
                            writing = False
                    elif not self._drain(fd, sinks[fd]):
                        sel.unregister(fd)

                if self._poll():
                    # the shell is gone; collect what it left behind
                    for fd, sink in sinks.items():
                        self._drain(fd, sink)
                    if _find_status(status, nonce) is not None:
                        continue
                    return Outcome.SHELL_DIED, None, bytes(out), bytes(err)
        finally:
            if writing:
                with contextlib.suppress(KeyError, ValueError):
                    sel.unregister(self._stdin)
            sel.close()

    # -- public API ----------------------------------------------------------------

    def execute(self, command: str, timeout: float | None = None) -> ActionRecord:
        """Run *command* in the shell and record the result.

        Timeouts and a dying shell are reported through the record's
        outcome; either one leaves the session Broken.
        """
        if self.state is not State.OPEN:
            raise SessionClosed(f"session is {self.state.value.lower()}; no further commands accepted")
        if "\0" in command:
            raise InvalidCommand("command contains a NUL byte")
        timeout = self.default_timeout if timeout is None else timeout
        started = utcnow()
        log.debug("exec[%d]: %s", len(self.actions) + 1, command)
        outcome, rc, out, err = self._run(command, timeout)
        if outcome is not Outcome.COMPLETED:
            self.state = State.BROKEN
            # shell state is unknown after this; stop whatever is still running
            self._kill()
        record = ActionRecord(len(self.actions) + 1, command, started, utcnow(), rc, out, err, outcome)
        self.actions.append(record)
        return record

    def close(self) -> list[ActionRecord]:
        """Terminate the shell and return the action log.  Idempotent."""
        if self.state is State.CLOSED:
            return list(self.actions)
        if self.state is State.OPEN and not self._poll():
            with contextlib.suppress(OSError):
                os.set_blocking(self._stdin, True)
                os.write(self._stdin, b"exit\n")
            with contextlib.suppress(OSError):
                os.close(self._stdin)
            self._stdin = None
            deadline = time.monotonic() + CLOSE_GRACE
            while not self._poll() and time.monotonic() < deadline:
                time.sleep(0.01)
        if not self._poll():
            self._kill()
        self._release()
        self.state = State.CLOSED
        return list(self.actions)

    def write_log(self, path) -> Path:
        return write_session_log(self.actions, path)


def open_session(shell_program: str | None = None, working_dir=None,
                 env_overrides: dict[str, str] | None = None,
                 default_timeout: float = DEFAULT_TIMEOUT) -> Session:
    """Start a shell.  ``BOA_SHELL`` overrides the default ``/bin/sh``."""
    shell = shell_program or os.environ.get("BOA_SHELL") or "/bin/sh"
    return Session(shell, working_dir, env_overrides, default_timeout)


def close_session(session: Session) -> list[ActionRecord]:
    return session.close()


# -- log format -------------------------------------------------------------------

def escape_command(command: str) -> str:
    return command.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r")


def unescape_command(text: str) -> str:
    return re.sub(r"\\(.)", lambda m: {"n": "\n", "r": "\r"}.get(m.group(1), m.group(1)), text)


def render_session_log(records) -> bytes:
    parts = [LOG_HEADER]
    for r in records:
        status = "NA" if r.exit_status is None else str(r.exit_status)
        parts.append(f"== {r.seq} {format_ts(r.started_at)} {r.outcome.value} exit={status}\n".encode())
        parts.append(b"$ " + escape_command(r.command).encode("utf-8") + b"\n")
        for name, data in (("stdout", r.stdout), ("stderr", r.stderr)):
            parts.append(f"--- {name} ({len(data)})\n".encode())
            parts.append(data)
            if data and not data.endswith(b"\n"):
                parts.append(b"\n")
            parts.append(b"---\n")
    return b"".join(parts)


def write_session_log(session_or_records, path) -> Path:
    records = session_or_records.actions if isinstance(session_or_records, Session) else session_or_records
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(render_session_log(records))
    return path

