"""Parallel exploration over a branch mount: fork N workers, keep the first success.

``explore`` creates one exclusive group of N branches, starts one worker per
branch with its working directory set to ``<workspace>/@<branch>``, and
waits.  The first worker to succeed wins:

* delegated mode (default): a worker succeeds by exiting 0 and the
  orchestrator commits its branch;
* self-commit mode: a worker succeeds by committing its own branch through
  the control file (see :func:`child_commit`), after which the orchestrator
  only observes the result.

Every other worker's process group then gets SIGTERM, SIGKILL after the
grace period, and its branch is aborted.  If no worker succeeds, every branch
is aborted and the base is left as it was.

Workers see ``BRANCH_INDEX`` (1..N), ``BRANCH_NAME``, ``BRANCHFS_CTL`` and
``BRANCHFS_MOUNT``.  The literal tokens ``{index}``, ``{branch}`` and
``{workdir}`` in the command are replaced per worker.

Containment is best effort.  Workers live in their own process groups, and
any process still carrying a loser's run token in its environment after the
group kill is counted as an escape, then killed if it can be found.  A
process that detaches and scrubs its environment is invisible to this scan.

``branch-run`` exits 0 when a branch was committed, 1 when no worker
succeeded, 2 on usage errors (including a workspace that is not a branch
mount) and 3 when the run timed out.
"""

from __future__ import annotations

import argparse
import ctypes
import enum
import errno
import logging
import os
import selectors
import signal
import subprocess
import sys
import time
import uuid
from dataclasses import dataclass, field

from .errors import StaleBranchError
from .vfs.control import CONTROL_NAME, DEFAULT_BRANCH_XATTR, parse_listing, parse_report
from .store import CommitReport

logger = logging.getLogger(__name__)

RUN_TOKEN_ENV = "BRANCHFS_RUN_TOKEN"
PR_SET_CHILD_SUBREAPER = 36

EXIT_COMMITTED = 0
EXIT_NO_WINNER = 1
EXIT_USAGE = 2
EXIT_TIMEOUT = 3


class Flag(enum.Flag):
    FS = 1 << 0
    ISOLATE = 1 << 2
    CLOSE_FDS = 1 << 3


class ConfigurationError(RuntimeError):
    """The calling process is not set up as a branch worker or orchestrator."""


@dataclass
class ExploreSpec:
    workspace: str
    n_branches: int
    command: list[str]
    per_branch_env: dict[str, str] = field(default_factory=dict)
    flags: Flag = Flag.FS | Flag.ISOLATE
    self_commit: bool = False
    grace: float = 2.0
    timeout: float | None = None
    parent: str | None = None
    name_prefix: str = "explore"

    def __post_init__(self) -> None:
        if self.n_branches < 1:
            raise ValueError("n_branches must be at least 1")
        if not self.command:
            raise ValueError("command must not be empty")
        if self.grace < 0:
            raise ValueError("grace must be >= 0")
        self.flags |= Flag.FS


@dataclass
class ChildResult:
    index: int
    branch: str
    pid: int | None
    exit_status: int | None = None
    duration: float | None = None
    terminated: bool = False
    spawn_error: str | None = None


@dataclass
class ExploreOutcome:
    winner: int | None
    branches: list[str]
    child_results: list[ChildResult]
    commit_report: CommitReport | None
    escapes: list[int] = field(default_factory=list)
    timed_out: bool = False
    run_token: str = ""

    @property
    def winner_branch(self) -> str | None:
        return None if self.winner is None else self.branches[self.winner - 1]


# ------------------------------------------------------------ worker helpers


def _worker_control() -> tuple[str, str]:
    name = os.environ.get("BRANCH_NAME")
    ctl = os.environ.get("BRANCHFS_CTL")
    if not name or not ctl:
        raise ConfigurationError("BRANCH_NAME and BRANCHFS_CTL must be set in a branch worker")
    if not os.path.exists(ctl):
        raise ConfigurationError(f"control file {ctl} is missing")
    return name, ctl


def _write_line(ctl: str, line: str) -> None:
    fd = os.open(ctl, os.O_WRONLY | os.O_CLOEXEC)
    try:
        os.write(fd, line.encode("ascii"))
    finally:
        os.close(fd)


def child_commit() -> bool:
    """Commit the calling worker's branch; False means a sibling already won."""
    name, ctl = _worker_control()
    try:
        _write_line(ctl, f"commit {name}\n")
    except OSError as e:
        if e.errno == errno.ESTALE:
            return False
        raise
    return True


def child_abort() -> None:
    """Discard the calling worker's branch."""
    name, ctl = _worker_control()
    _write_line(ctl, f"abort {name}\n")


# --------------------------------------------------------------- supervisor


def set_subreaper() -> bool:
    """Adopt orphaned descendants so detached workers stay reapable."""
    libc = ctypes.CDLL(None, use_errno=True)
    return libc.prctl(PR_SET_CHILD_SUBREAPER, 1, 0, 0, 0) == 0


def _proc_stat(pid: int) -> tuple[str, int, int, int] | None:
    """(state, ppid, pgid, sid) of ``pid``, or None if it is gone."""
    try:
        with open(f"/proc/{pid}/stat", "rb") as f:
            raw = f.read().decode(errors="replace")
    except OSError:
        return None
    rest = raw[raw.rindex(")") + 2:].split()
    return rest[0], int(rest[1]), int(rest[2]), int(rest[3])


def _alive(pid: int) -> bool:
    st = _proc_stat(pid)
    return st is not None and st[0] not in ("Z", "X")


def processes_with_token(token: str) -> list[int]:
    """Live pids whose environment carries ``token``."""
    needle = f"{RUN_TOKEN_ENV}={token}".encode()
    found = []
    for entry in os.listdir("/proc"):
        if not entry.isdigit():
            continue
        try:
            with open(f"/proc/{entry}/environ", "rb") as f:
                env = f.read()
        except OSError:
            continue
        if needle in env.split(b"\0") and _alive(int(entry)):
            found.append(int(entry))
    return found


def processes_in_group(pgid: int) -> list[int]:
    out = []
    for entry in os.listdir("/proc"):
        if entry.isdigit():
            st = _proc_stat(int(entry))
            if st is not None and st[2] == pgid and st[0] not in ("Z", "X"):
                out.append(int(entry))
    return out


class _Workspace:
    def __init__(self, mountpoint: str):
        self.mountpoint = os.path.abspath(mountpoint)
        self.control = os.path.join(self.mountpoint, CONTROL_NAME)
        if not os.path.exists(self.control):
            raise ConfigurationError(f"{mountpoint} is not a branch mount (no {CONTROL_NAME})")

    def send(self, line: str) -> None:
        _write_line(self.control, line)

    def states(self) -> dict[str, str]:
        with open(self.control, encoding="ascii") as f:
            return {name: state for name, _, state, _ in parse_listing(f.read())}

    def report(self, branch: str) -> CommitReport:
        fd = os.open(self.control, os.O_RDWR | os.O_CLOEXEC)
        try:
            os.write(fd, f"report {branch}\n".encode())
            return parse_report(os.read(fd, 4096).decode())
        finally:
            os.close(fd)

    def default_branch(self) -> str:
        try:
            return os.getxattr(self.control, DEFAULT_BRANCH_XATTR).decode()
        except OSError:
            return "root"


def _expand(command: list[str], index: int, branch: str, workdir: str) -> list[str]:
    subs = {"{index}": str(index), "{branch}": branch, "{workdir}": workdir}
    out = []
    for arg in command:
        for key, value in subs.items():
            arg = arg.replace(key, value)
        out.append(arg)
    return out


class _Run:
    def __init__(self, spec: ExploreSpec):
        self.spec = spec
        self.ws = _Workspace(spec.workspace)
        self.token = uuid.uuid4().hex[:12]
        self.names = [f"{spec.name_prefix}-{self.token}-{i}" for i in range(1, spec.n_branches + 1)]
        self.results = [ChildResult(i, name, None) for i, name in enumerate(self.names, 1)]
        self.procs: dict[int, subprocess.Popen] = {}
        self.started: dict[int, float] = {}
        self.sel = selectors.DefaultSelector()
        self.winner: int | None = None
        self.report: CommitReport | None = None
        self.escapes: list[int] = []
        self.timed_out = False

    # -- lifecycle

    def run(self) -> ExploreOutcome:
        parent = self.spec.parent or self.ws.default_branch()
        self.ws.send(" ".join(["create", parent, *self.names]) + "\n")
        try:
            for res in self.results:
                self._spawn(res)
            self._supervise()
        finally:
            self._contain()
            self._abort_losers()
            self.sel.close()
        return ExploreOutcome(
            self.winner, self.names, self.results, self.report, self.escapes, self.timed_out, self.token,
        )

    def _spawn(self, res: ChildResult) -> None:
        workdir = os.path.join(self.ws.mountpoint, f"@{res.branch}")
        env = dict(os.environ)
        env.update(self.spec.per_branch_env)
        env.update({
            "BRANCH_INDEX": str(res.index),
            "BRANCH_NAME": res.branch,
            "BRANCHFS_CTL": self.ws.control,
            "BRANCHFS_MOUNT": self.ws.mountpoint,
            RUN_TOKEN_ENV: f"{self.token}-{res.index}",
        })
        isolate = Flag.ISOLATE in self.spec.flags
        try:
            proc = subprocess.Popen(
                _expand(self.spec.command, res.index, res.branch, workdir),
                cwd=workdir,
                env=env,
                close_fds=Flag.CLOSE_FDS in self.spec.flags,
                start_new_session=isolate,
                preexec_fn=None if isolate else os.setpgrp,
            )
        except OSError as e:
            logger.warning("worker %d failed to start: %s", res.index, e)
            res.spawn_error = str(e)
            res.exit_status = 127
            res.duration = 0.0
            self._abort(res.branch)
            return
        res.pid = proc.pid
        self.procs[res.index] = proc
        self.started[res.index] = time.monotonic()
        pidfd = os.pidfd_open(proc.pid)
        self.sel.register(pidfd, selectors.EVENT_READ, res.index)

    def _supervise(self) -> None:
        deadline = None if self.spec.timeout is None else time.monotonic() + self.spec.timeout
        poll = 0.02 if self.spec.self_commit else None
        while self.sel.get_map():
            wait = poll
            if deadline is not None:
                left = max(0.0, deadline - time.monotonic())
                wait = left if wait is None else min(wait, left)
            for key, _ in self.sel.select(wait):
                self._reap(key.data, key.fd)
            if self.winner is None and self.spec.self_commit:
                self._observe_self_commit()
            if self.winner is not None:
                return
            if deadline is not None and time.monotonic() >= deadline:
                self.timed_out = True
                return

    def _reap(self, index: int, pidfd: int) -> None:
        self.sel.unregister(pidfd)
        os.close(pidfd)
        res = self.results[index - 1]
        res.exit_status = self.procs[index].wait()
        res.duration = time.monotonic() - self.started[index]
        if self.winner is not None or self.spec.self_commit:
            return
        if res.exit_status == 0:
            try:
                self.ws.send(f"commit {res.branch}\n")
            except OSError as e:
                logger.warning("commit of %s failed: %s", res.branch, e)
                return
            self._declare(index)

    def _observe_self_commit(self) -> None:
        states = self.ws.states()
        for res in self.results:
            if states.get(res.branch) == "Committed":
                self._declare(res.index)
                return

    def _declare(self, index: int) -> None:
        self.winner = index
        branch = self.names[index - 1]
        try:
            self.report = self.ws.report(branch)
        except OSError as e:
            logger.warning("no commit report for %s: %s", branch, e)
            self.report = CommitReport(branch)

    # -- termination

    def _contain(self) -> None:
        losers = [i for i in self.procs if i != self.winner]
        if self.winner is not None and self.spec.self_commit:
            # the winner may still be running; let it finish on its own
            self._wait_for(self.winner, None)
        for i in losers:
            self._signal_group(i, signal.SIGTERM)
        deadline = time.monotonic() + self.spec.grace
        for i in losers:
            self._wait_for(i, max(0.0, deadline - time.monotonic()))
        for i in losers:
            if self.results[i - 1].exit_status is None or processes_in_group(self.procs[i].pid):
                self._signal_group(i, signal.SIGKILL)
            self._wait_for(i, None)
        for key in list(self.sel.get_map().values()):
            self.sel.unregister(key.fd)
            os.close(key.fd)
        self._sweep_escapes()

    def _signal_group(self, index: int, sig: int) -> None:
        pgid = self.procs[index].pid
        try:
            os.killpg(pgid, sig)
        except ProcessLookupError:
            return
        if self.results[index - 1].exit_status is None:
            self.results[index - 1].terminated = True

    def _wait_for(self, index: int, timeout: float | None) -> None:
        res = self.results[index - 1]
        if res.exit_status is not None:
            return
        try:
            res.exit_status = self.procs[index].wait(timeout)
            res.duration = time.monotonic() - self.started[index]
        except subprocess.TimeoutExpired:
            pass

    def _sweep_escapes(self) -> None:
        groups = {f"{self.token}-{i}": self.procs[i].pid for i in self.procs if i != self.winner}
        for _ in range(20):
            stray = [p for t in groups for p in processes_with_token(t) if p != os.getpid()]
            if not stray:
                return
            for pid in stray:
                st = _proc_stat(pid)
                in_group = st is not None and st[2] in groups.values()
                if not in_group and pid not in self.escapes:
                    logger.warning("worker process %d escaped its process group", pid)
                    self.escapes.append(pid)
                try:
                    os.kill(pid, signal.SIGKILL)
                except ProcessLookupError:
                    pass
            time.sleep(0.05)
            for pid in stray:
                st = _proc_stat(pid)
                if st is not None and st[1] == os.getpid():
                    try:
                        os.waitpid(pid, 0)
                    except ChildProcessError:
                        pass

    def _abort(self, branch: str) -> None:
        try:
            self.ws.send(f"abort {branch}\n")
        except OSError as e:
            if e.errno != errno.ENOENT:
                logger.warning("abort of %s failed: %s", branch, e)

    def _abort_losers(self) -> None:
        try:
            states = self.ws.states()
        except OSError:
            states = {}
        for res in self.results:
            if res.index != self.winner and states.get(res.branch) not in ("Committed", "Aborted", None):
                self._abort(res.branch)


def explore(spec: ExploreSpec) -> ExploreOutcome:
    """Run ``spec.command`` in N branches and commit at most one of them."""
    return _Run(spec).run()


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="branch-run",
        description="Run a command in N sibling branches and keep the first that succeeds.",
    )
    p.add_argument("--workspace", "-w", required=True, help="branch mount to explore in")
    p.add_argument("-n", type=int, required=True, dest="n", help="number of branches")
    p.add_argument("--self-commit", action="store_true", help="workers commit themselves instead of exiting 0")
    p.add_argument("--grace", type=float, default=2.0, help="seconds between SIGTERM and SIGKILL for losers")
    p.add_argument("--close-fds", action="store_true", help="close inherited descriptors in workers")
    p.add_argument("--timeout", type=float, help="give up after this many seconds")
    p.add_argument("--parent", help="branch to fork from (default: the mount's default branch)")
    p.add_argument("--json", action="store_true", help="print the outcome as JSON")
    p.add_argument("--log-level", default="warning")
    p.add_argument("command", nargs=argparse.REMAINDER)
    return p


def main(argv: list[str] | None = None) -> int:
    import json

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    logging.basicConfig(level=args.log_level.upper(), format="%(name)s %(levelname)s %(message)s")
    command = args.command[1:] if args.command[:1] == ["--"] else args.command
    flags = Flag.FS | Flag.ISOLATE
    if args.close_fds:
        flags |= Flag.CLOSE_FDS
    try:
        spec = ExploreSpec(
            workspace=args.workspace, n_branches=args.n, command=command, flags=flags,
            self_commit=args.self_commit, grace=args.grace, timeout=args.timeout, parent=args.parent,
        )
        set_subreaper()
        outcome = explore(spec)
    except (ValueError, ConfigurationError) as e:
        print(f"branch-run: {e}", file=sys.stderr)
        return EXIT_USAGE
    except StaleBranchError as e:
        print(f"branch-run: {e}", file=sys.stderr)
        return EXIT_NO_WINNER
    except OSError as e:
        print(f"branch-run: {e}", file=sys.stderr)
        return EXIT_USAGE if e.errno in (errno.ENOENT, errno.EINVAL, errno.EROFS) else EXIT_NO_WINNER
    if args.json:
        print(json.dumps({
            "winner": outcome.winner,
            "branch": outcome.winner_branch,
            "children": [vars(r) for r in outcome.child_results],
            "report": None if outcome.commit_report is None else vars(outcome.commit_report),
            "escapes": outcome.escapes,
            "timed_out": outcome.timed_out,
        }))
    elif outcome.winner is not None:
        print(f"winner: {outcome.winner} ({outcome.winner_branch})")
    else:
        print("no branch succeeded", file=sys.stderr)
    if outcome.timed_out and outcome.winner is None:
        return EXIT_TIMEOUT
    return EXIT_COMMITTED if outcome.winner is not None else EXIT_NO_WINNER


if __name__ == "__main__":
    sys.exit(main())
