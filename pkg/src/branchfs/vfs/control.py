"""The ``.branchfs_ctl`` line protocol.

Writes carry commands, one per line::

    create <parent> <name> [<name> ...]   several names form an exclusive group
    commit <name>
    abort <name>
    list
    report <name>                         queue <name>'s commit report for reading

Reads return one ``<name> <parent> <state> <epoch>`` line per branch, or the
queued report line after a ``report`` command.  The root's parent prints as
``-``.  A failed command fails the ``write`` call with the store's errno.
"""

from __future__ import annotations

import errno
import os
from dataclasses import dataclass

from ..store import BranchMeta, BranchStore, CommitReport

CONTROL_NAME = ".branchfs_ctl"
DEFAULT_BRANCH_XATTR = "user.branchfs.default_branch"
PID_XATTR = "user.branchfs.pid"

_ARITY = {"create": (2, None), "commit": (1, 1), "abort": (1, 1), "list": (0, 0), "report": (1, 1)}


@dataclass(frozen=True)
class ControlCommand:
    verb: str
    args: tuple[str, ...] = ()

    @classmethod
    def parse(cls, line: str | bytes) -> ControlCommand:
        if isinstance(line, bytes):
            try:
                line = line.decode("ascii")
            except UnicodeDecodeError:
                raise OSError(errno.EINVAL, "control lines are ASCII") from None
        if line.endswith("\n"):
            line = line[:-1]
        if "\n" in line or not line.strip():
            raise OSError(errno.EINVAL, "expected exactly one command")
        verb, *args = line.split()
        if verb not in _ARITY:
            raise OSError(errno.EINVAL, f"unknown verb {verb!r}")
        lo, hi = _ARITY[verb]
        if len(args) < lo or (hi is not None and len(args) > hi):
            raise OSError(errno.EINVAL, f"wrong number of arguments for {verb}")
        return cls(verb, tuple(args))

    def format(self) -> str:
        return " ".join((self.verb, *self.args)) + "\n"


def split_commands(payload: bytes) -> list[ControlCommand]:
    """Parse every line of one write; a final line may lack its newline."""
    lines = payload.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    if not lines:
        raise OSError(errno.EINVAL, "empty control write")
    return [ControlCommand.parse(line) for line in lines]


def format_branch(meta: BranchMeta) -> str:
    return f"{meta.id} {meta.parent or '-'} {meta.state.value} {meta.epoch}\n"


def format_listing(store: BranchStore) -> str:
    return "".join(format_branch(m) for m in store.list_branches())


def format_report(report: CommitReport) -> str:
    return (
        f"{report.branch} files={report.files_applied} dirs={report.dirs_applied} "
        f"bytes={report.bytes_copied} tombstones={report.tombstones_applied} "
        f"siblings={report.siblings_invalidated}\n"
    )


def execute(store: BranchStore, cmd: ControlCommand) -> str | None:
    """Run one command against ``store``; return text to serve on the next read."""
    if cmd.verb == "create":
        parent, *names = cmd.args
        if len(names) == 1:
            store.create_branch(parent, names[0])
        else:
            store.create_branch_group(parent, names)
        return None
    if cmd.verb == "commit":
        store.commit_branch(cmd.args[0])
        return None
    if cmd.verb == "abort":
        store.abort_branch(cmd.args[0])
        return None
    if cmd.verb == "list":
        return format_listing(store)
    report = store.commit_report(cmd.args[0])
    if report is None:
        store.branch_status(cmd.args[0])  # ENOENT for unknown names
        raise OSError(errno.ENODATA, os.strerror(errno.ENODATA))
    return format_report(report)


def parse_listing(text: str) -> list[tuple[str, str | None, str, int]]:
    out = []
    for line in text.splitlines():
        name, parent, state, epoch = line.split(" ")
        out.append((name, None if parent == "-" else parent, state, int(epoch)))
    return out


def parse_report(text: str) -> CommitReport:
    branch, *fields = text.split()
    values = dict(f.split("=", 1) for f in fields)
    return CommitReport(
        branch,
        int(values["files"]),
        int(values["dirs"]),
        int(values["bytes"]),
        int(values["tombstones"]),
        int(values["siblings"]),
    )
