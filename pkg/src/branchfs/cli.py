"""``branchfs`` command-line tool.

Branch subcommands are thin clients: each one writes exactly the control
line a script could write itself, then maps the resulting errno to an exit
code.

Exit codes
----------
==  =========================================
0   success
1   other failure
2   usage error
3   not found (unknown branch or path)
4   already exists
5   stale (a sibling already committed)
6   read-only (branch is frozen)
7   invalid argument
8   control file unreachable (not a branch mount)
==  =========================================

``--porcelain`` output is one branch per line, tab-separated:
``name  parent  state  epoch`` where the root's parent is ``-``.
"""

from __future__ import annotations

import argparse
import errno
import logging
import os
import sys
import time

from .store import ROOT
from .vfs.control import CONTROL_NAME, DEFAULT_BRANCH_XATTR, PID_XATTR, ControlCommand, parse_listing

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NOT_FOUND = 3
EXIT_EXISTS = 4
EXIT_STALE = 5
EXIT_READ_ONLY = 6
EXIT_INVALID = 7
EXIT_UNREACHABLE = 8

_ERRNO_EXIT = {
    errno.ENOENT: EXIT_NOT_FOUND,
    errno.EEXIST: EXIT_EXISTS,
    errno.ESTALE: EXIT_STALE,
    errno.EROFS: EXIT_READ_ONLY,
    errno.EINVAL: EXIT_INVALID,
}


class Unreachable(Exception):
    pass


# ---------------------------------------------------------------- control io


def find_control(mountpoint: str | None) -> str:
    """Locate the control file: $BRANCHFS_CTL, then -m/$BRANCHFS_MOUNT, then upward from cwd."""
    env = os.environ.get("BRANCHFS_CTL")
    if env:
        return env
    mnt = mountpoint or os.environ.get("BRANCHFS_MOUNT")
    if mnt:
        return os.path.join(mnt, CONTROL_NAME)
    cur = os.getcwd()
    while True:
        candidate = os.path.join(cur, CONTROL_NAME)
        if os.path.lexists(candidate):
            return candidate
        parent = os.path.dirname(cur)
        if parent == cur:
            return os.path.join(os.getcwd(), CONTROL_NAME)
        cur = parent


def _open_control(path: str, flags: int) -> int:
    try:
        return os.open(path, flags | os.O_CLOEXEC)
    except OSError as e:
        raise Unreachable(f"cannot open control file {path}: {e.strerror}") from e


def send(ctl: str, line: str) -> None:
    """Write one control line in a single write call."""
    ControlCommand.parse(line)
    fd = _open_control(ctl, os.O_WRONLY)
    try:
        os.write(fd, line.encode("ascii"))
    finally:
        os.close(fd)


def query(ctl: str, line: str | None = None) -> str:
    """Read the control file, optionally after queueing ``line`` on the same handle."""
    fd = _open_control(ctl, os.O_RDWR if line else os.O_RDONLY)
    try:
        if line:
            os.write(fd, line.encode("ascii"))
        chunks = []
        while True:
            chunk = os.read(fd, 65536)
            if not chunk:
                break
            chunks.append(chunk)
        return b"".join(chunks).decode()
    finally:
        os.close(fd)


def default_branch(ctl: str) -> str:
    try:
        return os.getxattr(ctl, DEFAULT_BRANCH_XATTR).decode()
    except OSError:
        return ROOT


# ------------------------------------------------------------------ commands


def _branch_arg(args: argparse.Namespace) -> str:
    name = args.name or os.environ.get("BRANCH_NAME")
    if not name:
        raise ValueError("no branch named and $BRANCH_NAME is not set")
    return name


def cmd_create(args: argparse.Namespace) -> int:
    ctl = find_control(args.mountpoint)
    parent = args.parent or default_branch(ctl)
    send(ctl, ControlCommand("create", (parent, *args.names)).format())
    return EXIT_OK


def cmd_commit(args: argparse.Namespace) -> int:
    ctl = find_control(args.mountpoint)
    name = _branch_arg(args)
    send(ctl, ControlCommand("commit", (name,)).format())
    if args.verbose:
        sys.stdout.write(query(ctl, ControlCommand("report", (name,)).format()))
    return EXIT_OK


def cmd_abort(args: argparse.Namespace) -> int:
    ctl = find_control(args.mountpoint)
    send(ctl, ControlCommand("abort", (_branch_arg(args),)).format())
    return EXIT_OK


def _rows(ctl: str, include_terminal: bool) -> list[tuple[str, str | None, str, int]]:
    rows = parse_listing(query(ctl))
    if not include_terminal:
        rows = [r for r in rows if r[2] not in ("Committed", "Aborted")]
    return rows


def _print_rows(rows, porcelain: bool) -> None:
    if porcelain:
        for name, parent, state, epoch in rows:
            print(f"{name}\t{parent or '-'}\t{state}\t{epoch}")
        return
    table = [("NAME", "PARENT", "STATE", "EPOCH")] + [(n, p or "-", s, str(e)) for n, p, s, e in rows]
    widths = [max(len(r[i]) for r in table) for i in range(4)]
    for r in table:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())


def cmd_list(args: argparse.Namespace) -> int:
    _print_rows(_rows(find_control(args.mountpoint), args.all), args.porcelain)
    return EXIT_OK


def cmd_status(args: argparse.Namespace) -> int:
    rows = _rows(find_control(args.mountpoint), True)
    if args.name:
        match = [r for r in rows if r[0] == args.name]
        if not match:
            print(f"branchfs: no such branch {args.name!r}", file=sys.stderr)
            return EXIT_NOT_FOUND
        _print_rows(match, args.porcelain)
        return EXIT_OK
    if args.porcelain:
        _print_rows(rows, True)
        return EXIT_OK
    children: dict[str | None, list] = {}
    for row in rows:
        children.setdefault(row[1], []).append(row)

    def show(row, prefix: str, last: bool, top: bool) -> None:
        name, _, state, epoch = row
        branch = "" if top else ("`-- " if last else "|-- ")
        print(f"{prefix}{branch}{name} [{state}] epoch={epoch}")
        kids = children.get(name, [])
        for i, kid in enumerate(kids):
            show(kid, prefix if top else prefix + ("    " if last else "|   "), i == len(kids) - 1, False)

    for row in children.get(None, []):
        show(row, "", True, True)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    sys.stdout.write(query(find_control(args.mountpoint), ControlCommand("report", (args.name,)).format()))
    return EXIT_OK


def cmd_mount(args: argparse.Namespace) -> int:
    from .vfs.daemon import serve, spawn
    from .vfs.fs import MountConfig, default_store_dir

    config = MountConfig(
        base_dir=os.path.abspath(args.base),
        mountpoint=os.path.abspath(args.mountpoint or "."),
        store_dir=os.path.abspath(args.store or default_store_dir(args.base)),
        default_branch=args.default_branch,
        allow_control=not args.no_control,
        fd_cache_capacity=args.fd_cache,
        fsync_passthrough=args.fsync_passthrough,
        threads=args.threads,
    )
    config.validate()
    if args.foreground:
        ready = None
        if args.ready_fd is not None:
            def ready() -> None:
                os.write(args.ready_fd, b"ready\n")
                os.close(args.ready_fd)
        serve(config, ready)
        return EXIT_OK
    os.makedirs(config.store_dir, exist_ok=True)
    try:
        proc = spawn(config, args.log_file or os.path.join(config.store_dir, "daemon.log"), args.log_level)
    except RuntimeError as e:
        print(f"branchfs: {e}", file=sys.stderr)
        return EXIT_FAILURE
    if args.verbose:
        print(proc.pid)
    return EXIT_OK


def cmd_umount(args: argparse.Namespace) -> int:
    from .vfs import kernel

    mnt = os.path.abspath(args.mountpoint or os.environ.get("BRANCHFS_MOUNT") or ".")
    pid = None
    try:
        pid = int(os.getxattr(os.path.join(mnt, CONTROL_NAME), PID_XATTR))
    except (OSError, ValueError):
        pass
    kernel.unmount(mnt)
    if pid is not None:
        deadline = time.monotonic() + args.timeout
        while time.monotonic() < deadline:
            try:
                os.kill(pid, 0)
            except ProcessLookupError:
                break
            time.sleep(0.05)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    from . import bench

    return bench.run_cli(args)


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="branchfs", description="Copy-on-write branch contexts over a directory tree.")
    p.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    sub = p.add_subparsers(dest="command", required=True)

    def with_mount(sp: argparse.ArgumentParser) -> argparse.ArgumentParser:
        sp.add_argument("-m", "--mountpoint", help="branch mount (default: $BRANCHFS_MOUNT, else search upward from cwd)")
        return sp

    m = sub.add_parser("mount", help="mount a base directory")
    m.add_argument("--base", required=True)
    m.add_argument("--mountpoint", "-m")
    m.add_argument("--store", help="delta store directory (default: sibling of base)")
    m.add_argument("--default-branch", default=ROOT)
    m.add_argument("--no-control", action="store_true", help="hide the control file")
    m.add_argument("--fd-cache", type=int, default=64, metavar="N", help="cached read descriptors (0 disables)")
    m.add_argument("--fsync-passthrough", action="store_true", help="make fsync reach the disk")
    m.add_argument("--threads", type=int, default=8)
    m.add_argument("--foreground", "-f", action="store_true")
    m.add_argument("--log-file")
    m.add_argument("--ready-fd", type=int, help=argparse.SUPPRESS)
    m.add_argument("--verbose", "-v", action="store_true")
    m.set_defaults(func=cmd_mount)

    u = sub.add_parser("umount", help="unmount a branch mount")
    u.add_argument("mountpoint", nargs="?")
    u.add_argument("--timeout", type=float, default=10.0)
    u.set_defaults(func=cmd_umount)

    c = with_mount(sub.add_parser("create", help="create a branch (several names form an exclusive group)"))
    c.add_argument("names", nargs="+")
    c.add_argument("--parent", help="parent branch (default: the mount's default branch)")
    c.set_defaults(func=cmd_create)

    cm = with_mount(sub.add_parser("commit", help="commit a branch into its parent"))
    cm.add_argument("name", nargs="?", help="branch (default: $BRANCH_NAME)")
    cm.add_argument("--verbose", "-v", action="store_true", help="print the commit report")
    cm.set_defaults(func=cmd_commit)

    a = with_mount(sub.add_parser("abort", help="discard a branch and its descendants"))
    a.add_argument("name", nargs="?", help="branch (default: $BRANCH_NAME)")
    a.set_defaults(func=cmd_abort)

    ls = with_mount(sub.add_parser("list", help="list live branches"))
    ls.add_argument("--all", "-a", action="store_true", help="include committed and aborted branches")
    ls.add_argument("--porcelain", action="store_true")
    ls.set_defaults(func=cmd_list)

    st = with_mount(sub.add_parser("status", help="show the branch tree"))
    st.add_argument("name", nargs="?")
    st.add_argument("--porcelain", action="store_true")
    st.set_defaults(func=cmd_status)

    r = with_mount(sub.add_parser("report", help="print a committed branch's commit report"))
    r.add_argument("name")
    r.set_defaults(func=cmd_report)

    b = sub.add_parser("bench", help="run the benchmark harness")
    from .bench import add_arguments

    add_arguments(b)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except Unreachable as e:
        print(f"branchfs: {e}", file=sys.stderr)
        return EXIT_UNREACHABLE
    except OSError as e:
        print(f"branchfs: {e.strerror or e}", file=sys.stderr)
        if e.errno in (errno.ENOTCONN, errno.ENODEV):
            return EXIT_UNREACHABLE
        return _ERRNO_EXIT.get(e.errno, EXIT_FAILURE)
    except ValueError as e:
        print(f"branchfs: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
