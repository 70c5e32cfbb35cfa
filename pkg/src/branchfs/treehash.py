"""Content hashes over directory trees and branch views.

Two trees hash equal when they hold the same names, entry kinds, permission
bits, file contents and symlink targets.  Timestamps and ownership are
ignored.
"""

from __future__ import annotations

import hashlib
import os
import stat
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:
    from .store import BranchStore

Snapshot = dict[str, tuple[str, int, bytes]]


def _entry(mode: int, payload: bytes) -> tuple[str, int, bytes]:
    if stat.S_ISDIR(mode):
        return ("dir", stat.S_IMODE(mode), b"")
    if stat.S_ISLNK(mode):
        return ("symlink", 0, payload)
    return ("file", stat.S_IMODE(mode), payload)


def snapshot_dir(root: str | os.PathLike, skip: Iterable[str] = ()) -> Snapshot:
    """Map every relative path under ``root`` to ``(kind, mode, content)``."""
    skip = set(skip)
    root = os.fspath(root)
    out: Snapshot = {"": _entry(os.lstat(root).st_mode, b"")}
    for dirpath, dirnames, filenames in os.walk(root):
        rel_dir = os.path.relpath(dirpath, root)
        rel_dir = "" if rel_dir == "." else rel_dir
        if not rel_dir:
            dirnames[:] = [d for d in dirnames if d not in skip]
            filenames = [f for f in filenames if f not in skip]
        for name in dirnames + filenames:
            rel = f"{rel_dir}/{name}" if rel_dir else name
            full = os.path.join(dirpath, name)
            st = os.lstat(full)
            if stat.S_ISLNK(st.st_mode):
                out[rel] = _entry(st.st_mode, os.readlink(full).encode())
            elif stat.S_ISREG(st.st_mode):
                with open(full, "rb") as f:
                    out[rel] = _entry(st.st_mode, f.read())
            else:
                out[rel] = _entry(st.st_mode, b"")
    return out


def snapshot_view(store: BranchStore, branch: str) -> Snapshot:
    """Same as :func:`snapshot_dir`, but over a branch view in a store."""
    out: Snapshot = {"": _entry(store.stat(branch, "").st_mode, b"")}
    stack = [""]
    while stack:
        rel_dir = stack.pop()
        for e in store.list_dir(branch, rel_dir):
            rel = f"{rel_dir}/{e.name}" if rel_dir else e.name
            st = store.stat(branch, rel)
            if stat.S_ISDIR(st.st_mode):
                out[rel] = _entry(st.st_mode, b"")
                stack.append(rel)
            elif stat.S_ISLNK(st.st_mode):
                out[rel] = _entry(st.st_mode, store.readlink(branch, rel).encode())
            elif stat.S_ISREG(st.st_mode):
                out[rel] = _entry(st.st_mode, store.read_file(branch, rel))
            else:
                out[rel] = _entry(st.st_mode, b"")
    return out


def hash_snapshot(snap: Snapshot) -> str:
    h = hashlib.sha256()
    for rel in sorted(snap):
        kind, mode, payload = snap[rel]
        h.update(f"{rel}\0{kind}\0{mode:o}\0{len(payload)}\0".encode())
        h.update(payload)
    return h.hexdigest()


def tree_hash(root: str | os.PathLike, skip: Iterable[str] = ()) -> str:
    return hash_snapshot(snapshot_dir(root, skip))


def view_hash(store: BranchStore, branch: str) -> str:
    return hash_snapshot(snapshot_view(store, branch))
