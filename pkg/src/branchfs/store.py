"""Copy-on-write branch store.

A store overlays a tree of branches on top of one *base directory*.  Each
non-root branch owns a delta layer on disk::

    <store>/branches/<name>/data/          copied-up and newly created entries
    <store>/branches/<name>/tombstones/    empty sentinel files for deletions
    <store>/branches/<name>/meta           JSON metadata document
    <store>/branches/<name>/commit-in-progress   (only while committing)

The root branch has no delta directory of its own: its layer *is* the base
directory, so committing a child of the root writes straight into the base.

Lookups walk the chain from a branch up to the base.  At every layer a data
entry wins, otherwise a tombstone on the path (or on one of its parent
directories) hides everything farther away.  A tombstone that coexists with
a data entry marks the entry opaque: it is visible, but nothing beneath it
is merged in from farther layers.

All metadata transitions (create, commit, abort) take the store-wide write
lock.  Namespace mutations inside one branch take the shared lock plus that
branch's own mutex, so different branches mutate in parallel.
"""

from __future__ import annotations

import errno
import itertools
import json
import logging
import os
import re
import shutil
import stat
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Iterator

from .errors import (
    BranchClosedError,
    BranchExistsError,
    FrozenBranchError,
    InvalidBranchNameError,
    RootBranchError,
    StaleBranchError,
    UnknownBranchError,
    UnsupportedFileError,
    path_error,
)

logger = logging.getLogger(__name__)

ROOT = "root"
META_FILE = "meta"
COMMIT_MARKER = "commit-in-progress"

_NAME_RE = re.compile(r"^[A-Za-z0-9_.+-][A-Za-z0-9_.+@=:,-]*$")
_TMP_PREFIX = ".branchfs-commit-"


class BranchState(str, Enum):
    ACTIVE = "Active"
    FROZEN = "Frozen"
    STALE = "Stale"
    COMMITTED = "Committed"
    ABORTED = "Aborted"

    def __str__(self) -> str:
        return self.value


TERMINAL_STATES = (BranchState.COMMITTED, BranchState.ABORTED)


class Outcome(str, Enum):
    FOUND = "found"
    TOMBSTONED = "tombstoned"
    ABSENT = "absent"


@dataclass(frozen=True)
class BranchMeta:
    """Point-in-time view of one branch's bookkeeping."""

    id: str
    parent: str | None
    state: BranchState
    epoch: int
    parent_epoch_at_create: int
    group: str | None
    children: int


@dataclass(frozen=True)
class DeltaLayer:
    data_root: str
    tombstone_root: str | None


@dataclass(frozen=True)
class Resolution:
    outcome: Outcome
    layer: str | None = None
    path: str | None = None

    @property
    def found(self) -> bool:
        return self.outcome is Outcome.FOUND


@dataclass
class ExclusiveGroup:
    group_id: str
    members: set[str] = field(default_factory=set)
    winner: str | None = None


@dataclass(frozen=True)
class CommitReport:
    branch: str
    files_applied: int = 0
    dirs_applied: int = 0
    bytes_copied: int = 0
    tombstones_applied: int = 0
    siblings_invalidated: int = 0


@dataclass(frozen=True)
class DirEntry:
    name: str
    layer: str
    path: str
    kind: int  # stat.S_IFMT bits

    @property
    def is_dir(self) -> bool:
        return self.kind == stat.S_IFDIR


class _RWLock:
    """Writer-preferring reader/writer lock."""

    def __init__(self) -> None:
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    @contextmanager
    def read(self) -> Iterator[None]:
        with self._cond:
            while self._writer or self._waiting_writers:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self) -> Iterator[None]:
        with self._cond:
            self._waiting_writers += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._waiting_writers -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


@dataclass(eq=False)
class _Branch:
    name: str
    parent: str | None
    data_root: str
    branch_dir: str
    epoch: int = 0
    parent_epoch_at_create: int = 0
    group: str | None = None
    children: set[str] = field(default_factory=set)
    terminal: BranchState | None = None
    tombstones: set[str] = field(default_factory=set)
    commit_report: CommitReport | None = None
    lock: threading.RLock = field(default_factory=threading.RLock)

    @property
    def is_root(self) -> bool:
        return self.parent is None

    @property
    def tombstone_root(self) -> str | None:
        if self.is_root:
            return None
        return os.path.join(self.branch_dir, "tombstones")


def normalize(path: str) -> str:
    """Turn a workspace path into the canonical ``a/b/c`` form ("" is the top)."""
    if "\0" in path:
        raise path_error(errno.EINVAL, path)
    parts = [p for p in path.split("/") if p and p != "."]
    if ".." in parts:
        raise path_error(errno.EINVAL, path)
    return "/".join(parts)


def validate_name(name: str) -> None:
    if not name or name == ROOT or name.startswith("@") or not _NAME_RE.fullmatch(name):
        raise InvalidBranchNameError(f"invalid branch name {name!r}", name)
    if name in (".", ".."):
        raise InvalidBranchNameError(f"invalid branch name {name!r}", name)


def _parent_of(rel: str) -> str:
    return rel.rpartition("/")[0]


def _remove(path: str) -> bool:
    try:
        st = os.lstat(path)
    except FileNotFoundError:
        return False
    if stat.S_ISDIR(st.st_mode):
        shutil.rmtree(path)
    else:
        os.unlink(path)
    return True


def _dirs_all_the_way(root: str, rel: str) -> bool:
    """True when no proper prefix of ``rel`` under ``root`` is a symlink or file.

    ``lstat`` follows symlinks in intermediate components, which would let a
    link inside a layer point a lookup outside of it.
    """
    cur = root
    for part in rel.split("/")[:-1]:
        cur = os.path.join(cur, part)
        if not stat.S_ISDIR(os.lstat(cur).st_mode):
            return False
    return True


def _require_regular(st: os.stat_result, rel: str) -> None:
    if stat.S_ISDIR(st.st_mode):
        raise path_error(errno.EISDIR, rel)
    if stat.S_ISLNK(st.st_mode):
        raise path_error(errno.ELOOP, rel)


def _fsync_dir(path: str) -> None:
    fd = os.open(path, os.O_RDONLY | os.O_DIRECTORY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def _copy_times(src_st: os.stat_result, dst: str) -> None:
    try:
        os.utime(dst, ns=(src_st.st_atime_ns, src_st.st_mtime_ns), follow_symlinks=False)
    except (NotImplementedError, OSError):
        pass


def walk_layer(root: str, rel: str = "") -> Iterator[tuple[str, os.DirEntry]]:
    """Yield ``(relpath, entry)`` pairs under ``root`` top-down, never following links."""
    try:
        with os.scandir(os.path.join(root, rel) if rel else root) as it:
            entries = sorted(it, key=lambda e: e.name)
    except FileNotFoundError:
        return
    for entry in entries:
        child = f"{rel}/{entry.name}" if rel else entry.name
        yield child, entry
        if entry.is_dir(follow_symlinks=False):
            yield from walk_layer(root, child)


class BranchStore:
    """The branch tree, its delta layers and the commit arbiter."""

    def __init__(
        self,
        base_dir: str | os.PathLike,
        store_dir: str | os.PathLike,
        *,
        durable_commit: bool = True,
        timing_hook: Callable[[str, float], None] | None = None,
    ):
        self.base_dir = os.path.realpath(base_dir)
        self.store_dir = os.path.realpath(store_dir)
        if not os.path.isdir(self.base_dir):
            raise NotADirectoryError(errno.ENOTDIR, "base is not a directory", self.base_dir)
        if self.store_dir == self.base_dir or self.store_dir.startswith(self.base_dir + os.sep):
            raise ValueError("store directory must live outside the base directory")
        self.durable_commit = durable_commit
        self.timing_hook = timing_hook
        self._rw = _RWLock()
        self._gen = itertools.count(1)
        self.generation = 0
        self._branches: dict[str, _Branch] = {}
        self._retired: dict[str, _Branch] = {}
        self._groups: dict[str, ExclusiveGroup] = {}
        self._branches_dir = os.path.join(self.store_dir, "branches")
        os.makedirs(self._branches_dir, exist_ok=True)
        self._load()

    # ------------------------------------------------------------------ state

    def _bump(self) -> None:
        self.generation = next(self._gen)

    def _load(self) -> None:
        root_dir = os.path.join(self._branches_dir, ROOT)
        os.makedirs(root_dir, exist_ok=True)
        root = _Branch(ROOT, None, self.base_dir, root_dir)
        self._branches[ROOT] = root
        docs: list[dict] = []
        for name in sorted(os.listdir(self._branches_dir)):
            meta_path = os.path.join(self._branches_dir, name, META_FILE)
            try:
                with open(meta_path, encoding="utf-8") as f:
                    doc = json.load(f)
            except FileNotFoundError:
                continue
            if name == ROOT:
                root.epoch = int(doc.get("epoch", 0))
            else:
                docs.append(doc)
        for doc in docs:
            name = doc["name"]
            rec = _Branch(
                name,
                doc["parent"],
                os.path.join(self._branches_dir, name, "data"),
                os.path.join(self._branches_dir, name),
                epoch=int(doc["epoch"]),
                parent_epoch_at_create=int(doc["parent_epoch_at_create"]),
                group=doc.get("group_id"),
            )
            state = BranchState(doc["state"])
            if state in TERMINAL_STATES:
                rec.terminal = state
                if doc.get("commit_report"):
                    rec.commit_report = CommitReport(**doc["commit_report"])
                self._retired[name] = rec
            else:
                rec.tombstones = {rel for rel, e in walk_layer(rec.tombstone_root) if not e.is_dir(follow_symlinks=False)}
                self._branches[name] = rec
            if rec.group:
                group = self._groups.setdefault(rec.group, ExclusiveGroup(rec.group))
                group.members.add(name)
                if state is BranchState.COMMITTED:
                    group.winner = name
        for rec in self._branches.values():
            if rec.parent is not None:
                parent = self._branches.get(rec.parent)
                if parent is None:
                    logger.warning("branch %s has no live parent %s; aborting it", rec.name, rec.parent)
                    continue
                parent.children.add(rec.name)
        for rec in [r for r in self._branches.values() if r.parent and r.parent not in self._branches]:
            self._discard(rec, BranchState.ABORTED)
        for rec in list(self._branches.values()):
            marker = os.path.join(rec.branch_dir, COMMIT_MARKER)
            if not rec.is_root and os.path.exists(marker):
                self._replay_commit(rec, marker)
        if not os.path.exists(os.path.join(root_dir, META_FILE)):
            self._write_meta(root)
        self._bump()

    def _replay_commit(self, rec: _Branch, marker: str) -> None:
        with open(marker, encoding="utf-8") as f:
            info = json.load(f)
        parent = self._branches[rec.parent]
        logger.warning("replaying interrupted commit of %s into %s", rec.name, parent.name)
        report = self._apply_delta(rec, parent)
        parent.epoch = int(info["parent_epoch"]) + 1
        self._write_meta(parent, durable=True)
        self._finish_commit(rec, parent, report)

    def _meta_doc(self, rec: _Branch) -> dict:
        doc = {
            "name": rec.name,
            "parent": rec.parent,
            "state": self._state(rec).value,
            "epoch": rec.epoch,
            "parent_epoch_at_create": rec.parent_epoch_at_create,
            "group_id": rec.group,
        }
        if rec.commit_report is not None:
            doc["commit_report"] = asdict(rec.commit_report)
        return doc

    def _write_meta(self, rec: _Branch, durable: bool = False) -> None:
        path = os.path.join(rec.branch_dir, META_FILE)
        tmp = path + ".tmp"
        data = json.dumps(self._meta_doc(rec), indent=2, sort_keys=True) + "\n"
        fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        try:
            os.write(fd, data.encode())
            if durable:
                os.fsync(fd)
        finally:
            os.close(fd)
        os.replace(tmp, path)

    def _is_stale(self, rec: _Branch) -> bool:
        while rec.parent is not None:
            parent = self._branches.get(rec.parent)
            if parent is None or parent.epoch != rec.parent_epoch_at_create:
                return True
            if rec.group is not None:
                winner = self._groups[rec.group].winner
                if winner is not None and winner != rec.name:
                    return True
            rec = parent
        return False

    def _state(self, rec: _Branch) -> BranchState:
        if rec.terminal is not None:
            return rec.terminal
        if self._is_stale(rec):
            return BranchState.STALE
        if rec.children:
            return BranchState.FROZEN
        return BranchState.ACTIVE

    def _meta(self, rec: _Branch) -> BranchMeta:
        return BranchMeta(
            rec.name,
            rec.parent,
            self._state(rec),
            rec.epoch,
            rec.parent_epoch_at_create,
            rec.group,
            len(rec.children),
        )

    def _get(self, name: str) -> _Branch:
        rec = self._branches.get(name)
        if rec is not None:
            return rec
        if name in self._retired:
            raise BranchClosedError(f"branch {name!r} is {self._retired[name].terminal.value.lower()}", name)
        raise UnknownBranchError(f"no such branch {name!r}", name)

    def _readable(self, name: str) -> _Branch:
        rec = self._get(name)
        if self._is_stale(rec):
            raise StaleBranchError(f"branch {name!r} is stale", name)
        return rec

    def _mutable(self, name: str) -> _Branch:
        rec = self._readable(name)
        if rec.children:
            raise FrozenBranchError(f"branch {name!r} has live children and is read-only", name)
        return rec

    def _chain(self, rec: _Branch) -> list[_Branch]:
        chain = [rec]
        while rec.parent is not None:
            rec = self._branches[rec.parent]
            chain.append(rec)
        return chain

    @contextmanager
    def _timed(self, op: str) -> Iterator[None]:
        if self.timing_hook is None:
            yield
            return
        t0 = time.perf_counter()
        yield
        self.timing_hook(op, time.perf_counter() - t0)

    # ----------------------------------------------------------- public guards

    @contextmanager
    def reading(self, branch: str) -> Iterator[None]:
        """Hold the shared lock while ``branch`` is known to be readable."""
        with self._rw.read():
            self._readable(branch)
            yield

    @contextmanager
    def writing(self, branch: str) -> Iterator[None]:
        """Hold the shared lock while ``branch`` is known to accept writes.

        Writes through an already-open descriptor must happen inside this
        block so that they cannot interleave with a fork or a commit.
        """
        with self._rw.read():
            self._mutable(branch)
            yield

    def is_live(self, branch: str) -> bool:
        return branch in self._branches

    def live_branches(self) -> list[str]:
        with self._rw.read():
            return sorted(n for n in self._branches if n != ROOT)

    # ------------------------------------------------------------- resolution

    @staticmethod
    def _hidden_at(layer: _Branch, rel: str) -> bool:
        tombs = layer.tombstones
        if not tombs:
            return False
        if rel in tombs:
            return True
        idx = rel.find("/")
        while idx != -1:
            if rel[:idx] in tombs:
                return True
            idx = rel.find("/", idx + 1)
        return False

    def _resolve_in(self, chain: list[_Branch], rel: str) -> Resolution:
        if not rel:
            return Resolution(Outcome.FOUND, chain[0].name, chain[0].data_root)
        for layer in chain:
            phys = os.path.join(layer.data_root, rel)
            try:
                os.lstat(phys)
            except (FileNotFoundError, NotADirectoryError):
                pass
            except OSError as e:
                if e.errno != errno.ELOOP:
                    raise
                return Resolution(Outcome.ABSENT)
            else:
                if "/" in rel and not _dirs_all_the_way(layer.data_root, rel):
                    return Resolution(Outcome.ABSENT)
                return Resolution(Outcome.FOUND, layer.name, phys)
            if self._hidden_at(layer, rel):
                return Resolution(Outcome.TOMBSTONED, layer.name)
        return Resolution(Outcome.ABSENT)

    def _lookup(self, chain: list[_Branch], rel: str) -> tuple[str, os.stat_result]:
        res = self._resolve_in(chain, rel)
        if not res.found:
            raise path_error(errno.ENOENT, rel)
        return res.path, os.lstat(res.path)

    def resolve(self, branch: str, path: str) -> Resolution:
        rel = normalize(path)
        with self._rw.read():
            return self._resolve_in(self._chain(self._readable(branch)), rel)

    def _list_in(self, chain: list[_Branch], rel: str) -> list[DirEntry]:
        _, st = self._lookup(chain, rel)
        if not stat.S_ISDIR(st.st_mode):
            raise path_error(errno.ENOTDIR, rel)
        seen: dict[str, DirEntry | None] = {}
        prefix = rel + "/" if rel else ""
        for layer in chain:
            phys = os.path.join(layer.data_root, rel) if rel else layer.data_root
            try:
                with os.scandir(phys) as it:
                    for e in it:
                        if e.name in seen:
                            continue
                        try:
                            kind = stat.S_IFMT(e.stat(follow_symlinks=False).st_mode)
                        except FileNotFoundError:
                            continue
                        seen[e.name] = DirEntry(e.name, layer.name, e.path, kind)
            except (FileNotFoundError, NotADirectoryError):
                if os.path.lexists(phys):
                    break
            if layer.tombstones:
                for t in layer.tombstones:
                    if t.startswith(prefix):
                        name = t[len(prefix):]
                        if "/" not in name:
                            seen.setdefault(name, None)
                if self._hidden_at(layer, rel):
                    break
        return sorted((e for e in seen.values() if e is not None), key=lambda e: e.name)

    def list_dir(self, branch: str, path: str = "") -> list[DirEntry]:
        rel = normalize(path)
        with self._rw.read():
            return self._list_in(self._chain(self._readable(branch)), rel)

    def stat(self, branch: str, path: str) -> os.stat_result:
        rel = normalize(path)
        with self._rw.read():
            return self._lookup(self._chain(self._readable(branch)), rel)[1]

    def read_file(self, branch: str, path: str, offset: int = 0, size: int = -1) -> bytes:
        rel = normalize(path)
        with self._rw.read():
            phys, st = self._lookup(self._chain(self._readable(branch)), rel)
            if stat.S_ISDIR(st.st_mode):
                raise path_error(errno.EISDIR, rel)
            with open(phys, "rb") as f:
                f.seek(offset)
                return f.read(size)

    def readlink(self, branch: str, path: str) -> str:
        rel = normalize(path)
        with self._rw.read():
            phys, _ = self._lookup(self._chain(self._readable(branch)), rel)
            return os.readlink(phys)

    def physical_path(self, branch: str, path: str) -> str:
        """Physical file currently backing ``path`` in ``branch``'s view."""
        return self._require_found(self.resolve(branch, path), path)

    @staticmethod
    def _require_found(res: Resolution, path: str) -> str:
        if not res.found:
            raise path_error(errno.ENOENT, path)
        return res.path

    def delta_layer(self, branch: str) -> DeltaLayer:
        rec = self._get(branch)
        return DeltaLayer(rec.data_root, rec.tombstone_root)

    # ---------------------------------------------------------------- copy-up

    def _materialize_dir(self, chain: list[_Branch], rel: str) -> str:
        layer = chain[0]
        if not rel:
            return layer.data_root
        phys = os.path.join(layer.data_root, rel)
        if layer.is_root:
            return phys
        cur = ""
        for part in rel.split("/"):
            cur = f"{cur}/{part}" if cur else part
            target = os.path.join(layer.data_root, cur)
            try:
                if stat.S_ISDIR(os.lstat(target).st_mode):
                    continue
            except FileNotFoundError:
                pass
            src, st = self._lookup(chain, cur)
            if not stat.S_ISDIR(st.st_mode):
                raise path_error(errno.ENOTDIR, cur)
            os.mkdir(target)
            os.chmod(target, stat.S_IMODE(st.st_mode))
            _copy_times(st, target)
            self._bump()
        return phys

    def _copy_up(self, chain: list[_Branch], rel: str) -> str:
        layer = chain[0]
        phys = os.path.join(layer.data_root, rel) if rel else layer.data_root
        if layer.is_root or os.path.lexists(phys):
            if layer.is_root and not os.path.lexists(phys):
                raise path_error(errno.ENOENT, rel)
            return phys
        src, st = self._lookup(chain, rel)
        mode = st.st_mode
        if stat.S_ISDIR(mode):
            return self._materialize_dir(chain, rel)
        if not (stat.S_ISREG(mode) or stat.S_ISLNK(mode)):
            raise UnsupportedFileError(f"cannot copy special file {rel!r} into a branch", layer.name)
        self._materialize_dir(chain, _parent_of(rel))
        if stat.S_ISLNK(mode):
            os.symlink(os.readlink(src), phys)
        else:
            shutil.copyfile(src, phys)
            os.chmod(phys, stat.S_IMODE(mode))
        _copy_times(st, phys)
        self._bump()
        return phys

    def _deep_copy_up(self, chain: list[_Branch], rel: str) -> None:
        self._copy_up(chain, rel)
        for entry in self._list_in(chain, rel):
            child = f"{rel}/{entry.name}" if rel else entry.name
            if entry.is_dir:
                self._deep_copy_up(chain, child)
            else:
                self._copy_up(chain, child)

    def copy_up(self, branch: str, path: str) -> str:
        """Make ``path`` live in ``branch``'s own layer and return the physical path."""
        rel = normalize(path)
        with self._rw.read():
            rec = self._mutable(branch)
            with rec.lock:
                return self._copy_up(self._chain(rec), rel)

    def open_for_write(self, branch: str, path: str) -> str:
        """Copy a regular file up (if needed) so it can be opened for writing."""
        rel = normalize(path)
        with self._rw.read():
            rec = self._mutable(branch)
            with rec.lock:
                chain = self._chain(rec)
                _, st = self._lookup(chain, rel)
                if stat.S_ISDIR(st.st_mode):
                    raise path_error(errno.EISDIR, rel)
                return self._copy_up(chain, rel)

    # -------------------------------------------------------------- mutations

    def _add_tombstone(self, layer: _Branch, rel: str) -> None:
        tombs = layer.tombstones
        if rel in tombs:
            return
        idx = rel.find("/")
        while idx != -1:
            if rel[:idx] in tombs:
                return
            idx = rel.find("/", idx + 1)
        sentinel = os.path.join(layer.tombstone_root, rel)
        prefix = rel + "/"
        below = [t for t in tombs if t.startswith(prefix)]
        if below:
            tombs.difference_update(below)
        if os.path.isdir(sentinel):
            shutil.rmtree(sentinel)
        parent = os.path.dirname(sentinel)
        if not os.path.isdir(parent):
            os.makedirs(parent)
        os.close(os.open(sentinel, os.O_WRONLY | os.O_CREAT, 0o644))
        tombs.add(rel)

    def _check_creatable(self, chain: list[_Branch], rel: str) -> None:
        if not rel:
            raise path_error(errno.EEXIST, rel)
        if self._resolve_in(chain, rel).found:
            raise path_error(errno.EEXIST, rel)
        _, st = self._lookup(chain, _parent_of(rel))
        if not stat.S_ISDIR(st.st_mode):
            raise path_error(errno.ENOTDIR, rel)

    @contextmanager
    def _mutating(self, branch: str) -> Iterator[list[_Branch]]:
        with self._rw.read():
            rec = self._mutable(branch)
            with rec.lock:
                yield self._chain(rec)
                self._bump()

    def create_file(self, branch: str, path: str, mode: int = 0o644) -> str:
        rel = normalize(path)
        with self._mutating(branch) as chain:
            self._check_creatable(chain, rel)
            self._materialize_dir(chain, _parent_of(rel))
            phys = os.path.join(chain[0].data_root, rel)
            fd = os.open(phys, os.O_WRONLY | os.O_CREAT | os.O_EXCL, mode & 0o7777)
            try:
                os.fchmod(fd, mode & 0o7777)
            finally:
                os.close(fd)
            return phys

    def mkdir(self, branch: str, path: str, mode: int = 0o755) -> str:
        rel = normalize(path)
        with self._mutating(branch) as chain:
            self._check_creatable(chain, rel)
            self._materialize_dir(chain, _parent_of(rel))
            phys = os.path.join(chain[0].data_root, rel)
            os.mkdir(phys, mode & 0o7777)
            os.chmod(phys, mode & 0o7777)
            return phys

    def symlink(self, branch: str, path: str, target: str) -> str:
        rel = normalize(path)
        with self._mutating(branch) as chain:
            self._check_creatable(chain, rel)
            self._materialize_dir(chain, _parent_of(rel))
            phys = os.path.join(chain[0].data_root, rel)
            os.symlink(target, phys)
            return phys

    def link(self, branch: str, src: str, dst: str) -> str:
        """Hard link inside one branch layer; the link is lost again on commit."""
        src_rel, dst_rel = normalize(src), normalize(dst)
        with self._mutating(branch) as chain:
            _, st = self._lookup(chain, src_rel)
            if stat.S_ISDIR(st.st_mode):
                raise path_error(errno.EPERM, src_rel)
            self._check_creatable(chain, dst_rel)
            src_phys = self._copy_up(chain, src_rel)
            self._materialize_dir(chain, _parent_of(dst_rel))
            phys = os.path.join(chain[0].data_root, dst_rel)
            os.link(src_phys, phys)
            return phys

    def write_file(self, branch: str, path: str, offset: int, data: bytes) -> int:
        rel = normalize(path)
        with self._mutating(branch) as chain:
            _, st = self._lookup(chain, rel)
            _require_regular(st, rel)
            phys = self._copy_up(chain, rel)
            fd = os.open(phys, os.O_WRONLY)
            try:
                return os.pwrite(fd, data, offset)
            finally:
                os.close(fd)

    def truncate(self, branch: str, path: str, length: int) -> None:
        rel = normalize(path)
        with self._mutating(branch) as chain:
            _, st = self._lookup(chain, rel)
            _require_regular(st, rel)
            os.truncate(self._copy_up(chain, rel), length)

    def chmod(self, branch: str, path: str, mode: int) -> None:
        rel = normalize(path)
        with self._mutating(branch) as chain:
            _, st = self._lookup(chain, rel)
            if stat.S_ISLNK(st.st_mode):
                return
            os.chmod(self._copy_up(chain, rel), mode & 0o7777)

    def chown(self, branch: str, path: str, uid: int, gid: int) -> None:
        rel = normalize(path)
        with self._mutating(branch) as chain:
            self._lookup(chain, rel)
            os.chown(self._copy_up(chain, rel), uid, gid, follow_symlinks=False)

    def utime(self, branch: str, path: str, ns: tuple[int, int] | None = None) -> None:
        rel = normalize(path)
        with self._mutating(branch) as chain:
            self._lookup(chain, rel)
            phys = self._copy_up(chain, rel)
            if ns is None:
                os.utime(phys, follow_symlinks=False)
            else:
                os.utime(phys, ns=ns, follow_symlinks=False)

    def _delete(self, chain: list[_Branch], rel: str) -> None:
        layer = chain[0]
        _remove(os.path.join(layer.data_root, rel))
        if not layer.is_root:
            self._add_tombstone(layer, rel)

    def delete(self, branch: str, path: str) -> None:
        """Remove ``path`` (recursively, for directories) from the branch view."""
        rel = normalize(path)
        if not rel:
            raise path_error(errno.EBUSY, path)
        with self._mutating(branch) as chain:
            self._lookup(chain, rel)
            self._delete(chain, rel)

    def unlink(self, branch: str, path: str) -> None:
        rel = normalize(path)
        with self._mutating(branch) as chain:
            _, st = self._lookup(chain, rel)
            if stat.S_ISDIR(st.st_mode):
                raise path_error(errno.EISDIR, rel)
            self._delete(chain, rel)

    def rmdir(self, branch: str, path: str) -> None:
        rel = normalize(path)
        if not rel:
            raise path_error(errno.EBUSY, path)
        with self._mutating(branch) as chain:
            _, st = self._lookup(chain, rel)
            if not stat.S_ISDIR(st.st_mode):
                raise path_error(errno.ENOTDIR, rel)
            if self._list_in(chain, rel):
                raise path_error(errno.ENOTEMPTY, rel)
            self._delete(chain, rel)

    def rename(self, branch: str, src: str, dst: str, *, noreplace: bool = False) -> None:
        src_rel, dst_rel = normalize(src), normalize(dst)
        if not src_rel or not dst_rel:
            raise path_error(errno.EBUSY, src if not src_rel else dst)
        with self._mutating(branch) as chain:
            _, src_st = self._lookup(chain, src_rel)
            _, parent_st = self._lookup(chain, _parent_of(dst_rel))
            if not stat.S_ISDIR(parent_st.st_mode):
                raise path_error(errno.ENOTDIR, dst_rel)
            if src_rel == dst_rel:
                return
            src_is_dir = stat.S_ISDIR(src_st.st_mode)
            if dst_rel.startswith(src_rel + "/"):
                raise path_error(errno.EINVAL, dst_rel)
            dst_res = self._resolve_in(chain, dst_rel)
            if dst_res.found:
                if noreplace:
                    raise path_error(errno.EEXIST, dst_rel)
                dst_is_dir = stat.S_ISDIR(os.lstat(dst_res.path).st_mode)
                if src_is_dir and not dst_is_dir:
                    raise path_error(errno.ENOTDIR, dst_rel)
                if dst_is_dir and not src_is_dir:
                    raise path_error(errno.EISDIR, dst_rel)
                if dst_is_dir and self._list_in(chain, dst_rel):
                    raise path_error(errno.ENOTEMPTY, dst_rel)
            layer = chain[0]
            if layer.is_root:
                os.rename(os.path.join(layer.data_root, src_rel), os.path.join(layer.data_root, dst_rel))
                return
            if src_is_dir:
                self._deep_copy_up(chain, src_rel)
            else:
                self._copy_up(chain, src_rel)
            if dst_res.found:
                _remove(os.path.join(layer.data_root, dst_rel))
            self._materialize_dir(chain, _parent_of(dst_rel))
            os.rename(os.path.join(layer.data_root, src_rel), os.path.join(layer.data_root, dst_rel))
            self._add_tombstone(layer, src_rel)
            if src_is_dir:
                self._add_tombstone(layer, dst_rel)

    # ---------------------------------------------------------------- lifecycle

    def _new_branch(self, parent: _Branch, name: str, group: str | None) -> _Branch:
        branch_dir = os.path.join(self._branches_dir, name)
        self._retired.pop(name, None)
        if os.path.lexists(branch_dir):
            shutil.rmtree(branch_dir)
        rec = _Branch(
            name,
            parent.name,
            os.path.join(branch_dir, "data"),
            branch_dir,
            parent_epoch_at_create=parent.epoch,
            group=group,
        )
        os.mkdir(branch_dir)
        try:
            os.mkdir(rec.data_root)
            os.mkdir(rec.tombstone_root)
            os.chmod(rec.data_root, stat.S_IMODE(os.stat(parent.data_root).st_mode))
            self._write_meta(rec)
        except BaseException:
            shutil.rmtree(branch_dir, ignore_errors=True)
            raise
        self._branches[name] = rec
        parent.children.add(name)
        return rec

    def _fork_parent(self, parent: str) -> _Branch:
        rec = self._get(parent)
        if self._is_stale(rec):
            raise StaleBranchError(f"cannot fork stale branch {parent!r}", parent)
        return rec

    def create_branch(self, parent: str, name: str) -> str:
        """Fork ``name`` off ``parent``.  Costs a few directory creations, nothing more."""
        validate_name(name)
        with self._timed("create"), self._rw.write():
            if name in self._branches:
                raise BranchExistsError(f"branch {name!r} already exists", name)
            prec = self._fork_parent(parent)
            self._new_branch(prec, name, None)
            self._write_meta(prec)
            self._bump()
        return name

    def create_branch_group(self, parent: str, names: list[str]) -> list[str]:
        """Fork siblings that form one exclusive group; at most one may commit."""
        if not names:
            raise InvalidBranchNameError("an exclusive group needs at least one branch")
        for name in names:
            validate_name(name)
        if len(set(names)) != len(names):
            raise BranchExistsError("duplicate name in group", names[0])
        with self._timed("create_group"), self._rw.write():
            for name in names:
                if name in self._branches:
                    raise BranchExistsError(f"branch {name!r} already exists", name)
            prec = self._fork_parent(parent)
            taken = [int(g[1:]) for g in self._groups if g[1:].isdigit()]
            group = ExclusiveGroup(f"g{max(taken, default=0) + 1}")
            self._groups[group.group_id] = group
            created: list[_Branch] = []
            try:
                for name in names:
                    created.append(self._new_branch(prec, name, group.group_id))
                    group.members.add(name)
            except BaseException:
                for rec in created:
                    prec.children.discard(rec.name)
                    del self._branches[rec.name]
                    shutil.rmtree(rec.branch_dir, ignore_errors=True)
                del self._groups[group.group_id]
                raise
            self._write_meta(prec)
            self._bump()
        return list(names)

    def _apply_delta(self, rec: _Branch, parent: _Branch) -> CommitReport:
        durable = self.durable_commit
        touched_dirs: set[str] = set()
        data_paths: set[str] = set()
        files = dirs = nbytes = 0
        for rel, _ in walk_layer(rec.data_root):
            data_paths.add(rel)
        for rel in sorted(rec.tombstones):
            target = os.path.join(parent.data_root, rel)
            if _remove(target):
                touched_dirs.add(os.path.dirname(target))
            if not parent.is_root:
                self._add_tombstone(parent, rel)
        pure_tombstones = sum(1 for t in rec.tombstones if t not in data_paths)
        for rel, entry in walk_layer(rec.data_root):
            target = os.path.join(parent.data_root, rel)
            st = entry.stat(follow_symlinks=False)
            touched_dirs.add(os.path.dirname(target))
            if stat.S_ISDIR(st.st_mode):
                try:
                    if not stat.S_ISDIR(os.lstat(target).st_mode):
                        os.unlink(target)
                        os.mkdir(target)
                except FileNotFoundError:
                    os.mkdir(target)
                os.chmod(target, stat.S_IMODE(st.st_mode))
                _copy_times(st, target)
                touched_dirs.add(target)
                dirs += 1
                continue
            tmp = os.path.join(os.path.dirname(target), f"{_TMP_PREFIX}{os.getpid()}-{entry.name}")
            if stat.S_ISLNK(st.st_mode):
                _remove(tmp)
                os.symlink(os.readlink(entry.path), tmp)
            elif stat.S_ISREG(st.st_mode):
                shutil.copyfile(entry.path, tmp)
                os.chmod(tmp, stat.S_IMODE(st.st_mode))
                if durable:
                    fd = os.open(tmp, os.O_RDONLY)
                    try:
                        os.fsync(fd)
                    finally:
                        os.close(fd)
                nbytes += st.st_size
            else:
                raise UnsupportedFileError(f"special file {rel!r} in delta layer", rec.name)
            _copy_times(st, tmp)
            if os.path.isdir(target) and not os.path.islink(target):
                shutil.rmtree(target)
            os.replace(tmp, target)
            files += 1
        os.chmod(parent.data_root, stat.S_IMODE(os.stat(rec.data_root).st_mode))
        if durable:
            for d in sorted(touched_dirs):
                if os.path.isdir(d):
                    _fsync_dir(d)
            if parent.tombstone_root and rec.tombstones:
                _fsync_dir(parent.tombstone_root)
        return CommitReport(rec.name, files, dirs, nbytes, pure_tombstones)

    def _finish_commit(self, rec: _Branch, parent: _Branch, report: CommitReport) -> None:
        rec.commit_report = report
        rec.terminal = BranchState.COMMITTED
        self._write_meta(rec, durable=self.durable_commit)
        os.unlink(os.path.join(rec.branch_dir, COMMIT_MARKER))
        self._discard(rec, BranchState.COMMITTED)

    def _discard(self, rec: _Branch, state: BranchState) -> None:
        rec.terminal = state
        shutil.rmtree(rec.data_root, ignore_errors=True)
        shutil.rmtree(rec.tombstone_root, ignore_errors=True)
        rec.tombstones = set()
        self._branches.pop(rec.name, None)
        self._retired[rec.name] = rec
        parent = self._branches.get(rec.parent)
        if parent is not None:
            parent.children.discard(rec.name)

    def commit_branch(self, branch: str) -> CommitReport:
        """Apply ``branch``'s delta to its parent and invalidate its siblings."""
        with self._timed("commit"), self._rw.write():
            rec = self._get(branch)
            if rec.is_root:
                raise RootBranchError("the root branch has no parent to commit into", branch)
            if self._is_stale(rec):
                raise StaleBranchError(f"branch {branch!r} is stale", branch)
            if rec.children:
                raise FrozenBranchError(f"branch {branch!r} still has live children", branch)
            parent = self._branches[rec.parent]
            if rec.group is not None:
                group = self._groups[rec.group]
                if group.winner not in (None, branch):
                    raise StaleBranchError(f"branch {branch!r} lost the exclusive group race", branch)
            siblings = [
                self._branches[c] for c in parent.children
                if c != branch and not self._is_stale(self._branches[c])
            ]
            if rec.group is not None:
                group.winner = branch
            marker = os.path.join(rec.branch_dir, COMMIT_MARKER)
            with open(marker, "w", encoding="utf-8") as f:
                json.dump({"parent": parent.name, "parent_epoch": parent.epoch}, f)
            report = self._apply_delta(rec, parent)
            report = CommitReport(
                report.branch,
                report.files_applied,
                report.dirs_applied,
                report.bytes_copied,
                report.tombstones_applied,
                len(siblings),
            )
            parent.epoch += 1
            self._write_meta(parent, durable=self.durable_commit)
            self._finish_commit(rec, parent, report)
            for sib in siblings:
                self._write_meta(sib)
            self._bump()
        logger.info("committed %s into %s: %s", branch, parent.name, report)
        return report

    def _abort_tree(self, rec: _Branch) -> None:
        for child in sorted(rec.children):
            self._abort_tree(self._branches[child])
        self._discard(rec, BranchState.ABORTED)
        self._write_meta(rec)

    def abort_branch(self, branch: str) -> None:
        """Discard ``branch`` (and any descendants) without touching its parent."""
        with self._timed("abort"), self._rw.write():
            rec = self._get(branch)
            if rec.is_root:
                raise RootBranchError("the root branch cannot be aborted", branch)
            self._abort_tree(rec)
            parent = self._branches.get(rec.parent)
            if parent is not None:
                self._write_meta(parent)
            self._bump()

    # -------------------------------------------------------------- queries

    def branch_status(self, branch: str) -> BranchMeta:
        with self._rw.read():
            rec = self._branches.get(branch) or self._retired.get(branch)
            if rec is None:
                raise UnknownBranchError(f"no such branch {branch!r}", branch)
            return self._meta(rec)

    def list_branches(self) -> list[BranchMeta]:
        """All branches: live ones in tree pre-order, then retired ones by name."""
        with self._rw.read():
            out: list[BranchMeta] = []
            stack = [self._branches[ROOT]]
            while stack:
                rec = stack.pop()
                out.append(self._meta(rec))
                stack.extend(self._branches[c] for c in sorted(rec.children, reverse=True))
            for name in sorted(self._retired):
                if name not in self._branches:
                    out.append(self._meta(self._retired[name]))
            return out

    def group(self, group_id: str) -> ExclusiveGroup:
        with self._rw.read():
            g = self._groups[group_id]
            return ExclusiveGroup(g.group_id, set(g.members), g.winner)

    def commit_report(self, branch: str) -> CommitReport | None:
        with self._rw.read():
            rec = self._retired.get(branch)
            return rec.commit_report if rec is not None else None
