"""POSIX operations over a branch store, in kernel-protocol shape.

Paths inside the mount are *view paths*.  ``@name/...`` at the mount root
addresses branch ``name``; everything else addresses the default branch.
``.branchfs_ctl`` at the root is the control file.  Below the root an ``@``
is an ordinary character.

Node ids are handed out per view path and survive renames (descendants are
remapped).  Read handles re-resolve their physical file whenever the store's
generation counter moves, so a copy-up or a commit is picked up by handles
that were opened earlier.  Write handles pin the branch's own copy and check
the branch is still writable before every write.

Error numbers
-------------
=========================  ============
condition                  errno
=========================  ============
branch is stale            ESTALE
branch has live children   EROFS
unknown or closed branch   ENOENT
special file creation      EOPNOTSUPP
rename across branches     EXDEV
``@name`` created at root  EPERM
unknown ioctl              ENOTTY
bad control line           EINVAL
=========================  ============
"""

from __future__ import annotations

import errno
import itertools
import logging
import os
import stat
import threading
import time
import zlib
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator

from ..errors import BranchExistsError
from ..store import ROOT, BranchStore
from . import kernel
from .control import CONTROL_NAME, DEFAULT_BRANCH_XATTR, PID_XATTR, execute, format_listing, split_commands
from .kernel import Attr, Context, DirEntryOut, Entry, SetattrRequest

logger = logging.getLogger(__name__)

ROOT_INO = 1
CONTROL_INO = 2

# ioctl codes: _IO('b', n) plus a named-create variant _IOR('b', 0, char[256])
_IOC_READ = 2
BRANCH_NAME_MAX = 256


def _ioc(direction: int, nr: int, size: int) -> int:
    return (direction << 30) | (size << 16) | (ord("b") << 8) | nr


FS_IOC_BRANCH_CREATE = _ioc(0, 0, 0)
FS_IOC_BRANCH_COMMIT = _ioc(0, 1, 0)
FS_IOC_BRANCH_ABORT = _ioc(0, 2, 0)
FS_IOC_BRANCH_CREATE_NAMED = _ioc(_IOC_READ, 0, BRANCH_NAME_MAX)
AUTO_BRANCH_PREFIX = "branch-"


@dataclass
class MountConfig:
    base_dir: str
    mountpoint: str
    store_dir: str
    default_branch: str = ROOT
    allow_control: bool = True
    fd_cache_capacity: int = 64
    fsync_passthrough: bool = False
    threads: int = 8
    allow_other: bool | None = None

    def validate(self) -> None:
        base = os.path.realpath(self.base_dir)
        mnt = os.path.realpath(self.mountpoint)
        if not os.path.isdir(base):
            raise NotADirectoryError(errno.ENOTDIR, "base is not a directory", self.base_dir)
        if not os.path.isdir(mnt):
            raise NotADirectoryError(errno.ENOTDIR, "mountpoint is not a directory", self.mountpoint)
        for label, path in (("base", base), ("store", os.path.realpath(self.store_dir))):
            if path == mnt or path.startswith(mnt + os.sep):
                raise ValueError(f"{label} directory must not live inside the mountpoint")
        if self.fd_cache_capacity < 0:
            raise ValueError("fd cache capacity must be >= 0")


def default_store_dir(base_dir: str) -> str:
    base = os.path.realpath(base_dir)
    return os.path.join(os.path.dirname(base), f".{os.path.basename(base)}.branchfs")


# ---------------------------------------------------------------- inode table


class _Node:
    __slots__ = ("path", "nlookup")

    def __init__(self, path: str | None, nlookup: int = 0):
        self.path = path
        self.nlookup = nlookup


class InodeTable:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._nodes: dict[int, _Node] = {ROOT_INO: _Node("", 1), CONTROL_INO: _Node(CONTROL_NAME, 1)}
        self._by_path: dict[str, int] = {"": ROOT_INO}
        self._next = itertools.count(CONTROL_INO + 1)

    def path(self, ino: int) -> str:
        node = self._nodes.get(ino)
        if node is None or node.path is None:
            raise OSError(errno.ENOENT, os.strerror(errno.ENOENT))
        return node.path

    def ref(self, path: str) -> int:
        with self._lock:
            ino = self._by_path.get(path)
            if ino is None:
                ino = next(self._next)
                self._by_path[path] = ino
                self._nodes[ino] = _Node(path)
            self._nodes[ino].nlookup += 1
            return ino

    def peek(self, path: str) -> int | None:
        return self._by_path.get(path)

    def forget(self, ino: int, n: int) -> None:
        if ino in (ROOT_INO, CONTROL_INO):
            return
        with self._lock:
            node = self._nodes.get(ino)
            if node is None:
                return
            node.nlookup -= n
            if node.nlookup <= 0:
                del self._nodes[ino]
                if node.path is not None and self._by_path.get(node.path) == ino:
                    del self._by_path[node.path]

    def unlinked(self, path: str) -> None:
        with self._lock:
            ino = self._by_path.pop(path, None)
            if ino is not None:
                self._nodes[ino].path = None

    def moved(self, old: str, new: str) -> None:
        with self._lock:
            victim = self._by_path.pop(new, None)
            if victim is not None:
                self._nodes[victim].path = None
            prefix = old + "/"
            hits = [(p, i) for p, i in self._by_path.items() if p == old or p.startswith(prefix)]
            for p, _ in hits:
                del self._by_path[p]
            for p, ino in hits:
                moved = new + p[len(old):]
                self._by_path[moved] = ino
                self._nodes[ino].path = moved

    def __len__(self) -> int:
        return len(self._nodes)


def _join(parent: str, name: str) -> str:
    return f"{parent}/{name}" if parent else name


def _synthetic_ino(path: str) -> int:
    return (1 << 62) | zlib.crc32(path.encode())


# ------------------------------------------------------------------- fd cache


class _CachedFd:
    __slots__ = ("fd", "ino", "dev", "gen", "refs", "dead")

    def __init__(self, fd: int, ino: int, dev: int, gen: int):
        self.fd, self.ino, self.dev, self.gen = fd, ino, dev, gen
        self.refs = 0
        self.dead = False


class FdCache:
    """LRU of read-only descriptors keyed by physical path.

    An entry is revalidated (same inode still at that path) whenever the
    store generation has moved since it was last checked.  Capacity 0
    disables caching: every read opens and closes its own descriptor.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._lock = threading.Lock()
        self._entries: OrderedDict[str, _CachedFd] = OrderedDict()
        self.opens = 0

    def _open(self, path: str) -> int:
        self.opens += 1
        return os.open(path, os.O_RDONLY | os.O_CLOEXEC)

    @contextmanager
    def borrow(self, path: str, gen: int) -> Iterator[int]:
        if self.capacity <= 0:
            fd = self._open(path)
            try:
                yield fd
            finally:
                os.close(fd)
            return
        with self._lock:
            entry = self._entries.get(path)
            if entry is not None and entry.gen != gen:
                try:
                    st = os.stat(path)
                    same = (st.st_ino, st.st_dev) == (entry.ino, entry.dev)
                except FileNotFoundError:
                    same = False
                if same:
                    entry.gen = gen
                else:
                    self._drop(path, entry)
                    entry = None
            if entry is None:
                fd = self._open(path)
                st = os.fstat(fd)
                entry = _CachedFd(fd, st.st_ino, st.st_dev, gen)
                self._entries[path] = entry
                while len(self._entries) > self.capacity:
                    old_path, old = next(iter(self._entries.items()))
                    self._drop(old_path, old)
            self._entries.move_to_end(path)
            entry.refs += 1
        try:
            yield entry.fd
        finally:
            with self._lock:
                entry.refs -= 1
                if entry.dead and entry.refs == 0:
                    os.close(entry.fd)

    def _drop(self, path: str, entry: _CachedFd) -> None:
        del self._entries[path]
        entry.dead = True
        if entry.refs == 0:
            os.close(entry.fd)

    def close(self) -> None:
        with self._lock:
            for path, entry in list(self._entries.items()):
                self._drop(path, entry)

    def __len__(self) -> int:
        return len(self._entries)


# -------------------------------------------------------------------- handles


class _ReadHandle:
    def __init__(self, ino: int, branch: str):
        self.ino = ino
        self.branch = branch
        self.gen = -1
        self.phys: str | None = None


class _WriteHandle:
    def __init__(self, ino: int, branch: str, fd: int):
        self.ino = ino
        self.branch = branch
        self.fd = fd


class _ControlHandle:
    """Reads stream the queued text (or a fresh listing) until EOF, then reset."""

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.queued: str | None = None
        self.text: bytes | None = None
        self.pos = 0


class _DirHandle:
    def __init__(self, entries: list[DirEntryOut]):
        self.entries = entries


# ------------------------------------------------------------------ operations


class BranchFS:
    def __init__(self, store: BranchStore, config: MountConfig):
        self.store = store
        self.config = config
        self.default = config.default_branch
        self.table = InodeTable()
        self.cache = FdCache(config.fd_cache_capacity)
        self._handles: dict[int, object] = {}
        self._fh = itertools.count(1)
        self._hlock = threading.Lock()
        self._serial = itertools.count(1)
        self._serial_lock = threading.Lock()
        self._privileged = os.geteuid() == 0
        self._started = time.time_ns()
        store.branch_status(self.default)

    # -- helpers

    def _route(self, path: str) -> tuple[str, str]:
        if path.startswith("@"):
            name, _, rest = path[1:].partition("/")
            if not self.store.is_live(name):
                raise OSError(errno.ENOENT, os.strerror(errno.ENOENT), path)
            return name, rest
        return self.default, path

    def _child(self, parent: int, name: str, *, creating: bool = False) -> str:
        ppath = self.table.path(parent)
        if not ppath and creating and (name.startswith("@") or (name == CONTROL_NAME and self.config.allow_control)):
            raise OSError(errno.EPERM, "reserved name at the mount root", name)
        return _join(ppath, name)

    def _stat(self, path: str) -> os.stat_result:
        branch, rel = self._route(path)
        return self.store.stat(branch, rel)

    def _attr(self, st: os.stat_result, ino: int) -> Attr:
        return Attr.from_stat(st, ino, 1 if stat.S_ISDIR(st.st_mode) else None)

    def _entry(self, path: str) -> Entry:
        st = self._stat(path)
        ino = self.table.ref(path)
        return Entry(ino, self._attr(st, ino))

    def _control_attr(self) -> Attr:
        t = self._started
        return Attr(CONTROL_INO, stat.S_IFREG | 0o666, 1, os.getuid(), os.getgid(), 0, 0, 4096, t, t, t)

    def _own(self, branch: str, rel: str, ctx: Context) -> None:
        if self._privileged and (ctx.uid, ctx.gid) != (0, 0):
            self.store.chown(branch, rel, ctx.uid, ctx.gid)

    def _new_handle(self, handle: object) -> int:
        with self._hlock:
            fh = next(self._fh)
            self._handles[fh] = handle
            return fh

    def _handle(self, fh: int) -> object:
        h = self._handles.get(fh)
        if h is None:
            raise OSError(errno.EBADF, os.strerror(errno.EBADF))
        return h

    def _is_control(self, ino: int) -> bool:
        return ino == CONTROL_INO and self.config.allow_control

    def shadowed_names(self) -> list[str]:
        """Default-view entries at the top level hidden by reserved names."""
        return [
            e.name for e in self.store.list_dir(self.default, "")
            if e.name.startswith("@") or (e.name == CONTROL_NAME and self.config.allow_control)
        ]

    # -- lookup and attributes

    def lookup(self, parent: int, name: str) -> Entry:
        ppath = self.table.path(parent)
        if not ppath and name == CONTROL_NAME and self.config.allow_control:
            return Entry(CONTROL_INO, self._control_attr())
        return self._entry(_join(ppath, name))

    def forget(self, items: list[tuple[int, int]]) -> None:
        for ino, n in items:
            self.table.forget(ino, n)

    def getattr(self, ino: int, fh: int | None) -> Attr:
        if self._is_control(ino):
            return self._control_attr()
        if fh is not None:
            h = self._handles.get(fh)
            if isinstance(h, _WriteHandle):
                return self._attr(os.fstat(h.fd), ino)
        return self._attr(self._stat(self.table.path(ino)), ino)

    def setattr(self, ino: int, req: SetattrRequest, ctx: Context) -> Attr:
        if self._is_control(ino):
            return self._control_attr()
        path = self.table.path(ino)
        branch, rel = self._route(path)
        if req.mode is not None:
            self.store.chmod(branch, rel, req.mode)
        if req.uid is not None or req.gid is not None:
            self.store.chown(branch, rel, -1 if req.uid is None else req.uid, -1 if req.gid is None else req.gid)
        if req.size is not None:
            h = self._handles.get(req.fh) if req.fh is not None else None
            if isinstance(h, _WriteHandle):
                with self.store.writing(h.branch):
                    os.ftruncate(h.fd, req.size)
            else:
                self.store.truncate(branch, rel, req.size)
        if req.atime_ns is not None or req.mtime_ns is not None:
            now = time.time_ns()
            cur = self.store.stat(branch, rel)
            atime = cur.st_atime_ns if req.atime_ns is None else (now if req.atime_ns < 0 else req.atime_ns)
            mtime = cur.st_mtime_ns if req.mtime_ns is None else (now if req.mtime_ns < 0 else req.mtime_ns)
            self.store.utime(branch, rel, (atime, mtime))
        return self.getattr(ino, req.fh)

    def readlink(self, ino: int) -> str:
        branch, rel = self._route(self.table.path(ino))
        return self.store.readlink(branch, rel)

    def access(self, ino: int, mask: int, ctx: Context) -> None:
        self.getattr(ino, None)

    def statfs(self, ino: int) -> os.statvfs_result:
        return os.statvfs(self.store.store_dir)

    # -- namespace

    def mknod(self, parent: int, name: str, mode: int, rdev: int, ctx: Context) -> Entry:
        if not stat.S_ISREG(mode):
            raise OSError(errno.EOPNOTSUPP, "only regular files can be created in a branch", name)
        path = self._child(parent, name, creating=True)
        branch, rel = self._route(path)
        self.store.create_file(branch, rel, mode & 0o7777)
        self._own(branch, rel, ctx)
        return self._entry(path)

    def mkdir(self, parent: int, name: str, mode: int, ctx: Context) -> Entry:
        path = self._child(parent, name, creating=True)
        branch, rel = self._route(path)
        self.store.mkdir(branch, rel, mode & 0o7777)
        self._own(branch, rel, ctx)
        return self._entry(path)

    def symlink(self, parent: int, name: str, target: str, ctx: Context) -> Entry:
        path = self._child(parent, name, creating=True)
        branch, rel = self._route(path)
        self.store.symlink(branch, rel, target)
        self._own(branch, rel, ctx)
        return self._entry(path)

    def link(self, ino: int, parent: int, name: str) -> Entry:
        src = self.table.path(ino)
        dst = self._child(parent, name, creating=True)
        sb, srel = self._route(src)
        db, drel = self._route(dst)
        if sb != db:
            raise OSError(errno.EXDEV, os.strerror(errno.EXDEV))
        self.store.link(sb, srel, drel)
        return self._entry(dst)

    def unlink(self, parent: int, name: str) -> None:
        path = self._child(parent, name, creating=True)
        branch, rel = self._route(path)
        self.store.unlink(branch, rel)
        self.table.unlinked(path)

    def rmdir(self, parent: int, name: str) -> None:
        path = self._child(parent, name, creating=True)
        branch, rel = self._route(path)
        self.store.rmdir(branch, rel)
        self.table.unlinked(path)

    def rename(self, parent: int, name: str, newparent: int, newname: str, flags: int) -> None:
        if flags & ~kernel.RENAME_NOREPLACE:
            raise OSError(errno.EINVAL, "only RENAME_NOREPLACE is supported")
        src = self._child(parent, name, creating=True)
        dst = self._child(newparent, newname, creating=True)
        sb, srel = self._route(src)
        db, drel = self._route(dst)
        if sb != db:
            raise OSError(errno.EXDEV, "rename across branches", dst)
        self.store.rename(sb, srel, drel, noreplace=bool(flags & kernel.RENAME_NOREPLACE))
        self.table.moved(src, dst)

    # -- files

    def _open_write(self, ino: int, branch: str, rel: str, flags: int) -> int:
        phys = self.store.open_for_write(branch, rel)
        fd = os.open(phys, (flags & (os.O_ACCMODE | os.O_APPEND)) | os.O_CLOEXEC)
        return self._new_handle(_WriteHandle(ino, branch, fd))

    def open(self, ino: int, flags: int, ctx: Context) -> tuple[int, int]:
        if self._is_control(ino):
            return self._new_handle(_ControlHandle()), kernel.FOPEN_DIRECT_IO
        branch, rel = self._route(self.table.path(ino))
        if flags & os.O_ACCMODE == os.O_RDONLY:
            st = self.store.stat(branch, rel)
            if stat.S_ISDIR(st.st_mode):
                raise OSError(errno.EISDIR, os.strerror(errno.EISDIR))
            return self._new_handle(_ReadHandle(ino, branch)), 0
        return self._open_write(ino, branch, rel, flags), 0

    def create(self, parent: int, name: str, mode: int, flags: int, ctx: Context) -> tuple[Entry, int, int]:
        path = self._child(parent, name, creating=True)
        branch, rel = self._route(path)
        try:
            self.store.create_file(branch, rel, mode & 0o7777)
            self._own(branch, rel, ctx)
        except FileExistsError:
            if flags & os.O_EXCL:
                raise
        entry = self._entry(path)
        if flags & os.O_ACCMODE == os.O_RDONLY:
            fh = self._new_handle(_ReadHandle(entry.ino, branch))
        else:
            fh = self._open_write(entry.ino, branch, rel, flags)
        return entry, fh, 0

    def read(self, ino: int, fh: int, offset: int, size: int) -> bytes:
        h = self._handle(fh)
        if isinstance(h, _ReadHandle):
            gen = self.store.generation
            if h.gen != gen or h.phys is None:
                branch, rel = self._route(self.table.path(h.ino))
                h.phys = self.store.physical_path(branch, rel)
                h.gen = gen
            with self.cache.borrow(h.phys, gen) as fd:
                return os.pread(fd, size, offset)
        if isinstance(h, _WriteHandle):
            with self.store.reading(h.branch):
                return os.pread(h.fd, size, offset)
        if isinstance(h, _ControlHandle):
            return self._control_read(h, size)
        raise OSError(errno.EBADF, os.strerror(errno.EBADF))

    def write(self, ino: int, fh: int, offset: int, data: memoryview) -> int:
        h = self._handle(fh)
        if isinstance(h, _WriteHandle):
            with self.store.writing(h.branch):
                return os.pwrite(h.fd, data, offset)
        if isinstance(h, _ControlHandle):
            return self._control_write(h, bytes(data))
        raise OSError(errno.EBADF, os.strerror(errno.EBADF))

    def fsync(self, ino: int, fh: int, datasync: bool) -> None:
        # fsync is a no-op by default: durability is enforced at commit
        if not self.config.fsync_passthrough:
            return
        h = self._handles.get(fh)
        if isinstance(h, _WriteHandle):
            (os.fdatasync if datasync else os.fsync)(h.fd)

    def release(self, ino: int, fh: int) -> None:
        with self._hlock:
            h = self._handles.pop(fh, None)
        if isinstance(h, _WriteHandle):
            os.close(h.fd)

    # -- control file

    def _control_write(self, h: _ControlHandle, payload: bytes) -> int:
        cmds = split_commands(payload)
        with h.lock:
            for cmd in cmds:
                out = execute(self.store, cmd)
                if out is not None:
                    h.queued, h.text = out, None
        return len(payload)

    def _control_read(self, h: _ControlHandle, size: int) -> bytes:
        with h.lock:
            if h.text is None:
                h.text = (h.queued if h.queued is not None else format_listing(self.store)).encode()
                h.queued, h.pos = None, 0
            chunk = h.text[h.pos:h.pos + size]
            h.pos += len(chunk)
            if not chunk:
                h.text = None
            return chunk

    # -- directories

    def opendir(self, ino: int) -> int:
        path = self.table.path(ino)
        if not path:
            listing = self._root_listing()
        else:
            branch, rel = self._route(path)
            listing = [(e.name, e.kind) for e in self.store.list_dir(branch, rel)]
        entries = [DirEntryOut(".", ino, stat.S_IFDIR, 1), DirEntryOut("..", ROOT_INO, stat.S_IFDIR, 2)]
        for name, kind in listing:
            child = _join(path, name)
            ino_ = CONTROL_INO if child == CONTROL_NAME and not path else (self.table.peek(child) or _synthetic_ino(child))
            entries.append(DirEntryOut(name, ino_, kind, len(entries) + 1))
        return self._new_handle(_DirHandle(entries))

    def _root_listing(self) -> list[tuple[str, int]]:
        try:
            base = [
                (e.name, e.kind) for e in self.store.list_dir(self.default, "")
                if not e.name.startswith("@") and not (e.name == CONTROL_NAME and self.config.allow_control)
            ]
        except OSError:
            if self.default == ROOT:
                raise
            base = []
        out = base + [(f"@{m.id}", stat.S_IFDIR) for m in self.store.list_branches() if self.store.is_live(m.id)]
        if self.config.allow_control:
            out.append((CONTROL_NAME, stat.S_IFREG))
        return out

    def readdir(self, ino: int, fh: int, offset: int) -> list[DirEntryOut]:
        h = self._handle(fh)
        if not isinstance(h, _DirHandle):
            raise OSError(errno.EBADF, os.strerror(errno.EBADF))
        return h.entries[offset:]

    def releasedir(self, ino: int, fh: int) -> None:
        with self._hlock:
            self._handles.pop(fh, None)

    # -- xattrs

    def getxattr(self, ino: int, name: str) -> bytes:
        if self._is_control(ino):
            if name == DEFAULT_BRANCH_XATTR:
                return self.default.encode()
            if name == PID_XATTR:
                return str(os.getpid()).encode()
        raise OSError(errno.ENODATA, os.strerror(errno.ENODATA))

    def listxattr(self, ino: int) -> list[str]:
        return [DEFAULT_BRANCH_XATTR, PID_XATTR] if self._is_control(ino) else []

    def setxattr(self, ino: int, name: str, value: bytes, flags: int) -> None:
        raise OSError(errno.EOPNOTSUPP, os.strerror(errno.EOPNOTSUPP))

    def removexattr(self, ino: int, name: str) -> None:
        raise OSError(errno.EOPNOTSUPP, os.strerror(errno.EOPNOTSUPP))

    # -- ioctl

    def _branch_of(self, ino: int) -> str:
        if ino == CONTROL_INO:
            return self.default
        return self._route(self.table.path(ino))[0]

    def ioctl(self, ino: int, fh: int, cmd: int, in_data: bytes, out_size: int) -> tuple[int, bytes]:
        if cmd in (FS_IOC_BRANCH_CREATE, FS_IOC_BRANCH_CREATE_NAMED):
            parent = self._branch_of(ino)
            while True:
                with self._serial_lock:
                    serial = next(self._serial)
                name = f"{AUTO_BRANCH_PREFIX}{serial}"
                try:
                    self.store.create_branch(parent, name)
                    break
                except BranchExistsError:
                    continue
            out = name.encode().ljust(BRANCH_NAME_MAX, b"\0") if cmd == FS_IOC_BRANCH_CREATE_NAMED else b""
            return serial, out
        if cmd == FS_IOC_BRANCH_COMMIT:
            self.store.commit_branch(self._branch_of(ino))
            return 0, b""
        if cmd == FS_IOC_BRANCH_ABORT:
            self.store.abort_branch(self._branch_of(ino))
            return 0, b""
        raise OSError(errno.ENOTTY, os.strerror(errno.ENOTTY))

    def destroy(self) -> None:
        self.cache.close()

    def close(self) -> None:
        with self._hlock:
            handles = list(self._handles.values())
            self._handles.clear()
        for h in handles:
            if isinstance(h, _WriteHandle):
                os.close(h.fd)
        self.cache.close()
