"""FUSE kernel protocol: wire structs, mounting, and a threaded request loop.

This speaks the ``/dev/fuse`` protocol directly (ABI 7.31) so no libfuse is
needed.  An operations object receives decoded arguments and returns Python
values; :class:`FuseSession` turns those into replies.  Raising ``OSError``
from an operation replies with its errno.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import errno
import logging
import os
import shutil
import socket
import stat
import struct
import subprocess
import threading
from dataclasses import dataclass
from typing import Any, Callable, NamedTuple

logger = logging.getLogger(__name__)

KERNEL_VERSION = 7
KERNEL_MINOR = 31

# opcodes
LOOKUP = 1
FORGET = 2
GETATTR = 3
SETATTR = 4
READLINK = 5
SYMLINK = 6
MKNOD = 8
MKDIR = 9
UNLINK = 10
RMDIR = 11
RENAME = 12
LINK = 13
OPEN = 14
READ = 15
WRITE = 16
STATFS = 17
RELEASE = 18
FSYNC = 20
SETXATTR = 21
GETXATTR = 22
LISTXATTR = 23
REMOVEXATTR = 24
FLUSH = 25
INIT = 26
OPENDIR = 27
READDIR = 28
RELEASEDIR = 29
FSYNCDIR = 30
ACCESS = 34
CREATE = 35
INTERRUPT = 36
DESTROY = 38
IOCTL = 39
BATCH_FORGET = 42
RENAME2 = 45

# init flags
FUSE_ASYNC_READ = 1 << 0
FUSE_BIG_WRITES = 1 << 5
FUSE_IOCTL_DIR = 1 << 11
FUSE_AUTO_INVAL_DATA = 1 << 12
FUSE_MAX_PAGES = 1 << 22

# open reply flags
FOPEN_DIRECT_IO = 1 << 0

# setattr valid bits
FATTR_MODE = 1 << 0
FATTR_UID = 1 << 1
FATTR_GID = 1 << 2
FATTR_SIZE = 1 << 3
FATTR_ATIME = 1 << 4
FATTR_MTIME = 1 << 5
FATTR_FH = 1 << 6
FATTR_ATIME_NOW = 1 << 7
FATTR_MTIME_NOW = 1 << 8

FUSE_GETATTR_FH = 1 << 0
RENAME_NOREPLACE = 1 << 0
RENAME_EXCHANGE = 1 << 1

MAX_WRITE = 1 << 20
MAX_PAGES = 256
BUFFER_SIZE = MAX_WRITE + 4096

IN_HEADER = struct.Struct("<IIQQIIIHH")
OUT_HEADER = struct.Struct("<IiQ")
INIT_IN = struct.Struct("<IIII")
INIT_OUT = struct.Struct("<IIIIHHIIHH8I")
ATTR = struct.Struct("<QQQQQQIIIIIIIIII")
ENTRY_OUT_HEAD = struct.Struct("<QQQQII")
ATTR_OUT_HEAD = struct.Struct("<QII")
GETATTR_IN = struct.Struct("<IIQ")
SETATTR_IN = struct.Struct("<IIQQQQQQIIIIIIII")
MKNOD_IN = struct.Struct("<IIII")
MKDIR_IN = struct.Struct("<II")
RENAME_IN = struct.Struct("<Q")
RENAME2_IN = struct.Struct("<QII")
LINK_IN = struct.Struct("<Q")
OPEN_IN = struct.Struct("<II")
OPEN_OUT = struct.Struct("<QII")
CREATE_IN = struct.Struct("<IIII")
READ_IN = struct.Struct("<QQIIQII")
WRITE_IN = struct.Struct("<QQIIQII")
WRITE_OUT = struct.Struct("<II")
RELEASE_IN = struct.Struct("<QIIQ")
FSYNC_IN = struct.Struct("<QII")
SETXATTR_IN = struct.Struct("<II")
GETXATTR_IN = struct.Struct("<II")
GETXATTR_OUT = struct.Struct("<II")
ACCESS_IN = struct.Struct("<II")
FORGET_IN = struct.Struct("<Q")
BATCH_FORGET_IN = struct.Struct("<II")
FORGET_ONE = struct.Struct("<QQ")
KSTATFS = struct.Struct("<QQQQQIIII6I")
DIRENT_HEAD = struct.Struct("<QQII")
IOCTL_IN = struct.Struct("<QIIQII")
IOCTL_OUT = struct.Struct("<iIII")

assert IN_HEADER.size == 40 and ATTR.size == 88 and ENTRY_OUT_HEAD.size + ATTR.size == 128
assert SETATTR_IN.size == 88 and READ_IN.size == 40 and INIT_OUT.size == 64 and KSTATFS.size == 80


class Attr(NamedTuple):
    ino: int
    mode: int
    nlink: int
    uid: int
    gid: int
    size: int
    blocks: int
    blksize: int
    atime_ns: int
    mtime_ns: int
    ctime_ns: int
    rdev: int = 0

    @classmethod
    def from_stat(cls, st: os.stat_result, ino: int, nlink: int | None = None) -> Attr:
        return cls(
            ino,
            st.st_mode,
            st.st_nlink if nlink is None else nlink,
            st.st_uid,
            st.st_gid,
            st.st_size,
            st.st_blocks,
            st.st_blksize,
            st.st_atime_ns,
            st.st_mtime_ns,
            st.st_ctime_ns,
            0,
        )

    def pack(self) -> bytes:
        a_s, a_n = divmod(self.atime_ns, 10**9)
        m_s, m_n = divmod(self.mtime_ns, 10**9)
        c_s, c_n = divmod(self.ctime_ns, 10**9)
        return ATTR.pack(
            self.ino, self.size, self.blocks, a_s, m_s, c_s, a_n, m_n, c_n,
            self.mode, self.nlink, self.uid, self.gid, self.rdev, self.blksize, 0,
        )


@dataclass
class Entry:
    """Reply to any request that hands the kernel a new inode reference."""

    ino: int
    attr: Attr

    def pack(self) -> bytes:
        return ENTRY_OUT_HEAD.pack(self.ino, 0, 0, 0, 0, 0) + self.attr.pack()


@dataclass
class SetattrRequest:
    valid: int
    fh: int | None
    size: int | None
    mode: int | None
    uid: int | None
    gid: int | None
    atime_ns: int | None  # -1 means "now"
    mtime_ns: int | None


@dataclass
class Context:
    uid: int
    gid: int
    pid: int


class DirEntryOut(NamedTuple):
    name: str
    ino: int
    kind: int  # stat.S_IFMT bits
    offset: int  # cookie of the *next* entry


def _cstr(buf: memoryview, start: int = 0) -> tuple[str, int]:
    end = bytes(buf[start:]).index(b"\0")
    return os.fsdecode(bytes(buf[start:start + end])), start + end + 1


def pack_dirents(entries: list[DirEntryOut], size: int) -> bytes:
    out = bytearray()
    for e in entries:
        name = os.fsencode(e.name)
        rec = DIRENT_HEAD.pack(e.ino, e.offset, len(name), stat.S_IFMT(e.kind) >> 12) + name
        rec += b"\0" * (-len(rec) % 8)
        if len(out) + len(rec) > size:
            break
        out += rec
    return bytes(out)


def pack_statfs(sv: os.statvfs_result) -> bytes:
    return KSTATFS.pack(
        sv.f_blocks, sv.f_bfree, sv.f_bavail, sv.f_files, sv.f_ffree,
        sv.f_bsize, sv.f_namemax, sv.f_frsize, 0, 0, 0, 0, 0, 0, 0,
    )


# ------------------------------------------------------------------ mounting

_libc = ctypes.CDLL(ctypes.util.find_library("c") or None, use_errno=True)
MS_NOSUID = 2
MS_NODEV = 4
MNT_DETACH = 2


def _fusermount() -> str | None:
    return shutil.which("fusermount3") or shutil.which("fusermount")


def mount(mountpoint: str, fsname: str, *, allow_other: bool, root_mode: int) -> int:
    """Mount a FUSE filesystem at ``mountpoint`` and return the channel fd."""
    opts = [f"rootmode={stat.S_IFMT(root_mode):o}", f"user_id={os.getuid()}", f"group_id={os.getgid()}", "default_permissions"]
    if allow_other:
        opts.append("allow_other")
    if os.geteuid() == 0:
        fd = os.open("/dev/fuse", os.O_RDWR | os.O_CLOEXEC)
        data = ",".join([f"fd={fd}"] + opts).encode()
        rc = _libc.mount(fsname.encode(), os.fsencode(mountpoint), f"fuse.{fsname}".encode(), MS_NOSUID | MS_NODEV, data)
        if rc != 0:
            err = ctypes.get_errno()
            os.close(fd)
            raise OSError(err, f"mount: {os.strerror(err)}", mountpoint)
        return fd
    helper = _fusermount()
    if helper is None:
        raise PermissionError(errno.EPERM, "mounting needs root or a fusermount helper", mountpoint)
    ours, theirs = socket.socketpair(socket.AF_UNIX, socket.SOCK_STREAM)
    try:
        env = dict(os.environ, _FUSE_COMMFD=str(theirs.fileno()))
        opt = ",".join([f"fsname={fsname}", f"subtype={fsname}"] + [o for o in opts if not o.startswith(("rootmode", "user_id", "group_id"))])
        proc = subprocess.Popen([helper, "-o", opt, "--", mountpoint], env=env, pass_fds=(theirs.fileno(),))
        theirs.close()
        _, fds, _, _ = socket.recv_fds(ours, 1, 1)
        proc.wait()
        if not fds:
            raise OSError(errno.EIO, f"{helper} did not hand over a channel", mountpoint)
        os.set_inheritable(fds[0], False)
        return fds[0]
    finally:
        ours.close()


def unmount(mountpoint: str) -> None:
    if os.geteuid() == 0:
        if _libc.umount2(os.fsencode(mountpoint), MNT_DETACH) != 0:
            err = ctypes.get_errno()
            raise OSError(err, f"umount: {os.strerror(err)}", mountpoint)
        return
    helper = _fusermount()
    if helper is None:
        raise PermissionError(errno.EPERM, "unmounting needs root or a fusermount helper", mountpoint)
    subprocess.run([helper, "-u", "-z", mountpoint], check=True)


def is_mounted(mountpoint: str) -> bool:
    target = os.path.realpath(mountpoint)
    try:
        with open("/proc/self/mountinfo", encoding="utf-8") as f:
            for line in f:
                fields = line.split()
                if len(fields) > 4 and fields[4].encode().decode("unicode_escape") == target:
                    return True
    except OSError:
        pass
    return False


# ------------------------------------------------------------------ session

Handler = Callable[["FuseSession", Any, int, memoryview], Any]


class FuseSession:
    """Reads requests from a channel fd and dispatches them to ``ops``."""

    def __init__(self, ops: Any, fd: int, threads: int = 8):
        self.ops = ops
        self.fd = fd
        self.threads = threads
        self.proto_minor = KERNEL_MINOR
        self._workers: list[threading.Thread] = []
        self._stopping = threading.Event()

    # -- loop

    def serve(self) -> None:
        for i in range(self.threads):
            t = threading.Thread(target=self._worker, name=f"fuse-{i}", daemon=True)
            t.start()
            self._workers.append(t)
        for t in self._workers:
            t.join()

    def stop(self) -> None:
        self._stopping.set()

    def _worker(self) -> None:
        buf = bytearray(BUFFER_SIZE)
        view = memoryview(buf)
        while not self._stopping.is_set():
            try:
                n = os.readv(self.fd, [buf])
            except InterruptedError:
                continue
            except OSError as e:
                if e.errno == errno.ENOENT:  # request interrupted before we read it
                    continue
                if e.errno in (errno.ENODEV, errno.EBADF):
                    break
                raise
            if n == 0:
                break
            self._handle(view[:n])
        self._stopping.set()

    def _reply(self, unique: int, error: int, payload: Any = b"") -> None:
        if isinstance(payload, (list, tuple)):
            parts = list(payload)
        else:
            parts = [payload] if payload else []
        total = OUT_HEADER.size + sum(len(p) for p in parts)
        try:
            os.writev(self.fd, [OUT_HEADER.pack(total, -error, unique), *parts])
        except OSError as e:
            if e.errno not in (errno.ENOENT, errno.ENODEV, errno.EBADF):
                logger.warning("reply for %d failed: %s", unique, e)

    def _handle(self, msg: memoryview) -> None:
        _, opcode, unique, nodeid, uid, gid, pid, _, _ = IN_HEADER.unpack_from(msg)
        body = msg[IN_HEADER.size:]
        handler = _HANDLERS.get(opcode)
        if handler is None:
            if opcode not in (FORGET, BATCH_FORGET, INTERRUPT):
                self._reply(unique, errno.ENOSYS)
            return
        ctx = Context(uid, gid, pid)
        try:
            result = handler(self, ctx, nodeid, body)
        except OSError as e:
            if opcode in _NO_REPLY:
                return
            code = e.errno or errno.EIO
            if code != errno.ENOENT or opcode != LOOKUP:
                logger.debug("op %d on %d failed: %s", opcode, nodeid, e)
            self._reply(unique, code)
            return
        except Exception:
            logger.exception("op %d on node %d crashed", opcode, nodeid)
            if opcode not in _NO_REPLY:
                self._reply(unique, errno.EIO)
            return
        if opcode in _NO_REPLY:
            return
        self._reply(unique, 0, result if result is not None else b"")

    # -- handlers: each returns the reply payload

    def _init(self, ctx: Context, nodeid: int, body: memoryview) -> bytes:
        major, minor, max_readahead, flags = INIT_IN.unpack_from(body)
        if major != KERNEL_VERSION:
            raise OSError(errno.EPROTO, f"kernel protocol {major}.{minor} unsupported")
        self.proto_minor = min(minor, KERNEL_MINOR)
        want = FUSE_ASYNC_READ | FUSE_BIG_WRITES | FUSE_IOCTL_DIR | FUSE_AUTO_INVAL_DATA | FUSE_MAX_PAGES
        logger.debug("kernel protocol %d.%d", major, minor)
        return INIT_OUT.pack(
            KERNEL_VERSION, KERNEL_MINOR, max_readahead, flags & want,
            16, 12, MAX_WRITE, 1, MAX_PAGES, 0, *([0] * 8),
        )

    def _lookup(self, ctx, nodeid, body):
        name, _ = _cstr(body)
        return self.ops.lookup(nodeid, name).pack()

    def _forget(self, ctx, nodeid, body):
        (n,) = FORGET_IN.unpack_from(body)
        self.ops.forget([(nodeid, n)])

    def _batch_forget(self, ctx, nodeid, body):
        count, _ = BATCH_FORGET_IN.unpack_from(body)
        items = [FORGET_ONE.unpack_from(body, BATCH_FORGET_IN.size + i * FORGET_ONE.size) for i in range(count)]
        self.ops.forget(items)

    def _getattr(self, ctx, nodeid, body):
        flags, _, fh = GETATTR_IN.unpack_from(body)
        attr = self.ops.getattr(nodeid, fh if flags & FUSE_GETATTR_FH else None)
        return ATTR_OUT_HEAD.pack(0, 0, 0) + attr.pack()

    def _setattr(self, ctx, nodeid, body):
        (valid, _, fh, size, _, atime, mtime, _, atimensec, mtimensec, _, mode, _, uid, gid, _) = SETATTR_IN.unpack_from(body)
        req = SetattrRequest(
            valid,
            fh if valid & FATTR_FH else None,
            size if valid & FATTR_SIZE else None,
            mode if valid & FATTR_MODE else None,
            uid if valid & FATTR_UID else None,
            gid if valid & FATTR_GID else None,
            -1 if valid & FATTR_ATIME_NOW else (atime * 10**9 + atimensec if valid & FATTR_ATIME else None),
            -1 if valid & FATTR_MTIME_NOW else (mtime * 10**9 + mtimensec if valid & FATTR_MTIME else None),
        )
        attr = self.ops.setattr(nodeid, req, ctx)
        return ATTR_OUT_HEAD.pack(0, 0, 0) + attr.pack()

    def _readlink(self, ctx, nodeid, body):
        return os.fsencode(self.ops.readlink(nodeid))

    def _symlink(self, ctx, nodeid, body):
        name, pos = _cstr(body)
        target, _ = _cstr(body, pos)
        return self.ops.symlink(nodeid, name, target, ctx).pack()

    def _mknod(self, ctx, nodeid, body):
        mode, rdev, _, _ = MKNOD_IN.unpack_from(body)
        name, _ = _cstr(body, MKNOD_IN.size)
        return self.ops.mknod(nodeid, name, mode, rdev, ctx).pack()

    def _mkdir(self, ctx, nodeid, body):
        mode, _ = MKDIR_IN.unpack_from(body)
        name, _ = _cstr(body, MKDIR_IN.size)
        return self.ops.mkdir(nodeid, name, mode, ctx).pack()

    def _unlink(self, ctx, nodeid, body):
        self.ops.unlink(nodeid, _cstr(body)[0])

    def _rmdir(self, ctx, nodeid, body):
        self.ops.rmdir(nodeid, _cstr(body)[0])

    def _rename(self, ctx, nodeid, body):
        (newdir,) = RENAME_IN.unpack_from(body)
        old, pos = _cstr(body, RENAME_IN.size)
        new, _ = _cstr(body, pos)
        self.ops.rename(nodeid, old, newdir, new, 0)

    def _rename2(self, ctx, nodeid, body):
        newdir, flags, _ = RENAME2_IN.unpack_from(body)
        old, pos = _cstr(body, RENAME2_IN.size)
        new, _ = _cstr(body, pos)
        self.ops.rename(nodeid, old, newdir, new, flags)

    def _link(self, ctx, nodeid, body):
        (old,) = LINK_IN.unpack_from(body)
        name, _ = _cstr(body, LINK_IN.size)
        return self.ops.link(old, nodeid, name).pack()

    def _open(self, ctx, nodeid, body):
        flags, _ = OPEN_IN.unpack_from(body)
        fh, open_flags = self.ops.open(nodeid, flags, ctx)
        return OPEN_OUT.pack(fh, open_flags, 0)

    def _read(self, ctx, nodeid, body):
        fh, offset, size, *_ = READ_IN.unpack_from(body)
        return self.ops.read(nodeid, fh, offset, size)

    def _write(self, ctx, nodeid, body):
        fh, offset, size, *_ = WRITE_IN.unpack_from(body)
        data = body[WRITE_IN.size:WRITE_IN.size + size]
        return WRITE_OUT.pack(self.ops.write(nodeid, fh, offset, data), 0)

    def _statfs(self, ctx, nodeid, body):
        return pack_statfs(self.ops.statfs(nodeid))

    def _release(self, ctx, nodeid, body):
        fh, *_ = RELEASE_IN.unpack_from(body)
        self.ops.release(nodeid, fh)

    def _releasedir(self, ctx, nodeid, body):
        fh, *_ = RELEASE_IN.unpack_from(body)
        self.ops.releasedir(nodeid, fh)

    def _fsync(self, ctx, nodeid, body):
        fh, flags, _ = FSYNC_IN.unpack_from(body)
        self.ops.fsync(nodeid, fh, bool(flags & 1))

    def _fsyncdir(self, ctx, nodeid, body):
        return None

    def _flush(self, ctx, nodeid, body):
        return None

    def _setxattr(self, ctx, nodeid, body):
        size, flags = SETXATTR_IN.unpack_from(body)
        name, pos = _cstr(body, SETXATTR_IN.size)
        self.ops.setxattr(nodeid, name, bytes(body[pos:pos + size]), flags)

    def _getxattr(self, ctx, nodeid, body):
        size, _ = GETXATTR_IN.unpack_from(body)
        name, _ = _cstr(body, GETXATTR_IN.size)
        return self._sized(self.ops.getxattr(nodeid, name), size)

    def _listxattr(self, ctx, nodeid, body):
        size, _ = GETXATTR_IN.unpack_from(body)
        names = self.ops.listxattr(nodeid)
        return self._sized(b"".join(os.fsencode(n) + b"\0" for n in names), size)

    @staticmethod
    def _sized(value: bytes, size: int) -> bytes:
        if size == 0:
            return GETXATTR_OUT.pack(len(value), 0)
        if len(value) > size:
            raise OSError(errno.ERANGE, os.strerror(errno.ERANGE))
        return value

    def _removexattr(self, ctx, nodeid, body):
        self.ops.removexattr(nodeid, _cstr(body)[0])

    def _opendir(self, ctx, nodeid, body):
        return OPEN_OUT.pack(self.ops.opendir(nodeid), 0, 0)

    def _readdir(self, ctx, nodeid, body):
        fh, offset, size, *_ = READ_IN.unpack_from(body)
        return pack_dirents(self.ops.readdir(nodeid, fh, offset), size)

    def _access(self, ctx, nodeid, body):
        mask, _ = ACCESS_IN.unpack_from(body)
        self.ops.access(nodeid, mask, ctx)

    def _create(self, ctx, nodeid, body):
        flags, mode, _, _ = CREATE_IN.unpack_from(body)
        name, _ = _cstr(body, CREATE_IN.size)
        entry, fh, open_flags = self.ops.create(nodeid, name, mode, flags, ctx)
        return entry.pack() + OPEN_OUT.pack(fh, open_flags, 0)

    def _destroy(self, ctx, nodeid, body):
        self.ops.destroy()
        self.stop()

    def _ioctl(self, ctx, nodeid, body):
        fh, flags, cmd, arg, in_size, out_size = IOCTL_IN.unpack_from(body)
        in_data = bytes(body[IOCTL_IN.size:IOCTL_IN.size + in_size])
        result, out = self.ops.ioctl(nodeid, fh, cmd, in_data, out_size)
        out = out[:out_size]
        return IOCTL_OUT.pack(result, 0, 0, 0) + out


_NO_REPLY = {FORGET, BATCH_FORGET}

_HANDLERS: dict[int, Callable] = {
    INIT: FuseSession._init,
    LOOKUP: FuseSession._lookup,
    FORGET: FuseSession._forget,
    BATCH_FORGET: FuseSession._batch_forget,
    GETATTR: FuseSession._getattr,
    SETATTR: FuseSession._setattr,
    READLINK: FuseSession._readlink,
    SYMLINK: FuseSession._symlink,
    MKNOD: FuseSession._mknod,
    MKDIR: FuseSession._mkdir,
    UNLINK: FuseSession._unlink,
    RMDIR: FuseSession._rmdir,
    RENAME: FuseSession._rename,
    RENAME2: FuseSession._rename2,
    LINK: FuseSession._link,
    OPEN: FuseSession._open,
    READ: FuseSession._read,
    WRITE: FuseSession._write,
    STATFS: FuseSession._statfs,
    RELEASE: FuseSession._release,
    FSYNC: FuseSession._fsync,
    SETXATTR: FuseSession._setxattr,
    GETXATTR: FuseSession._getxattr,
    LISTXATTR: FuseSession._listxattr,
    REMOVEXATTR: FuseSession._removexattr,
    FLUSH: FuseSession._flush,
    OPENDIR: FuseSession._opendir,
    READDIR: FuseSession._readdir,
    RELEASEDIR: FuseSession._releasedir,
    FSYNCDIR: FuseSession._fsyncdir,
    ACCESS: FuseSession._access,
    CREATE: FuseSession._create,
    DESTROY: FuseSession._destroy,
    IOCTL: FuseSession._ioctl,
}
