"""Run one mount in the foreground until it is unmounted or signalled."""

from __future__ import annotations

import logging
import os
import signal
import subprocess
import sys
import threading
import time
from typing import Callable

from ..store import BranchStore
from . import kernel
from .control import CONTROL_NAME
from .fs import BranchFS, MountConfig

logger = logging.getLogger(__name__)

FSNAME = "branchfs"


def serve(config: MountConfig, ready: Callable[[], None] | None = None, *, install_signals: bool = True) -> None:
    config.validate()
    store = BranchStore(config.base_dir, config.store_dir)
    fs = BranchFS(store, config)
    for name in fs.shadowed_names():
        logger.warning("base entry %r is shadowed by a reserved name at the mount root", name)
    allow_other = os.geteuid() == 0 if config.allow_other is None else config.allow_other
    root_mode = os.stat(store.physical_path(config.default_branch, "")).st_mode
    fd = kernel.mount(config.mountpoint, FSNAME, allow_other=allow_other, root_mode=root_mode)
    session = kernel.FuseSession(fs, fd, threads=config.threads)
    stopped = threading.Event()

    def shutdown(*_: object) -> None:
        if stopped.is_set():
            return
        stopped.set()
        try:
            kernel.unmount(config.mountpoint)
        except OSError as e:
            logger.warning("unmount failed: %s", e)
        session.stop()

    if install_signals:
        signal.signal(signal.SIGTERM, shutdown)
        signal.signal(signal.SIGINT, shutdown)
        signal.signal(signal.SIGHUP, shutdown)
    logger.info("mounted %s on %s (store %s)", config.base_dir, config.mountpoint, config.store_dir)
    runner = threading.Thread(target=session.serve, name="fuse-session", daemon=True)
    runner.start()
    if ready is not None:
        ready()
    try:
        while runner.is_alive() and not stopped.is_set():
            runner.join(0.25)
    finally:
        if not stopped.is_set() and kernel.is_mounted(config.mountpoint):
            shutdown()
        fs.close()
        try:
            os.close(fd)
        except OSError:
            pass
    logger.info("unmounted %s", config.mountpoint)


def daemon_argv(config: MountConfig, log_level: str = "warning") -> list[str]:
    """Command line that runs ``config`` in the foreground in a fresh interpreter."""
    argv = [
        sys.executable, "-m", "branchfs.cli", "--log-level", log_level, "mount",
        "--base", config.base_dir, "--mountpoint", config.mountpoint, "--store", config.store_dir,
        "--default-branch", config.default_branch, "--fd-cache", str(config.fd_cache_capacity),
        "--threads", str(config.threads), "--foreground",
    ]
    if not config.allow_control:
        argv.append("--no-control")
    if config.fsync_passthrough:
        argv.append("--fsync-passthrough")
    return argv


def spawn(config: MountConfig, log_path: str, log_level: str = "warning", timeout: float = 30.0) -> subprocess.Popen:
    """Start a detached daemon for ``config`` and return once the mount is live.

    The daemon's output goes to ``log_path``; a failed start raises
    ``RuntimeError`` carrying the log tail.
    """
    config.validate()
    r, w = os.pipe()
    argv = daemon_argv(config, log_level) + ["--ready-fd", str(w)]
    with open(log_path, "ab") as log:
        proc = subprocess.Popen(
            argv, stdin=subprocess.DEVNULL, stdout=log, stderr=log,
            pass_fds=(w,), start_new_session=True, close_fds=True,
        )
    os.close(w)
    deadline = time.monotonic() + timeout
    status = b""
    with os.fdopen(r, "rb", buffering=0) as pipe:
        os.set_blocking(pipe.fileno(), False)
        while not status and time.monotonic() < deadline:
            try:
                chunk = pipe.read(64)
            except BlockingIOError:
                chunk = None
            if chunk:
                status = chunk
            elif chunk == b"" or proc.poll() is not None:
                break
            else:
                time.sleep(0.01)
    if status.startswith(b"ready"):
        return proc
    if proc.poll() is None:
        proc.kill()
    proc.wait()
    with open(log_path, "rb") as f:
        tail = f.read()[-2000:].decode(errors="replace")
    raise RuntimeError(f"daemon failed to mount (exit {proc.returncode}):\n{tail}")


def stop(mountpoint: str, proc: subprocess.Popen | None = None, timeout: float = 10.0) -> None:
    """Unmount and wait for the serving daemon to exit."""
    if kernel.is_mounted(mountpoint):
        kernel.unmount(mountpoint)
    if proc is not None:
        try:
            proc.wait(timeout)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()


class Mounted:
    """Context manager owning one daemon process and its mount."""

    def __init__(self, config: MountConfig, log_path: str | None = None, log_level: str = "warning"):
        self.config = config
        self.log_path = log_path or os.path.join(config.store_dir, "daemon.log")
        self.log_level = log_level
        self.proc: subprocess.Popen | None = None

    @property
    def mountpoint(self) -> str:
        return self.config.mountpoint

    @property
    def control(self) -> str:
        return os.path.join(self.config.mountpoint, CONTROL_NAME)

    def branch_path(self, branch: str, *parts: str) -> str:
        return os.path.join(self.config.mountpoint, f"@{branch}", *parts)

    def __enter__(self) -> Mounted:
        os.makedirs(self.config.store_dir, exist_ok=True)
        self.proc = spawn(self.config, self.log_path, self.log_level)
        return self

    def __exit__(self, *exc: object) -> None:
        stop(self.config.mountpoint, self.proc)
