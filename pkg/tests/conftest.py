from __future__ import annotations

import os
import pathlib

import pytest

from branchfs.store import BranchStore


def write_tree(root: pathlib.Path, files: dict[str, bytes | str]) -> None:
    for rel, content in files.items():
        p = root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, str):
            content = content.encode()
        p.write_bytes(content)


@pytest.fixture
def base(tmp_path: pathlib.Path) -> pathlib.Path:
    b = tmp_path / "base"
    b.mkdir()
    write_tree(b, {"README": "hello\n", "src/main.py": "print(1)\n", "src/lib/util.py": "x = 1\n", "a.txt": "A"})
    os.symlink("README", b / "link")
    return b


@pytest.fixture
def store(tmp_path: pathlib.Path, base: pathlib.Path) -> BranchStore:
    return BranchStore(base, tmp_path / "store", durable_commit=False)


def can_mount() -> bool:
    from branchfs.vfs import kernel

    if not os.path.exists("/dev/fuse"):
        return False
    return os.geteuid() == 0 or kernel._fusermount() is not None


requires_mount = pytest.mark.skipif(not can_mount(), reason="FUSE mounting is not available here")


@pytest.fixture
def make_mount(tmp_path: pathlib.Path):
    """Factory starting daemons over ``base``; every mount is torn down at exit."""
    from branchfs.vfs.daemon import Mounted
    from branchfs.vfs.fs import MountConfig

    if not can_mount():
        pytest.skip("FUSE mounting is not available here")
    live: list[Mounted] = []

    def factory(base_dir: pathlib.Path, tag: str = "m", **options) -> Mounted:
        mnt = tmp_path / f"{tag}-mnt"
        mnt.mkdir(exist_ok=True)
        store_dir = options.pop("store_dir", tmp_path / f"{tag}-store")
        config = MountConfig(base_dir=str(base_dir), mountpoint=str(mnt), store_dir=str(store_dir), **options)
        m = Mounted(config).__enter__()
        live.append(m)
        return m

    yield factory
    for m in reversed(live):
        m.__exit__(None, None, None)


@pytest.fixture
def mounted(make_mount, base):
    return make_mount(base)


# -- acceptance reporting: one pass/fail line per criterion

_CRITERIA: dict[int, tuple[str, str, list[str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    notes = getattr(item, "criterion_notes", [])
    if report.when == "call" or (report.when == "setup" and not report.passed):
        verdict = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _CRITERIA[number] = (title, verdict, notes)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict, notes = _CRITERIA[number]
        extra = f"  ({'; '.join(notes)})" if notes else ""
        terminalreporter.write_line(f"criterion {number:2d} {verdict}: {title}{extra}")


@pytest.fixture
def note(request):
    """Attach a short measurement note to the criterion line."""
    request.node.criterion_notes = []

    def add(text: str) -> None:
        request.node.criterion_notes.append(text)
        print(text)

    return add
