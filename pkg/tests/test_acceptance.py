"""Exit criteria, one test per criterion.

A summary line per criterion is printed at the end of the run.
"""

from __future__ import annotations

import errno
import itertools
import json
import multiprocessing
import os
import random
import shutil
import subprocess
import sys
import time

import pytest

from branchfs import bench, cli
from branchfs import orchestrator as orch
from branchfs.errors import StaleBranchError
from branchfs.store import ROOT, BranchStore
from branchfs.treehash import snapshot_dir, tree_hash, view_hash
from branchfs.vfs.control import parse_listing

from .conftest import can_mount, write_tree
from .fuzz_driver import MAX_DEPTH, Driver

pytestmark = pytest.mark.acceptance

needs_mount = pytest.mark.skipif(not can_mount(), reason="FUSE mounting is not available here")


def ctl_write(path: str, line: str) -> None:
    fd = os.open(path, os.O_WRONLY)
    try:
        os.write(fd, line.encode())
    finally:
        os.close(fd)


def ctl_states(path: str) -> dict[str, str]:
    with open(path) as f:
        return {n: s for n, _, s, _ in parse_listing(f.read())}


# -- 1 ---------------------------------------------------------------------


@pytest.mark.criterion(1, "oracle equivalence over 10 seeded sequences of >= 1000 ops, depth <= 4")
def test_oracle_equivalence(tmp_path, note):
    started = time.monotonic()
    kinds: set[str] = set()
    compares = deepest = 0
    for seed in range(10):
        (tmp_path / f"s{seed}").mkdir()
        d = Driver(1000 + seed, tmp_path / f"s{seed}")
        while d.stats.ops < 1000:
            d.step()
            deepest = max(deepest, max(d.model.depth(b) for b in d.model.branches))
        d.compare_all()
        kinds |= set(d.stats.kinds)
        compares += d.stats.compares
    elapsed = time.monotonic() - started
    assert {"fork", "write", "truncate", "mkdir", "delete", "rename", "commit", "abort"} <= kinds
    assert deepest <= MAX_DEPTH
    assert elapsed < 120
    note(f"{compares} view comparisons, max depth {deepest}, {elapsed:.1f}s")


# -- 2 ---------------------------------------------------------------------


def _committer(ctl: str, barrier, tasks, results) -> None:
    while True:
        name = tasks.get()
        if name is None:
            return
        barrier.wait()
        try:
            ctl_write(ctl, f"commit {name}\n")
            results.put((name, 0))
        except OSError as e:
            results.put((name, e.errno))


@needs_mount
@pytest.mark.criterion(2, "first-commit-wins: 100 trials of 8 parallel committers, plus all 3! orders")
def test_first_commit_wins(make_mount, tmp_path, note):
    # exhaustive completion orders for N=3 on the store itself
    for order in itertools.permutations(range(3)):
        base = tmp_path / ("perm-" + "".join(map(str, order)))
        base.mkdir()
        store = BranchStore(base, tmp_path / (base.name + "-store"), durable_commit=False)
        names = [f"b{i}" for i in range(3)]
        store.create_branch_group(ROOT, names)
        for i in names:
            store.create_file(i, "who")
            store.write_file(i, "who", 0, i.encode())
        outcomes = []
        for i in order:
            try:
                store.commit_branch(names[i])
                outcomes.append("ok")
            except StaleBranchError:
                outcomes.append("stale")
        assert outcomes == ["ok", "stale", "stale"]
        assert (base / "who").read_text() == names[order[0]]

    base = tmp_path / "race-base"
    write_tree(base, {"f": "base"})
    m = make_mount(base, tag="race")
    n = 8
    ctx = multiprocessing.get_context("fork")
    tasks, results_q = ctx.Queue(), ctx.Queue()
    barrier = ctx.Barrier(n)
    workers = [ctx.Process(target=_committer, args=(m.control, barrier, tasks, results_q)) for _ in range(n)]
    for w in workers:
        w.start()
    try:
        for trial in range(100):
            names = [f"t{trial}-{i}" for i in range(n)]
            ctl_write(m.control, "create root " + " ".join(names) + "\n")
            for name in names:
                with open(m.branch_path(name, "f"), "w") as f:
                    f.write(name)
            for name in names:
                tasks.put(name)
            results = dict(results_q.get(timeout=60) for _ in range(n))
            winners = [k for k, v in results.items() if v == 0]
            assert len(winners) == 1, results
            assert sorted(v for v in results.values() if v) == [errno.ESTALE] * (n - 1)
            assert (base / "f").read_text() == winners[0]
            for name in names:
                if name != winners[0]:
                    ctl_write(m.control, f"abort {name}\n")
    finally:
        for _ in workers:
            tasks.put(None)
        for w in workers:
            w.join(10)
    note("100/100 trials had exactly 1 winner and 7 ESTALE; 6/6 orders correct")


# -- 3 ---------------------------------------------------------------------


def _mutate(store: BranchStore, branch: str, rng: random.Random, budget: int) -> int:
    """Random writes, creates, deletes and renames; returns bytes written."""
    written = 0
    files = [e.name for e in store.list_dir(branch, "src")] if rng.random() < 0.5 else []
    for f in files:
        if rng.random() < 0.5:
            store.delete(branch, f"src/{f}")
    store.mkdir(branch, "new")
    i = 0
    while written < budget:
        size = min(budget - written, rng.randint(1, 2 * 1024 * 1024))
        path = f"new/f{i}"
        store.create_file(branch, path)
        store.write_file(branch, path, 0, rng.randbytes(size))
        written += size
        i += 1
    if store.resolve(branch, "README").found:
        store.write_file(branch, "README", 3, b"overwrite")
        store.chmod(branch, "README", 0o600)
    if store.resolve(branch, "a.txt").found:
        store.rename(branch, "a.txt", "renamed.txt")
    return written


@pytest.mark.criterion(3, "abort identity: 20 random deltas up to 10 MB leave the parent bit-identical")
def test_abort_identity(store, base, note):
    rng = random.Random(3)
    base_hash = tree_hash(base)
    view = view_hash(store, ROOT)
    largest = 0
    for trial in range(20):
        budget = rng.randint(1, 10 * 1024 * 1024)
        name = f"a{trial}"
        store.create_branch(ROOT, name)
        largest = max(largest, _mutate(store, name, rng, budget))
        assert view_hash(store, name) != view
        store.abort_branch(name)
        assert tree_hash(base) == base_hash
        assert view_hash(store, ROOT) == view
    note(f"largest delta {largest / 1e6:.1f} MB")


# -- 4 ---------------------------------------------------------------------


@pytest.mark.criterion(4, "commit visibility and one-level propagation for nested b2 -> b1 -> base")
def test_commit_one_level(store, base):
    h_base = tree_hash(base)
    store.create_branch(ROOT, "b1")
    store.write_file("b1", "README", 0, b"b1 says hi")
    store.mkdir("b1", "from-b1")
    store.create_branch("b1", "b2")
    store.delete("b2", "src/lib")
    store.create_file("b2", "from-b1/b2.txt")
    store.write_file("b2", "from-b1/b2.txt", 0, b"nested")
    pre_b2 = view_hash(store, "b2")
    store.commit_branch("b2")
    assert view_hash(store, "b1") == pre_b2
    assert tree_hash(base) == h_base
    pre_b1 = view_hash(store, "b1")
    store.commit_branch("b1")
    assert tree_hash(base) == pre_b1


# -- 5 ---------------------------------------------------------------------


@pytest.mark.criterion(5, "O(1) creation: medians over {100, 1000, 10000}-file bases vary < 2x, each < 5 ms")
def test_creation_is_constant(tmp_path, note):
    started = time.monotonic()
    report = bench.bench_creation(bench.BASE_SIZES, trials=10, workdir=str(tmp_path))
    elapsed = time.monotonic() - started
    medians = {int(p.param): p.median for p in report.points}
    ratio = max(medians.values()) / min(medians.values())
    note(" / ".join(f"{n}:{v:.0f}us" for n, v in medians.items()) + f", ratio {ratio:.2f}, {elapsed:.1f}s")
    assert ratio < 2
    assert all(v < 5000 for v in medians.values())
    assert elapsed < 60


# -- 6 ---------------------------------------------------------------------


@pytest.mark.criterion(6, "commit proportionality: monotone medians, commit(1 KB) < 5 ms, abort(1 MB) <= commit(1 MB)")
def test_commit_proportional(tmp_path, note):
    report = bench.bench_commit_abort(bench.MOD_SIZES, trials=10, workdir=str(tmp_path))
    commit = {s: report.point(f"commit/{s}").median for s in bench.MOD_SIZES}
    abort = {s: report.point(f"abort/{s}").median for s in bench.MOD_SIZES}
    note("commit " + "/".join(f"{v:.0f}" for v in commit.values())
         + "us, abort " + "/".join(f"{v:.0f}" for v in abort.values()) + "us")
    assert bench.is_monotone_nondecreasing(commit)
    assert commit[bench.KIB] < 5000
    assert abort[bench.MIB] <= commit[bench.MIB]


# -- 7 ---------------------------------------------------------------------


@needs_mount
@pytest.mark.criterion(7, "throughput report: native vs mounted rows for a 50 MB file at 64 KiB blocks")
def test_throughput_rows(tmp_path, note):
    report = bench.bench_throughput(bench.THROUGHPUT_FILE, bench.THROUGHPUT_BLOCK, trials=3, workdir=str(tmp_path))
    md = report.to_markdown()
    for label in ("Native filesystem", "Mounted (regular)", "Mounted (fsync passthrough)"):
        assert f"| {label} |" in md
    med = {p.param: p.median for p in report.points}
    assert all(v > 0 for v in med.values())
    ratio = med["read/mounted"] / med["read/native"]
    note(f"read ratio {ratio:.1%} (informational target 10%: {'met' if ratio >= 0.10 else 'missed'})")
    # the derived check: without the fsync shortcut, mounted writes are not faster than native
    assert med["write/mounted_fsync"] <= med["write/native"]


# -- 8 ---------------------------------------------------------------------

SESSION = r"""
set -e
mkdir -p build include
printf '#define GREETING "branch"\n' > include/greet.h
printf '#include "include/greet.h"\nconst char *greet(void) { return GREETING; }\n' > greet.c
printf 'const char *greet(void);\n#include <stdio.h>\nint main(void) { puts(greet()); return 0; }\n' > main.c
printf 'build/app: build/main.o build/greet.o\n\tcc -o $@ $^\nbuild/%%.o: %%.c\n\tcc -c -o $@ $<\n' > Makefile
make -s
./build/app > build/out.txt
sed -i 's/hello/goodbye/' README
echo appended >> src/main.py
rm -r src/lib
mv a.txt notes.txt
ln -s notes.txt notes-link
chmod 700 build/app
ls -1 . > listing.txt
ls -1 src >> listing.txt
cat include/greet.h | wc -c > size.txt
"""


@needs_mount
@pytest.mark.criterion(8, "POSIX session through a mount matches the same script on a plain copy")
def test_posix_session(make_mount, base, tmp_path):
    if shutil.which("cc") is None or shutil.which("make") is None:
        pytest.skip("needs cc and make")
    plain = tmp_path / "plain"
    shutil.copytree(base, plain, symlinks=True)
    r = subprocess.run(["sh", "-c", SESSION], cwd=plain, capture_output=True, text=True)
    assert r.returncode == 0, r.stderr

    m = make_mount(base, tag="posix")
    ctl_write(m.control, "create root work loser\n")
    r = subprocess.run(["sh", "-c", SESSION], cwd=m.branch_path("work"), capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert snapshot_dir(m.branch_path("work")) == snapshot_dir(plain)
    # make sees fresh targets as up to date through the mount
    r = subprocess.run(["make", "-q", "build/app"], cwd=m.branch_path("work"))
    assert r.returncode == 0

    env = dict(os.environ, BRANCHFS_MOUNT=m.mountpoint)
    env.pop("BRANCHFS_CTL", None)
    r = subprocess.run([sys.executable, "-m", "branchfs.cli", "commit", "work"], env=env)
    assert r.returncode == cli.EXIT_OK
    assert snapshot_dir(base) == snapshot_dir(plain)
    r = subprocess.run([sys.executable, "-m", "branchfs.cli", "commit", "loser"], env=env, capture_output=True)
    assert r.returncode == cli.EXIT_STALE
    with pytest.raises(OSError) as info:
        ctl_write(m.control, "commit loser\n")
    assert info.value.errno == errno.ESTALE
    with pytest.raises(OSError) as info:
        os.listdir(m.branch_path("loser"))
    assert info.value.errno == errno.ESTALE


# -- 9 ---------------------------------------------------------------------


@needs_mount
@pytest.mark.criterion(9, "branch-run -n 3: one Committed branch, winner's delta in base, no surviving losers (50 trials)")
def test_orchestrator_trials(make_mount, base, note):
    m = make_mount(base, tag="orch")
    rng = random.Random(9)
    killed = 0
    for trial in range(50):
        good = rng.randint(1, 3)
        delays = [rng.choice(["0", "0.01", "0.05", "0.1", "0.2"]) for _ in range(3)]
        script = (
            'd=$(echo "$DELAYS" | cut -d" " -f"$BRANCH_INDEX"); sleep "$d"; '
            'echo "trial $TRIAL by $BRANCH_INDEX" > result.txt; '
            'if [ "$BRANCH_INDEX" = "$GOOD" ]; then exit 0; fi; '
            'if [ $(( BRANCH_INDEX % 2 )) = 0 ]; then exit 1; fi; sleep 30'
        )
        env = dict(os.environ, DELAYS=" ".join(delays), GOOD=str(good), TRIAL=str(trial))
        r = subprocess.run(
            [sys.executable, "-m", "branchfs.orchestrator", "--workspace", m.mountpoint, "-n", "3", "--grace", "0.2", "--json", "--", "sh", "-c", script],
            env=env, capture_output=True, text=True, timeout=60,
        )
        assert r.returncode == orch.EXIT_COMMITTED, r.stderr
        out = json.loads(r.stdout)
        assert out["winner"] == good
        states = ctl_states(m.control)
        ours = [states[c["branch"]] for c in out["children"]]
        assert ours.count("Committed") == 1 and ours.count("Aborted") == 2
        assert (base / "result.txt").read_text() == f"trial {trial} by {good}\n"
        for child in out["children"]:
            if child["index"] != good:
                assert orch.processes_in_group(child["pid"]) == []
                killed += child["terminated"]
        assert out["escapes"] == []
    assert sum(s == "Committed" for s in ctl_states(m.control).values()) == 50
    note(f"50/50 single winners, {killed} losers terminated by signal")


# -- 10 --------------------------------------------------------------------


def _state(m, base) -> dict:
    store_snap = snapshot_dir(m.config.store_dir, skip=("daemon.log",))
    return {"store": store_snap, "base": snapshot_dir(base), "listing": open(m.control).read()}


@needs_mount
@pytest.mark.criterion(10, "CLI and raw control lines produce identical store transitions")
def test_cli_parity(make_mount, tmp_path, note):
    files = {"README": "r\n", "src/x.c": "int x;\n"}
    base_cli, base_raw = tmp_path / "base-cli", tmp_path / "base-raw"
    write_tree(base_cli, files)
    write_tree(base_raw, files)
    via_cli = make_mount(base_cli, tag="cli")
    via_raw = make_mount(base_raw, tag="raw")

    def edit(m, branch: str, text: str) -> None:
        with open(m.branch_path(branch, "README"), "a") as f:
            f.write(text)

    steps = [
        (["create", "a"], "create root a\n"),
        (["create", "--parent", "a", "a1"], "create a a1\n"),
        (["abort", "a1"], "abort a1\n"),
        (["create", "g1", "g2", "g3"], "create root g1 g2 g3\n"),
        (["commit", "g2"], "commit g2\n"),
        (["commit", "g1"], "commit g1\n"),      # stale
        (["create", "a"], "create root a\n"),   # exists
        (["commit", "nope"], "commit nope\n"),  # unknown
        (["abort", "g1"], "abort g1\n"),
        (["abort", "g3"], "abort g3\n"),
        (["commit", "a"], "commit a\n"),
        (["create", "b"], "create root b\n"),
        (["abort", "b"], "abort b\n"),
    ]
    edits = {0: "a", 3: "g2"}
    compared = 0
    for i, (argv, line) in enumerate(steps):
        code = run_cli(via_cli, argv)
        try:
            ctl_write(via_raw.control, line)
            raw_errno = 0
        except OSError as e:
            raw_errno = e.errno
        assert code == (0 if raw_errno == 0 else cli._ERRNO_EXIT.get(raw_errno, cli.EXIT_FAILURE)), (argv, raw_errno)
        assert _state(via_cli, base_cli) == _state(via_raw, base_raw), argv
        compared += 1
        if i in edits:
            edit(via_cli, edits[i], f"step {i}\n")
            edit(via_raw, edits[i], f"step {i}\n")
    note(f"{compared} transitions compared, store and base snapshots identical")


def run_cli(m, argv: list[str]) -> int:
    old = dict(os.environ)
    os.environ.pop("BRANCHFS_CTL", None)
    os.environ["BRANCHFS_MOUNT"] = m.mountpoint
    try:
        return cli.main(list(argv))
    finally:
        os.environ.clear()
        os.environ.update(old)
