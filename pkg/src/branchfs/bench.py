"""Desk-scale benchmark harness.

Three scenarios:

``creation``
    branch creation latency over generated bases of different file counts;
``commit_abort``
    commit and abort latency for one modified file of each size;
``throughput``
    sequential read and write MB/s on one large file, native versus mounted.

Latencies come from the store's timing hook, which wraps the store operation
itself (lock acquisition included, control-file and CLI overhead excluded).
Generated trees are flushed with ``sync`` before timing starts so their
writeback does not land inside the measurements.
With ``end_to_end=True`` the same operations are also timed from outside
through a real mount, as control-file writes.

Page cache policy for throughput is fixed per run: ``warm`` primes the cache
with one untimed read before the timed reads; ``drop`` writes to
``/proc/sys/vm/drop_caches`` before every timed read and fails if that is not
permitted.  The choice is recorded in the environment fingerprint.

CSV columns: ``scenario,param,trial,value_us_or_mbs``.  Values are written
with ``repr`` so medians recomputed from the CSV match the report exactly.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import platform
import random
import shutil
import statistics
import sys
import tempfile
import time
from dataclasses import dataclass, field

from .store import ROOT, BranchStore

KIB = 1024
MIB = 1024 * 1024

BASE_SIZES = (100, 1_000, 10_000)
MOD_SIZES = (1 * KIB, 100 * KIB, 1 * MIB)
THROUGHPUT_FILE = 50 * MIB
THROUGHPUT_BLOCK = 64 * KIB

# published medians, used for the shape predicates' self-check
PUBLISHED_CREATION_US = {100: 292, 1_000: 317, 10_000: 310}
PUBLISHED_COMMIT_US = {1 * KIB: 317, 100 * KIB: 514, 1 * MIB: 2_100}
PUBLISHED_ABORT_US = {1 * KIB: 315, 100 * KIB: 365, 1 * MIB: 890}
PUBLISHED_THROUGHPUT_MBS = {"native": (8_800, 576), "regular": (1_655, 631), "passthrough": (7_236, 719)}

CREATION_FLATNESS = 2.0
CREATION_CEILING_US = 5_000.0
SMALL_COMMIT_CEILING_US = 5_000.0
READ_RATIO_TARGET = 0.10


# ------------------------------------------------------------------ reports


@dataclass
class BenchPoint:
    param: str
    samples: list[float]
    unit: str

    @property
    def median(self) -> float:
        return statistics.median(self.samples)

    @property
    def iqr(self) -> float:
        if len(self.samples) < 2:
            return 0.0
        q = statistics.quantiles(self.samples, n=4, method="inclusive")
        return q[2] - q[0]


@dataclass
class BenchReport:
    scenario: str
    points: list[BenchPoint]
    environment: dict[str, str]
    assertions: dict[str, bool] = field(default_factory=dict)
    informational: frozenset[str] = frozenset()

    def point(self, param: str) -> BenchPoint:
        for p in self.points:
            if p.param == param:
                return p
        raise KeyError(param)

    def medians(self, prefix: str = "") -> dict[str, float]:
        return {p.param[len(prefix):]: p.median for p in self.points if p.param.startswith(prefix)}

    @property
    def passed(self) -> bool:
        return all(ok for name, ok in self.assertions.items() if name not in self.informational)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "param", "trial", "value_us_or_mbs"])
        for p in self.points:
            for i, v in enumerate(p.samples):
                w.writerow([self.scenario, p.param, i, repr(float(v))])
        return buf.getvalue()

    def to_markdown(self) -> str:
        out = [f"## {self.scenario}", ""]
        out += _TABLES[self.scenario](self)
        out += ["", "| check | result |", "|---|---|"]
        for name, ok in self.assertions.items():
            tag = " (informational)" if name in self.informational else ""
            out.append(f"| {name}{tag} | {'pass' if ok else 'FAIL'} |")
        out += ["", "| environment | value |", "|---|---|"]
        out += [f"| {k} | {v} |" for k, v in self.environment.items()]
        return "\n".join(out) + "\n"


def read_csv(text: str) -> dict[tuple[str, str], list[float]]:
    samples: dict[tuple[str, str], list[float]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        samples.setdefault((row["scenario"], row["param"]), []).append(float(row["value_us_or_mbs"]))
    return samples


def _fmt(v: float) -> str:
    return f"{v:,.0f}" if v >= 100 else f"{v:,.1f}"


def _size_label(n: int) -> str:
    if n >= MIB and n % MIB == 0:
        return f"{n // MIB} MB"
    if n >= KIB and n % KIB == 0:
        return f"{n // KIB} KB"
    return f"{n} B"


def _creation_table(r: BenchReport) -> list[str]:
    rows = ["| Base Size (files) | Creation Latency (µs) | IQR (µs) | Published (µs) |", "|---:|---:|---:|---:|"]
    for p in r.points:
        if p.param.startswith("e2e/"):
            continue
        n = int(p.param)
        published = PUBLISHED_CREATION_US.get(n)
        rows.append(f"| {n:,} | {_fmt(p.median)} | {_fmt(p.iqr)} | {published if published else '-'} |")
    e2e = [p for p in r.points if p.param.startswith("e2e/")]
    if e2e:
        rows += ["", "| Base Size (files) | End-to-end Creation (µs) |", "|---:|---:|"]
        rows += [f"| {int(p.param[4:]):,} | {_fmt(p.median)} |" for p in e2e]
    return rows


def _commit_table(r: BenchReport) -> list[str]:
    rows = ["| Modification Size | Commit (µs) | Abort (µs) | Published commit / abort (µs) |", "|---:|---:|---:|---:|"]
    sizes = sorted({int(p.param.split("/")[1]) for p in r.points if p.param.startswith("commit/")})
    for s in sizes:
        c, a = r.point(f"commit/{s}").median, r.point(f"abort/{s}").median
        published = f"{PUBLISHED_COMMIT_US[s]:,} / {PUBLISHED_ABORT_US[s]:,}" if s in PUBLISHED_COMMIT_US else "-"
        rows.append(f"| {_size_label(s)} | {_fmt(c)} | {_fmt(a)} | {published} |")
    if any(p.param.startswith("e2e/") for p in r.points):
        rows += ["", "| Modification Size | End-to-end Commit (µs) | End-to-end Abort (µs) |", "|---:|---:|---:|"]
        for s in sizes:
            rows.append(f"| {_size_label(s)} | {_fmt(r.point(f'e2e/commit/{s}').median)} | "
                        f"{_fmt(r.point(f'e2e/abort/{s}').median)} |")
    return rows


_MODE_LABEL = {"native": "Native filesystem", "mounted": "Mounted (regular)",
               "mounted_fsync": "Mounted (fsync passthrough)"}


def _throughput_table(r: BenchReport) -> list[str]:
    rows = ["| Mode | Read (MB/s) | Write (MB/s) |", "|---|---:|---:|"]
    modes = [m for m in _MODE_LABEL if any(p.param == f"read/{m}" for p in r.points)]
    for m in modes:
        rows.append(f"| {_MODE_LABEL[m]} | {_fmt(r.point(f'read/{m}').median)} | {_fmt(r.point(f'write/{m}').median)} |")
    if "mounted" in modes:
        ratio = r.point("read/mounted").median / r.point("read/native").median
        rows += ["", f"Mounted read is {ratio:.1%} of native (published regular-mode ratio: "
                     f"{read_ratio(*[PUBLISHED_THROUGHPUT_MBS[k][0] for k in ('regular', 'native')]):.1%})."]
    return rows


_TABLES = {"creation": _creation_table, "commit_abort": _commit_table, "throughput": _throughput_table}


# --------------------------------------------------------- shape predicates


def creation_is_flat(medians: dict[int, float], bound: float = CREATION_FLATNESS) -> bool:
    values = list(medians.values())
    return max(values) / min(values) < bound


def all_below(medians: dict[int, float], ceiling: float) -> bool:
    return all(v < ceiling for v in medians.values())


def is_monotone_nondecreasing(medians: dict[int, float]) -> bool:
    values = [medians[k] for k in sorted(medians)]
    return all(a <= b for a, b in zip(values, values[1:]))


def abort_not_slower(commit: dict[int, float], abort: dict[int, float], min_size: int = 100 * KIB) -> bool:
    return all(abort[s] <= commit[s] for s in commit if s >= min_size)


def read_ratio(mounted: float, native: float) -> float:
    return mounted / native


# ------------------------------------------------------------- environment


def _cpu_model() -> str:
    try:
        with open("/proc/cpuinfo", encoding="utf-8") as f:
            for line in f:
                if line.startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or "unknown"


def _storage(path: str) -> str:
    path = os.path.realpath(path)
    best, desc = "", "unknown"
    try:
        with open("/proc/self/mountinfo", encoding="utf-8") as f:
            for line in f:
                fields = line.split()
                mnt = fields[4]
                sep = fields.index("-")
                if (path == mnt or path.startswith(mnt.rstrip("/") + "/")) and len(mnt) >= len(best):
                    best, desc = mnt, f"{fields[sep + 1]} {fields[sep + 2]} on {mnt}"
    except (OSError, ValueError, IndexError):
        pass
    return desc


def fingerprint(workdir: str, **extra: str) -> dict[str, str]:
    env = {
        "cpu": _cpu_model(),
        "cpus": str(os.cpu_count()),
        "kernel": platform.release(),
        "storage": _storage(workdir),
        "python": platform.python_version(),
        "timing": "store timing hook (µs)",
    }
    env.update(extra)
    return env


# ------------------------------------------------------------------- trees


def gen_tree(dest: str, file_count: int, file_size: int = KIB, fanout: int = 100, seed: int = 0) -> str:
    """Write a deterministic tree of ``file_count`` files under the empty directory ``dest``.

    Files are numbered and placed by their base-``fanout`` digits, so no
    directory holds more than ``fanout`` entries.
    """
    if file_count < 1 or file_size < 0 or fanout < 2:
        raise ValueError("file_count >= 1, file_size >= 0 and fanout >= 2 are required")
    os.makedirs(dest, exist_ok=True)
    if os.listdir(dest):
        raise FileExistsError(f"{dest} is not empty")
    need = file_count * (file_size + 4096)
    if shutil.disk_usage(dest).free < need:
        raise OSError(28, f"not enough space for {need} bytes", dest)
    depth = 1
    while fanout ** depth < file_count:
        depth += 1
    rng = random.Random(seed)
    for i in range(file_count):
        digits = []
        n = i
        for _ in range(depth):
            digits.append(n % fanout)
            n //= fanout
        *dirs, leaf = reversed(digits)
        parent = os.path.join(dest, *(f"d{d:02d}" for d in dirs))
        os.makedirs(parent, exist_ok=True)
        with open(os.path.join(parent, f"f{leaf:02d}.dat"), "wb") as f:
            f.write(rng.randbytes(file_size))
    return dest


# ---------------------------------------------------------------- scenarios


class _Timer:
    def __init__(self) -> None:
        self.last: dict[str, float] = {}

    def __call__(self, op: str, secs: float) -> None:
        self.last[op] = secs * 1e6

    def take(self, op: str) -> float:
        return self.last.pop(op)


def _check_trials(trials: int) -> None:
    if trials < 3:
        raise ValueError("at least 3 trials are required")


def _time_control(path: str, line: str) -> float:
    fd = os.open(path, os.O_WRONLY)
    try:
        t0 = time.perf_counter_ns()
        os.write(fd, line.encode())
        return (time.perf_counter_ns() - t0) / 1e3
    finally:
        os.close(fd)


def _mount(base: str, workdir: str, tag: str, **options):
    from .vfs.daemon import Mounted
    from .vfs.fs import MountConfig

    mnt = os.path.join(workdir, f"{tag}-mnt")
    os.makedirs(mnt, exist_ok=True)
    config = MountConfig(base_dir=base, mountpoint=mnt, store_dir=os.path.join(workdir, f"{tag}-store"), **options)
    return Mounted(config)


def bench_creation(
    base_sizes=BASE_SIZES, trials: int = 10, workdir: str | None = None, seed: int = 0, end_to_end: bool = False,
) -> BenchReport:
    _check_trials(trials)
    with tempfile.TemporaryDirectory(dir=workdir, prefix="bench-creation-") as tmp:
        timer = _Timer()
        stores = {}
        for n in base_sizes:
            base = gen_tree(os.path.join(tmp, f"base-{n}"), n, seed=seed)
            stores[n] = BranchStore(base, os.path.join(tmp, f"store-{n}"), timing_hook=timer)
        os.sync()  # keep writeback of the fresh trees out of the timed region
        samples: dict[int, list[float]] = {n: [] for n in base_sizes}
        # trials are interleaved across sizes so background drift hits every size alike
        for t in range(-1, trials):
            for n in base_sizes:
                stores[n].create_branch(ROOT, f"t{t}")
                elapsed = timer.take("create")
                if t >= 0:  # trial -1 is an untimed warm-up
                    samples[n].append(elapsed)
                stores[n].abort_branch(f"t{t}")
        points = [BenchPoint(str(n), samples[n], "us") for n in base_sizes]
        e2e = []
        if end_to_end:
            for n in base_sizes:
                with _mount(stores[n].base_dir, tmp, f"e2e-{n}") as m:
                    values = []
                    for t in range(trials):
                        values.append(_time_control(m.control, f"create root e{t}\n"))
                        _time_control(m.control, f"abort e{t}\n")
                    e2e.append(BenchPoint(f"e2e/{n}", values, "us"))
        report = BenchReport("creation", points + e2e, fingerprint(tmp, file_size=f"{KIB} B", trials=str(trials)))
    medians = {int(p.param): p.median for p in points}
    report.assertions = {
        "max/min median < 2": creation_is_flat(medians),
        "every median < 5 ms": all_below(medians, CREATION_CEILING_US),
    }
    return report


def _fill(store: BranchStore, branch: str, size: int, rng: random.Random) -> None:
    path = f"mod-{branch}.bin"
    store.create_file(branch, path)
    store.write_file(branch, path, 0, rng.randbytes(size))


def bench_commit_abort(
    mod_sizes=MOD_SIZES, trials: int = 10, workdir: str | None = None, seed: int = 0, end_to_end: bool = False,
) -> BenchReport:
    _check_trials(trials)
    rng = random.Random(seed)
    with tempfile.TemporaryDirectory(dir=workdir, prefix="bench-commit-") as tmp:
        base = gen_tree(os.path.join(tmp, "base"), 100, seed=seed)
        os.sync()
        timer = _Timer()
        store = BranchStore(base, os.path.join(tmp, "store"), timing_hook=timer)
        c = {s: [] for s in mod_sizes}
        a = {s: [] for s in mod_sizes}
        # sizes are interleaved per trial; trial -1 is an untimed warm-up
        for t in range(-1, trials):
            for s in mod_sizes:
                for verb, out in (("commit", c), ("abort", a)):
                    name = f"{verb[0]}{s}-{t}"
                    store.create_branch(ROOT, name)
                    _fill(store, name, s, rng)
                    (store.commit_branch if verb == "commit" else store.abort_branch)(name)
                    elapsed = timer.take(verb)
                    if t >= 0:
                        out[s].append(elapsed)
        commits = [BenchPoint(f"commit/{s}", c[s], "us") for s in mod_sizes]
        aborts = [BenchPoint(f"abort/{s}", a[s], "us") for s in mod_sizes]
        del store
        e2e = []
        if end_to_end:
            with _mount(base, tmp, "e2e") as m:
                for s in mod_sizes:
                    c, a = [], []
                    for t in range(trials):
                        for verb, out in (("commit", c), ("abort", a)):
                            name = f"e{verb[0]}{s}-{t}"
                            _time_control(m.control, f"create root {name}\n")
                            with open(m.branch_path(name, f"mod-{name}.bin"), "wb") as f:
                                f.write(rng.randbytes(s))
                            out.append(_time_control(m.control, f"{verb} {name}\n"))
                    e2e += [BenchPoint(f"e2e/commit/{s}", c, "us"), BenchPoint(f"e2e/abort/{s}", a, "us")]
        report = BenchReport("commit_abort", commits + aborts + e2e, fingerprint(tmp, trials=str(trials)))
    cm = {int(p.param.split("/")[1]): p.median for p in commits}
    am = {int(p.param.split("/")[1]): p.median for p in aborts}
    small = min(cm)
    report.assertions = {
        "commit medians nondecreasing in size": is_monotone_nondecreasing(cm),
        "abort <= commit for sizes >= 100 KB": abort_not_slower(cm, am),
        f"commit({_size_label(small)}) < 5 ms": cm[small] < SMALL_COMMIT_CEILING_US,
    }
    return report


def _drop_caches() -> None:
    os.sync()
    with open("/proc/sys/vm/drop_caches", "w") as f:
        f.write("3\n")


def _seq_write(path: str, size: int, block: bytes) -> float:
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
    try:
        t0 = time.perf_counter()
        done = 0
        while done < size:
            done += os.write(fd, block[: min(len(block), size - done)])
        os.fsync(fd)
        return size / MIB / (time.perf_counter() - t0)
    finally:
        os.close(fd)


def _seq_read(path: str, size: int, block_size: int, cache: str) -> float:
    if cache == "drop":
        _drop_caches()
    buf = bytearray(block_size)
    fd = os.open(path, os.O_RDONLY)
    try:
        t0 = time.perf_counter()
        done = 0
        while True:
            n = os.readv(fd, [buf])
            if n == 0:
                break
            done += n
        elapsed = time.perf_counter() - t0
    finally:
        os.close(fd)
    if done != size:
        raise OSError(5, f"short read: {done} of {size} bytes", path)
    return size / MIB / elapsed


def _measure(path: str, size: int, block_size: int, trials: int, cache: str, rng: random.Random):
    block = rng.randbytes(block_size)
    writes = [_seq_write(path, size, block) for _ in range(trials)]
    if cache == "warm":
        _seq_read(path, size, block_size, "warm")
    reads = [_seq_read(path, size, block_size, cache) for _ in range(trials)]
    return reads, writes


def bench_throughput(
    file_size: int = THROUGHPUT_FILE, block_size: int = THROUGHPUT_BLOCK, trials: int = 10,
    workdir: str | None = None, seed: int = 0, cache: str = "warm", mounted: bool = True,
) -> BenchReport:
    _check_trials(trials)
    if file_size <= 0 or block_size <= 0:
        raise ValueError("file and block sizes must be positive")
    if cache not in ("warm", "drop"):
        raise ValueError("cache must be 'warm' or 'drop'")
    rng = random.Random(seed)
    points = []
    with tempfile.TemporaryDirectory(dir=workdir, prefix="bench-throughput-") as tmp:
        native = os.path.join(tmp, "native")
        os.mkdir(native)
        reads, writes = _measure(os.path.join(native, "f"), file_size, block_size, trials, cache, rng)
        points += [BenchPoint("read/native", reads, "MB/s"), BenchPoint("write/native", writes, "MB/s")]
        if mounted:
            base = os.path.join(tmp, "base")
            os.mkdir(base)
            for mode, passthrough in (("mounted", False), ("mounted_fsync", True)):
                with _mount(base, tmp, mode, fsync_passthrough=passthrough) as m:
                    _time_control(m.control, "create root tp\n")
                    path = m.branch_path("tp", "f")
                    reads, writes = _measure(path, file_size, block_size, trials, cache, rng)
                    points += [BenchPoint(f"read/{mode}", reads, "MB/s"), BenchPoint(f"write/{mode}", writes, "MB/s")]
        env = fingerprint(tmp, page_cache=cache, file_size=f"{file_size} B", block_size=f"{block_size} B",
                          trials=str(trials))
    report = BenchReport("throughput", points, env)
    if mounted:
        med = {p.param: p.median for p in points}
        report.assertions = {
            "mounted read >= 10% of native": read_ratio(med["read/mounted"], med["read/native"]) >= READ_RATIO_TARGET,
            "fsync passthrough: mounted write <= native write": med["write/mounted_fsync"] <= med["write/native"],
            "fsync no-op: mounted write > native write": med["write/mounted"] > med["write/native"],
        }
        report.informational = frozenset({
            "mounted read >= 10% of native",
            "fsync no-op: mounted write > native write",
        })
    return report


# ----------------------------------------------------------------------- cli


def add_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("scenario", choices=["creation", "commit_abort", "throughput", "all"])
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--sizes", type=lambda s: [int(x) for x in s.split(",")],
                   help="base file counts (creation) or modification bytes (commit_abort), comma-separated")
    p.add_argument("--file-size", type=int, default=THROUGHPUT_FILE, help="throughput file size in bytes")
    p.add_argument("--block-size", type=int, default=THROUGHPUT_BLOCK, help="throughput block size in bytes")
    p.add_argument("--cache", choices=["warm", "drop"], default="warm", help="page cache policy for reads")
    p.add_argument("--no-mount", action="store_true", help="skip every measurement that needs a mount")
    p.add_argument("--end-to-end", action="store_true", help="also time operations through a mount")
    p.add_argument("--workdir", help="scratch directory (default: system temp)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", action="append", default=[], help="write the report to a .csv or .md file (repeatable)")
    p.add_argument("--strict", action="store_true", help="exit 1 when a non-informational check fails")


def run(args: argparse.Namespace) -> list[BenchReport]:
    scenarios = ["creation", "commit_abort", "throughput"] if args.scenario == "all" else [args.scenario]
    reports = []
    for s in scenarios:
        if s == "creation":
            reports.append(bench_creation(args.sizes or BASE_SIZES, args.trials, args.workdir, args.seed,
                                          args.end_to_end and not args.no_mount))
        elif s == "commit_abort":
            reports.append(bench_commit_abort(args.sizes or MOD_SIZES, args.trials, args.workdir, args.seed,
                                              args.end_to_end and not args.no_mount))
        else:
            reports.append(bench_throughput(args.file_size, args.block_size, args.trials, args.workdir, args.seed,
                                            args.cache, not args.no_mount))
    return reports


def run_cli(args: argparse.Namespace) -> int:
    reports = run(args)
    md = "\n".join(r.to_markdown() for r in reports)
    for path in args.out:
        with open(path, "w", encoding="utf-8") as f:
            if path.endswith(".csv"):
                f.write("".join(r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1] for i, r in enumerate(reports)))
            else:
                f.write(md)
    sys.stdout.write(md)
    return 1 if args.strict and not all(r.passed for r in reports) else 0
