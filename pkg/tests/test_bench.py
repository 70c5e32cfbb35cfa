from __future__ import annotations

import os
import pathlib
import re
import statistics

import pytest

from branchfs import bench, cli
from branchfs.treehash import tree_hash

REFERENCE_DOC = (pathlib.Path(__file__).resolve().parents[1] / "paper.md")


def reference_rows(label: str) -> list[list[str]]:
    """Rows of the LaTeX table whose label is ``label``, as stripped cell lists."""
    text = REFERENCE_DOC.read_text()
    body = text[text.index(f"\\label{{{label}}}"):]
    body = body[body.index("\\midrule") + len("\\midrule"):body.index("\\bottomrule")]
    rows = []
    for line in body.strip().splitlines():
        cells = [c.strip() for c in line.strip().rstrip("\\").split("&")]
        rows.append([re.sub(r"[^0-9A-Za-z ,.()]", "", c).strip() for c in cells])
    return rows


def num(cell: str) -> int:
    return int(cell.replace(",", ""))


@pytest.mark.skipif(not REFERENCE_DOC.exists(), reason="reference text not shipped")
def test_published_values_match_source():
    creation = {num(a): num(b) for a, b in reference_rows("tab:branch-creation")}
    assert creation == bench.PUBLISHED_CREATION_US
    assert tuple(creation) == bench.BASE_SIZES
    sizes = {"1 KB": bench.KIB, "100 KB": 100 * bench.KIB, "1 MB": bench.MIB}
    rows = reference_rows("tab:commit")
    assert {sizes[r[0]]: num(r[1]) for r in rows} == bench.PUBLISHED_COMMIT_US
    assert {sizes[r[0]]: num(r[2]) for r in rows} == bench.PUBLISHED_ABORT_US
    tp = reference_rows("tab:throughput")
    assert [(num(r[1]), num(r[2])) for r in tp] == list(bench.PUBLISHED_THROUGHPUT_MBS.values())


def test_predicates_on_published_numbers():
    c = bench.PUBLISHED_CREATION_US
    assert max(c.values()) / min(c.values()) == pytest.approx(1.0856, abs=1e-4)
    assert bench.creation_is_flat(c)
    assert bench.all_below(c, bench.CREATION_CEILING_US)
    assert bench.is_monotone_nondecreasing(bench.PUBLISHED_COMMIT_US)
    assert bench.abort_not_slower(bench.PUBLISHED_COMMIT_US, bench.PUBLISHED_ABORT_US)
    native, regular = bench.PUBLISHED_THROUGHPUT_MBS["native"][0], bench.PUBLISHED_THROUGHPUT_MBS["regular"][0]
    assert round(bench.read_ratio(regular, native), 3) == 0.188
    assert bench.read_ratio(regular, native) >= bench.READ_RATIO_TARGET
    # published write exceeds native only because fsync is skipped
    assert bench.PUBLISHED_THROUGHPUT_MBS["regular"][1] > bench.PUBLISHED_THROUGHPUT_MBS["native"][1]


def test_predicates_reject_bad_shapes():
    assert not bench.creation_is_flat({1: 100.0, 2: 250.0})
    assert not bench.is_monotone_nondecreasing({1: 3.0, 2: 2.0})
    assert not bench.abort_not_slower({1: 1.0, 200_000: 5.0}, {1: 9.0, 200_000: 6.0})
    assert bench.abort_not_slower({1: 1.0, 200_000: 5.0}, {1: 9.0, 200_000: 4.0})


def count_files(root) -> tuple[int, int]:
    files, depth = 0, 0
    for dirpath, _, names in os.walk(root):
        rel = os.path.relpath(dirpath, root)
        level = 0 if rel == "." else rel.count(os.sep) + 1
        if names:
            depth = max(depth, level + 1)
        files += len(names)
    return files, depth


def test_gen_tree_shape(tmp_path):
    root = bench.gen_tree(str(tmp_path / "t100"), 100)
    assert count_files(root) == (100, 1)
    root = bench.gen_tree(str(tmp_path / "t1000"), 1000, file_size=10)
    files, depth = count_files(root)
    assert files == 1000 and depth == 2
    assert all(len(os.listdir(os.path.join(root, d))) <= 100 for d in os.listdir(root))
    sizes = {os.path.getsize(os.path.join(dp, n)) for dp, _, ns in os.walk(root) for n in ns}
    assert sizes == {10}


def test_gen_tree_is_deterministic(tmp_path):
    a = bench.gen_tree(str(tmp_path / "a"), 10_000)
    b = bench.gen_tree(str(tmp_path / "b"), 10_000)
    c = bench.gen_tree(str(tmp_path / "c"), 10_000, seed=1)
    assert tree_hash(a) == tree_hash(b) != tree_hash(c)


def test_gen_tree_errors(tmp_path):
    (tmp_path / "full").mkdir()
    (tmp_path / "full" / "x").touch()
    with pytest.raises(FileExistsError):
        bench.gen_tree(str(tmp_path / "full"), 10)
    with pytest.raises(ValueError):
        bench.gen_tree(str(tmp_path / "z"), 0)


def test_trials_minimum():
    with pytest.raises(ValueError):
        bench.bench_creation((10,), trials=2)


def recomputed(report: bench.BenchReport) -> dict[str, float]:
    return {param: statistics.median(v) for (_, param), v in bench.read_csv(report.to_csv()).items()}


def test_creation_report(tmp_path):
    r = bench.bench_creation((10, 100), trials=3, workdir=str(tmp_path))
    assert [p.param for p in r.points] == ["10", "100"]
    assert all(len(p.samples) == 3 and p.unit == "us" for p in r.points)
    assert recomputed(r) == {p.param: p.median for p in r.points}
    md = r.to_markdown()
    assert "| Base Size (files) | Creation Latency (µs) |" in md
    assert set(r.assertions) == {"max/min median < 2", "every median < 5 ms"}
    assert r.environment["kernel"] and r.environment["cpu"]
    assert r.to_csv().splitlines()[0] == "scenario,param,trial,value_us_or_mbs"


def test_commit_abort_report(tmp_path):
    r = bench.bench_commit_abort((1024, 4096), trials=3, workdir=str(tmp_path))
    assert {p.param for p in r.points} == {"commit/1024", "commit/4096", "abort/1024", "abort/4096"}
    assert recomputed(r) == {p.param: p.median for p in r.points}
    assert "| Modification Size | Commit (µs) | Abort (µs) |" in r.to_markdown()


@pytest.mark.mount
def test_end_to_end_points(tmp_path):
    from .conftest import can_mount

    if not can_mount():
        pytest.skip("FUSE mounting is not available here")
    r = bench.bench_commit_abort((1024,), trials=3, workdir=str(tmp_path), end_to_end=True)
    assert {"e2e/commit/1024", "e2e/abort/1024"} <= {p.param for p in r.points}
    r = bench.bench_creation((10,), trials=3, workdir=str(tmp_path), end_to_end=True)
    assert r.point("e2e/10").median > 0


@pytest.mark.mount
def test_throughput_report(tmp_path):
    from .conftest import can_mount

    if not can_mount():
        pytest.skip("FUSE mounting is not available here")
    r = bench.bench_throughput(file_size=4 * bench.MIB, block_size=64 * bench.KIB, trials=3, workdir=str(tmp_path))
    modes = {p.param for p in r.points}
    assert modes == {f"{op}/{m}" for op in ("read", "write") for m in ("native", "mounted", "mounted_fsync")}
    assert all(p.median > 0 for p in r.points)
    assert r.environment["page_cache"] == "warm"
    md = r.to_markdown()
    assert "| Native filesystem |" in md and "| Mounted (regular) |" in md
    assert r.informational <= set(r.assertions)


def test_throughput_native_only(tmp_path):
    r = bench.bench_throughput(file_size=bench.MIB, trials=3, workdir=str(tmp_path), mounted=False)
    assert {p.param for p in r.points} == {"read/native", "write/native"}
    assert r.assertions == {}


def test_cli_bench_writes_reports(tmp_path, capsys):
    csv_path, md_path = tmp_path / "r.csv", tmp_path / "r.md"
    rc = cli.main(["bench", "creation", "--sizes", "10,20", "--trials", "3", "--workdir", str(tmp_path),
                   "--out", str(csv_path), "--out", str(md_path)])
    assert rc == 0
    assert csv_path.read_text().count("\n") == 1 + 6
    assert md_path.read_text().startswith("## creation")
    assert "## creation" in capsys.readouterr().out
