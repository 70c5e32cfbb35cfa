from __future__ import annotations

import errno
import os
import subprocess
import sys

import pytest

from branchfs import orchestrator as orch
from branchfs.orchestrator import ExploreSpec, Flag, explore
from branchfs.treehash import tree_hash
from branchfs.vfs.control import parse_listing

pytestmark = pytest.mark.mount


def states(m) -> dict[str, str]:
    with open(m.control) as f:
        return {name: state for name, _, state, _ in parse_listing(f.read())}


def sh(script: str) -> list[str]:
    return ["sh", "-c", script]


def assert_contained(outcome) -> None:
    for res in outcome.child_results:
        if res.index != outcome.winner and res.pid is not None:
            assert orch.processes_in_group(res.pid) == []


def test_child_two_wins(mounted, base):
    script = 'echo "$BRANCH_INDEX" > out.txt; if [ "$BRANCH_INDEX" = 2 ]; then exit 0; fi; sleep 30'
    outcome = explore(ExploreSpec(mounted.mountpoint, 3, sh(script), grace=0.5))
    assert outcome.winner == 2
    assert (base / "out.txt").read_text() == "2\n"
    st = states(mounted)
    assert [st[b] for b in outcome.branches] == ["Aborted", "Committed", "Aborted"]
    assert outcome.commit_report is not None and outcome.commit_report.files_applied == 1
    assert outcome.commit_report.siblings_invalidated == 2
    assert all(outcome.child_results[i].terminated for i in (0, 2))
    assert_contained(outcome)


def test_single_failing_child_leaves_base(mounted, base):
    before = tree_hash(base)
    outcome = explore(ExploreSpec(mounted.mountpoint, 1, sh("echo junk > junk; exit 3")))
    assert outcome.winner is None and outcome.commit_report is None
    assert outcome.child_results[0].exit_status == 3
    assert tree_hash(base) == before
    assert states(mounted)[outcome.branches[0]] == "Aborted"
    assert states(mounted)["root"] == "Active"


def test_all_fail_aborts_everything(mounted, base):
    before = tree_hash(base)
    outcome = explore(ExploreSpec(mounted.mountpoint, 3, sh("rm -rf src; exit 1")))
    assert outcome.winner is None
    assert tree_hash(base) == before
    assert {states(mounted)[b] for b in outcome.branches} == {"Aborted"}


def test_winner_view_becomes_base(mounted, base):
    script = 'mkdir -p gen; echo "$BRANCH_INDEX" > gen/i; rm a.txt; sleep 0.0$BRANCH_INDEX'
    outcome = explore(ExploreSpec(mounted.mountpoint, 3, sh(script)))
    assert outcome.winner is not None
    assert (base / "gen" / "i").read_text() == f"{outcome.winner}\n"
    assert not (base / "a.txt").exists()


def test_stress_one_winner(mounted, base):
    for trial in range(100):
        script = 'sleep 0.0$(( (BRANCH_INDEX * 7 + %d) %% 10 )); echo "$BRANCH_INDEX" > out.txt' % trial
        outcome = explore(ExploreSpec(mounted.mountpoint, 4, sh(script), grace=0.2))
        assert outcome.winner is not None
        assert (base / "out.txt").read_text() == f"{outcome.winner}\n"
        st = states(mounted)
        assert sum(st[b] == "Committed" for b in outcome.branches) == 1
        assert_contained(outcome)


def test_self_commit_race(mounted, base):
    code = "from branchfs.orchestrator import child_commit; import sys; open('w', 'w').write('x'); sys.exit(0 if child_commit() else 1)"
    outcome = explore(ExploreSpec(mounted.mountpoint, 4, [sys.executable, "-c", code], self_commit=True))
    assert outcome.winner is not None
    st = states(mounted)
    assert [st[b] for b in outcome.branches].count("Committed") == 1
    assert (base / "w").read_text() == "x"
    # losers that reached child_commit saw the stale result
    assert all(r.exit_status in (1, -15, -9) for r in outcome.child_results if r.index != outcome.winner)


def test_self_commit_exit_zero_without_commit_is_not_success(mounted, base):
    outcome = explore(ExploreSpec(mounted.mountpoint, 2, sh("exit 0"), self_commit=True))
    assert outcome.winner is None


def test_child_helpers(mounted, monkeypatch):
    with open(mounted.control, "w") as f:
        f.write("create root h1 h2\n")
    monkeypatch.setenv("BRANCHFS_CTL", mounted.control)
    monkeypatch.setenv("BRANCH_NAME", "h1")
    orch.child_abort()
    st = states(mounted)
    assert st["h1"] == "Aborted" and st["h2"] == "Active"
    monkeypatch.setenv("BRANCH_NAME", "h2")
    with open(mounted.control, "w") as f:
        f.write("create h2 h2sub\n")
    with pytest.raises(OSError) as info:
        orch.child_commit()
    assert info.value.errno == errno.EROFS
    with open(mounted.control, "w") as f:
        f.write("abort h2sub\n")
    assert orch.child_commit() is True


def test_child_commit_lost_race(mounted, monkeypatch):
    with open(mounted.control, "w") as f:
        f.write("create root r1 r2\ncommit r1\n")
    monkeypatch.setenv("BRANCHFS_CTL", mounted.control)
    monkeypatch.setenv("BRANCH_NAME", "r2")
    assert orch.child_commit() is False


def test_child_helpers_need_environment(monkeypatch, tmp_path):
    monkeypatch.delenv("BRANCH_NAME", raising=False)
    with pytest.raises(orch.ConfigurationError):
        orch.child_commit()
    monkeypatch.setenv("BRANCH_NAME", "x")
    monkeypatch.setenv("BRANCHFS_CTL", str(tmp_path / "missing"))
    with pytest.raises(orch.ConfigurationError):
        orch.child_abort()


def test_not_a_branch_mount(tmp_path):
    with pytest.raises(orch.ConfigurationError):
        explore(ExploreSpec(str(tmp_path), 2, ["true"]))
    assert orch.main(["--workspace", str(tmp_path), "-n", "2", "--", "true"]) == orch.EXIT_USAGE


def test_spec_validation():
    with pytest.raises(ValueError):
        ExploreSpec("/x", 0, ["true"])
    with pytest.raises(ValueError):
        ExploreSpec("/x", 1, [])
    assert Flag.FS in ExploreSpec("/x", 1, ["true"], flags=Flag.ISOLATE).flags


def test_spawn_failure_aborts_only_that_branch(mounted, base):
    cmd = ["{workdir}/../../no-such-binary-{index}"]
    outcome = explore(ExploreSpec(mounted.mountpoint, 2, cmd))
    assert outcome.winner is None
    assert all(r.spawn_error for r in outcome.child_results)
    assert {states(mounted)[b] for b in outcome.branches} == {"Aborted"}


def test_placeholders_and_env(mounted, base):
    script = 'test "$1" = "$BRANCH_INDEX" && test "$2" = "$BRANCH_NAME" && test "$(pwd)" = "$3" && test -e "$BRANCHFS_CTL"'
    outcome = explore(ExploreSpec(mounted.mountpoint, 2, ["sh", "-c", script, "sh", "{index}", "{branch}", "{workdir}"],
                                  per_branch_env={"EXTRA": "1"}))
    assert outcome.winner is not None


def test_escape_is_recorded_and_killed(mounted, base):
    script = 'if [ "$BRANCH_INDEX" = 1 ]; then sleep 0.3; exit 0; fi; setsid sleep 60 & sleep 60'
    outcome = explore(ExploreSpec(mounted.mountpoint, 2, sh(script), grace=0.2))
    assert outcome.winner == 1
    assert len(outcome.escapes) == 1
    assert not orch._alive(outcome.escapes[0])
    assert orch.processes_with_token(f"{outcome.run_token}-2") == []


def test_close_fds_flag(mounted, base):
    r, w = os.pipe()
    os.set_inheritable(w, True)
    try:
        check = f'test -e /proc/self/fd/{w}'
        kept = explore(ExploreSpec(mounted.mountpoint, 1, sh(check)))
        closed = explore(ExploreSpec(mounted.mountpoint, 1, sh(check), flags=Flag.FS | Flag.CLOSE_FDS))
    finally:
        os.close(r)
        os.close(w)
    assert kept.winner == 1
    assert closed.winner is None


def test_timeout(mounted, base):
    outcome = explore(ExploreSpec(mounted.mountpoint, 2, sh("sleep 30"), timeout=0.3, grace=0.1))
    assert outcome.timed_out and outcome.winner is None
    assert_contained(outcome)


def test_branch_run_cli(mounted, base):
    r = subprocess.run(
        [sys.executable, "-m", "branchfs.orchestrator", "--workspace", mounted.mountpoint, "-n", "3", "--json",
         "--", "sh", "-c", 'echo "$BRANCH_INDEX" > cli.txt; [ "$BRANCH_INDEX" = 3 ] || sleep 30'],
        capture_output=True, text=True, timeout=60,
    )
    assert r.returncode == orch.EXIT_COMMITTED, r.stderr
    assert (base / "cli.txt").read_text() == "3\n"
    r = subprocess.run(
        [sys.executable, "-m", "branchfs.orchestrator", "--workspace", mounted.mountpoint, "-n", "2", "--", "false"],
        capture_output=True, text=True, timeout=60,
    )
    assert r.returncode == orch.EXIT_NO_WINNER
