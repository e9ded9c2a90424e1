"""Tests for the run directory layout and its readers/writers."""
import pytest

from errors import RunIOError
from file_manager import CHECKPOINT, RunDirectory, sanitize_name


@pytest.mark.parametrize("raw, expected", [
    ("S4", "s4"),
    ("my run_1", "my-run-1"),
    ("a/b\\c", "abc"),
    ("..", "unnamed-run"),
])
def test_sanitize_name(raw, expected):
    assert sanitize_name(raw) == expected


def test_layout(tmp_path):
    run = RunDirectory(tmp_path / "run").ensure()
    assert run.root.is_dir()
    assert run.checkpoint_path.name == CHECKPOINT
    assert run.trials_path("dev").name == "dev.trials"
    assert run.scores_path("eval").name == "eval.scores"
    assert run.curve_path("det_tar_vs_non").parent.name == "curves"
    assert run.child("S 2").root == tmp_path / "run" / "s-2"


def test_ensure_fails_on_file(tmp_path):
    blocker = tmp_path / "taken"
    blocker.write_text("x", encoding="utf-8")
    with pytest.raises(RunIOError):
        RunDirectory(blocker).ensure()
    with pytest.raises(RunIOError):
        RunDirectory(blocker / "nested").ensure()


def test_yaml_jsonl_and_csv_round_trips(tmp_path):
    run = RunDirectory(tmp_path).ensure()
    run.write_yaml(run.manifest_path, {"seed": 1, "splits": {"trn": 10}})
    assert run.read_yaml(run.manifest_path) == {"seed": 1, "splits": {"trn": 10}}

    records = [{"record": "epoch", "epoch": 1, "tau": 0.5}, {"record": "summary", "best_epoch": None}]
    run.write_jsonl(run.train_log_path, records)
    assert run.read_jsonl(run.train_log_path) == records

    path = run.write_csv(run.curve_path("adcf_vs_threshold"), ("threshold", "a_dcf"), [(0.0, 1.5), (0.5, 0.25)])
    assert run.read_csv(path) == [{"threshold": "0.0", "a_dcf": "1.5"}, {"threshold": "0.5", "a_dcf": "0.25"}]


def test_missing_artifacts(tmp_path):
    run = RunDirectory(tmp_path).ensure()
    run.scores_path("dev").write_text("", encoding="utf-8")
    assert run.missing_artifacts([run.checkpoint_path, run.scores_path("dev")]) == [CHECKPOINT]


def test_backup(tmp_path):
    """Test timestamped backups of existing files."""
    run = RunDirectory(tmp_path).ensure()
    assert run.backup(run.checkpoint_path) is None
    run.checkpoint_path.write_bytes(b"old")
    copy = run.backup(run.checkpoint_path)
    assert copy.read_bytes() == b"old"
    assert copy.name.startswith("model_backup_") and copy.suffix == ".adcf"
