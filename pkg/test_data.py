"""Tests for trial records, trial/score files, the synthetic generator and splitting."""
import numpy as np
import pytest

from data import (TRIALS_HEADER_PREFIX, ScoredTrial, SynthSpec, TrialRecord, TrialSet, concat_embedding,
                  generate_synthetic, load_score_set, load_scores, load_trials, load_trials_binary,
                  read_trial_file, save_scores, save_trials, save_trials_binary, split, to_score_set)
from errors import DataFormatError, ValidationError
from metrics import TrialClass


def _record(trial_id="t1", label="target", enr=(1.0, 2.0), tst=(3.0, 4.0), cm=(5.0,)):
    return TrialRecord(trial_id, label, np.array(enr), np.array(tst), np.array(cm))


def _write_trials(path, body, header=f"{TRIALS_HEADER_PREFIX} d_asv=2 d_cm=1"):
    path.write_text(header + "\n" + body, encoding="utf-8")
    return path


def test_concat_embedding_order():
    assert concat_embedding(_record()).tolist() == [1.0, 2.0, 3.0, 4.0, 5.0]


def test_concat_embedding_zero_vectors():
    out = concat_embedding(_record(enr=(0.0, 0.0), tst=(0.0, 0.0), cm=(0.0,)))
    assert out.tolist() == [0.0] * 5


def test_concat_embedding_is_order_sensitive():
    forward = concat_embedding(_record(enr=(1.0, 2.0), tst=(3.0, 4.0)))
    swapped = concat_embedding(_record(enr=(3.0, 4.0), tst=(1.0, 2.0)))
    assert not np.array_equal(forward, swapped)


def test_concat_embedding_dim_mismatch():
    with pytest.raises(ValidationError, match="expected 3"):
        concat_embedding(_record(), d_asv=3)
    with pytest.raises(ValidationError):
        concat_embedding(_record(), d_cm=2)


def test_trial_record_validation():
    with pytest.raises(ValidationError):
        _record(label="bonafide")
    with pytest.raises(ValidationError):
        _record(cm=(np.nan,))
    with pytest.raises(ValidationError, match="differ in length"):
        _record(tst=(1.0, 2.0, 3.0))


def test_trial_set_rejects_mixed_dims():
    with pytest.raises(ValidationError):
        TrialSet((_record(), _record("t2", cm=(1.0, 2.0))), 2, 1)


def test_trial_set_features_and_counts():
    trials = TrialSet((_record(), _record("t2", "spoof"), _record("t3", "spoof")), 2, 1)
    assert trials.features().shape == (3, 5)
    assert trials.label_codes().tolist() == [0, 2, 2]
    assert trials.counts() == {TrialClass.TARGET: 1, TrialClass.NONTARGET: 0, TrialClass.SPOOF: 2}
    assert len(trials.without(TrialClass.SPOOF)) == 1
    assert TrialSet((), 2, 1).features().shape == (0, 5)


def test_trials_round_trip_is_exact(tmp_path):
    """Test that trial files preserve every embedding value exactly."""
    trials = generate_synthetic(SynthSpec(d_asv=3, d_cm=2, n_target=4, n_nontarget=3, n_spoof=3, seed=5))
    loaded = load_trials(save_trials(trials, tmp_path / "trn.trials"))
    assert [r.trial_id for r in loaded] == [r.trial_id for r in trials]
    assert [r.label for r in loaded] == [r.label for r in trials]
    assert np.array_equal(loaded.features(), trials.features())


def test_binary_round_trip_is_exact(tmp_path):
    trials = generate_synthetic(SynthSpec(d_asv=3, d_cm=2, n_target=4, n_nontarget=3, n_spoof=3, seed=5))
    path = save_trials_binary(trials, tmp_path / "trn.trials")
    loaded = load_trials_binary(path)
    assert [r.trial_id for r in loaded] == [r.trial_id for r in trials]
    assert np.array_equal(loaded.features(), trials.features())
    assert np.array_equal(read_trial_file(path).label_codes(), trials.label_codes())


def test_binary_rejects_corruption(tmp_path):
    trials = generate_synthetic(SynthSpec(d_asv=2, d_cm=1, n_target=2, n_nontarget=1, n_spoof=1))
    path = save_trials_binary(trials, tmp_path / "trn.trials")
    data = path.read_bytes()
    path.write_bytes(data[:-4])
    with pytest.raises(DataFormatError):
        load_trials_binary(path)
    path.write_bytes(data + b"\x00")
    with pytest.raises(DataFormatError, match="trailing"):
        load_trials_binary(path)
    path.write_bytes(b"ADCF-XXX" + data[8:])
    with pytest.raises(DataFormatError, match="bad magic"):
        load_trials_binary(path)


def test_binary_bad_label_code_reports_record(tmp_path):
    """Test that an out-of-range label code names the file and the record."""
    trials = generate_synthetic(SynthSpec(d_asv=2, d_cm=1, n_target=2, n_nontarget=1, n_spoof=1))
    path = save_trials_binary(trials, tmp_path / "trn.trials")
    data = bytearray(path.read_bytes())
    data[24 + 4] = 7  # label byte of record 0, after the header and the id length
    path.write_bytes(bytes(data))
    with pytest.raises(DataFormatError, match="record 0") as excinfo:
        load_trials_binary(path)
    assert excinfo.value.path == str(path)
    assert "Unknown class code: 7" in str(excinfo.value)


def test_non_utf8_text_files_report_line(tmp_path):
    trial_path = _write_trials(tmp_path / "a.trials", "t1\ttarget\t1 2\t3 4\t5\nt2\tspoof\t1 2\t3 4\t5\n")
    trial_path.write_bytes(trial_path.read_bytes().replace(b"t2", b"t\xff"))
    with pytest.raises(DataFormatError, match="UTF-8") as excinfo:
        load_trials(trial_path)
    assert excinfo.value.line_no == 3

    score_path = tmp_path / "x.scores"
    score_path.write_bytes(b"\xfe\ttarget\t0.5\n")
    with pytest.raises(DataFormatError) as excinfo:
        load_scores(score_path)
    assert excinfo.value.line_no == 1


def test_synth_spec_from_dict():
    spec = SynthSpec.from_dict({"n_target": "12", "noise_scale": 0.5, "seed": 4})
    assert (spec.n_target, spec.noise_scale, spec.seed) == (12, 0.5, 4)
    with pytest.raises(ValidationError, match="Unknown synth options"):
        SynthSpec.from_dict({"n_targets": 5})
    with pytest.raises(ValidationError, match="d_cm must be int"):
        SynthSpec.from_dict({"d_cm": "wide"})
    with pytest.raises(ValidationError, match="must be a number"):
        SynthSpec.from_dict({"n_spoof": True})


def test_read_trial_file_detects_text(tmp_path):
    path = _write_trials(tmp_path / "a.trials", "t1\ttarget\t1 2\t3 4\t5\n")
    assert len(read_trial_file(path)) == 1


def test_empty_body_gives_empty_dataset(tmp_path):
    trials = load_trials(_write_trials(tmp_path / "a.trials", ""))
    assert len(trials) == 0
    assert (trials.d_asv, trials.d_cm) == (2, 1)


def test_comments_and_blank_lines_skipped(tmp_path):
    path = _write_trials(tmp_path / "a.trials", "# comment\n\nt1\tspoof\t1 2\t3 4\t5\n")
    trials = load_trials(path)
    assert [r.label for r in trials] == [TrialClass.SPOOF]


@pytest.mark.parametrize("body, line_no, message", [
    ("t1\ttarget\t1 2\t3 4 5\t5\n", 2, "header declares 2"),
    ("t1\ttarget\t1 2\t3 4\n", 2, "5 TAB-separated"),
    ("t1\ttarget\t1 2\t3 4\t5\nt2\tbonafide\t1 2\t3 4\t5\n", 3, "unknown label"),
    ("t1\ttarget\t1 x\t3 4\t5\n", 2, "not a decimal"),
    ("t1\ttarget\t1 nan\t3 4\t5\n", 2, "non-finite"),
])
def test_malformed_trial_lines_report_line_numbers(tmp_path, body, line_no, message):
    """Test that malformed trial lines are reported with their line numbers."""
    path = _write_trials(tmp_path / "bad.trials", body)
    with pytest.raises(DataFormatError, match=message) as excinfo:
        load_trials(path)
    assert excinfo.value.line_no == line_no
    assert f":{line_no}" in str(excinfo.value)


def test_missing_header_rejected(tmp_path):
    path = tmp_path / "bad.trials"
    path.write_text("t1\ttarget\t1 2\t3 4\t5\n", encoding="utf-8")
    with pytest.raises(DataFormatError, match="header"):
        load_trials(path)


def test_scores_round_trip(tmp_path):
    records = [ScoredTrial("a", TrialClass.TARGET, 0.1 + 0.2), ScoredTrial("b", TrialClass.SPOOF, 1e-300),
               ScoredTrial("c", TrialClass.NONTARGET, -2.5)]
    loaded = load_scores(save_scores(records, tmp_path / "x.scores"))
    assert loaded == records
    assert load_score_set(tmp_path / "x.scores").counts == (1, 1, 1)
    assert to_score_set(records).tar.tolist() == [0.1 + 0.2]


def test_scores_reject_nan(tmp_path):
    path = tmp_path / "x.scores"
    path.write_text("a\ttarget\t0.5\nb\tspoof\tnan\n", encoding="utf-8")
    with pytest.raises(DataFormatError) as excinfo:
        load_scores(path)
    assert excinfo.value.line_no == 2


def test_empty_score_file(tmp_path):
    path = save_scores([], tmp_path / "x.scores")
    assert path.read_text(encoding="utf-8") == ""
    assert load_scores(path) == []


def test_synthetic_counts_exact():
    trials = generate_synthetic(SynthSpec(n_target=10, n_nontarget=5, n_spoof=5))
    assert len(trials) == 20
    assert trials.counts() == {TrialClass.TARGET: 10, TrialClass.NONTARGET: 5, TrialClass.SPOOF: 5}
    assert trials.input_dim == 2 * 16 + 8


def test_synthetic_is_deterministic():
    spec = SynthSpec(n_target=10, n_nontarget=5, n_spoof=5, seed=42)
    first, second = generate_synthetic(spec), generate_synthetic(spec)
    assert np.array_equal(first.features(), second.features())
    assert [r.trial_id for r in first] == [r.trial_id for r in second]
    other = generate_synthetic(SynthSpec(n_target=10, n_nontarget=5, n_spoof=5, seed=43))
    assert not np.array_equal(first.features(), other.features())


def test_synthetic_low_noise_is_linearly_separable():
    trials = generate_synthetic(SynthSpec(n_target=50, n_nontarget=50, n_spoof=50, noise_scale=0.01, separation=5.0))
    x, codes = trials.features(), trials.label_codes()
    target_mean = x[codes == 0].mean(axis=0)
    negative_mean = x[codes != 0].mean(axis=0)
    projection = x @ (target_mean - negative_mean)
    assert projection[codes == 0].min() > projection[codes != 0].max()


@pytest.mark.parametrize("kwargs", [
    dict(n_target=0, n_nontarget=0, n_spoof=0),
    dict(n_spoof=-1),
    dict(noise_scale=0.0),
    dict(d_asv=0),
    dict(separation=-1.0),
])
def test_synth_spec_validation(kwargs):
    with pytest.raises(ValidationError):
        SynthSpec(**kwargs)


def test_split_counts_and_partition():
    """Test split sizes, class balance and disjointness."""
    dataset = generate_synthetic(SynthSpec(d_asv=2, d_cm=1, n_target=500, n_nontarget=250, n_spoof=250))
    parts = split(dataset, (0.8, 0.1, 0.1), seed=1)
    assert [len(p) for p in parts] == [800, 100, 100]
    assert parts[0].counts() == {TrialClass.TARGET: 400, TrialClass.NONTARGET: 200, TrialClass.SPOOF: 200}
    assert parts[1].counts() == {TrialClass.TARGET: 50, TrialClass.NONTARGET: 25, TrialClass.SPOOF: 25}

    ids = [{r.trial_id for r in p} for p in parts]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert set().union(*ids) == {r.trial_id for r in dataset}


def test_split_is_deterministic():
    dataset = generate_synthetic(SynthSpec(d_asv=2, d_cm=1, n_target=30, n_nontarget=20, n_spoof=20))
    first = [[r.trial_id for r in p] for p in split(dataset, seed=7)]
    second = [[r.trial_id for r in p] for p in split(dataset, seed=7)]
    assert first == second


@pytest.mark.parametrize("fractions", [(1.0, 0.0, 0.0), (0.5, 0.3, 0.3), (0.5, -0.1, 0.6)])
def test_split_rejects_bad_fractions(fractions):
    dataset = generate_synthetic(SynthSpec(d_asv=2, d_cm=1, n_target=30, n_nontarget=20, n_spoof=20))
    with pytest.raises(ValidationError):
        split(dataset, fractions)


def test_split_rejects_tiny_class():
    dataset = generate_synthetic(SynthSpec(d_asv=2, d_cm=1, n_target=30, n_nontarget=20, n_spoof=2))
    with pytest.raises(ValidationError, match="spoof"):
        split(dataset, (0.8, 0.1, 0.1))
