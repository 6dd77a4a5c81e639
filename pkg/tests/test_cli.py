import logging

import numpy as np
import pytest

from eegmusic import cli

SMALL_MODEL = """
[model]
lstm_hidden = 6
attention_dim = 6
music_hidden = 12
disc_hidden = 6
[train]
max_epochs = 2
learning_rate = 0.01
batch_size = 16
folds = 3
[run]
seed = 4
"""


@pytest.fixture(autouse=True)
def _quiet_logs():
    yield
    logging.getLogger("eegmusic").handlers[:] = []
    logging.getLogger("eegmusic").propagate = True


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "data"), "--tracks", "10", "--segments", "6",
                     "--channels", "3", "--dim", "12", "--seed", "2"]) == 0
    cfg = root / "cfg.ini"
    cfg.write_text(f"[data]\nmanifest = data/manifest.csv\n{SMALL_MODEL}")
    return root, cfg


@pytest.fixture(scope="module")
def trained(dataset):
    root, cfg = dataset
    assert cli.main(["train", "--config", str(cfg), "--out", str(root / "runs"), "--dimension", "valence"]) == 0
    return root / "runs" / "valence_full"


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_synth_rejects_few_tracks(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path), "--tracks", "5"]) == 2


def test_synth_is_byte_identical(tmp_path):
    args = ["--tracks", "10", "--segments", "3", "--channels", "2", "--dim", "4", "--seed", "9"]
    assert cli.main(["synth", "--out", str(tmp_path / "a"), *args]) == 0
    assert cli.main(["synth", "--out", str(tmp_path / "b"), *args]) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert len(a) == 1 + 10 + 10 and a == b


def test_usage_error_exit_code():
    assert cli.main(["train", "--dimension", "joy"]) == 2
    assert cli.main([]) == 2


def test_missing_manifest_names_field(tmp_path, capsys):
    assert cli.main(["train", "--manifest", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "field=manifest" in err and "level=error" in err


def test_unset_manifest_names_field(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path)]) == 2
    assert "field=data.manifest" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\nlearning_rat = 0.1\n")
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "train.learning_rat" in capsys.readouterr().err
    cfg.write_text("[bogus]\nx = 1\n")
    assert cli.main(["train", "--config", str(cfg)]) == 2


def test_bad_config_value_rejected(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\nbatch_size = 3\n[data]\nmanifest = m.csv\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_flags_override_file(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\nlearning_rate = 0.5\nmusic_supervision = yes\n[run]\ndimension = arousal\n")
    rc = cli.load_config(str(cfg), {("train", "learning_rate"): 0.25, ("train", "music_supervision"): False})
    assert rc.get("train", "learning_rate") == 0.25
    assert rc.train_config().ablation == "ell_a_only"
    assert rc.get("run", "dimension") == "arousal"
    assert rc.get("train", "patience") == 15


def test_config_roundtrip_through_ini(tmp_path):
    rc = cli.load_config(None, {("model", "music_hidden"): (7, 5), ("data", "subjects"): (1, 3)})
    p = tmp_path / "r.ini"
    p.write_text(rc.to_ini())
    assert cli.load_config(str(p), {}).values == rc.values


def test_ablation_flags_name_the_run(dataset):
    root, cfg = dataset
    args = ["--config", str(cfg), "--out", str(root / "abl"), "--epochs", "1"]
    assert cli.main(["train", *args, "--dimension", "valence", "--no-music"]) == 0
    assert cli.main(["train", *args, "--dimension", "arousal", "--no-grl"]) == 0
    assert (root / "abl" / "valence_ell_a_only" / "s1_f0.cmaf").is_file()
    assert (root / "abl" / "arousal_no_ell_dd" / "s1_f2.cmaf").is_file()
    ini = (root / "abl" / "valence_ell_a_only" / "run.ini").read_text()
    assert "music_supervision = False" in ini


def test_train_outputs(trained):
    names = sorted(p.name for p in trained.iterdir())
    assert names == ["epochs.tsv", "folds.tsv", "run.ini", "s1_f0.cmaf", "s1_f1.cmaf", "s1_f2.cmaf"]
    folds = (trained / "folds.tsv").read_text().splitlines()
    assert folds[0] == "subject\ttrial\tfold" and len(folds) == 11
    epochs = (trained / "epochs.tsv").read_text().splitlines()
    assert epochs[0].split("\t")[:3] == ["subject", "fold", "epoch"] and len(epochs) == 1 + 3 * 2


def test_eval_report(trained):
    assert cli.main(["eval", "--checkpoints", str(trained)]) == 0
    lines = (trained / "metrics_valence_full.tsv").read_text().splitlines()
    header = lines[0].split("\t")
    assert {"acc_agg_eeg", "p_at_10", "map"} <= set(header)
    assert [l.split("\t")[0] for l in lines[1:]] == ["1", "mean"]


def test_eval_dimension_mismatch(dataset, trained, tmp_path):
    root, _ = dataset
    assert cli.main(["synth", "--out", str(tmp_path / "other"), "--tracks", "10", "--segments", "6",
                     "--channels", "4", "--dim", "12", "--seed", "2"]) == 0
    assert cli.main(["eval", "--checkpoints", str(trained), "--manifest",
                     str(tmp_path / "other" / "manifest.csv"), "--out", str(tmp_path)]) == 2


def test_retrieve_lists_ranking(trained, tmp_path):
    out = tmp_path / "r.tsv"
    assert cli.main(["retrieve", "--checkpoints", str(trained), "--trial", "4", "--corpus", "full",
                     "--output", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "rank\ttrack\tdistance\trelevant" and len(lines) == 11
    d = [float(l.split("\t")[2]) for l in lines[1:]]
    assert d == sorted(d)
    assert cli.main(["retrieve", "--checkpoints", str(trained), "--trial", "99"]) == 2


def test_temporal_tables(trained, tmp_path):
    assert cli.main(["temporal", "--checkpoints", str(trained), "--out", str(tmp_path)]) == 0
    d = tmp_path / "temporal_valence_full"
    assert len(list(d.glob("track_*.tsv"))) == 10
    rows = (d / "all_tracks.tsv").read_text().splitlines()
    assert rows[0] == "segment_index\tmap_raw\tmap_smoothed" and len(rows) == 1 + 6


def test_export_counts(trained, tmp_path):
    out = tmp_path / "e.tsv"
    assert cli.main(["export", "--checkpoints", str(trained), "--output", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 2 * 10 * 6
    assert len(lines[0].split("\t")) == 70
    mods = [l.split("\t")[4] for l in lines[1:]]
    assert mods.count("eeg") == mods.count("music") == 60


def test_features_cache_matches_manifest(dataset, tmp_path):
    root, cfg = dataset
    assert cli.main(["features", "--config", str(cfg), "--out", str(tmp_path / "f")]) == 0
    a = cli.load_dataset(cli.load_config(str(cfg), {}))[0]
    b = cli.load_dataset(cli.load_config(None, {("data", "features_dir"): str(tmp_path / "f")}))[0]
    np.testing.assert_array_equal(a.eeg, b.eeg)
    np.testing.assert_array_equal(a.music, b.music)


def test_sweep_table(dataset, tmp_path):
    root, cfg = dataset
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path), "--epochs", "1",
                     "--grid-lambda2", "0,0.5", "--grid-lambda12", "1"]) == 0
    lines = (tmp_path / "sweep_valence_full.tsv").read_text().splitlines()
    assert lines[0].startswith("lambda1\tlambda2\tlambda11\tlambda12\t") and len(lines) == 3


def test_repeat_runs_are_byte_identical(dataset, trained, tmp_path):
    root, cfg = dataset
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path), "--dimension", "valence",
                     "--jobs", "2"]) == 0
    again = tmp_path / "valence_full"
    for d in (trained, again):
        assert cli.main(["eval", "--checkpoints", str(d)]) == 0
        assert cli.main(["export", "--checkpoints", str(d)]) == 0
        assert cli.main(["temporal", "--checkpoints", str(d)]) == 0
    assert files(trained) == files(again)
