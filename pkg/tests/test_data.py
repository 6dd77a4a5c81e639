import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binomtest

from eegmusic import data as D
from eegmusic.signal import Recording

SMALL = D.SynthSpec(tracks=10, segments_per_track=5, channels=4, dim=16)


@pytest.mark.parametrize("rating,label", [(5.0, 0), (5.01, 1), (1.0, 0), (9.0, 1)])
def test_binarize(rating, label):
    assert D.binarize(rating) == label


def test_binarize_out_of_range():
    with pytest.raises(ValueError):
        D.binarize(0.5)


def test_fold_sizes_balanced_34():
    trials = [(t, int(t % 2)) for t in range(1, 35)]
    split = D.stratified_folds(trials, 5, seed=3)
    sizes = sorted(len(split.test_trials(f)) for f in range(5))
    assert sizes == [6, 7, 7, 7, 7]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=5, max_size=60), st.integers(2, 5), st.integers(0, 10**6))
def test_folds_partition_and_stratify(labels, k, seed):
    trials = list(enumerate(labels, start=1))
    split = D.stratified_folds(trials, k, seed)
    seen = sorted(t for f in range(k) for t in split.test_trials(f))
    assert seen == [t for t, _ in trials]
    for f in range(k):
        assert not set(split.test_trials(f)) & set(split.train_trials(f))
    for c in (0, 1):
        n_c = sum(1 for y in labels if y == c)
        counts = [sum(1 for t in split.test_trials(f) if labels[t - 1] == c) for f in range(k)]
        assert max(counts) - min(counts) <= 1
        assert sum(counts) == n_c


def test_folds_deterministic_in_seed():
    trials = [(t, int(t % 3 == 0)) for t in range(1, 35)]
    assert D.stratified_folds(trials, 5, 1).assignments == D.stratified_folds(trials, 5, 1).assignments
    assert D.stratified_folds(trials, 5, 1).assignments != D.stratified_folds(trials, 5, 2).assignments


def test_folds_too_few_trials():
    with pytest.raises(ValueError):
        D.stratified_folds([(1, 0), (2, 1)], 5)


def test_class_weights():
    w = D.class_weights([1, 1, 1, 0])
    assert w[1] == pytest.approx(2 / 3)
    assert w[0] == pytest.approx(2.0)
    assert D.class_weights([0, 1]) == {0: 1.0, 1: 1.0}


def test_class_weights_single_class():
    assert D.class_weights([1, 1]) == {1: 1.0, 0: 1.0}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=2, max_size=50).filter(lambda x: 0 < sum(x) < len(x)))
def test_class_weights_balance_total_mass(labels):
    w = D.class_weights(labels)
    s = D.sample_weights(labels, w)
    ones = np.array(labels) == 1
    assert s[ones].sum() == pytest.approx(s[~ones].sum())


def test_standardizer_train_only():
    rng = np.random.default_rng(0)
    train = rng.normal(3, 2, size=(200, 4))
    tr, z, other = D.standardize(train, train + 1)
    np.testing.assert_allclose(z.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(0), 1, atol=1e-12)
    np.testing.assert_allclose(other, z + 1 / tr.std)


def test_standardizer_constant_feature():
    tr = D.Standardizer.fit(np.ones((5, 2)))
    assert np.all(np.isfinite(tr.apply(np.ones((1, 2)))))


def test_recording_roundtrip(tmp_path):
    x = np.random.default_rng(1).standard_normal((3, 256)).astype(np.float32).astype(float)
    rec = Recording(2, 7, 128.0, x, 6.5, 2.25)
    p = tmp_path / "a.eegx"
    D.write_recording(p, rec)
    back = D.load_recording(p)
    assert (back.subject_id, back.trial_id, back.sample_rate, back.valence, back.arousal) == (2, 7, 128.0, 6.5, 2.25)
    np.testing.assert_array_equal(back.data, x)


def test_recording_bad_magic_and_truncation(tmp_path):
    rec = Recording(1, 1, 128.0, np.zeros((2, 128)), 5.0, 5.0)
    p = tmp_path / "a.eegx"
    D.write_recording(p, rec)
    raw = p.read_bytes()
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(D.DataFormatError) as exc:
        D.load_recording(p)
    assert exc.value.field == "magic" and str(p) in str(exc.value)
    p.write_bytes(raw[:-4])
    with pytest.raises(D.DataFormatError) as exc:
        D.load_recording(p)
    assert exc.value.field == "data"
    assert str(len(raw)) in str(exc.value) and str(len(raw) - 4) in str(exc.value)


def test_embeddings_roundtrip_and_errors(tmp_path):
    e = D.TrackEmbeddingSet(4, np.arange(12, dtype=float).reshape(3, 4), 1, 0)
    p = tmp_path / "t.memb"
    D.write_embeddings(p, e)
    back = D.load_embeddings(p)
    assert (back.track_id, back.valence_tag, back.arousal_tag, back.dim) == (4, 1, 0, 4)
    np.testing.assert_array_equal(back.segment_embeddings, e.segment_embeddings)
    p.write_bytes(p.read_bytes()[:10])
    with pytest.raises(D.DataFormatError):
        D.load_embeddings(p)


@pytest.fixture(scope="module")
def small_synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    ds = D.synth_dataset(SMALL, separability=0.9, seed=5, out_dir=out)
    return ds, out / "manifest.csv"


def test_manifest_roundtrip(small_synth):
    ds, path = small_synth
    m = D.load_manifest(path)
    assert m.subjects == [1] and m.tracks == list(range(1, 11))
    sd = D.load_subject(m, 1)
    direct = ds.subject_data(1)
    np.testing.assert_array_equal(sd.eeg, direct.eeg)
    np.testing.assert_array_equal(sd.music, direct.music)
    assert sd.eeg.shape == (10, 5, 4, 12)
    assert len(list(sd.instances("valence"))) == 50


def test_manifest_exclude_tracks(small_synth):
    _, path = small_synth
    assert D.load_manifest(path, exclude_tracks=[1, 2]).tracks == list(range(3, 11))


def test_manifest_errors_name_field(small_synth, tmp_path):
    _, path = small_synth
    with pytest.raises(D.DataFormatError) as exc:
        D.load_manifest(tmp_path / "none.csv")
    assert exc.value.field == "manifest"
    lines = path.read_text().splitlines()
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join([lines[0], lines[1].replace("eeg/", "eeg/missing_")]) + "\n")
    with pytest.raises(D.DataFormatError) as exc:
        D.load_manifest(bad)
    assert "eeg_path" in exc.value.field
    bad.write_text("subject,trial\n1,1\n")
    with pytest.raises(D.DataFormatError) as exc:
        D.load_manifest(bad)
    assert exc.value.field == "header"


def test_dimension_mismatch(small_synth):
    _, path = small_synth
    with pytest.raises(D.DataFormatError) as exc:
        D.load_subject(D.load_manifest(path), 1, expected_dim=32)
    assert exc.value.field == "dim"


def test_features_npz_roundtrip(small_synth, tmp_path):
    ds, _ = small_synth
    sd = ds.subject_data(1)
    D.save_features(tmp_path / "f.npz", sd)
    back = D.load_features(tmp_path / "f.npz")
    np.testing.assert_array_equal(back.eeg, sd.eeg)
    np.testing.assert_array_equal(back.labels("valence"), sd.labels("valence"))


def test_synth_labels_consistent(small_synth):
    ds, _ = small_synth
    sd = ds.subject_data(1)
    for d in D.DIMENSIONS:
        np.testing.assert_array_equal(sd.labels(d), sd.tags[d])


def _digest(folder: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(folder.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(folder).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_bit_identical(tmp_path):
    D.synth_dataset(SMALL, seed=9, out_dir=tmp_path / "a")
    D.synth_dataset(SMALL, seed=9, out_dir=tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    D.synth_dataset(SMALL, seed=10, out_dir=tmp_path / "c")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_synth_rejects_few_tracks():
    with pytest.raises(ValueError, match="at least 10"):
        D.synth_dataset(D.SynthSpec(tracks=5))


def perceptron_fits(x, y, epochs=1000):
    """Classic perceptron; True once an epoch passes with no mistakes."""
    xb = np.c_[x, np.ones(len(x))]
    w = np.zeros(xb.shape[1])
    s = np.where(y == 1, 1.0, -1.0)
    for _ in range(epochs):
        mistakes = 0
        for xi, si in zip(xb, s):
            if si * (xi @ w) <= 0:
                w += si * xi
                mistakes += 1
        if mistakes == 0:
            return True
    return False


def test_separable_music_is_linearly_separable():
    ds = D.synth_dataset(D.SynthSpec(tracks=20, segments_per_track=10, channels=2, dim=32),
                         separability=1.0, seed=1)
    x = np.concatenate([e.segment_embeddings for e in ds.embeddings.values()])
    y = np.concatenate([[e.valence_tag] * len(e.segment_embeddings) for e in ds.embeddings.values()])
    assert perceptron_fits(x, np.array(y))


def test_zero_separability_is_chance():
    hits, n = 0, 0
    for seed in range(6):
        ds = D.synth_dataset(D.SynthSpec(tracks=20, segments_per_track=4, channels=4, dim=16),
                             separability=0.0, seed=seed)
        sd = ds.subject_data(1)
        x = np.c_[sd.eeg.mean(1).reshape(20, -1), sd.music.mean(1)]
        y = sd.labels("valence")
        # nearest class centroid fitted on even trials, scored on odd ones
        tr, te = np.arange(0, 20, 2), np.arange(1, 20, 2)
        if len(set(y[tr])) < 2:
            continue
        cents = np.stack([x[tr][y[tr] == c].mean(0) for c in (0, 1)])
        pred = np.argmin(((x[te, None] - cents[None]) ** 2).sum(-1), axis=1)
        hits += int((pred == y[te]).sum())
        n += len(te)
    assert binomtest(hits, n, 0.5).pvalue > 0.05
