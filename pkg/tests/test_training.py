import math

import numpy as np
import pytest

from eegmusic import autodiff as ad
from eegmusic import data as D
from eegmusic import model as M
from eegmusic import training as T
from eegmusic.autodiff import Tensor

SPEC = D.SynthSpec(tracks=10, segments_per_track=4, channels=3, dim=8)
DIMS_SMALL = dict(lstm_hidden=4, attention_dim=4, music_hidden=(8,), disc_hidden=4, embed_dim=6)
QUICK = T.TrainConfig(learning_rate=1e-2, batch_size=8, max_epochs=3, patience=2, folds=3)


@pytest.fixture(scope="module")
def subject():
    return D.synth_dataset(SPEC, separability=0.9, seed=2).subject_data(1)


def small_dims(sd):
    return T.dims_for(sd, M.ModelDims(1, 1, 1, **DIMS_SMALL))


def test_mix_modality_takes_one_row_per_pair():
    n = 10
    u = Tensor(np.arange(n, dtype=float)[:, None] * np.ones((1, 3)))
    v = Tensor(-np.arange(1, n + 1, dtype=float)[:, None] * np.ones((1, 3)))
    z, labels = T.mix_domain_batch(u, v, np.random.default_rng(0))
    assert z.shape == (n, 3) and labels.sum() == n // 2
    rows = z.data[:, 0]
    np.testing.assert_array_equal(labels == 1, rows < 0)
    pair = np.where(rows < 0, -rows - 1, rows).astype(int)
    assert sorted(pair) == list(range(n))


def test_mix_pairing_products_and_labels():
    n = 8
    rng = np.random.default_rng(3)
    u, v = Tensor(rng.normal(size=(n, 2))), Tensor(rng.normal(size=(n, 2)))
    z, labels = T.mix_domain_batch(u, v, np.random.default_rng(1), "pairing")
    assert labels.sum() == n // 2
    true_prods = u.data * v.data
    for row, lab in zip(z.data, labels):
        matched = np.any(np.all(np.isclose(true_prods, row), axis=1))
        assert matched == (lab == 1)


def test_mix_rejects_odd_batch():
    with pytest.raises(ValueError):
        T.mix_domain_batch(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2))), np.random.default_rng(0))


def test_mix_gradient_routes_back_to_rows():
    u = Tensor(np.ones((4, 2)), requires_grad=True)
    v = Tensor(np.ones((4, 2)), requires_grad=True)
    with ad.Graph() as g:
        z, _ = T.mix_domain_batch(u, v, np.random.default_rng(0))
        loss = ad.sum_all(z)
    grads = ad.backward(g, loss)
    # every pair contributes exactly one row
    np.testing.assert_array_equal(grads[u].sum(1) + grads[v].sum(1), 2.0)


@pytest.mark.parametrize("kwargs,ablation,expected", [
    ({}, "full", {"lambda1": 1.0, "lambda2": 0.5, "lambda11": 1.0, "lambda12": 1.0}),
    ({"domain_discriminator": False}, "no_ell_dd", {"lambda1": 1.0, "lambda2": 0.0, "lambda11": 1.0, "lambda12": 1.0}),
    ({"music_supervision": False}, "ell_a_only", {"lambda1": 1.0, "lambda2": 0.0, "lambda11": 1.0, "lambda12": 0.0}),
])
def test_effective_lambdas(kwargs, ablation, expected):
    cfg = T.TrainConfig(**kwargs)
    assert cfg.ablation == ablation
    assert cfg.effective_lambdas() == expected


@pytest.mark.parametrize("kwargs", [
    {"patience": 0}, {"batch_size": 3}, {"max_epochs": 0}, {"mix_mode": "x"}, {"validation": "x"}, {"lambda2": -1.0},
    {"folds": 2}, {"folds": 1, "validation": "heldout"},
])
def test_config_rejects(kwargs):
    with pytest.raises(ValueError):
        T.TrainConfig(**kwargs)


def _batch(sd, cfg, n=8):
    fd = T.flatten_trials(sd, np.arange(len(sd.trials)), "valence")
    idx = np.arange(n)
    return T._batch(fd, idx, D.class_weights(fd.eeg_labels), D.class_weights(fd.music_labels))


def test_objective_combines_terms(subject):
    dims = small_dims(subject)
    model = M.init_params(dims, 0)
    cfg = T.TrainConfig(lambda1=0.7, lambda2=0.3, lambda11=2.0, lambda12=0.5)
    with ad.Graph():
        b, J = T.compute_objective(_batch(subject, cfg), model, cfg, np.random.default_rng(0))
    assert b.J1 == pytest.approx(2.0 * b.ell_a + 0.5 * b.ell_b)
    assert b.J == pytest.approx(0.7 * b.J1 + 0.3 * b.ell_dd)
    assert J.item() == pytest.approx(b.J, rel=1e-12)
    assert 0.0 <= b.dd_acc <= 1.0


def test_objective_ablations_drop_terms(subject):
    dims = small_dims(subject)
    model = M.init_params(dims, 0)
    cfg = T.TrainConfig(music_supervision=False)
    with ad.no_grad():
        b, J = T.compute_objective(_batch(subject, cfg), model, cfg, np.random.default_rng(0))
    assert b.ell_b == 0.0 and b.ell_dd == 0.0 and math.isnan(b.dd_acc)
    assert J.item() == pytest.approx(b.ell_a)


def test_reversal_flips_branch_gradient_of_domain_term(subject):
    dims = small_dims(subject)
    batch = _batch(subject, QUICK)

    def branch_grad(lambda_grl):
        model = M.init_params(dims, 1)
        cfg = T.TrainConfig(lambda1=0.0, lambda_grl=lambda_grl)
        with ad.Graph() as g:
            _, J = T.compute_objective(batch, model, cfg, np.random.default_rng(0))
        grads = ad.backward(g, J)
        return grads[model.music.weights[0]], grads[model.head.disc_w1]

    m_plus, d_plus = branch_grad(1.0)
    m_half, d_half = branch_grad(0.5)
    np.testing.assert_allclose(m_half, 0.5 * m_plus, rtol=1e-10, atol=1e-14)
    np.testing.assert_array_equal(d_half, d_plus)


def test_train_fold_early_stopping_rule(subject):
    dims = small_dims(subject)
    rows = np.arange(len(subject.trials))
    fd = T.flatten_trials(subject, rows, "valence")
    cfg = T.TrainConfig(learning_rate=0.05, batch_size=8, max_epochs=30, patience=1)
    _, report = T.train_fold(fd, fd, cfg, dims, (0,))
    vals = [r.val_J for r in report.epochs]
    assert report.stop_epoch == len(vals)
    assert report.best_val == min(vals)
    assert vals[report.best_epoch - 1] == report.best_val
    if report.stop_epoch < cfg.max_epochs:
        assert report.stop_epoch == report.best_epoch + 1
        assert vals[-1] >= report.best_val


def test_train_fold_restores_best_parameters(subject):
    dims = small_dims(subject)
    fd = T.flatten_trials(subject, np.arange(len(subject.trials)), "valence")
    cfg = T.TrainConfig(learning_rate=0.05, batch_size=8, max_epochs=6, patience=3)
    model, report = T.train_fold(fd, fd, cfg, dims, (4,))
    again = T.evaluate_objective(model, fd, cfg, D.class_weights(fd.eeg_labels),
                                 D.class_weights(fd.music_labels), (4, 3))
    assert again.J == pytest.approx(report.best_val, rel=1e-12)


def test_non_finite_loss_raises(subject):
    dims = small_dims(subject)
    fd = T.flatten_trials(subject, np.arange(len(subject.trials)), "valence")
    fd.eeg = fd.eeg.copy()
    fd.eeg[0, 0, 0] = np.nan
    with pytest.raises(T.TrainingError, match="non-finite"):
        T.train_fold(fd, fd, T.TrainConfig(batch_size=len(fd) - len(fd) % 2, max_epochs=1), dims)


def test_fold_seed_and_training_deterministic(subject):
    assert T.fold_seed(1, 2, 3) == T.fold_seed(1, 2, 3) != T.fold_seed(1, 2, 4)
    dims = small_dims(subject)
    fd = T.flatten_trials(subject, np.arange(len(subject.trials)), "valence")
    a, ra = T.train_fold(fd, fd, QUICK, dims, T.fold_seed(0, 1, 0))
    b, rb = T.train_fold(fd, fd, QUICK, dims, T.fold_seed(0, 1, 0))
    assert ra == rb
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.parameters(), b.parameters()))


@pytest.mark.parametrize("validation", ["inner", "heldout"])
def test_split_rows_disjoint(subject, validation):
    split = T.make_split(subject, "valence", T.TrainConfig(folds=5))
    for f in range(5):
        train, val, test = T.split_rows(subject, split, f, validation)
        assert not set(train) & set(test)
        assert not set(train) & set(val)
        if validation == "inner":
            assert not set(val) & set(test)
            assert len(train) + len(val) + len(test) == len(subject.trials)
        else:
            assert list(val) == list(test)


def test_cross_validate_covers_every_trial(subject):
    cv = T.cross_validate(subject, "valence", QUICK, M.ModelDims(1, 1, 1, **DIMS_SMALL))
    tested = sorted(int(r) for f in cv.folds for r in f.test_rows)
    assert tested == list(range(len(subject.trials)))
    for f in cv.folds:
        assert f.eeg_embeddings.shape == (len(f.test_rows), 4, 6)
        assert f.music_embeddings.shape == (10, 4, 6)
        assert f.eeg_probs.shape == (len(f.test_rows), 4)
        assert f.model.eeg_transform is not None


def test_cross_validate_parallel_matches_serial(subject):
    dims = M.ModelDims(1, 1, 1, **DIMS_SMALL)
    a = T.cross_validate(subject, "arousal", QUICK, dims, jobs=1)
    b = T.cross_validate(subject, "arousal", QUICK, dims, jobs=2)
    for fa, fb in zip(a.folds, b.folds):
        assert fa.eeg_embeddings.tobytes() == fb.eeg_embeddings.tobytes()


def test_domain_probe_leaves_branches_untouched(subject):
    dims = small_dims(subject)
    model = M.init_params(dims, 2)
    fd = T.flatten_trials(subject, np.arange(len(subject.trials)), "valence")
    probe = T.fit_domain_probe(model, fd.eeg, fd.music, epochs=2, batch_size=8)
    for a, b in zip(model.eeg.tensors() + model.music.tensors(), probe.eeg.tensors() + probe.music.tensors()):
        assert a.data.tobytes() == b.data.tobytes()
    acc = T.domain_accuracy(probe, fd.eeg, fd.music)
    assert 0.0 <= acc <= 1.0
