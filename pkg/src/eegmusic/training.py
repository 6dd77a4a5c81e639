"""Joint objective, domain-batch mixing, early-stopped training and cross-validation."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (FoldSplit, Standardizer, SubjectData, class_weights, make_rng, sample_weights,
                   stratified_folds)
from .model import (BiStreamModel, ModelDims, classify, discriminate, eeg_forward, init_params,
                    music_forward)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    patience: int = 15
    max_epochs: int = 300
    batch_size: int = 32
    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda11: float = 1.0
    lambda12: float = 1.0
    lambda_grl: float = 1.0
    music_supervision: bool = True
    domain_discriminator: bool = True
    mix_mode: str = "modality"  # or "pairing"
    validation: str = "inner"  # or "heldout"
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.mix_mode not in ("modality", "pairing"):
            raise ValueError(f"unknown mix_mode {self.mix_mode!r}")
        if self.validation not in ("inner", "heldout"):
            raise ValueError(f"unknown validation {self.validation!r}")
        if self.folds < 2 or (self.validation == "inner" and self.folds < 3):
            raise ValueError(f"{self.folds} folds leave no training data with {self.validation} validation")
        if min(self.lambda1, self.lambda2, self.lambda11, self.lambda12, self.lambda_grl) < 0:
            raise ValueError("lambdas must be non-negative")

    @property
    def ablation(self) -> str:
        if not self.music_supervision:
            return "ell_a_only"
        if not self.domain_discriminator:
            return "no_ell_dd"
        return "full"

    def effective_lambdas(self) -> dict[str, float]:
        """Loss weights after ablation switches are applied.

        Without music supervision there are no music embeddings, so the
        domain term drops out as well.
        """
        l12 = self.lambda12 if self.music_supervision else 0.0
        l2 = self.lambda2 if (self.music_supervision and self.domain_discriminator) else 0.0
        return {"lambda1": self.lambda1, "lambda2": l2, "lambda11": self.lambda11, "lambda12": l12}


@dataclass
class LossBundle:
    ell_a: float
    ell_b: float
    ell_dd: float
    J1: float
    J2: float
    J: float
    lambdas: dict[str, float]
    dd_acc: float = math.nan  # discriminator accuracy on the mixed batch


@dataclass
class Batch:
    eeg: np.ndarray  # B x C x F, standardized
    music: np.ndarray  # B x D, standardized
    eeg_labels: np.ndarray
    music_labels: np.ndarray
    eeg_weights: np.ndarray
    music_weights: np.ndarray

    def __len__(self):
        return len(self.eeg_labels)


@dataclass
class EpochRecord:
    epoch: int
    ell_a: float
    ell_b: float
    ell_dd: float
    J: float
    val_J: float
    dd_acc: float = math.nan


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    stop_epoch: int
    best_epoch: int
    best_val: float
    fold: int = -1
    wall_clock: float = field(default=0.0, compare=False)


def mix_domain_batch(u: Tensor, v: Tensor, rng: np.random.Generator, mode: str = "modality"):
    """Build the discriminator batch from paired EEG (``u``) and music (``v``) embeddings.

    modality: a random half of the pairs contribute their EEG row (label 0),
    the other half their music row (label 1), then the rows are shuffled.
    pairing: half of the pairs keep their partner (label 1), the others get a
    shuffled partner (label 0); each row is the elementwise product u*v.
    Returns the mixed tensor and the label array.
    """
    n = u.shape[0]
    if n % 2:
        raise ValueError(f"mix_domain_batch needs an even batch, got {n}")
    if v.shape != u.shape:
        raise ad.ShapeError("mix_domain_batch", u.shape, v.shape)
    half = n // 2
    pick = rng.permutation(n)
    if mode == "modality":
        eeg_idx, music_idx = np.sort(pick[:half]), np.sort(pick[half:])
        rows = np.concatenate([eeg_idx, n + music_idx])
        labels = np.concatenate([np.zeros(half), np.ones(half)])
        order = rng.permutation(n)
        return ad.gather_rows(ad.concat([u, v], axis=0), rows[order]), labels[order]
    if mode == "pairing":
        partner = np.arange(n)
        moved = np.sort(pick[:half])
        # a derangement of the moved indices (cyclic shift of a random order)
        partner[moved] = np.roll(moved, 1)
        labels = np.ones(n)
        labels[moved] = 0.0
        order = rng.permutation(n)
        prod = ad.mul(u, ad.gather_rows(v, partner))
        return ad.gather_rows(prod, order), labels[order]
    raise ValueError(f"unknown mix mode {mode!r}")


def compute_objective(batch: Batch, model: BiStreamModel, config: TrainConfig,
                      rng: np.random.Generator) -> tuple[LossBundle, Tensor]:
    """Forward pass of the full objective. Call inside an active ``Graph``."""
    lam = config.effective_lambdas()
    u, _ = eeg_forward(batch.eeg, model.eeg)
    p_a = classify(u, model.head)
    ell_a = ad.bce(p_a, batch.eeg_labels, batch.eeg_weights)
    use_music = config.music_supervision
    if use_music:
        v = music_forward(batch.music, model.music)
        ell_b = ad.bce(classify(v, model.head), batch.music_labels, batch.music_weights)
        J1 = ad.add(ad.scale(ell_a, lam["lambda11"]), ad.scale(ell_b, lam["lambda12"]))
    else:
        ell_b = None
        J1 = ad.scale(ell_a, lam["lambda11"])
    if use_music and config.domain_discriminator:
        z, dom = mix_domain_batch(u, v, rng, config.mix_mode)
        p_dd = discriminate(z, config.lambda_grl, model.head)
        ell_dd = ad.bce(p_dd, dom)
        dd_acc = float(np.mean((p_dd.data >= 0.5) == (dom == 1)))
        J = ad.add(ad.scale(J1, lam["lambda1"]), ad.scale(ell_dd, lam["lambda2"]))
    else:
        ell_dd = None
        dd_acc = math.nan
        J = ad.scale(J1, lam["lambda1"])
    fa = ell_a.item()
    fb = ell_b.item() if ell_b is not None else 0.0
    fd = ell_dd.item() if ell_dd is not None else 0.0
    j1 = lam["lambda11"] * fa + lam["lambda12"] * fb
    bundle = LossBundle(fa, fb, fd, j1, fd, lam["lambda1"] * j1 + lam["lambda2"] * fd, lam, dd_acc)
    return bundle, J


@dataclass
class FoldData:
    """Standardized arrays for one split, flattened to instances."""

    eeg: np.ndarray
    music: np.ndarray
    eeg_labels: np.ndarray
    music_labels: np.ndarray
    trial_index: np.ndarray

    def __len__(self):
        return len(self.eeg_labels)


def flatten_trials(data: SubjectData, rows: np.ndarray, dimension: str) -> FoldData:
    S = data.n_segments
    eeg = data.eeg[rows].reshape(len(rows) * S, *data.eeg.shape[2:])
    music = data.music[rows].reshape(len(rows) * S, data.music.shape[-1])
    ya = np.repeat(data.labels(dimension)[rows], S)
    yb = np.repeat(data.tags[dimension][rows], S)
    return FoldData(eeg, music, ya, yb, np.repeat(rows, S))


def _batch(fd: FoldData, idx, wa: dict, wb: dict) -> Batch:
    ya, yb = fd.eeg_labels[idx], fd.music_labels[idx]
    return Batch(fd.eeg[idx], fd.music[idx], ya.astype(float), yb.astype(float),
                 sample_weights(ya, wa), sample_weights(yb, wb))


def _check_finite(bundle: LossBundle, epoch: int, batch: int) -> None:
    vals = (bundle.ell_a, bundle.ell_b, bundle.ell_dd, bundle.J)
    if not all(math.isfinite(v) for v in vals):
        raise TrainingError(
            f"non-finite loss at epoch {epoch} batch {batch}: ell_a={bundle.ell_a} ell_b={bundle.ell_b} "
            f"ell_dd={bundle.ell_dd} J={bundle.J}")


def evaluate_objective(model: BiStreamModel, fd: FoldData, config: TrainConfig, wa, wb,
                       seed_key: Sequence[int]) -> LossBundle:
    """Objective on a whole split without recording; mixing uses a fixed stream."""
    n = len(fd) - len(fd) % 2
    batch = _batch(fd, np.arange(n), wa, wb)
    with ad.no_grad():
        bundle, _ = compute_objective(batch, model, config, make_rng(*seed_key))
    return bundle


def train_fold(train: FoldData, val: FoldData, config: TrainConfig, dims: ModelDims,
               seed_key: Sequence[int] = (0,), fold: int = -1,
               model: BiStreamModel | None = None) -> tuple[BiStreamModel, TrainReport]:
    """Adam on J with early stopping on validation J; returns best-epoch parameters."""
    t0 = time.perf_counter()
    model = model if model is not None else init_params(dims, int(make_rng(*seed_key, 1).integers(2**31)))
    params = model.parameters()
    opt = ad.Adam(params, lr=config.learning_rate)
    wa = class_weights(train.eeg_labels)
    wb = class_weights(train.music_labels)
    rng = make_rng(*seed_key, 2)
    best_val, best_epoch, best_state = math.inf, 0, model.snapshot()
    since_best = 0
    records: list[EpochRecord] = []
    B = config.batch_size
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        sums = np.zeros(5)
        count = 0
        for b, start in enumerate(range(0, len(order), B)):
            idx = order[start:start + B]
            if len(idx) % 2:
                idx = idx[:-1]
            if len(idx) < 2:
                continue
            batch = _batch(train, idx, wa, wb)
            with ad.Graph() as g:
                bundle, J = compute_objective(batch, model, config, rng)
            _check_finite(bundle, epoch, b)
            grads = ad.backward(g, J)
            try:
                opt.step(grads)
            except ad.NonFiniteGradientError as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}; losses {bundle}") from exc
            sums += len(idx) * np.array([bundle.ell_a, bundle.ell_b, bundle.ell_dd, bundle.J, bundle.dd_acc])
            count += len(idx)
        vb = evaluate_objective(model, val, config, wa, wb, (*seed_key, 3))
        _check_finite(vb, epoch, -1)
        m = sums / max(count, 1)
        rec = EpochRecord(epoch, *m[:4], vb.J, m[4])
        records.append(rec)
        log.debug("fold=%d epoch=%d ell_a=%.6f ell_b=%.6f ell_dd=%.6f J=%.6f val_J=%.6f dd_acc=%.4f",
                  fold, epoch, rec.ell_a, rec.ell_b, rec.ell_dd, rec.J, rec.val_J, rec.dd_acc)
        if vb.J < best_val:
            best_val, best_epoch, best_state = vb.J, epoch, model.snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    model.restore(best_state)
    report = TrainReport(records, epoch, best_epoch, best_val, fold, time.perf_counter() - t0)
    return model, report


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    """A trained fold model plus everything evaluation needs."""

    fold: int
    model: BiStreamModel
    report: TrainReport | None
    test_rows: np.ndarray
    eeg_embeddings: np.ndarray  # test trials x segments x 64
    eeg_probs: np.ndarray  # test trials x segments
    music_embeddings: np.ndarray  # all subject trials x segments x 64 (stimulus of each trial)
    music_probs: np.ndarray


@dataclass
class CVResult:
    subject: int
    dimension: str
    config: TrainConfig
    split: FoldSplit
    data: SubjectData
    folds: list[FoldResult]

    @property
    def reports(self) -> list[TrainReport]:
        return [f.report for f in self.folds]


def fold_seed(seed: int, subject: int, fold: int) -> tuple[int, int, int]:
    return (int(seed), int(subject), int(fold))


def make_split(data: SubjectData, dimension: str, config: TrainConfig) -> FoldSplit:
    labels = data.labels(dimension)
    return stratified_folds(list(zip(data.trials.tolist(), labels.tolist())), config.folds,
                            seed=int(make_rng(config.seed, data.subject).integers(2**31)))


def split_rows(data: SubjectData, split: FoldSplit, fold: int, validation: str):
    """Row indices for (train, validation, test) of ``fold``.

    inner: the next fold (cyclically) is held out of training for early
    stopping. heldout: the test fold doubles as the validation set.
    """
    test = data.index_of(split.test_trials(fold))
    if validation == "heldout":
        train = data.index_of(split.train_trials(fold))
        return train, test, test
    vfold = (fold + 1) % split.k
    val = data.index_of(split.test_trials(vfold))
    train = data.index_of(sorted(t for t, f in split.assignments.items() if f not in (fold, vfold)))
    return train, val, test


def run_fold(data: SubjectData, dimension: str, config: TrainConfig, dims: ModelDims,
             split: FoldSplit, fold: int) -> FoldResult:
    train_rows, val_rows, test_rows = split_rows(data, split, fold, config.validation)
    F = data.eeg.shape[2:]
    eeg_tr = Standardizer.fit(data.eeg[train_rows].reshape(-1, *F))
    mus_tr = Standardizer.fit(data.music[train_rows].reshape(-1, data.music.shape[-1]))

    def prepared(rows):
        fd = flatten_trials(data, rows, dimension)
        fd.eeg = eeg_tr.apply(fd.eeg)
        fd.music = mus_tr.apply(fd.music)
        return fd

    key = fold_seed(config.seed, data.subject, fold)
    model, report = train_fold(prepared(train_rows), prepared(val_rows), config, dims, key, fold)
    model.eeg_transform, model.music_transform = eeg_tr, mus_tr
    return fold_outputs(model, data, fold, test_rows, report)


def fold_outputs(model: BiStreamModel, data: SubjectData, fold: int, test_rows: np.ndarray,
                 report: TrainReport | None = None) -> FoldResult:
    """Embeddings and probabilities of a trained fold model (transforms attached)."""
    S = data.n_segments
    F = data.eeg.shape[2:]
    u = model.embed_eeg(data.eeg[test_rows].reshape(-1, *F))
    v = model.embed_music(data.music.reshape(-1, data.music.shape[-1]))
    return FoldResult(
        fold, model, report, test_rows,
        u.reshape(len(test_rows), S, -1), model.predict(u).reshape(len(test_rows), S),
        v.reshape(len(data.trials), S, -1), model.predict(v).reshape(len(data.trials), S),
    )


def dims_for(data: SubjectData, base: ModelDims | None = None) -> ModelDims:
    C, F = data.eeg.shape[2:]
    D = data.music.shape[-1]
    if base is None:
        return ModelDims(C, F, D)
    return replace(base, channels=C, features=F, music_dim=D)


def _run_fold_job(args):
    return run_fold(*args)


FoldTask = tuple  # (data, dimension, config, dims, split, fold): the arguments of run_fold


def run_folds(tasks: Sequence[FoldTask], jobs: int = 1) -> list[FoldResult]:
    """Run fold tasks, in a process pool when ``jobs > 1``; results keep task order."""
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_fold_job, tasks))
    return [run_fold(*t) for t in tasks]


def fold_tasks(data: SubjectData, dimension: str, config: TrainConfig,
               dims: ModelDims | None = None) -> tuple[FoldSplit, list[FoldTask]]:
    dims = dims_for(data, dims)
    split = make_split(data, dimension, config)
    return split, [(data, dimension, config, dims, split, f) for f in range(config.folds)]


def collect(data: SubjectData, dimension: str, config: TrainConfig, split: FoldSplit,
            folds: list[FoldResult]) -> CVResult:
    for f in folds:
        r = f.report
        log.info("subject=%d dimension=%s fold=%d stop_epoch=%d best_epoch=%d best_val_J=%.6f seconds=%.1f",
                 data.subject, dimension, f.fold, r.stop_epoch, r.best_epoch, r.best_val, r.wall_clock)
    return CVResult(data.subject, dimension, config, split, data, folds)


def cross_validate(data: SubjectData, dimension: str, config: TrainConfig,
                   dims: ModelDims | None = None, jobs: int = 1) -> CVResult:
    split, tasks = fold_tasks(data, dimension, config, dims)
    return collect(data, dimension, config, split, run_folds(tasks, jobs))


# ---------------------------------------------------------------------------
# domain diagnostics


def domain_accuracy(model: BiStreamModel, eeg: np.ndarray, music: np.ndarray,
                    seed_key: Sequence[int] = (0,), mode: str = "modality") -> float:
    """Discriminator accuracy on one mixed batch built from paired standardized rows."""
    n = len(eeg) - len(eeg) % 2
    with ad.no_grad():
        u, _ = eeg_forward(eeg[:n], model.eeg)
        v = music_forward(music[:n], model.music)
        z, labels = mix_domain_batch(u, v, make_rng(*seed_key), mode)
        p = discriminate(z, 0.0, model.head).data
    return float(np.mean((p >= 0.5) == (labels == 1)))


def fit_domain_probe(model: BiStreamModel, eeg: np.ndarray, music: np.ndarray, epochs: int = 50,
                     learning_rate: float = 1e-2, batch_size: int = 128, seed_key: Sequence[int] = (0,),
                     mode: str = "modality") -> BiStreamModel:
    """Retrain only the discriminator on frozen branch embeddings.

    Returns a copy of ``model`` whose discriminator starts from fresh weights;
    both branches and the classifier are left untouched.
    """
    probe = model.clone()
    fresh = init_params(probe.dims, int(make_rng(*seed_key, 4).integers(2**31)))
    for dst, src in zip(probe.head.discriminator(), fresh.head.discriminator()):
        dst.data = src.data.copy()
    n = len(eeg) - len(eeg) % 2
    with ad.no_grad():
        u = eeg_forward(eeg[:n], probe.eeg)[0].data
        v = music_forward(music[:n], probe.music).data
    params = probe.head.discriminator()
    opt = ad.Adam(params, lr=learning_rate)
    rng = make_rng(*seed_key, 5)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n - 1, batch_size):
            idx = order[start:start + batch_size]
            idx = idx[:len(idx) - len(idx) % 2]
            with ad.Graph() as g:
                z, labels = mix_domain_batch(Tensor(u[idx]), Tensor(v[idx]), rng, mode)
                loss = ad.bce(discriminate(z, 0.0, probe.head), labels)
            grads = ad.backward(g, loss)
            opt.step(grads)
    return probe

