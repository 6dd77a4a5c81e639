"""Dataset files, labels, folds, standardization and the synthetic generator.

Binary layouts (all little-endian):

EEG recording (``.eegx``)::

    magic "EEGX" | version u16 | subject u16 | trial u16 | channels u16
    samples u32 | sample_rate f32 | valence f32 | arousal f32
    channels*samples f32, channel-major

Music embedding set (``.memb``)::

    magic "MEMB" | version u16 | track u16 | n_segments u16 | dim u16
    valence_tag u8 | arousal_tag u8 | n_segments*dim f32, segment-major

The manifest is a CSV with header
``subject,trial,track,eeg_path,emb_path,valence_rating,arousal_rating,valence_tag,arousal_tag``;
relative paths are resolved against the manifest's directory.

Random numbers come from numpy's Philox counter-based generator, seeded
through ``SeedSequence`` so streams are reproducible across platforms.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .signal import DEFAULT_BANDS, FeatureMatrix, Recording, extract_features, segment_count

log = logging.getLogger(__name__)

EEG_MAGIC = b"EEGX"
EMB_MAGIC = b"MEMB"
FORMAT_VERSION = 1
_EEG_HEADER = struct.Struct("<4sHHHHIfff")
_EMB_HEADER = struct.Struct("<4sHHHHBB")

MANIFEST_FIELDS = ("subject", "trial", "track", "eeg_path", "emb_path",
                   "valence_rating", "arousal_rating", "valence_tag", "arousal_tag")
DIMENSIONS = ("valence", "arousal")
MIN_SYNTH_TRACKS = 10


class DataFormatError(ValueError):
    """A data file or manifest does not match its declared layout."""

    def __init__(self, path, field_name: str, message: str):
        self.path = str(path)
        self.field = field_name
        super().__init__(f"{path}: {field_name}: {message}")


def make_rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


# ---------------------------------------------------------------------------
# labels, folds, weights


def binarize(rating: float) -> int:
    """High (1) iff the 1-9 rating is strictly above 5."""
    if not 1.0 <= rating <= 9.0:
        raise ValueError(f"rating {rating} outside [1, 9]")
    return int(rating > 5.0)


@dataclass
class FoldSplit:
    k: int
    assignments: dict[int, int]  # trial_id -> fold
    seed: int

    def test_trials(self, fold: int) -> list[int]:
        return sorted(t for t, f in self.assignments.items() if f == fold)

    def train_trials(self, fold: int) -> list[int]:
        return sorted(t for t, f in self.assignments.items() if f != fold)


def stratified_folds(trials: Sequence[tuple[int, int]], k: int = 5, seed: int = 0) -> FoldSplit:
    """Trial-level stratified K-fold.

    Trials of each class are shuffled, the classes are laid end to end and
    dealt round-robin, so fold sizes and per-fold class counts differ by at
    most one.
    """
    if len(trials) < k:
        raise ValueError(f"need at least k={k} trials, got {len(trials)}")
    ids = [int(t) for t, _ in trials]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate trial ids")
    labels = {int(t): int(y) for t, y in trials}
    rng = make_rng(seed)
    classes = sorted(set(labels.values()))
    if len(classes) < 2:
        log.warning("only one class present among %d trials; using plain K-fold", len(trials))
    order: list[int] = []
    for c in classes:
        members = sorted(t for t in ids if labels[t] == c)
        order.extend(members[i] for i in rng.permutation(len(members)))
    return FoldSplit(k, {t: i % k for i, t in enumerate(order)}, seed)


def class_weights(labels: Sequence[int]) -> dict[int, float]:
    """Inverse-frequency weights ``N / (2 * N_c)``."""
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("class_weights needs at least one label")
    counts = {c: int((labels == c).sum()) for c in (0, 1)}
    present = [c for c in (0, 1) if counts[c]]
    if len(present) == 1:
        log.warning("single-class labels (%d); class weight fixed to 1.0", present[0])
        return {present[0]: 1.0, 1 - present[0]: 1.0}
    n = labels.size
    return {c: n / (2.0 * counts[c]) for c in (0, 1)}


def sample_weights(labels: Sequence[int], weights: dict[int, float]) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    return np.where(labels == 1, weights[1], weights[0]).astype(np.float64)


@dataclass
class Standardizer:
    """Per-feature affine transform fitted on training data only."""

    mean: np.ndarray
    std: np.ndarray

    STD_FLOOR = 1e-8

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), cls.STD_FLOOR))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def standardize(train: np.ndarray, *others: np.ndarray):
    """Fit on ``train``; return the transform and every input transformed."""
    tr = Standardizer.fit(train)
    return (tr, tr.apply(train), *[tr.apply(o) for o in others])


# ---------------------------------------------------------------------------
# binary files


@dataclass
class TrackEmbeddingSet:
    track_id: int
    segment_embeddings: np.ndarray  # n_segments x dim
    valence_tag: int
    arousal_tag: int

    @property
    def dim(self) -> int:
        return self.segment_embeddings.shape[1]

    def tag(self, dimension: str) -> int:
        return self.valence_tag if dimension == "valence" else self.arousal_tag


def write_recording(path, rec: Recording) -> None:
    c, n = rec.data.shape
    header = _EEG_HEADER.pack(EEG_MAGIC, FORMAT_VERSION, rec.subject_id, rec.trial_id, c, n,
                              rec.sample_rate, rec.valence, rec.arousal)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(rec.data, dtype="<f4").tobytes())


def load_recording(path) -> Recording:
    raw = Path(path).read_bytes()
    if len(raw) < _EEG_HEADER.size:
        raise DataFormatError(path, "header", f"expected {_EEG_HEADER.size} header bytes, got {len(raw)}")
    magic, version, subject, trial, channels, samples, rate, val, aro = _EEG_HEADER.unpack_from(raw)
    if magic != EEG_MAGIC:
        raise DataFormatError(path, "magic", f"expected {EEG_MAGIC!r}, got {magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(path, "version", f"unsupported version {version}")
    expected = _EEG_HEADER.size + 4 * channels * samples
    if len(raw) != expected:
        raise DataFormatError(path, "data", f"expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_EEG_HEADER.size).reshape(channels, samples)
    try:
        return Recording(subject, trial, float(rate), data.astype(np.float64), float(val), float(aro))
    except ValueError as exc:
        raise DataFormatError(path, "header", str(exc)) from None


def write_embeddings(path, emb: TrackEmbeddingSet) -> None:
    n, d = emb.segment_embeddings.shape
    header = _EMB_HEADER.pack(EMB_MAGIC, FORMAT_VERSION, emb.track_id, n, d, emb.valence_tag, emb.arousal_tag)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(emb.segment_embeddings, dtype="<f4").tobytes())


def load_embeddings(path) -> TrackEmbeddingSet:
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise DataFormatError(path, "header", f"expected {_EMB_HEADER.size} header bytes, got {len(raw)}")
    magic, version, track, n, d, vt, at = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise DataFormatError(path, "magic", f"expected {EMB_MAGIC!r}, got {magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(path, "version", f"unsupported version {version}")
    expected = _EMB_HEADER.size + 4 * n * d
    if len(raw) != expected:
        raise DataFormatError(path, "data", f"expected {expected} bytes, got {len(raw)}")
    if vt > 1 or at > 1:
        raise DataFormatError(path, "tags", f"tags must be 0/1, got {vt}/{at}")
    values = np.frombuffer(raw, dtype="<f4", offset=_EMB_HEADER.size).reshape(n, d)
    return TrackEmbeddingSet(track, values.astype(np.float64), vt, at)


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestEntry:
    subject: int
    trial: int
    track: int
    eeg_path: Path
    emb_path: Path
    valence_rating: float
    arousal_rating: float
    valence_tag: int
    arousal_tag: int

    def rating(self, dimension: str) -> float:
        return self.valence_rating if dimension == "valence" else self.arousal_rating

    def tag(self, dimension: str) -> int:
        return self.valence_tag if dimension == "valence" else self.arousal_tag


@dataclass
class Manifest:
    path: Path
    entries: list[ManifestEntry]

    @property
    def subjects(self) -> list[int]:
        return sorted({e.subject for e in self.entries})

    @property
    def tracks(self) -> list[int]:
        return sorted({e.track for e in self.entries})

    def for_subject(self, subject: int) -> list[ManifestEntry]:
        return sorted((e for e in self.entries if e.subject == subject), key=lambda e: e.trial)

    def without_tracks(self, tracks: Iterable[int]) -> "Manifest":
        drop = set(tracks)
        return Manifest(self.path, [e for e in self.entries if e.track not in drop])


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    path = Path(path)
    base = path.parent
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for e in entries:
            w.writerow([e.subject, e.trial, e.track, _relpath(e.eeg_path, base), _relpath(e.emb_path, base),
                        repr(float(e.valence_rating)), repr(float(e.arousal_rating)),
                        e.valence_tag, e.arousal_tag])


def _relpath(p: Path, base: Path) -> str:
    p = Path(p)
    try:
        return p.relative_to(base).as_posix()
    except ValueError:
        return str(p)


def load_manifest(path, exclude_tracks: Iterable[int] = ()) -> Manifest:
    """Parse and check a manifest; ``exclude_tracks`` drops discarded stimuli."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(path, "manifest", "file not found")
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(f.strip() for f in reader.fieldnames) != MANIFEST_FIELDS:
            raise DataFormatError(path, "header", f"expected columns {','.join(MANIFEST_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                e = ManifestEntry(
                    int(row["subject"]), int(row["trial"]), int(row["track"]),
                    _resolve(path.parent, row["eeg_path"]), _resolve(path.parent, row["emb_path"]),
                    float(row["valence_rating"]), float(row["arousal_rating"]),
                    int(row["valence_tag"]), int(row["arousal_tag"]))
            except (TypeError, ValueError) as exc:
                raise DataFormatError(path, f"line {lineno}", str(exc)) from None
            for name in ("valence_rating", "arousal_rating"):
                if not 1.0 <= getattr(e, name) <= 9.0:
                    raise DataFormatError(path, f"line {lineno} {name}", "rating outside [1, 9]")
            for name in ("valence_tag", "arousal_tag"):
                if getattr(e, name) not in (0, 1):
                    raise DataFormatError(path, f"line {lineno} {name}", "tag must be 0 or 1")
            for name in ("eeg_path", "emb_path"):
                if not getattr(e, name).is_file():
                    raise DataFormatError(path, f"line {lineno} {name}", f"missing file {getattr(e, name)}")
            entries.append(e)
    keys = [(e.subject, e.trial) for e in entries]
    if len(set(keys)) != len(keys):
        raise DataFormatError(path, "subject,trial", "duplicate (subject, trial) rows")
    if not entries:
        raise DataFormatError(path, "rows", "manifest has no entries")
    return Manifest(path, entries).without_tracks(exclude_tracks)


def _resolve(base: Path, p: str) -> Path:
    q = Path(p.strip())
    return q if q.is_absolute() else base / q


# ---------------------------------------------------------------------------
# paired subject data


@dataclass(frozen=True)
class Instance:
    eeg: FeatureMatrix
    music: np.ndarray
    label: int
    subject_id: int
    trial_id: int
    track_id: int
    segment_index: int


@dataclass
class SubjectData:
    """Aligned EEG features and music embeddings for one subject.

    ``eeg`` is trials x segments x channels x features; ``music`` is
    trials x segments x dim, holding the stimulus of each trial.
    """

    subject: int
    trials: np.ndarray
    tracks: np.ndarray
    eeg: np.ndarray
    music: np.ndarray
    ratings: dict[str, np.ndarray]
    tags: dict[str, np.ndarray]

    @property
    def n_segments(self) -> int:
        return self.eeg.shape[1]

    def labels(self, dimension: str) -> np.ndarray:
        return np.array([binarize(r) for r in self.ratings[dimension]], dtype=int)

    def index_of(self, trial_ids: Iterable[int]) -> np.ndarray:
        pos = {int(t): i for i, t in enumerate(self.trials)}
        return np.array([pos[int(t)] for t in trial_ids], dtype=int)

    def instances(self, dimension: str) -> Iterator[Instance]:
        labels = self.labels(dimension)
        for i, trial in enumerate(self.trials):
            for s in range(self.n_segments):
                yield Instance(FeatureMatrix(s, self.eeg[i, s]), self.music[i, s], int(labels[i]),
                               self.subject, int(trial), int(self.tracks[i]), s)


def assemble_subject(subject: int, recordings: Sequence[Recording], tracks: Sequence[int],
                     embeddings: dict[int, TrackEmbeddingSet], tags: dict[str, Sequence[int]],
                     per_window: bool = True, source: str = "<memory>") -> SubjectData:
    feats = []
    for rec in recordings:
        fms = extract_features(rec, DEFAULT_BANDS, per_window=per_window)
        feats.append(np.stack([fm.values for fm in fms]))
    n_seg = {f.shape[0] for f in feats}
    if len(n_seg) != 1 or len({f.shape[1:] for f in feats}) != 1:
        raise DataFormatError(source, "eeg", f"subject {subject}: trials differ in segment count or channel count")
    s = n_seg.pop()
    music = []
    for rec, tr in zip(recordings, tracks):
        emb = embeddings[tr]
        if emb.segment_embeddings.shape[0] != s:
            raise DataFormatError(source, "n_segments",
                                  f"track {tr} has {emb.segment_embeddings.shape[0]} segments, "
                                  f"trial {rec.trial_id} has {s}")
        music.append(emb.segment_embeddings)
    return SubjectData(
        subject,
        np.array([r.trial_id for r in recordings]),
        np.asarray(tracks, dtype=int),
        np.stack(feats),
        np.stack(music),
        {"valence": np.array([r.valence for r in recordings]), "arousal": np.array([r.arousal for r in recordings])},
        {k: np.asarray(v, dtype=int) for k, v in tags.items()},
    )


def load_embedding_set(manifest: Manifest) -> dict[int, TrackEmbeddingSet]:
    out: dict[int, TrackEmbeddingSet] = {}
    dims = set()
    for e in manifest.entries:
        if e.track in out:
            continue
        emb = load_embeddings(e.emb_path)
        if emb.track_id != e.track:
            raise DataFormatError(e.emb_path, "track_id", f"file says {emb.track_id}, manifest says {e.track}")
        dims.add(emb.dim)
        if len(dims) > 1:
            raise DataFormatError(e.emb_path, "dim", f"embedding dim {emb.dim} differs from {sorted(dims)[0]}")
        out[e.track] = emb
    return out


def load_subject(manifest: Manifest, subject: int, per_window: bool = True,
                 embeddings: dict[int, TrackEmbeddingSet] | None = None,
                 expected_dim: int | None = None) -> SubjectData:
    entries = manifest.for_subject(subject)
    if not entries:
        raise DataFormatError(manifest.path, "subject", f"no entries for subject {subject}")
    embeddings = embeddings if embeddings is not None else load_embedding_set(manifest)
    recs = []
    rates, chans = set(), set()
    for e in entries:
        rec = load_recording(e.eeg_path)
        if (rec.subject_id, rec.trial_id) != (e.subject, e.trial):
            raise DataFormatError(e.eeg_path, "subject/trial",
                                  f"file holds ({rec.subject_id}, {rec.trial_id}), manifest row ({e.subject}, {e.trial})")
        rates.add(rec.sample_rate)
        chans.add(rec.n_channels)
        if len(rates) > 1 or len(chans) > 1:
            raise DataFormatError(e.eeg_path, "channels/sample_rate", "inconsistent with earlier recordings")
        # manifest ratings are authoritative for labels
        rec.valence, rec.arousal = e.valence_rating, e.arousal_rating
        recs.append(rec)
    for e in entries:
        if expected_dim is not None and embeddings[e.track].dim != expected_dim:
            raise DataFormatError(e.emb_path, "dim", f"embedding dim {embeddings[e.track].dim} != expected {expected_dim}")
    tags = {"valence": [e.valence_tag for e in entries], "arousal": [e.arousal_tag for e in entries]}
    return assemble_subject(subject, recs, [e.track for e in entries], embeddings, tags,
                            per_window=per_window, source=str(manifest.path))


def save_features(path, data: SubjectData) -> None:
    np.savez(path, subject=data.subject, trials=data.trials, tracks=data.tracks, eeg=data.eeg,
             music=data.music, valence=data.ratings["valence"], arousal=data.ratings["arousal"],
             valence_tag=data.tags["valence"], arousal_tag=data.tags["arousal"])


def load_features(path) -> SubjectData:
    z = np.load(path)
    return SubjectData(int(z["subject"]), z["trials"], z["tracks"], z["eeg"], z["music"],
                       {"valence": z["valence"], "arousal": z["arousal"]},
                       {"valence": z["valence_tag"], "arousal": z["arousal_tag"]})


# ---------------------------------------------------------------------------
# synthetic paired data


@dataclass(frozen=True)
class SynthSpec:
    subjects: int = 1
    tracks: int = 34
    segments_per_track: int = 58
    channels: int = 32
    dim: int = 256
    sample_rate: int = 128
    latent_dim: int = 8

    def validate(self) -> None:
        if self.tracks < MIN_SYNTH_TRACKS:
            raise ValueError(f"synthetic data needs at least {MIN_SYNTH_TRACKS} tracks, got {self.tracks}")
        for name in ("subjects", "segments_per_track", "channels", "dim", "sample_rate"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.latent_dim < 3:
            raise ValueError("latent_dim must be at least 3")


@dataclass
class SynthDataset:
    spec: SynthSpec
    recordings: dict[int, list[Recording]]  # subject -> trials
    embeddings: dict[int, TrackEmbeddingSet]
    trial_tracks: dict[int, list[int]]

    def subject_data(self, subject: int, per_window: bool = True) -> SubjectData:
        recs = self.recordings[subject]
        tracks = self.trial_tracks[subject]
        tags = {d: [self.embeddings[t].tag(d) for t in tracks] for d in DIMENSIONS}
        return assemble_subject(subject, recs, tracks, self.embeddings, tags, per_window=per_window)


# latent layout: axis 0 carries valence, axis 1 arousal, the rest track identity
_CLASS_MARGIN = 3.0
_TRACK_SPREAD = 0.3
_CLASS_AXIS_SPREAD = 1.0
_DRIFT = 0.15
_EEG_NOISE = 0.25
_EEG_GAIN = 0.8
_MUSIC_NOISE = 0.1
_NOISE_FLOOR_VAR = 0.02


def synth_dataset(spec: SynthSpec, separability: float = 0.9, domain_shift: float = 0.0,
                  seed: int = 0, out_dir=None) -> SynthDataset:
    """Paired EEG / music data driven by a shared per-track latent trajectory.

    Each track gets a latent vector: ``separability`` scales the class
    prototypes on the valence and arousal axes (0 makes labels independent of
    the data); the remaining axes give the track an identity. A slow drift
    makes the latent vary over the trial. Music embeddings are a noisy affine
    image of the per-segment latent, offset by ``domain_shift`` along a fixed
    direction; EEG band log-variances are a subject-specific affine image of
    the per-second latent, rendered into raw signals whose 1 s frames carry
    exactly those band variances.
    """
    spec.validate()
    if not 0.0 <= separability <= 1.0:
        raise ValueError("separability must lie in [0, 1]")
    if domain_shift < 0:
        raise ValueError("domain_shift must be non-negative")
    L = spec.latent_dim
    rng = make_rng(seed, 0)
    n_sec = spec.segments_per_track + 2
    half = spec.tracks // 2
    vtags = rng.permutation(np.r_[np.zeros(spec.tracks - half, int), np.ones(half, int)])
    atags = rng.permutation(np.r_[np.zeros(spec.tracks - half, int), np.ones(half, int)])

    proto = np.zeros((spec.tracks, L))
    proto[:, 0] = np.where(vtags == 1, 1.0, -1.0) * _CLASS_MARGIN * separability
    proto[:, 1] = np.where(atags == 1, 1.0, -1.0) * _CLASS_MARGIN * separability
    spread = np.full(L, _TRACK_SPREAD)
    spread[:2] = _CLASS_AXIS_SPREAD
    base = proto + rng.standard_normal((spec.tracks, L)) * spread
    drift = np.cumsum(rng.standard_normal((spec.tracks, n_sec, L)) * _DRIFT, axis=1) / np.sqrt(np.arange(1, n_sec + 1))[None, :, None]
    latent_sec = base[:, None, :] + drift  # tracks x seconds x L

    # music: segment latent = mean of its three seconds
    seg_latent = (latent_sec[:, :-2] + latent_sec[:, 1:-1] + latent_sec[:, 2:]) / 3.0
    shift_dir = rng.standard_normal(L)
    shift_dir /= np.linalg.norm(shift_dir)
    mix_m = rng.standard_normal((L, spec.dim)) / math.sqrt(L)
    bias_m = rng.standard_normal(spec.dim) * 0.5
    music = (seg_latent + domain_shift * shift_dir) @ mix_m + bias_m
    music = music + rng.standard_normal(music.shape) * _MUSIC_NOISE
    embeddings = {
        t: TrackEmbeddingSet(t, music[t - 1].astype(np.float32).astype(np.float64), int(vtags[t - 1]), int(atags[t - 1]))
        for t in range(1, spec.tracks + 1)
    }

    n_bands = len(DEFAULT_BANDS)
    freqs = np.fft.rfftfreq(spec.sample_rate, d=1.0 / spec.sample_rate)
    band_bins = [np.flatnonzero((freqs >= b.low_hz) & (freqs < b.high_hz)) for b in DEFAULT_BANDS]
    recordings: dict[int, list[Recording]] = {}
    trial_tracks: dict[int, list[int]] = {}
    for s in range(1, spec.subjects + 1):
        srng = make_rng(seed, s)
        mix_e = srng.standard_normal((L, spec.channels * n_bands)) * (_EEG_GAIN / math.sqrt(L))
        base_lv = np.log(np.tile([4.0, 3.0, 1.5, 0.5], spec.channels)) + srng.standard_normal(spec.channels * n_bands) * 0.2
        recs = []
        tracks = list(range(1, spec.tracks + 1))
        for t in tracks:
            logvar = base_lv + latent_sec[t - 1] @ mix_e
            logvar = logvar + srng.standard_normal(logvar.shape) * _EEG_NOISE
            var = np.exp(logvar).reshape(n_sec, spec.channels, n_bands)
            signal = _render(var, band_bins, spec.sample_rate, srng)
            val = _rating(vtags[t - 1], srng)
            aro = _rating(atags[t - 1], srng)
            recs.append(Recording(s, t, float(spec.sample_rate), signal.astype(np.float32).astype(np.float64), val, aro))
        recordings[s] = recs
        trial_tracks[s] = tracks
    ds = SynthDataset(spec, recordings, embeddings, trial_tracks)
    if out_dir is not None:
        write_synth(ds, out_dir)
    return ds


def _rating(tag: int, rng: np.random.Generator) -> float:
    offset = float(rng.uniform(0.5, 3.5))
    r = 5.0 + offset if tag else 5.0 - offset
    return float(np.float32(min(9.0, max(1.0, r))))


def _render(var: np.ndarray, band_bins: list[np.ndarray], rate: int, rng: np.random.Generator) -> np.ndarray:
    """Raw channels x samples signal whose per-second band variances are ``var``.

    ``var`` is seconds x channels x bands. Each band's variance is spread
    evenly over its integer-Hz bins with random phases; a small white floor
    is added.
    """
    n_sec, C, _ = var.shape
    spec = np.zeros((n_sec, C, rate // 2 + 1), dtype=np.complex128)
    for b, bins in enumerate(band_bins):
        amp = np.sqrt(2.0 * var[:, :, b] / len(bins)) * (rate / 2.0)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(n_sec, C, len(bins)))
        spec[:, :, bins] = amp[:, :, None] * np.exp(1j * phase)
    frames = np.fft.irfft(spec, n=rate, axis=-1)
    frames = frames + rng.standard_normal(frames.shape) * math.sqrt(_NOISE_FLOOR_VAR)
    return frames.transpose(1, 0, 2).reshape(C, n_sec * rate)


def write_synth(ds: SynthDataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "eeg").mkdir(parents=True, exist_ok=True)
    (out / "music").mkdir(parents=True, exist_ok=True)
    emb_paths = {}
    for t, emb in sorted(ds.embeddings.items()):
        p = out / "music" / f"track_{t:03d}.memb"
        write_embeddings(p, emb)
        emb_paths[t] = p
    entries = []
    for s, recs in sorted(ds.recordings.items()):
        for rec, t in zip(recs, ds.trial_tracks[s]):
            p = out / "eeg" / f"s{s:02d}_t{rec.trial_id:03d}.eegx"
            write_recording(p, rec)
            emb = ds.embeddings[t]
            entries.append(ManifestEntry(s, rec.trial_id, t, p, emb_paths[t], rec.valence, rec.arousal,
                                         emb.valence_tag, emb.arousal_tag))
    path = out / "manifest.csv"
    write_manifest(path, entries)
    return path


def expected_segments(duration_s: float, window_s: float = 3.0, hop_s: float = 1.0, rate: float = 128.0) -> int:
    return segment_count(int(round(duration_s * rate)), rate, window_s, hop_s)
