"""Classification and retrieval metrics over the common space.

Rankings order music tracks by distance to an EEG query. In aggregated mode
the query/track score is the median of the aligned per-segment distances; in
segment mode each query segment is ranked on its own.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

SMOOTH_WINDOW = 7


class EvaluationError(ValueError):
    pass


@dataclass
class RetrievalQuery:
    embeddings: np.ndarray  # segments x dim
    label: int
    track_id: int

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if self.embeddings.shape[0] < 1:
            raise EvaluationError("query needs at least one segment embedding")


@dataclass
class CorpusTrack:
    track_id: int
    embeddings: np.ndarray  # segments x dim
    tag: int


@dataclass
class Ranking:
    track_ids: np.ndarray
    scores: np.ndarray
    relevant: np.ndarray

    def __len__(self):
        return len(self.track_ids)


# ---------------------------------------------------------------------------
# classification


def aggregate_majority(segment_probs: Sequence[float]) -> int:
    """Trial label by majority vote of thresholded segment predictions.

    A split vote goes to the side of the mean probability; a mean of exactly
    0.5 gives class 1.
    """
    p = np.asarray(segment_probs, dtype=np.float64)
    if p.size == 0:
        raise EvaluationError("aggregate_majority needs at least one probability")
    votes = int((p > 0.5).sum())
    if 2 * votes > p.size:
        return 1
    if 2 * votes < p.size:
        return 0
    return int(p.mean() >= 0.5)


def segment_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """``probs`` is trials x segments; ``labels`` one per trial."""
    probs = np.asarray(probs)
    return float(((probs > 0.5) == np.asarray(labels)[:, None]).mean())


def aggregated_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    preds = np.array([aggregate_majority(row) for row in probs])
    return float((preds == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# ranking metrics


def precision_at_k(relevance: Sequence[int], k: int = 10) -> float:
    """Precision over the top ``min(k, N)`` ranked items."""
    r = np.asarray(relevance, dtype=bool)
    if r.size == 0:
        raise EvaluationError("precision_at_k needs a non-empty ranking")
    n = min(k, r.size)
    return float(r[:n].sum() / n)


def average_precision(relevance: Sequence[int]) -> float:
    """Mean of precision@r over the ranks r holding relevant items.

    Raises if nothing in the ranking is relevant. The sum is accumulated as an
    exact fraction and rounded once, so the result is correctly rounded.
    """
    r = np.asarray(relevance, dtype=bool)
    hits = np.flatnonzero(r)
    if hits.size == 0:
        raise EvaluationError("average precision is undefined without relevant items")
    total = sum(Fraction(k, int(rank) + 1) for k, rank in enumerate(hits, start=1))
    return float(total / hits.size)


def mean_average_precision(rankings: Iterable[Sequence[int]]) -> float:
    """Mean AP over queries; queries without any relevant item are skipped."""
    aps = []
    skipped = 0
    for r in rankings:
        r = np.asarray(r.relevant if isinstance(r, Ranking) else r, dtype=bool)
        if not r.any():
            skipped += 1
            continue
        aps.append(average_precision(r))
    if skipped:
        log.warning("excluded %d queries with no relevant items from mAP", skipped)
    if not aps:
        raise EvaluationError("no query has a relevant item")
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# distances and retrieval


def _dist(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    """Row-wise distances between equal-shape arrays."""
    if metric == "euclidean":
        return np.sqrt(((a - b) ** 2).sum(axis=-1))
    if metric == "cosine":
        na = np.linalg.norm(a, axis=-1)
        nb = np.linalg.norm(b, axis=-1)
        return 1.0 - (a * b).sum(axis=-1) / np.maximum(na * nb, 1e-12)
    raise EvaluationError(f"unknown distance metric {metric!r}")


def segment_distances(query: np.ndarray, track: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Per-query-segment distances: aligned when lengths match, else the
    median over all track segments for each query segment."""
    q = np.atleast_2d(query)
    t = np.atleast_2d(track)
    if q.shape[0] == 0 or t.shape[0] == 0:
        raise EvaluationError("empty query or track")
    if q.shape[0] == t.shape[0]:
        return _dist(q, t, metric)
    pair = _dist(q[:, None, :], t[None, :, :], metric)
    return np.median(pair, axis=1)


def track_distance(query, track: np.ndarray, metric: str = "euclidean") -> float:
    emb = query.embeddings if isinstance(query, RetrievalQuery) else query
    return float(np.median(segment_distances(emb, track, metric)))


def _rank(ids: np.ndarray, scores: np.ndarray, tags: np.ndarray, label: int) -> Ranking:
    order = np.lexsort((ids, scores))  # by score, ties by track id
    return Ranking(ids[order], scores[order], tags[order] == label)


def retrieve(query: RetrievalQuery, corpus: Sequence[CorpusTrack], mode: str = "aggregated",
             metric: str = "euclidean"):
    """Rank ``corpus`` for ``query``.

    aggregated: one Ranking by median segment distance.
    segment: a list with one Ranking per query segment, using the distance of
    that segment to the aligned track segment.
    """
    if not corpus:
        raise EvaluationError("empty retrieval corpus")
    ids = np.array([c.track_id for c in corpus])
    tags = np.array([c.tag for c in corpus])
    per_seg = np.stack([segment_distances(query.embeddings, c.embeddings, metric) for c in corpus])  # tracks x segs
    if mode == "aggregated":
        return _rank(ids, np.median(per_seg, axis=1), tags, query.label)
    if mode == "segment":
        return [_rank(ids, per_seg[:, s], tags, query.label) for s in range(per_seg.shape[1])]
    raise EvaluationError(f"unknown retrieval mode {mode!r}")


def exact_stimulus_hits(queries: Sequence[RetrievalQuery], corpus: Sequence[CorpusTrack], k: int = 1,
                        metric: str = "euclidean") -> int:
    """Number of queries whose own stimulus is among the top ``k`` tracks."""
    present = {c.track_id for c in corpus}
    hits = 0
    for q in queries:
        if q.track_id not in present:
            raise EvaluationError(f"stimulus track {q.track_id} missing from corpus")
        ranking = retrieve(q, corpus, "aggregated", metric)
        hits += int(q.track_id in ranking.track_ids[:k])
    return hits


def exact_stimulus_rate(queries: Sequence[RetrievalQuery], corpus: Sequence[CorpusTrack], k: int = 1,
                        metric: str = "euclidean") -> float:
    """Fraction of queries whose own stimulus is among the top ``k`` tracks."""
    if not queries:
        raise EvaluationError("no queries")
    return exact_stimulus_hits(queries, corpus, k, metric) / len(queries)


# ---------------------------------------------------------------------------
# temporal analysis


def moving_average(x: Sequence[float], window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Centred moving average, truncated at the ends."""
    x = np.asarray(x, dtype=np.float64)
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(x.size)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, x.size)
    return (csum[hi] - csum[lo]) / (hi - lo)


def temporal_map(ap_scores: Sequence[Sequence[float]], smooth_window: int = SMOOTH_WINDOW):
    """Per-time-index mean AP across queries, raw and smoothed.

    ``ap_scores`` is queries x segments; NaN entries (no relevant item) are
    ignored in the mean.
    """
    lengths = {len(row) for row in ap_scores}
    if len(lengths) != 1:
        raise EvaluationError(f"queries disagree on segment count: {sorted(lengths)}")
    a = np.asarray(ap_scores, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        counts = np.sum(~np.isnan(a), axis=0)
        raw = np.where(counts > 0, np.nansum(a, axis=0) / np.maximum(counts, 1), np.nan)
    return raw, moving_average(raw, smooth_window)


# ---------------------------------------------------------------------------
# reports and export


METRIC_COLUMNS = ("acc_seg_eeg", "acc_agg_eeg", "acc_seg_music", "acc_agg_music", "p_at_10", "map", "exact_at_1")


def format_table(header: Sequence[str], rows: Sequence[Sequence], float_fmt: str = "{:.6f}") -> str:
    """Tab-separated table with fixed float formatting (stable bytes)."""
    def cell(v):
        if isinstance(v, (float, np.floating)):
            return "nan" if math.isnan(v) else float_fmt.format(float(v))
        return str(v)

    lines = ["\t".join(header)]
    lines += ["\t".join(cell(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def metrics_table(per_subject: Mapping[int, Mapping[str, float]]) -> str:
    rows = []
    for s in sorted(per_subject):
        rows.append([s, *[per_subject[s][c] for c in METRIC_COLUMNS]])
    if rows:
        mean = np.nanmean(np.array([r[1:] for r in rows], dtype=float), axis=0)
        rows.append(["mean", *mean])
    return format_table(("subject", *METRIC_COLUMNS), rows)


EXPORT_META = ("subject", "trial", "track", "segment_index", "modality", "label")


def export_embeddings(rows: Iterable[tuple], out_path, dim: int = 64) -> int:
    """Write one line per segment embedding; returns the row count.

    Each row is (subject, trial, track, segment_index, modality, label, vector).
    """
    header = [*EXPORT_META, *[f"e{i}" for i in range(dim)]]
    n = 0
    with open(out_path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for subject, trial, track, seg, modality, label, vec in rows:
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise EvaluationError(f"embedding has shape {vec.shape}, expected ({dim},)")
            fh.write("\t".join([str(subject), str(trial), str(track), str(seg), modality, str(label)]
                               + [f"{x:.9g}" for x in vec]) + "\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# fold-level evaluation


def build_corpus(fold, data, dimension: str, corpus: str = "fold") -> list[CorpusTrack]:
    """Music corpus for a fold: its test-fold stimuli, or every track of the subject."""
    if corpus not in ("fold", "full"):
        raise EvaluationError(f"unknown corpus {corpus!r}")
    rows = fold.test_rows if corpus == "fold" else np.arange(len(data.trials))
    seen = {}
    for r in rows:
        t = int(data.tracks[r])
        if t not in seen:
            seen[t] = CorpusTrack(t, fold.music_embeddings[r], int(data.tags[dimension][r]))
    return [seen[t] for t in sorted(seen)]


def fold_queries(fold, data, dimension: str) -> list[RetrievalQuery]:
    labels = data.labels(dimension)
    return [RetrievalQuery(fold.eeg_embeddings[i], int(labels[r]), int(data.tracks[r]))
            for i, r in enumerate(fold.test_rows)]


def fold_metrics(fold, data, dimension: str, corpus: str = "fold", metric: str = "euclidean",
                 k: int = 10, exact_corpus: str | None = None) -> dict[str, float]:
    """All report metrics for one trained fold.

    ``exact_corpus`` overrides the corpus used for exact-stimulus retrieval.
    """
    labels = data.labels(dimension)[fold.test_rows]
    tags = data.tags[dimension][fold.test_rows]
    music_probs = fold.music_probs[fold.test_rows]
    queries = fold_queries(fold, data, dimension)
    tracks = build_corpus(fold, data, dimension, corpus)
    rankings = [retrieve(q, tracks, "aggregated", metric) for q in queries]
    exact_tracks = tracks if exact_corpus in (None, corpus) else build_corpus(fold, data, dimension, exact_corpus)
    return {
        "acc_seg_eeg": segment_accuracy(fold.eeg_probs, labels),
        "acc_agg_eeg": aggregated_accuracy(fold.eeg_probs, labels),
        "acc_seg_music": segment_accuracy(music_probs, tags),
        "acc_agg_music": aggregated_accuracy(music_probs, tags),
        "p_at_10": float(np.mean([precision_at_k(r.relevant, k) for r in rankings])),
        "map": _safe_map(rankings),
        "exact_at_1": exact_stimulus_rate(queries, exact_tracks, 1, metric),
    }


def _safe_map(rankings) -> float:
    try:
        return mean_average_precision(rankings)
    except EvaluationError:
        return float("nan")


def cv_metrics(cv, corpus: str = "fold", metric: str = "euclidean", k: int = 10,
               exact_corpus: str | None = None) -> dict[str, float]:
    """Per-subject metrics: mean over folds."""
    per_fold = [fold_metrics(f, cv.data, cv.dimension, corpus, metric, k, exact_corpus) for f in cv.folds]
    return {c: float(np.nanmean([m[c] for m in per_fold])) for c in METRIC_COLUMNS}


def segment_ap_curves(cv, corpus: str = "fold", metric: str = "euclidean") -> dict[int, list[np.ndarray]]:
    """Per-track list of per-segment AP rows (one row per query trial)."""
    out: dict[int, list[np.ndarray]] = {}
    for fold in cv.folds:
        tracks = build_corpus(fold, cv.data, cv.dimension, corpus)
        for q in fold_queries(fold, cv.data, cv.dimension):
            row = []
            for ranking in retrieve(q, tracks, "segment", metric):
                row.append(average_precision(ranking.relevant) if ranking.relevant.any() else np.nan)
            out.setdefault(q.track_id, []).append(np.array(row))
    return out
