"""Command-line front end: synth, features, train, eval, retrieve, temporal, export, sweep.

Settings come from an optional INI file (``--config``) with the sections
listed in ``SCHEMA``; command-line flags override file values. Unknown
sections or keys are rejected before any work starts.

Exit codes: 0 success, 1 runtime failure, 2 usage, config or data error.
Log lines on stderr are ``key=value`` records.
"""

from __future__ import annotations

import argparse
import configparser
import itertools
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from . import evaluation as E
from . import training as T
from .data import (DIMENSIONS, DataFormatError, FoldSplit, SubjectData, SynthSpec, load_features,
                   load_manifest, load_subject, save_features, synth_dataset)
from .model import CheckpointError, ModelDims, load_checkpoint, save_checkpoint

log = logging.getLogger("eegmusic.cli")

RUN_FILE = "run.ini"
FOLDS_FILE = "folds.tsv"
EPOCHS_FILE = "epochs.tsv"


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


# ---------------------------------------------------------------------------
# configuration


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).replace(",", " ").split())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(text).replace(",", " ").split())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable, object]]] = {
    "data": {
        "manifest": (str, None),
        "features_dir": (str, None),
        "subjects": (_int_list, ()),
        "exclude_tracks": (_int_list, ()),
    },
    "features": {
        "per_window": (_bool, True),
    },
    "model": {
        "lstm_hidden": (int, 32),
        "attention_dim": (int, 32),
        "music_hidden": (_int_list, (128, 128)),
        "disc_hidden": (int, 32),
    },
    "train": {
        "learning_rate": (float, 1e-4),
        "patience": (int, 15),
        "max_epochs": (int, 300),
        "batch_size": (int, 32),
        "lambda1": (float, 1.0),
        "lambda2": (float, 0.5),
        "lambda11": (float, 1.0),
        "lambda12": (float, 1.0),
        "lambda_grl": (float, 1.0),
        "music_supervision": (_bool, True),
        "domain_discriminator": (_bool, True),
        "mix_mode": (_choice("modality", "pairing"), "modality"),
        "validation": (_choice("inner", "heldout"), "inner"),
        "folds": (int, 5),
    },
    "eval": {
        "corpus": (_choice("fold", "full"), "fold"),
        "exact_corpus": (_choice("fold", "full"), "full"),
        "metric": (_choice("euclidean", "cosine"), "euclidean"),
        "k": (int, 10),
        "smooth_window": (int, E.SMOOTH_WINDOW),
    },
    "run": {
        "seed": (int, 0),
        "dimension": (_choice(*DIMENSIONS), "valence"),
        "jobs": (int, 1),
        "out": (str, None),
        "checkpoints": (str, None),
    },
}
PATH_KEYS = {("data", "manifest"), ("data", "features_dir"), ("run", "out"), ("run", "checkpoints")}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def require(self, section: str, key: str):
        v = self.get(section, key)
        if v is None or v == "":
            raise ConfigError(f"{section}.{key}", "required but not set")
        return v

    def train_config(self) -> T.TrainConfig:
        t = self.values["train"]
        try:
            return T.TrainConfig(seed=self.get("run", "seed"), **t)
        except ValueError as exc:
            raise ConfigError("train", str(exc)) from exc

    def model_dims(self) -> ModelDims:
        m = self.values["model"]
        return ModelDims(1, 1, 1, lstm_hidden=m["lstm_hidden"], attention_dim=m["attention_dim"],
                         music_hidden=tuple(m["music_hidden"]), disc_hidden=m["disc_hidden"])

    def to_ini(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            for key, value in keys.items():
                lines.append(f"{key} = {_format_value(value)}")
            lines.append("")
        return "\n".join(lines)


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(section: str, key: str, raw):
    parser, _ = SCHEMA[section][key]
    if raw is None or raw == "":
        return SCHEMA[section][key][1] if parser is not str else None
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}", str(exc)) from exc


def load_config(path: str | None, overrides: dict[tuple[str, str], object]) -> RunConfig:
    """Defaults, then the INI file, then flag overrides."""
    values = {s: {k: default for k, (_, default) in keys.items()} for s, keys in SCHEMA.items()}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("config", f"file not found: {p}")
        ini = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        try:
            ini.read(p)
        except configparser.Error as exc:
            raise ConfigError("config", f"{p}: {exc}") from exc
        for section in ini.sections():
            if section not in SCHEMA:
                raise ConfigError(section, f"unknown section in {p}")
            for key, raw in ini.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{section}.{key}", f"unknown key in {p}")
                value = _parse(section, key, raw)
                if (section, key) in PATH_KEYS and value:
                    value = str((p.parent / value))
                values[section][key] = value
    for (section, key), raw in overrides.items():
        values[section][key] = raw if isinstance(raw, (bool, tuple)) else _parse(section, key, raw)
    return RunConfig(values)


# ---------------------------------------------------------------------------
# data and run directories


def load_dataset(cfg: RunConfig) -> list[SubjectData]:
    """Subjects from cached features when ``data.features_dir`` is set, else from the manifest."""
    subjects = list(cfg.get("data", "subjects"))
    fdir = cfg.get("data", "features_dir")
    if fdir:
        paths = sorted(Path(fdir).glob("s*.npz"))
        if not paths:
            raise ConfigError("data.features_dir", f"no feature files in {fdir}")
        datas = [load_features(p) for p in paths]
        out = [d for d in datas if not subjects or d.subject in subjects]
        drop = set(cfg.get("data", "exclude_tracks"))
        return [_without_tracks(d, drop) for d in out] if drop else out
    manifest = load_manifest(cfg.require("data", "manifest"), cfg.get("data", "exclude_tracks"))
    chosen = subjects or manifest.subjects
    missing = sorted(set(chosen) - set(manifest.subjects))
    if missing:
        raise ConfigError("data.subjects", f"not in manifest: {missing}")
    per_window = cfg.get("features", "per_window")
    return [load_subject(manifest, s, per_window=per_window) for s in chosen]


def _without_tracks(d: SubjectData, drop: set[int]) -> SubjectData:
    keep = np.array([int(t) not in drop for t in d.tracks])
    return SubjectData(d.subject, d.trials[keep], d.tracks[keep], d.eeg[keep], d.music[keep],
                       {k: v[keep] for k, v in d.ratings.items()}, {k: v[keep] for k, v in d.tags.items()})


def run_name(dimension: str, ablation: str) -> str:
    return f"{dimension}_{ablation}"


def checkpoint_name(subject: int, fold: int) -> str:
    return f"s{subject}_f{fold}.cmaf"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


@dataclass
class TrainedRun:
    cfg: RunConfig
    dimension: str
    ablation: str
    results: list[T.CVResult]


def open_run(cfg: RunConfig, overrides: dict) -> TrainedRun:
    """Reload a trained run: its stored config (flags win), data, splits and checkpoints.

    Evaluation settings come from the invoking command, not from the run.
    """
    d = Path(cfg.require("run", "checkpoints"))
    ini = d / RUN_FILE
    if not ini.is_file():
        raise ConfigError("run.checkpoints", f"{d} holds no {RUN_FILE}; run train first")
    eval_values = cfg.values["eval"]
    cfg = load_config(str(ini), overrides)
    cfg.values["eval"] = dict(eval_values)
    tc = cfg.train_config()
    dimension = cfg.get("run", "dimension")
    assignments: dict[int, dict[int, int]] = {}
    for line in (d / FOLDS_FILE).read_text().splitlines()[1:]:
        s, t, f = (int(x) for x in line.split("\t"))
        assignments.setdefault(s, {})[t] = f
    results = []
    for data in load_dataset(cfg):
        if data.subject not in assignments:
            raise ConfigError("data.subjects", f"subject {data.subject} was not trained in {d}")
        split = FoldSplit(tc.folds, assignments[data.subject], tc.seed)
        folds = []
        for f in range(tc.folds):
            model = load_checkpoint(d / checkpoint_name(data.subject, f))
            C, F = data.eeg.shape[2:]
            want = (model.dims.channels, model.dims.features, model.dims.music_dim)
            if want != (C, F, data.music.shape[-1]):
                raise ConfigError("dim", f"checkpoint expects channels, features, music dim {want}, "
                                         f"data has {(C, F, data.music.shape[-1])}")
            rows = data.index_of(split.test_trials(f))
            folds.append(T.fold_outputs(model, data, f, rows))
        results.append(T.CVResult(data.subject, dimension, tc, split, data, folds))
    return TrainedRun(cfg, dimension, tc.ablation, results)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = SynthSpec(subjects=args.subjects, tracks=args.tracks, segments_per_track=args.segments,
                     channels=args.channels, dim=args.dim)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError("tracks" if "tracks" in str(exc) else "synth", str(exc)) from exc
    out = Path(args.out)
    synth_dataset(spec, separability=args.separability, domain_shift=args.domain_shift,
                  seed=args.seed, out_dir=out)
    log.info("event=synth tracks=%d segments=%d channels=%d dim=%d subjects=%d seed=%d manifest=%s",
             spec.tracks, spec.segments_per_track, spec.channels, spec.dim, spec.subjects, args.seed,
             out / "manifest.csv")
    return 0


def cmd_features(args, cfg: RunConfig) -> int:
    out = Path(cfg.require("run", "out"))
    out.mkdir(parents=True, exist_ok=True)
    for data in load_dataset(cfg):
        path = out / f"s{data.subject:02d}.npz"
        save_features(path, data)
        log.info("event=features subject=%d trials=%d shape=%s path=%s",
                 data.subject, len(data.trials), "x".join(map(str, data.eeg.shape)), path)
    return 0


def _epochs_table(results: list[T.CVResult]) -> str:
    rows = []
    for cv in results:
        for f in cv.folds:
            for r in f.report.epochs:
                rows.append([cv.subject, f.fold, r.epoch, r.ell_a, r.ell_b, r.ell_dd, r.J, r.val_J, r.dd_acc,
                             int(r.epoch == f.report.best_epoch)])
    return E.format_table(("subject", "fold", "epoch", "ell_a", "ell_b", "ell_dd", "J", "val_J", "dd_acc", "best"),
                          rows, "{:.9g}")


def train_all(datas: list[SubjectData], dimension: str, tc: T.TrainConfig, dims: ModelDims,
              jobs: int) -> list[T.CVResult]:
    """Cross-validate every subject; (subject, fold) jobs share one pool."""
    plans = [(d, *T.fold_tasks(d, dimension, tc, dims)) for d in datas]
    flat = [task for _, _, tasks in plans for task in tasks]
    done = iter(T.run_folds(flat, jobs))
    return [T.collect(d, dimension, tc, split, [next(done) for _ in tasks]) for d, split, tasks in plans]


def cmd_train(args, cfg: RunConfig) -> int:
    tc = cfg.train_config()
    dimension = cfg.get("run", "dimension")
    base = Path(cfg.require("run", "out"))
    datas = load_dataset(cfg)
    run_dir = base / run_name(dimension, tc.ablation)
    log.info("event=train_start dimension=%s ablation=%s subjects=%d folds=%d seed=%d out=%s",
             dimension, tc.ablation, len(datas), tc.folds, tc.seed, run_dir)
    results = train_all(datas, dimension, tc, cfg.model_dims(), cfg.get("run", "jobs"))
    run_dir.mkdir(parents=True, exist_ok=True)
    stored = RunConfig({s: dict(v) for s, v in cfg.values.items()})
    stored.values["run"]["out"] = None
    stored.values["run"]["checkpoints"] = None
    stored.values["run"]["jobs"] = 1
    for key in ("manifest", "features_dir"):
        if stored.values["data"][key]:
            stored.values["data"][key] = str(Path(stored.values["data"][key]).resolve())
    _write(run_dir / RUN_FILE, stored.to_ini())
    folds_rows = [[cv.subject, t, f] for cv in results for t, f in sorted(cv.split.assignments.items())]
    _write(run_dir / FOLDS_FILE, E.format_table(("subject", "trial", "fold"), folds_rows))
    for cv in results:
        for f in cv.folds:
            save_checkpoint(run_dir / checkpoint_name(cv.subject, f.fold), f.model)
    _write(run_dir / EPOCHS_FILE, _epochs_table(results))
    log.info("event=train_done dimension=%s ablation=%s checkpoints=%d out=%s",
             dimension, tc.ablation, sum(len(cv.folds) for cv in results), run_dir)
    return 0


def _eval_kwargs(cfg: RunConfig) -> dict:
    return dict(corpus=cfg.get("eval", "corpus"), metric=cfg.get("eval", "metric"), k=cfg.get("eval", "k"),
                exact_corpus=cfg.get("eval", "exact_corpus"))


def cmd_eval(args, cfg: RunConfig, overrides: dict) -> int:
    run = open_run(cfg, overrides)
    out = Path(cfg.get("run", "out") or cfg.get("run", "checkpoints"))
    per = {cv.subject: E.cv_metrics(cv, **_eval_kwargs(run.cfg)) for cv in run.results}
    path = out / f"metrics_{run.dimension}_{run.ablation}.tsv"
    _write(path, E.metrics_table(per))
    mean = {c: float(np.nanmean([m[c] for m in per.values()])) for c in E.METRIC_COLUMNS}
    log.info("event=eval dimension=%s ablation=%s %s path=%s", run.dimension, run.ablation,
             " ".join(f"{c}={mean[c]:.6f}" for c in E.METRIC_COLUMNS), path)
    return 0


def cmd_retrieve(args, cfg: RunConfig, overrides: dict) -> int:
    run = open_run(cfg, overrides)
    subject = args.subject if args.subject is not None else run.results[0].subject
    cv = next((c for c in run.results if c.subject == subject), None)
    if cv is None:
        raise ConfigError("subject", f"subject {subject} not in run")
    if args.trial not in cv.split.assignments:
        raise ConfigError("trial", f"trial {args.trial} not in subject {subject}")
    fold = cv.folds[cv.split.assignments[args.trial]]
    queries = E.fold_queries(fold, cv.data, cv.dimension)
    pos = list(cv.data.trials[fold.test_rows]).index(args.trial)
    corpus = E.build_corpus(fold, cv.data, cv.dimension, run.cfg.get("eval", "corpus"))
    ranking = E.retrieve(queries[pos], corpus, "aggregated", run.cfg.get("eval", "metric"))
    top = args.top if args.top else len(ranking)
    rows = [[i + 1, int(t), float(s), int(r)] for i, (t, s, r) in
            enumerate(zip(ranking.track_ids[:top], ranking.scores[:top], ranking.relevant[:top]))]
    text = E.format_table(("rank", "track", "distance", "relevant"), rows)
    if args.output:
        _write(Path(args.output), text)
    else:
        sys.stdout.write(text)
    log.info("event=retrieve subject=%d trial=%d stimulus=%d label=%d corpus=%d",
             subject, args.trial, queries[pos].track_id, queries[pos].label, len(corpus))
    return 0


def cmd_temporal(args, cfg: RunConfig, overrides: dict) -> int:
    run = open_run(cfg, overrides)
    out = Path(cfg.get("run", "out") or cfg.get("run", "checkpoints")) / f"temporal_{run.dimension}_{run.ablation}"
    window = run.cfg.get("eval", "smooth_window")
    per_track: dict[int, list[np.ndarray]] = {}
    for cv in run.results:
        for t, rows in E.segment_ap_curves(cv, run.cfg.get("eval", "corpus"), run.cfg.get("eval", "metric")).items():
            per_track.setdefault(t, []).extend(rows)
    header = ("segment_index", "map_raw", "map_smoothed")
    for t in sorted(per_track):
        raw, smooth = E.temporal_map(per_track[t], window)
        _write(out / f"track_{t:03d}.tsv", E.format_table(header, [[i, r, s] for i, (r, s) in enumerate(zip(raw, smooth))]))
    raw, smooth = E.temporal_map([r for rows in per_track.values() for r in rows], window)
    _write(out / "all_tracks.tsv", E.format_table(header, [[i, r, s] for i, (r, s) in enumerate(zip(raw, smooth))]))
    log.info("event=temporal tracks=%d segments=%d window=%d out=%s", len(per_track), len(raw), window, out)
    return 0


def _export_rows(run: TrainedRun):
    for cv in run.results:
        labels = cv.data.labels(cv.dimension)
        tags = cv.data.tags[cv.dimension]
        for fold in cv.folds:
            for i, r in enumerate(fold.test_rows):
                trial, track = int(cv.data.trials[r]), int(cv.data.tracks[r])
                for s in range(cv.data.n_segments):
                    yield cv.subject, trial, track, s, "eeg", int(labels[r]), fold.eeg_embeddings[i, s]
                    yield cv.subject, trial, track, s, "music", int(tags[r]), fold.music_embeddings[r, s]


def cmd_export(args, cfg: RunConfig, overrides: dict) -> int:
    run = open_run(cfg, overrides)
    path = Path(args.output) if args.output else (
        Path(cfg.get("run", "out") or cfg.get("run", "checkpoints")) / f"embeddings_{run.dimension}_{run.ablation}.tsv")
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = run.results[0].folds[0].model.dims.embed_dim
    n = E.export_embeddings(_export_rows(run), path, dim)
    log.info("event=export rows=%d path=%s", n, path)
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    tc = cfg.train_config()
    dimension = cfg.get("run", "dimension")
    out = Path(cfg.require("run", "out"))
    grid = {name: getattr(args, name) or (getattr(tc, name),) for name in ("lambda1", "lambda2", "lambda11", "lambda12")}
    datas = load_dataset(cfg)
    rows = []
    for combo in itertools.product(*grid.values()):
        point = dict(zip(grid, combo))
        try:
            ptc = replace(tc, **point)
        except ValueError as exc:
            raise ConfigError("sweep", str(exc)) from exc
        results = train_all(datas, dimension, ptc, cfg.model_dims(), cfg.get("run", "jobs"))
        per = [E.cv_metrics(cv, **_eval_kwargs(cfg)) for cv in results]
        mean = [float(np.nanmean([m[c] for m in per])) for c in E.METRIC_COLUMNS]
        rows.append([*combo, *mean])
        log.info("event=sweep_point dimension=%s %s %s", dimension,
                 " ".join(f"{k}={v:g}" for k, v in point.items()),
                 " ".join(f"{c}={m:.6f}" for c, m in zip(E.METRIC_COLUMNS, mean)))
    path = out / f"sweep_{dimension}_{tc.ablation}.tsv"
    _write(path, E.format_table((*grid, *E.METRIC_COLUMNS), rows))
    log.info("event=sweep_done points=%d path=%s", len(rows), path)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _opt(p: argparse.ArgumentParser, section: str, key: str, *flags: str, **kw) -> None:
    """Flag that overrides ``section.key``; absent flags leave the config untouched."""
    p.add_argument(*flags, dest=f"{section}__{key}", default=argparse.SUPPRESS, **kw)


def _data_opts(p):
    p.add_argument("--config", help="INI file with [data] [features] [model] [train] [eval] [run] sections")
    _opt(p, "data", "manifest", "--manifest", help="dataset manifest CSV")
    _opt(p, "data", "features_dir", "--features-dir", help="directory of cached sNN.npz feature files")
    _opt(p, "data", "subjects", "--subjects", type=_int_list, help="comma-separated subject ids (default all)")
    _opt(p, "data", "exclude_tracks", "--exclude-tracks", type=_int_list, help="comma-separated track ids to drop")
    _opt(p, "features", "per_window", "--band-average", action="store_const", const=False,
         help="average the three 1 s windows per band (4 features instead of 12)")


def _train_opts(p):
    _opt(p, "run", "dimension", "--dimension", choices=DIMENSIONS, help="emotion dimension")
    _opt(p, "run", "seed", "--seed", type=int, help="global seed")
    _opt(p, "run", "jobs", "--jobs", type=int, help="parallel (subject, fold) jobs")
    _opt(p, "train", "music_supervision", "--no-music", action="store_const", const=False,
         help="ablation: EEG classification loss only (drops the music and domain terms)")
    _opt(p, "train", "domain_discriminator", "--no-grl", action="store_const", const=False,
         help="ablation: drop the domain discriminator term")
    _opt(p, "train", "learning_rate", "--lr", type=float, help="Adam learning rate")
    _opt(p, "train", "max_epochs", "--epochs", type=int, help="maximum epochs per fold")
    _opt(p, "train", "patience", "--patience", type=int, help="early-stopping patience in epochs")
    _opt(p, "train", "batch_size", "--batch-size", type=int, help="even mini-batch size")
    _opt(p, "train", "folds", "--folds", type=int, help="cross-validation folds")
    _opt(p, "train", "validation", "--validation", choices=("inner", "heldout"),
         help="early-stopping set: next fold (inner) or the test fold (heldout)")
    _opt(p, "train", "mix_mode", "--mix-mode", choices=("modality", "pairing"), help="discriminator batch type")
    for name in ("lambda1", "lambda2", "lambda11", "lambda12"):
        _opt(p, "train", name, f"--{name}", type=float, help=f"objective weight {name}")
    _opt(p, "train", "lambda_grl", "--lambda-grl", type=float, help="gradient reversal strength")
    for key, kind in (("lstm_hidden", int), ("attention_dim", int), ("disc_hidden", int)):
        _opt(p, "model", key, f"--{key.replace('_', '-')}", type=kind, help=f"model {key}")
    _opt(p, "model", "music_hidden", "--music-hidden", type=_int_list, help="music MLP hidden widths, comma-separated")


def _eval_opts(p):
    _opt(p, "eval", "corpus", "--corpus", choices=("fold", "full"),
         help="retrieval corpus: test-fold tracks or all tracks of the subject")
    _opt(p, "eval", "exact_corpus", "--exact-corpus", choices=("fold", "full"),
         help="corpus for exact-stimulus retrieval")
    _opt(p, "eval", "metric", "--metric", choices=("euclidean", "cosine"), help="embedding distance")
    _opt(p, "eval", "k", "--k", type=int, help="cutoff for precision@k")
    _opt(p, "eval", "smooth_window", "--smooth-window", type=int, help="moving-average window for temporal curves")


def _run_opts(p, out_help: str, checkpoints: bool = False):
    _opt(p, "run", "out", "--out", help=out_help)
    if checkpoints:
        _opt(p, "run", "checkpoints", "--checkpoints", help="run directory written by train")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eegmusic", description="EEG-music cross-modal affect pipeline.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic paired dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tracks", type=int, default=34, help="stimulus tracks (>= 10)")
    p.add_argument("--segments", type=int, default=58, help="segments per trial")
    p.add_argument("--channels", type=int, default=32, help="EEG channels")
    p.add_argument("--dim", type=int, default=256, help="music embedding dimension")
    p.add_argument("--subjects", type=int, default=1, help="subjects")
    p.add_argument("--separability", type=float, default=0.9, help="class separability in [0, 1]")
    p.add_argument("--domain-shift", type=float, default=0.0, help="offset between the modalities")
    p.add_argument("--seed", type=int, default=0, help="generator seed")

    p = sub.add_parser("features", help="extract DE features and cache them per subject")
    _data_opts(p)
    _run_opts(p, "directory for sNN.npz files")

    p = sub.add_parser("train", help="cross-validated training; writes checkpoints and epoch logs")
    _data_opts(p)
    _train_opts(p)
    _run_opts(p, "base directory; the run goes to <out>/<dimension>_<ablation>")

    p = sub.add_parser("eval", help="metrics report for a trained run")
    _data_opts(p)
    _eval_opts(p)
    _run_opts(p, "report directory (default: the run directory)", checkpoints=True)

    p = sub.add_parser("retrieve", help="rank music tracks for one EEG trial")
    _data_opts(p)
    _eval_opts(p)
    _run_opts(p, "unused", checkpoints=True)
    p.add_argument("--subject", type=int, help="subject id (default: first)")
    p.add_argument("--trial", type=int, required=True, help="trial id used as query")
    p.add_argument("--top", type=int, default=0, help="rows to print (default: all)")
    p.add_argument("--output", help="write the ranking here instead of stdout")

    p = sub.add_parser("temporal", help="per-segment mAP curves, one table per track")
    _data_opts(p)
    _eval_opts(p)
    _run_opts(p, "directory for the curve tables (default: the run directory)", checkpoints=True)

    p = sub.add_parser("export", help="dump EEG and music embeddings of every test segment")
    _data_opts(p)
    _run_opts(p, "directory for the export (default: the run directory)", checkpoints=True)
    p.add_argument("--output", help="explicit output file")

    p = sub.add_parser("sweep", help="grid over the objective weights")
    _data_opts(p)
    _train_opts(p)
    _eval_opts(p)
    _run_opts(p, "directory for the sweep table")
    for name in ("lambda1", "lambda2", "lambda11", "lambda12"):
        p.add_argument(f"--grid-{name}", dest=name, type=_float_list,
                       help=f"comma-separated values for {name}")
    return ap


def _overrides(ns: argparse.Namespace) -> dict[tuple[str, str], object]:
    out = {}
    for name, value in vars(ns).items():
        if "__" in name:
            section, key = name.split("__", 1)
            out[(section, key)] = value
    return out


class _KeyValueFormatter(logging.Formatter):
    def format(self, record):
        return f"level={record.levelname.lower()} logger={record.name} {record.getMessage()}"


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KeyValueFormatter())
    root = logging.getLogger("eegmusic")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.log_level)
    overrides = _overrides(args)
    try:
        if args.command == "synth":
            return cmd_synth(args, None)
        cfg = load_config(getattr(args, "config", None), overrides)
        if args.command in ("eval", "retrieve", "temporal", "export"):
            handler = {"eval": cmd_eval, "retrieve": cmd_retrieve, "temporal": cmd_temporal, "export": cmd_export}
            return handler[args.command](args, cfg, overrides)
        return {"features": cmd_features, "train": cmd_train, "sweep": cmd_sweep}[args.command](args, cfg)
    except (ConfigError, DataFormatError) as exc:
        log.error("event=error kind=config field=%s message=%r", exc.field, str(exc))
        return 2
    except (T.TrainingError, CheckpointError, E.EvaluationError, OSError, ValueError) as exc:
        log.error("event=error kind=runtime type=%s message=%r", type(exc).__name__, str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
