"""Experiment orchestration: corpus -> codebook -> upstream -> per-fold training -> reports.

Every stage reads its inputs from, and writes its outputs under, one output
directory, so the CLI can run stages separately or all at once::

    <out>/corpus/                    synthetic task corpus (WAVs + manifest.jsonl)
    <out>/pretrain_corpus/           synthetic unlabeled pretraining corpus
    <out>/codebook.ckpt              k-means centroids ("centroids")
    <out>/upstream.ckpt              pretrained upstream parameters
    <out>/checkpoints/<run_id>/step<N>.ckpt
    <out>/checkpoints/<run_id>/averaged.ckpt
    <out>/reports/<run_id>.json
    <out>/curves.csv (+ .meta.json)

``run_id`` is ``fold<k>_n<n>`` with ``n`` either a count or ``full``.
"""

from __future__ import annotations

import contextlib
import copy
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .audio import crop_duration, read_wav, resample
from .config import ExperimentConfig, parse_averaging, serialize_config
from .container import read_checkpoint, read_tensors, write_checkpoint, write_tensors
from .downstream import ClassifierHead, embed, pool_mean
from .errors import DataError, EngineError, FingerprintMismatch, IoError
from .evaluation import EvalReport, dev_split, duration_sliced_eval, group_kfold, \
    subsample_per_class
from .features import Codebook, FeatureSequence, kmeans_assign, kmeans_fit, logmel, mfcc
from .manifest import read_manifest
from .synth import SynthSpec, generate_corpus
from .training import (Checkpoint, CheckpointStore, Example, TrainConfig, apply_checkpoint,
                       average_checkpoints, evaluate_examples, select_best_plus_step,
                       select_top_k, train)
from .upstream import MaskSpec, PretrainConfig, UpstreamConfig, UpstreamModel, \
    fit_normalization, pretrain
from .util import derive_seed, fingerprint

log = logging.getLogger(__name__)

CURVES_HEADER = ("task", "fold", "n_per_class", "duration_s", "metric_name", "value", "seed")


@contextlib.contextmanager
def stage(name: str):
    """Prefix any engine error raised inside with the stage that failed."""
    try:
        yield
    except EngineError as exc:
        if not getattr(exc, "stage", None):
            exc.stage = name
            exc.args = (f"[{name}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
        raise


# ---------------------------------------------------------------- fingerprints

def config_fingerprint(cfg: ExperimentConfig) -> str:
    """Digest of everything that affects results (output paths excluded)."""
    d = cfg.to_dict()
    del d["run"]["out_dir"]
    del d["pretrain"]["upstream_checkpoint"]
    return fingerprint(d)


def corpus_fingerprint(cfg: ExperimentConfig) -> str:
    return fingerprint({"task": asdict(cfg.task), "synth": asdict(cfg.synth),
                        "seed": cfg.run.seed})


def upstream_fingerprint(cfg: ExperimentConfig) -> str:
    pre = asdict(cfg.pretrain)
    del pre["upstream_checkpoint"]
    return fingerprint({"corpus": corpus_fingerprint(cfg), "features": asdict(cfg.features),
                        "kmeans": asdict(cfg.kmeans), "model": asdict(cfg.model),
                        "mask": asdict(cfg.mask), "pretrain": pre})


def run_id(fold: int, n) -> str:
    return f"fold{fold}_n{n}"


# ---------------------------------------------------------------------- corpus

def synth_spec(cfg: ExperimentConfig, pretraining: bool = False) -> SynthSpec:
    spec = SynthSpec(**asdict(cfg.synth), seed=derive_seed(cfg.run.seed, "synth"))
    if pretraining:
        spec = replace(spec, label_noise=0.0,
                       speaker_seed=derive_seed(cfg.run.seed, "pretrain-corpus"))
    return spec


def stage_synth(cfg: ExperimentConfig, out) -> None:
    """Write the synthetic task and pretraining corpora (no-op for manifest tasks)."""
    if cfg.task.manifest:
        return
    out = Path(out)
    with stage("synth"):
        generate_corpus(synth_spec(cfg), out / "corpus")
        generate_corpus(synth_spec(cfg, pretraining=True), out / "pretrain_corpus")


def _manifest_path(cfg: ExperimentConfig, out, pretraining=False) -> Path:
    if cfg.task.manifest:
        return Path(cfg.task.manifest)
    return Path(out) / ("pretrain_corpus" if pretraining else "corpus") / "manifest.jsonl"


@dataclass
class Corpus:
    records: list
    waves: dict  # utt_id -> Waveform

    @property
    def label_set(self) -> list:
        return sorted({r.label for r in self.records})


def load_corpus(cfg: ExperimentConfig, out, pretraining=False) -> Corpus:
    path = _manifest_path(cfg, out, pretraining)
    if not path.exists():
        if not cfg.task.manifest:
            stage_synth(cfg, out)
        else:
            raise IoError(f"manifest {path} not found")
    records = read_manifest(path)
    waves = {r.utt_id: read_wav(path.parent / r.path) for r in records}
    return Corpus(records, waves)


class FeatureCache:
    """Log-mel frames (and MFCCs on demand) at the model sample rate, per utterance."""

    def __init__(self, cfg: ExperimentConfig, corpus: Corpus):
        self.cfg, self.corpus = cfg, corpus
        self._wave, self._logmel, self._mfcc = {}, {}, {}
        self._pooled, self._upstream = {}, None

    def wave(self, utt_id):
        if utt_id not in self._wave:
            w = self.corpus.waves[utt_id]
            sr = self.cfg.features.sample_rate
            self._wave[utt_id] = w if w.sample_rate == sr else resample(w, sr)
        return self._wave[utt_id]

    def logmel(self, utt_id) -> np.ndarray:
        if utt_id not in self._logmel:
            self._logmel[utt_id] = logmel(self.wave(utt_id), self.cfg.features.n_mels).data
        return self._logmel[utt_id]

    def pooled(self, utt_id, upstream) -> np.ndarray:
        """Pooled representation under a frozen ``upstream`` (one upstream per cache)."""
        if self._upstream is not upstream:
            self._pooled, self._upstream = {}, upstream
        if utt_id not in self._pooled:
            self._pooled[utt_id] = pool_mean(upstream.forward(self.logmel(utt_id)))
        return self._pooled[utt_id]

    def mfcc(self, utt_id) -> np.ndarray:
        if utt_id not in self._mfcc:
            f = self.cfg.features
            self._mfcc[utt_id] = mfcc(self.wave(utt_id), f.n_mfcc, f.n_mels).data
        return self._mfcc[utt_id]


# ------------------------------------------------------------ codebook/upstream

def stage_kmeans(cfg: ExperimentConfig, out, cache: FeatureCache | None = None) -> Codebook:
    with stage("kmeans"):
        if cache is None:
            cache = FeatureCache(cfg, load_corpus(cfg, out, pretraining=True))
        frames = np.concatenate([cache.mfcc(r.utt_id) for r in cache.corpus.records])
        rng = np.random.default_rng(derive_seed(cfg.run.seed, "kmeans-frames"))
        if len(frames) > cfg.kmeans.max_frames:
            frames = frames[np.sort(rng.choice(len(frames), cfg.kmeans.max_frames,
                                               replace=False))]
        cb = kmeans_fit(frames, cfg.model.num_clusters, seed=derive_seed(cfg.run.seed, "kmeans"),
                        max_iters=cfg.kmeans.max_iters,
                        feature_kind=f"mfcc{cfg.features.n_mfcc}")
        # the container stores f32; round now so staged and one-shot runs agree
        cb = Codebook(cb.centroids.astype(np.float32).astype(np.float64), cb.feature_kind,
                      cb.inertia_history)
        write_tensors(Path(out) / "codebook.ckpt", {"centroids": cb.centroids},
                      upstream_fingerprint(cfg),
                      {"feature_kind": cb.feature_kind,
                       "inertia_history": [float(x) for x in cb.inertia_history]})
    return cb


def load_codebook(cfg: ExperimentConfig, out) -> Codebook:
    tensors, meta = read_tensors(Path(out) / "codebook.ckpt")
    if meta["fingerprint"] != upstream_fingerprint(cfg):
        raise FingerprintMismatch("codebook.ckpt was built under a different config")
    return Codebook(tensors["centroids"].astype(np.float64), meta["feature_kind"],
                    tuple(meta["inertia_history"]))


def upstream_config(cfg: ExperimentConfig) -> UpstreamConfig:
    m = cfg.model
    return UpstreamConfig(d_feat=cfg.features.n_mels, d_model=m.d_model, n_layers=m.n_layers,
                          heads=m.heads, d_ff=m.d_ff, num_clusters=m.num_clusters,
                          sample_rate=cfg.features.sample_rate)


def stage_pretrain(cfg: ExperimentConfig, out, cache: FeatureCache | None = None,
                   codebook: Codebook | None = None) -> UpstreamModel:
    with stage("pretrain"):
        if cache is None:
            cache = FeatureCache(cfg, load_corpus(cfg, out, pretraining=True))
        if codebook is None:
            codebook = load_codebook(cfg, out)
        model = UpstreamModel(upstream_config(cfg), seed=derive_seed(cfg.run.seed, "upstream-init"))
        ids = [r.utt_id for r in cache.corpus.records]
        feats = [cache.logmel(i) for i in ids]
        targets = [kmeans_assign(cache.mfcc(i), codebook) for i in ids]
        fit_normalization(model, [FeatureSequence(f) for f in feats])
        p = cfg.pretrain
        history = pretrain(model, [FeatureSequence(f) for f in feats], targets,
                           MaskSpec(cfg.mask.start_prob, cfg.mask.span_len),
                           PretrainConfig(p.steps, p.batch_size, p.crop_frames, p.lr,
                                          p.max_grad_norm or None,
                                          derive_seed(cfg.run.seed, "pretrain")))
        ck = Checkpoint(model.state_dict(), p.steps, None, upstream_fingerprint(cfg))
        write_checkpoint(Path(out) / "upstream.ckpt", ck)
        _write_text(Path(out) / "pretrain_loss.csv",
                    "step,loss\n" + "".join(f"{i},{v:.6g}\n" for i, v in enumerate(history)))
    return model


def load_upstream(cfg: ExperimentConfig, out) -> UpstreamModel:
    path = Path(cfg.pretrain.upstream_checkpoint or Path(out) / "upstream.ckpt")
    with stage("pretrain"):
        ck = read_checkpoint(path)
        if ck.fingerprint != upstream_fingerprint(cfg):
            raise FingerprintMismatch(f"{path} was pretrained under a different config")
        model = UpstreamModel(upstream_config(cfg), seed=0)
        model.load_state_dict(ck.tensors)
    return model


def ensure_upstream(cfg: ExperimentConfig, out) -> UpstreamModel:
    """Load the upstream if one exists (or is configured), otherwise build it."""
    if cfg.pretrain.upstream_checkpoint or (Path(out) / "upstream.ckpt").exists():
        return load_upstream(cfg, out)
    cache = FeatureCache(cfg, load_corpus(cfg, out, pretraining=True))
    codebook = stage_kmeans(cfg, out, cache)
    return stage_pretrain(cfg, out, cache, codebook)


# ------------------------------------------------------------ per-fold units

def train_config(cfg: ExperimentConfig, fold: int, n) -> TrainConfig:
    t = cfg.train
    return TrainConfig(mode=t.mode, head_lr=t.head_lr, upstream_lr=t.upstream_lr or None,
                       batch_size=t.batch_size, max_steps=t.max_steps,
                       eval_every_steps=t.eval_every_steps, patience=t.patience,
                       seed=derive_seed(cfg.run.seed, f"train/{run_id(fold, n)}"),
                       max_grad_norm=t.max_grad_norm or None,
                       crop_frames=t.crop_frames or None, metric=cfg.task.metric)


def unit_split(cfg: ExperimentConfig, corpus: Corpus, fold: int, n):
    """(train, dev, test) records for one fold and training-set size."""
    p = cfg.protocol
    plan = group_kfold(corpus.records, p.folds, p.group_key,
                       seed=derive_seed(cfg.run.seed, "folds"))
    train_recs, test_recs = plan.split(corpus.records, fold)
    train_recs, dev_recs = dev_split(train_recs, p.dev_fraction,
                                     seed=derive_seed(cfg.run.seed, f"dev/fold{fold}"))
    if n != "full":
        train_recs = subsample_per_class(
            train_recs, n, seed=derive_seed(cfg.run.seed, f"subsample/{run_id(fold, n)}"))
    return train_recs, dev_recs, test_recs


def new_head(cfg: ExperimentConfig, label_set, fold: int, n) -> ClassifierHead:
    return ClassifierHead(cfg.task.name, label_set, cfg.model.d_model,
                          seed=derive_seed(cfg.run.seed, f"head/{run_id(fold, n)}"))


def _examples(cache: FeatureCache, records, upstream=None):
    if upstream is None:
        return [Example(cache.logmel(r.utt_id), r.label) for r in records]
    return [Example(cache.logmel(r.utt_id), r.label, cache.pooled(r.utt_id, upstream))
            for r in records]


def _ckpt_dir(out, fold, n) -> Path:
    return Path(out) / "checkpoints" / run_id(fold, n)


def train_unit(cfg, out, upstream, cache: FeatureCache, fold: int, n) -> CheckpointStore:
    with stage(f"train {run_id(fold, n)}"):
        train_recs, dev_recs, _ = unit_split(cfg, cache.corpus, fold, n)
        head = new_head(cfg, cache.corpus.label_set, fold, n)
        if cfg.train.mode == "finetune":
            model, frozen = copy.deepcopy(upstream), None
        else:
            model = frozen = upstream
        store = train(model, head, _examples(cache, train_recs, frozen),
                      _examples(cache, dev_recs, frozen), train_config(cfg, fold, n))
        for ck in store:
            write_checkpoint(_ckpt_dir(out, fold, n) / f"step{ck.step}.ckpt", ck)
    return store


def load_store(out, fold: int, n) -> CheckpointStore:
    paths = sorted(_ckpt_dir(out, fold, n).glob("step*.ckpt"),
                   key=lambda p: int(p.stem[len("step"):]))
    if not paths:
        raise IoError(f"no checkpoints under {_ckpt_dir(out, fold, n)}")
    return CheckpointStore(read_checkpoint(p) for p in paths)


def select_for_averaging(cfg: ExperimentConfig, store: CheckpointStore) -> list:
    kind, arg = parse_averaging(cfg.protocol.averaging)
    if kind == "top_k":
        return select_top_k(store, arg)
    if kind == "best_plus_step":
        return select_best_plus_step(store, arg)
    return select_top_k(store, 1)


def average_unit(cfg, out, upstream, cache: FeatureCache, fold: int, n,
                 store: CheckpointStore | None = None) -> Checkpoint:
    """Apply the averaging recipe and re-score the result on the dev set."""
    with stage(f"average {run_id(fold, n)}"):
        if store is None:
            store = load_store(out, fold, n)
        avg = average_checkpoints(select_for_averaging(cfg, store))
        model, head = _materialize(cfg, upstream, cache, fold, n, avg)
        _, dev_recs, _ = unit_split(cfg, cache.corpus, fold, n)
        frozen = model if cfg.train.mode == "frozen" else None
        avg = avg.with_metric(evaluate_examples(model, head, _examples(cache, dev_recs, frozen),
                                                cfg.task.metric))
        write_checkpoint(_ckpt_dir(out, fold, n) / "averaged.ckpt", avg)
    return avg


def _materialize(cfg, upstream, cache, fold, n, ck: Checkpoint):
    head = new_head(cfg, cache.corpus.label_set, fold, n)
    model = copy.deepcopy(upstream) if cfg.train.mode == "finetune" else upstream
    apply_checkpoint(ck, model, head)
    return model, head


def eval_unit(cfg, out, upstream, cache: FeatureCache, fold: int, n,
              averaged: Checkpoint | None = None, embed_cache: dict | None = None) -> EvalReport:
    with stage(f"eval {run_id(fold, n)}"):
        if averaged is None:
            averaged = read_checkpoint(_ckpt_dir(out, fold, n) / "averaged.ckpt")
        model, head = _materialize(cfg, upstream, cache, fold, n, averaged)
        _, _, test_recs = unit_split(cfg, cache.corpus, fold, n)
        items = [(cache.corpus.waves[r.utt_id], r.label) for r in test_recs]
        embed_fn = None
        if cfg.train.mode == "frozen" and embed_cache is not None:
            # a frozen upstream is shared by every unit, so crops embed once per run
            def embed_fn(i, w, d):
                key = (test_recs[i].utt_id, d)
                if key not in embed_cache:
                    embed_cache[key] = embed(model, w if d is None else crop_duration(w, d))
                return embed_cache[key]
        durations = list(cfg.protocol.durations) or [None]
        report = duration_sliced_eval(model, head, items, durations, cfg.protocol.eer_mode,
                                      config_fingerprint(cfg), embed_fn)
        report.fold = fold
        report.n_per_class = None if n == "full" else int(n)
        report.seed = cfg.run.seed
        _write_text(Path(out) / "reports" / f"{run_id(fold, n)}.json",
                    json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return report


def units(cfg: ExperimentConfig):
    return [(fold, n) for n in cfg.protocol.n_per_class for fold in range(cfg.protocol.folds)]


def sweep(cfg: ExperimentConfig, out, upstream: UpstreamModel | None = None) -> list:
    """Train, average and evaluate every (fold, n_per_class) unit; returns the reports."""
    out = Path(out)
    if upstream is None:
        upstream = ensure_upstream(cfg, out)
    cache = FeatureCache(cfg, load_corpus(cfg, out))
    embed_cache = {}
    reports = []
    for fold, n in units(cfg):
        store = train_unit(cfg, out, upstream, cache, fold, n)
        avg = average_unit(cfg, out, upstream, cache, fold, n, store)
        reports.append(eval_unit(cfg, out, upstream, cache, fold, n, avg, embed_cache))
        log.info("%s done: %s", run_id(fold, n), reports[-1].metrics())
    return reports


def run_experiment(cfg: ExperimentConfig, out=None) -> list:
    """Full recipe; writes every artifact under ``out`` (default ``cfg.run.out_dir``)."""
    out = Path(out if out is not None else cfg.run.out_dir)
    _write_text(out / "config.toml", serialize_config(cfg))
    stage_synth(cfg, out)
    reports = sweep(cfg, out, ensure_upstream(cfg, out))
    emit_report(reports, out / "curves.csv")
    return reports


def load_reports(out) -> list:
    paths = sorted((Path(out) / "reports").glob("*.json"))
    if not paths:
        raise IoError(f"no reports under {Path(out) / 'reports'}")
    return [EvalReport.from_dict(json.loads(p.read_text())) for p in paths]


# -------------------------------------------------------------------- curves

def _fmt(x) -> str:
    return "full" if x is None else format(x, ".6g")


def emit_report(reports, out) -> Path:
    """Flat curves CSV (plus a fingerprint sidecar); rows sorted for stable diffs."""
    reports = list(reports)
    if not reports:
        raise DataError("no reports to emit")
    fps = {r.fingerprint for r in reports}
    if len(fps) != 1:
        raise FingerprintMismatch(f"reports come from {len(fps)} different configs")
    rows = []
    for r in reports:
        for d, name, value in r.metrics():
            rows.append(((r.task_name, _inf(r.n_per_class), _inf(d), r.fold, name),
                         (r.task_name, r.fold, _fmt(r.n_per_class), _fmt(d), name,
                          _fmt(value), r.seed)))
    rows.sort(key=lambda kv: kv[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVES_HEADER)
    writer.writerows(row for _, row in rows)
    out = Path(out)
    _write_text(out, buf.getvalue())
    _write_text(out.with_name(out.name + ".meta.json"),
                json.dumps({"fingerprint": fps.pop()}, indent=2) + "\n")
    return out


def _inf(x):
    return math.inf if x is None else x


def parse_curves(path) -> list[dict]:
    """Rows of a curves CSV with numeric fields parsed (``None`` for "full")."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CURVES_HEADER:
        raise DataError(f"{path}: unexpected header {reader.fieldnames}")
    rows = []
    for row in reader:
        rows.append({"task": row["task"], "fold": int(row["fold"]),
                     "n_per_class": None if row["n_per_class"] == "full"
                     else int(float(row["n_per_class"])),
                     "duration_s": None if row["duration_s"] == "full"
                     else float(row["duration_s"]),
                     "metric_name": row["metric_name"], "value": float(row["value"]),
                     "seed": int(row["seed"])})
    return rows


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
