"""Experiment configuration: TOML in, fully defaulted and validated dataclasses out."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from .errors import IoError, ParseError, RangeError, UnknownKey


@dataclass(frozen=True)
class TaskSection:
    name: str = "ser"
    manifest: str = ""  # empty: use the synthetic corpus
    metric: str = "weighted_accuracy"


@dataclass(frozen=True)
class SynthSection:
    num_classes: int = 4
    num_speakers: int = 10
    utterances_per_speaker_per_class: int = 5
    duration_s: float = 1.5
    sample_rate: int = 16000
    class_presence: float = 1.0
    label_noise: float = 0.0


@dataclass(frozen=True)
class FeatureSection:
    n_mels: int = 40
    n_mfcc: int = 13
    sample_rate: int = 16000


@dataclass(frozen=True)
class ModelSection:
    d_model: int = 96
    n_layers: int = 3
    heads: int = 4
    d_ff: int = 384
    num_clusters: int = 50


@dataclass(frozen=True)
class MaskSection:
    start_prob: float = 0.08
    span_len: int = 10


@dataclass(frozen=True)
class KMeansSection:
    max_iters: int = 50
    max_frames: int = 30000


@dataclass(frozen=True)
class PretrainSection:
    steps: int = 1500
    batch_size: int = 4
    crop_frames: int = 100
    lr: float = 1e-3
    max_grad_norm: float = 5.0
    upstream_checkpoint: str = ""  # non-empty: load instead of pretraining


@dataclass(frozen=True)
class TrainSection:
    mode: str = "frozen"
    head_lr: float = 1e-2
    upstream_lr: float = 0.0  # 0: head_lr / 10
    batch_size: int = 16
    max_steps: int = 500
    eval_every_steps: int = 50
    patience: int = 10
    max_grad_norm: float = 5.0  # 0: no clipping
    crop_frames: int = 0  # 0: whole utterances


@dataclass(frozen=True)
class ProtocolSection:
    folds: int = 5
    group_key: str = "speaker"
    dev_fraction: float = 0.12
    n_per_class: list = field(default_factory=lambda: ["full"])
    durations: list = field(default_factory=lambda: [3.0, 10.0, 30.0])
    eer_mode: str = "pooled"
    averaging: str = "top_k(5)"


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSection = TaskSection()
    synth: SynthSection = SynthSection()
    features: FeatureSection = FeatureSection()
    model: ModelSection = ModelSection()
    mask: MaskSection = MaskSection()
    kmeans: KMeansSection = KMeansSection()
    pretrain: PretrainSection = PretrainSection()
    train: TrainSection = TrainSection()
    protocol: ProtocolSection = ProtocolSection()
    run: RunSection = RunSection()

    def to_dict(self) -> dict:
        return asdict(self)


_AVERAGING = re.compile(r"^(none|top_k\((\d+)\)|best_plus_step\((\d+)\))$")


def parse_averaging(spec: str):
    """``"none"`` -> ("none", None); ``"top_k(5)"`` -> ("top_k", 5); likewise best_plus_step."""
    m = _AVERAGING.match(spec.replace(" ", ""))
    if not m:
        raise RangeError(f"averaging must be none, top_k(k) or best_plus_step(step), got {spec!r}")
    if m.group(2):
        return "top_k", int(m.group(2))
    if m.group(3):
        return "best_plus_step", int(m.group(3))
    return "none", None


def _coerce(section: str, f, value):
    where = f"{section}.{f.name}"
    default = f.default if f.default is not field().default else f.default_factory()
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise RangeError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def _validate(cfg: ExperimentConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise RangeError(msg)

    positive_ints = [
        ("synth", ("num_classes", "num_speakers", "utterances_per_speaker_per_class", "sample_rate")),
        ("features", ("n_mels", "n_mfcc", "sample_rate")),
        ("model", ("d_model", "n_layers", "heads", "d_ff", "num_clusters")),
        ("mask", ("span_len",)),
        ("kmeans", ("max_iters", "max_frames")),
        ("pretrain", ("batch_size", "crop_frames")),
        ("train", ("batch_size", "max_steps", "eval_every_steps", "patience")),
    ]
    for section, names in positive_ints:
        for name in names:
            need(getattr(getattr(cfg, section), name) >= 1, f"{section}.{name} must be >= 1")
    need(cfg.task.metric in ("weighted_accuracy", "eer"), "task.metric must be weighted_accuracy or eer")
    need(cfg.synth.duration_s > 0, "synth.duration_s must be > 0")
    need(0 < cfg.synth.class_presence <= 1, "synth.class_presence must be in (0, 1]")
    need(0 <= cfg.synth.label_noise < 1, "synth.label_noise must be in [0, 1)")
    need(cfg.features.n_mfcc <= cfg.features.n_mels, "features.n_mfcc must not exceed n_mels")
    need(cfg.model.d_model % cfg.model.heads == 0, "model.d_model must be divisible by heads")
    need(0 <= cfg.mask.start_prob <= 1, "mask.start_prob must be in [0, 1]")
    need(cfg.pretrain.steps >= 0, "pretrain.steps must be >= 0")
    need(cfg.pretrain.lr > 0, "pretrain.lr must be > 0")
    need(cfg.pretrain.max_grad_norm >= 0, "pretrain.max_grad_norm must be >= 0")
    need(cfg.train.mode in ("frozen", "finetune"), "train.mode must be frozen or finetune")
    need(cfg.train.head_lr > 0 and cfg.train.upstream_lr >= 0, "learning rates must be positive")
    need(cfg.train.max_grad_norm >= 0 and cfg.train.crop_frames >= 0,
         "train.max_grad_norm and train.crop_frames must be >= 0")
    need(cfg.protocol.folds >= 2, "protocol.folds must be >= 2")
    need(cfg.protocol.group_key in ("speaker", "session"), "protocol.group_key must be speaker or session")
    need(0 <= cfg.protocol.dev_fraction < 1, "protocol.dev_fraction must be in [0, 1)")
    need(len(cfg.protocol.n_per_class) >= 1, "protocol.n_per_class must be non-empty")
    for n in cfg.protocol.n_per_class:
        need(n == "full" or (isinstance(n, int) and not isinstance(n, bool) and n >= 1),
             f"protocol.n_per_class entries must be positive ints or \"full\", got {n!r}")
    for d in cfg.protocol.durations:
        need(isinstance(d, (int, float)) and not isinstance(d, bool) and d > 0,
             f"protocol.durations entries must be positive, got {d!r}")
    need(cfg.protocol.eer_mode in ("pooled", "macro"), "protocol.eer_mode must be pooled or macro")
    parse_averaging(cfg.protocol.averaging)
    need(cfg.run.seed >= 0, "run.seed must be >= 0")


def config_from_dict(data: dict) -> ExperimentConfig:
    sections = {}
    known = {f.name: f for f in fields(ExperimentConfig)}
    for key, value in data.items():
        if key not in known:
            raise UnknownKey(f"unknown section [{key}]")
        if not isinstance(value, dict):
            raise RangeError(f"[{key}] must be a table")
        cls = type(known[key].default)
        members = {f.name: f for f in fields(cls)}
        kwargs = {}
        for name, v in value.items():
            if name not in members:
                raise UnknownKey(f"unknown key {key}.{name}")
            kwargs[name] = _coerce(key, members[name], v)
        sections[key] = cls(**kwargs)
    cfg = ExperimentConfig(**sections)
    if cfg.protocol.durations:
        cfg = replace(cfg, protocol=replace(cfg.protocol,
                                            durations=[float(d) for d in cfg.protocol.durations]))
    _validate(cfg)
    return cfg


def loads_config(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ParseError(str(exc), int(m.group(1)) if m else None) from exc
    return config_from_dict(data)


def parse_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    return loads_config(text)


def serialize_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())
