"""Frozen / finetune task training, checkpoint stores and weight-space averaging."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import nn
from .downstream import ClassifierHead, classify, pool_mean, pool_mean_backward
from .errors import (EmptyDevSet, EmptyList, EmptyStore, IncompatibleCheckpoints,
                     LabelMismatch, NumericError, StepNotReached)
from .evaluation import closed_set_trials, eer, weighted_accuracy
from .upstream import PREFIX as UPSTREAM_PREFIX
from .upstream import UpstreamModel
from .util import fingerprint

log = logging.getLogger(__name__)

MODES = ("frozen", "finetune")
METRICS = ("weighted_accuracy", "eer")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "frozen"
    head_lr: float = 1e-2
    upstream_lr: float | None = None  # None: head_lr / 10
    batch_size: int = 16
    max_steps: int = 500
    eval_every_steps: int = 50
    patience: int = 10
    seed: int = 0
    max_grad_norm: float | None = 5.0
    crop_frames: int | None = None  # finetune only: random training crops
    metric: str = "weighted_accuracy"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        for name in ("batch_size", "max_steps", "eval_every_steps", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.head_lr <= 0 or (self.upstream_lr is not None and self.upstream_lr <= 0):
            raise ValueError("learning rates must be positive")

    @property
    def effective_upstream_lr(self) -> float:
        return self.head_lr / 10 if self.upstream_lr is None else self.upstream_lr


class Example(NamedTuple):
    features: np.ndarray  # T x d_feat log-mel frames
    label: str
    pooled: np.ndarray | None = None  # frozen mode: precomputed pool_mean(upstream(features))


@dataclass(frozen=True, eq=False)
class Checkpoint:
    tensors: dict
    step: int
    dev_metric: float | None
    fingerprint: str
    label_sets: dict = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for name, value in self.tensors.items():
            arr = np.array(value, copy=True)
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"checkpoint tensor {name} is not finite")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    def with_metric(self, dev_metric: float) -> "Checkpoint":
        return Checkpoint(self.tensors, self.step, dev_metric, self.fingerprint, self.label_sets)

    def equals(self, other: "Checkpoint") -> bool:
        return (list(self.tensors) == list(other.tensors)
                and all(np.array_equal(self.tensors[k], other.tensors[k], equal_nan=False)
                        and self.tensors[k].dtype == other.tensors[k].dtype
                        for k in self.tensors))


class CheckpointStore:
    """Append-only, step-ordered checkpoints of one run."""

    def __init__(self, checkpoints=()):
        self._items: list[Checkpoint] = []
        self.train_loss: list[float] = []
        for ck in checkpoints:
            self.append(ck)

    def append(self, ck: Checkpoint):
        if self._items:
            last = self._items[-1]
            if ck.step <= last.step:
                raise ValueError(f"checkpoint step {ck.step} not after {last.step}")
            if ck.fingerprint != last.fingerprint:
                raise IncompatibleCheckpoints("store holds a single config fingerprint")
        self._items.append(ck)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    @property
    def steps(self):
        return [ck.step for ck in self._items]


# ------------------------------------------------------------------ averaging

def average_checkpoints(cks) -> Checkpoint:
    """Elementwise mean of every named tensor.

    Values are sorted along the checkpoint axis before summing in double
    precision, so the result does not depend on input order, and k copies of
    one checkpoint average back to it bit for bit.
    """
    cks = list(cks)
    if not cks:
        raise EmptyList("nothing to average")
    ref = cks[0]
    for ck in cks[1:]:
        if ck.fingerprint != ref.fingerprint:
            raise IncompatibleCheckpoints("config fingerprints differ")
        if list(ck.tensors) != list(ref.tensors):
            raise IncompatibleCheckpoints("tensor name sets differ")
        for name, value in ck.tensors.items():
            if value.shape != ref.tensors[name].shape:
                raise IncompatibleCheckpoints(f"{name}: shape {value.shape} != "
                                              f"{ref.tensors[name].shape}")
    averaged = {}
    for name, value in ref.tensors.items():
        stack = np.sort(np.stack([ck.tensors[name] for ck in cks]).astype(np.float64), axis=0)
        averaged[name] = (stack.sum(axis=0) / len(cks)).astype(value.dtype)
    return Checkpoint(averaged, max(ck.step for ck in cks), None, ref.fingerprint,
                      dict(ref.label_sets))


def _ranked(store):
    if len(store) == 0:
        raise EmptyStore("checkpoint store is empty")
    if any(ck.dev_metric is None for ck in store):
        raise ValueError("every checkpoint needs a dev metric before selection")
    return sorted(store, key=lambda ck: (-ck.dev_metric, ck.step))


def select_top_k(store, k: int) -> list[Checkpoint]:
    """The k best by dev metric; ties go to the earlier step."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return _ranked(store)[:k]


def select_best_plus_step(store, step: int) -> list[Checkpoint]:
    """Best-dev checkpoint plus the first one at or after ``step`` (deduplicated)."""
    best = _ranked(store)[0]
    later = next((ck for ck in store if ck.step >= step), None)
    if later is None:
        raise StepNotReached(f"run ended at step {store[-1].step}, before {step}")
    return [best] if later is best else [best, later]


# ------------------------------------------------------------------- training

def model_state(upstream: UpstreamModel, head: ClassifierHead) -> dict:
    state = upstream.state_dict()
    state.update(head.state_dict())
    return state


def apply_checkpoint(ck: Checkpoint, upstream: UpstreamModel, head: ClassifierHead):
    upstream.load_state_dict(ck.tensors)
    head.load_state_dict(ck.tensors)


def train_fingerprint(cfg: TrainConfig, upstream: UpstreamModel, head: ClassifierHead) -> str:
    return fingerprint({"train": asdict(cfg), "upstream": asdict(upstream.cfg),
                        "task": head.task_name, "labels": head.label_set})


def pooled_embeddings(upstream: UpstreamModel, examples) -> np.ndarray:
    """Mean-pooled upstream outputs; a precomputed ``pooled`` field is trusted as is."""
    return np.stack([ex.pooled if ex.pooled is not None
                     else pool_mean(upstream.forward(ex.features)) for ex in examples])


def metric_from_logp(logp, labels, metric: str) -> float:
    """Higher-is-better dev metric: accuracy, or 1 - pooled EER."""
    if metric == "eer":
        return 1.0 - eer(closed_set_trials(logp, labels))
    return weighted_accuracy(np.argmax(logp, axis=1), labels)


def evaluate_examples(upstream, head, examples, metric="weighted_accuracy") -> float:
    labels = np.array([head.label_index(ex.label) for ex in examples])
    _, logp = classify(pooled_embeddings(upstream, examples), head)
    return metric_from_logp(logp, labels, metric)


def _label_indices(head, examples):
    unknown = sorted({ex.label for ex in examples} - set(head.label_set))
    if unknown:
        raise LabelMismatch(f"labels {unknown} not in head label set {head.label_set}")
    return np.array([head.label_index(ex.label) for ex in examples])


def train(upstream: UpstreamModel, head: ClassifierHead, train_examples, dev_examples,
          cfg: TrainConfig) -> CheckpointStore:
    """Minibatch cross-entropy training with periodic dev checkpoints.

    Frozen mode trains the head on pooled representations computed once;
    finetune mode backpropagates into the upstream encoder with its own
    (lower) learning rate. Training stops at ``max_steps`` or after
    ``patience`` evaluations without dev improvement.
    """
    if not dev_examples:
        raise EmptyDevSet("training needs a non-empty dev set")
    if not train_examples:
        raise ValueError("no training examples")
    y_train = _label_indices(head, train_examples)
    y_dev = _label_indices(head, dev_examples)
    rng = np.random.default_rng(cfg.seed)
    fp = train_fingerprint(cfg, upstream, head)
    label_sets = {head.task_name: list(head.label_set)}
    store = CheckpointStore()

    head_params = head.parameters()
    head_opt = nn.AdamState(lr=cfg.head_lr)
    if cfg.mode == "finetune":
        up_params = upstream.encoder_parameters()
        up_opt = nn.AdamState(lr=cfg.effective_upstream_lr)
        x_dev = None
    else:
        up_params = []
        x_train = pooled_embeddings(upstream, train_examples)
        x_dev = pooled_embeddings(upstream, dev_examples)

    order = np.empty(0, dtype=np.int64)
    best, stale = -np.inf, 0
    for step in range(1, cfg.max_steps + 1):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(train_examples))])
        batch, order = order[:cfg.batch_size], order[cfg.batch_size:]
        head.zero_grad()
        if cfg.mode == "frozen":
            logits = head.linear.forward(x_train[batch])
            loss, dlogits = nn.cross_entropy(logits, y_train[batch])
            head.linear.backward(dlogits.astype(logits.dtype))
        else:
            upstream.zero_grad()
            loss = 0.0
            for i in batch:
                feats = train_examples[i].features
                if cfg.crop_frames is not None and len(feats) > cfg.crop_frames:
                    start = int(rng.integers(len(feats) - cfg.crop_frames + 1))
                    feats = feats[start:start + cfg.crop_frames]
                reps = upstream.forward(feats)
                logits = head.linear.forward(pool_mean(reps)[None, :])
                item_loss, dlogits = nn.cross_entropy(logits, y_train[i:i + 1])
                loss += item_loss / len(batch)
                d_pooled = head.linear.backward((dlogits / len(batch)).astype(logits.dtype))[0]
                upstream.backward(pool_mean_backward(d_pooled, len(reps)))
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {step}")
        store.train_loss.append(float(loss))
        if cfg.max_grad_norm is not None:
            nn.clip_grad_norm(head_params + up_params, cfg.max_grad_norm)
        nn.adam_step(head_params, head_opt)
        if up_params:
            nn.adam_step(up_params, up_opt)

        if step % cfg.eval_every_steps == 0:
            xd = x_dev if x_dev is not None else np.stack(
                [pool_mean(upstream.forward(ex.features)) for ex in dev_examples])
            _, logp = classify(xd, head)
            metric = metric_from_logp(logp, y_dev, cfg.metric)
            store.append(Checkpoint(model_state(upstream, head), step, metric, fp, label_sets))
            log.debug("step %d loss %.4f dev %.4f", step, loss, metric)
            if metric > best:
                best, stale = metric, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop at step %d", step)
                    break
    return store
