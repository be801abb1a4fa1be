"""Task heads: temporal average pooling followed by one linear softmax layer."""

from __future__ import annotations

import numpy as np

from . import nn
from .audio import Waveform, resample
from .errors import DimensionMismatch, EmptySequence
from .features import logmel
from .upstream import UpstreamModel, extract


def pool_mean(reps) -> np.ndarray:
    reps = np.asarray(reps)
    if reps.ndim != 2 or reps.shape[0] < 1:
        raise EmptySequence(f"need at least one frame to pool, got shape {reps.shape}")
    return reps.mean(axis=0)


def pool_mean_backward(d_pooled, T: int) -> np.ndarray:
    return np.broadcast_to(d_pooled / T, (T, d_pooled.shape[0]))


class ClassifierHead(nn.Module):
    """Linear layer over pooled representations; parameters named ``head.<task>.*``."""

    def __init__(self, task_name: str, label_set, d_model: int, seed: int = 0,
                 dtype=np.float32):
        label_set = list(label_set)
        if len(label_set) < 2 or len(set(label_set)) != len(label_set):
            raise ValueError("label_set needs at least two distinct labels")
        self.task_name = task_name
        self.label_set = label_set
        rng = np.random.default_rng(seed)
        self.linear = nn.Linear(f"head.{task_name}", d_model, len(label_set), rng, dtype)

    @property
    def W(self):
        return self.linear.weight.value

    @property
    def b(self):
        return self.linear.bias.value

    @property
    def num_classes(self) -> int:
        return len(self.label_set)

    def label_index(self, label: str) -> int:
        return self.label_set.index(label)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state):
        for p in self.parameters():
            value = np.asarray(state[p.name])
            if value.shape != p.value.shape:
                raise DimensionMismatch(f"{p.name}: {value.shape} != {p.value.shape}")
            p.value[...] = value


def classify(pooled, head: ClassifierHead):
    """Posteriors and log-posteriors for one pooled vector (or a batch of them)."""
    pooled = np.asarray(pooled)
    if pooled.shape[-1] != head.W.shape[1]:
        raise DimensionMismatch(f"pooled dim {pooled.shape[-1]} != head input {head.W.shape[1]}")
    logits = pooled @ head.W.T + head.b
    logp = nn.log_softmax(logits.astype(np.float64))
    return np.exp(logp), logp


def representations(upstream: UpstreamModel, w: Waveform) -> np.ndarray:
    if w.sample_rate != upstream.cfg.sample_rate:
        w = resample(w, upstream.cfg.sample_rate)
    return extract(upstream, logmel(w, upstream.cfg.d_feat)).data


def embed(upstream: UpstreamModel, w: Waveform) -> np.ndarray:
    """Pooled upstream representation of one waveform."""
    return pool_mean(representations(upstream, w))


def score_utterance(upstream: UpstreamModel, head: ClassifierHead, w: Waveform,
                    with_log: bool = False):
    """logmel -> upstream -> mean pool -> linear softmax."""
    post, logp = classify(embed(upstream, w), head)
    return (post, logp) if with_log else post
