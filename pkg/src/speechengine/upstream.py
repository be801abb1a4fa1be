"""Masked cluster-prediction upstream: a small transformer over log-mel frames."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .errors import EmptyBatch, NumericError, ShapeMismatch
from .features import FeatureSequence

log = logging.getLogger(__name__)

PREFIX = "upstream."
HEAD_INIT_GAIN = 0.1


@dataclass(frozen=True)
class MaskSpec:
    start_prob: float = 0.08
    span_len: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.start_prob <= 1.0:
            raise ValueError(f"start_prob must be in [0, 1], got {self.start_prob}")
        if self.span_len < 1:
            raise ValueError(f"span_len must be >= 1, got {self.span_len}")


@dataclass(frozen=True)
class UpstreamConfig:
    d_feat: int = 40
    d_model: int = 96
    n_layers: int = 3
    heads: int = 4
    d_ff: int = 384
    num_clusters: int = 50
    sample_rate: int = 16000


def sample_mask(T: int, spec: MaskSpec) -> np.ndarray:
    """Each frame starts a span with probability ``start_prob``; spans may overlap."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    starts = np.random.default_rng(spec.seed).random(T) < spec.start_prob
    # frame t is covered if any start lies in (t - span_len, t]
    counts = np.cumsum(starts.astype(np.int64))
    lagged = np.concatenate([np.zeros(spec.span_len, np.int64), counts])[:T]
    return (counts - lagged) > 0


def apply_mask(features, mask, mask_embedding):
    features = np.asarray(features)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (features.shape[0],) or np.shape(mask_embedding) != features.shape[1:]:
        raise ShapeMismatch(f"features {features.shape}, mask {mask.shape}, "
                            f"embedding {np.shape(mask_embedding)}")
    out = features.copy()
    out[mask] = mask_embedding
    return out


class UpstreamModel(nn.Module):
    """Input projection, span masking, sinusoidal positions, pre-norm blocks, cluster head.

    Log-mel inputs are standardized with fixed per-dimension statistics
    (``set_normalization``); those are stored with the weights but never trained.
    """

    def __init__(self, cfg: UpstreamConfig = UpstreamConfig(), seed: int = 0,
                 dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dtype = dtype
        self.feat_mean = np.zeros(cfg.d_feat, dtype=dtype)
        self.feat_std = np.ones(cfg.d_feat, dtype=dtype)
        self.proj = nn.Linear(f"{PREFIX}proj", cfg.d_feat, cfg.d_model, rng, dtype)
        self.mask_embedding = nn.Parameter(
            f"{PREFIX}mask_embedding", rng.uniform(-1, 1, cfg.d_model).astype(dtype))
        self.blocks = [nn.TransformerBlock(f"{PREFIX}block{i}", cfg.d_model, cfg.heads,
                                           cfg.d_ff, rng, dtype)
                       for i in range(cfg.n_layers)]
        # small head init keeps the initial cluster posterior near uniform
        self.head = nn.Linear(f"{PREFIX}pred", cfg.d_model, cfg.num_clusters, rng, dtype,
                              gain=HEAD_INIT_GAIN)

    # -- weights -------------------------------------------------------------

    def set_normalization(self, mean, std):
        self.feat_mean = np.asarray(mean, dtype=self.dtype).copy()
        self.feat_std = np.maximum(np.asarray(std, dtype=self.dtype), 1e-3)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"{PREFIX}norm.mean": self.feat_mean.copy(),
                 f"{PREFIX}norm.std": self.feat_std.copy()}
        state.update((p.name, p.value.copy()) for p in self.parameters())
        return state

    def load_state_dict(self, state):
        own = {p.name: p for p in self.parameters()}
        expected = set(own) | {f"{PREFIX}norm.mean", f"{PREFIX}norm.std"}
        present = {k for k in state if k.startswith(PREFIX)}
        if present != expected:
            raise ShapeMismatch(f"upstream state mismatch: missing {sorted(expected - present)}, "
                                f"unexpected {sorted(present - expected)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.value.shape:
                raise ShapeMismatch(f"{name}: {value.shape} != {p.value.shape}")
            p.value[...] = value
        self.feat_mean = np.asarray(state[f"{PREFIX}norm.mean"], dtype=self.dtype).copy()
        self.feat_std = np.asarray(state[f"{PREFIX}norm.std"], dtype=self.dtype).copy()

    def encoder_parameters(self):
        """Everything except the cluster prediction head."""
        head = {id(p) for p in self.head.parameters()}
        return [p for p in self.parameters() if id(p) not in head]

    # -- forward / backward --------------------------------------------------

    def forward(self, feats, mask=None):
        x = np.asarray(feats)
        if x.ndim != 2 or x.shape[1] != self.cfg.d_feat:
            raise ShapeMismatch(f"expected T x {self.cfg.d_feat} features, got {x.shape}")
        x = ((x - self.feat_mean) / self.feat_std).astype(self.dtype)
        h = self.proj.forward(x)
        if mask is not None:
            self._mask = np.asarray(mask, dtype=bool)
            h = apply_mask(h, self._mask, self.mask_embedding.value)
        else:
            self._mask = None
        h = h + nn.sinusoidal_positions(len(h), self.cfg.d_model, self.dtype)
        for block in self.blocks:
            h = block.forward(h)
        return h

    def backward(self, dh):
        for block in reversed(self.blocks):
            dh = block.backward(dh)
        if self._mask is not None:
            self.mask_embedding.grad += dh[self._mask].sum(axis=0)
            dh = dh.copy()
            dh[self._mask] = 0
        return self.proj.backward(dh) / self.feat_std


def extract(model: UpstreamModel, features: FeatureSequence) -> FeatureSequence:
    """Final-block hidden states with masking off and the cluster head unused."""
    hidden = model.forward(features.data, mask=None)
    return FeatureSequence(hidden, features.frame_shift_ms, features.frame_length_ms)


def _nonempty_mask(T, spec: MaskSpec, max_tries=1000):
    if spec.start_prob == 0:
        raise ValueError("start_prob = 0 can never mask a frame")
    seed = spec.seed
    for _ in range(max_tries):
        mask = sample_mask(T, MaskSpec(spec.start_prob, spec.span_len, seed))
        if mask.any():
            return mask
        seed += 1
    raise ValueError(f"no masked frame after {max_tries} mask draws")


def pretrain_step(model: UpstreamModel, features, targets, spec: MaskSpec,
                  grad_scale: float = 1.0) -> float:
    """Masked-frame cross-entropy for one utterance; gradients accumulate into the model.

    Only masked frames contribute to the loss. An empty mask is redrawn with
    seed + 1 until at least one frame is covered.
    """
    data = features.data if isinstance(features, FeatureSequence) else np.asarray(features)
    T = data.shape[0] if data.ndim == 2 else 0
    if T == 0:
        raise EmptyBatch("cannot pretrain on an empty sequence")
    targets = np.asarray(targets)
    if targets.shape != (T,):
        raise ShapeMismatch(f"{T} frames but {targets.shape} targets")
    mask = _nonempty_mask(T, spec)
    hidden = model.forward(data, mask)
    logits = model.head.forward(hidden[mask])
    loss, dlogits = nn.cross_entropy(logits, targets[mask])
    if not np.isfinite(loss):
        raise NumericError("non-finite pretraining loss")
    dh = np.zeros_like(hidden)
    dh[mask] = model.head.backward((dlogits * grad_scale).astype(model.dtype))
    model.backward(dh)
    return loss


def masked_accuracy(model: UpstreamModel, feature_list, target_list, spec: MaskSpec):
    """Fraction of masked frames whose cluster is predicted correctly (no gradient)."""
    correct = total = 0
    for i, (feats, targets) in enumerate(zip(feature_list, target_list)):
        data = feats.data if isinstance(feats, FeatureSequence) else feats
        mask = _nonempty_mask(len(data), MaskSpec(spec.start_prob, spec.span_len,
                                                  spec.seed + 7919 * i))
        hidden = model.forward(data, mask)
        pred = np.argmax(model.head.forward(hidden[mask]), axis=1)
        correct += int(np.sum(pred == np.asarray(targets)[mask]))
        total += int(mask.sum())
    return correct / total


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 4
    crop_frames: int = 100
    lr: float = 1e-3
    max_grad_norm: float | None = 5.0  # None or 0: no clipping
    seed: int = 0


def fit_normalization(model: UpstreamModel, feature_list):
    stacked = np.concatenate([f.data for f in feature_list])
    model.set_normalization(stacked.mean(axis=0), stacked.std(axis=0))


def pretrain(model: UpstreamModel, feature_list, target_list, mask: MaskSpec,
             cfg: PretrainConfig = PretrainConfig(), callback=None) -> list[float]:
    """Adam on random fixed-length crops; returns the per-step mean loss."""
    rng = np.random.default_rng(cfg.seed)
    state = nn.AdamState(lr=cfg.lr)
    params = model.parameters()
    history = []
    for step in range(cfg.steps):
        model.zero_grad()
        picks = rng.integers(len(feature_list), size=cfg.batch_size)
        total = 0.0
        for j, idx in enumerate(picks):
            data = feature_list[idx].data
            targets = np.asarray(target_list[idx])
            if len(data) > cfg.crop_frames:
                start = int(rng.integers(len(data) - cfg.crop_frames + 1))
                data = data[start:start + cfg.crop_frames]
                targets = targets[start:start + cfg.crop_frames]
            step_mask = MaskSpec(mask.start_prob, mask.span_len,
                                 int(rng.integers(2 ** 31)))
            total += pretrain_step(model, data, targets, step_mask,
                                   grad_scale=1.0 / cfg.batch_size)
        if cfg.max_grad_norm:
            nn.clip_grad_norm(params, cfg.max_grad_norm)
        nn.adam_step(params, state)
        history.append(total / cfg.batch_size)
        if callback is not None:
            callback(step, history[-1])
        if step % 100 == 0:
            log.debug("pretrain step %d loss %.4f", step, history[-1])
    return history


def config_dict(cfg: UpstreamConfig) -> dict:
    return asdict(cfg)
