"""Log-mel / MFCC frontend and the k-means codebook that yields pretraining targets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .audio import Waveform
from .errors import DegenerateInput, DimensionMismatch, TooShort

FRAME_LENGTH_MS = 25.0
FRAME_SHIFT_MS = 10.0
LOG_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    data: np.ndarray
    frame_shift_ms: float = FRAME_SHIFT_MS
    frame_length_ms: float = FRAME_LENGTH_MS

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"feature data must be T x D with T, D >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature data contains non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int, sample_rate: int) -> np.ndarray:
    """Center frequencies (Hz) of the triangular filters."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """HTK-style triangular filters, shape (n_mels, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def _framing(sample_rate):
    frame_len = int(round(FRAME_LENGTH_MS * sample_rate / 1000))
    shift = int(round(FRAME_SHIFT_MS * sample_rate / 1000))
    n_fft = 1 << (frame_len - 1).bit_length()
    return frame_len, shift, n_fft


def num_frames(num_samples: int, sample_rate: int) -> int:
    frame_len, shift, _ = _framing(sample_rate)
    if num_samples < frame_len:
        return 0
    return 1 + (num_samples - frame_len) // shift


def logmel(w: Waveform, n_mels: int = 40) -> FeatureSequence:
    frame_len, shift, n_fft = _framing(w.sample_rate)
    T = num_frames(len(w), w.sample_rate)
    if T < 1:
        raise TooShort(f"{len(w)} samples is shorter than one {frame_len}-sample frame")
    idx = np.arange(frame_len)[None, :] + shift * np.arange(T)[:, None]
    frames = w.samples[idx] * np.hanning(frame_len + 1)[:-1]
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    energies = mag @ mel_filterbank(n_mels, n_fft, w.sample_rate).T
    return FeatureSequence(np.log(energies + LOG_FLOOR))


def dct_ii(x: np.ndarray, n_coeffs: int | None = None) -> np.ndarray:
    """Orthonormal DCT-II along the last axis, truncated to ``n_coeffs``."""
    out = scipy.fft.dct(np.asarray(x, dtype=np.float64), type=2, norm="ortho", axis=-1)
    return out if n_coeffs is None else out[..., :n_coeffs]


def mfcc(w: Waveform, n_coeffs: int = 13, n_mels: int = 40) -> FeatureSequence:
    return FeatureSequence(dct_ii(logmel(w, n_mels).data, n_coeffs))


@dataclass(frozen=True, eq=False)
class Codebook:
    centroids: np.ndarray
    feature_kind: str = "mfcc13"
    inertia_history: tuple = field(default=())

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def squared_distances(X, C, chunk=4096):
    """Exact pairwise squared Euclidean distances, computed as sum((x - c)^2)."""
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    out = np.empty((len(X), len(C)))
    for start in range(0, len(X), chunk):
        diff = X[start:start + chunk, None, :] - C[None, :, :]
        out[start:start + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeanspp(X, K, rng):
    n = len(X)
    chosen = [int(rng.integers(n))]
    closest = squared_distances(X, X[chosen])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            raise DegenerateInput(f"fewer than {K} distinct points")
        probs = closest / total
        nxt = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
        nxt = min(nxt, n - 1)
        while closest[nxt] == 0:  # numerical edge of the cumulative sum
            nxt -= 1
        chosen.append(nxt)
        closest = np.minimum(closest, squared_distances(X, X[nxt:nxt + 1])[:, 0])
    return X[chosen].copy()


def kmeans_fit(frames, K: int, seed: int = 0, max_iters: int = 100,
               feature_kind: str = "mfcc13") -> Codebook:
    """Lloyd iterations from a k-means++ start.

    ``inertia_history[0]`` is the inertia right after seeding; each later
    entry follows one assignment + update round, so the sequence is
    non-increasing. Empty clusters are re-seeded at the point farthest from
    its assigned centroid.
    """
    X = np.asarray(frames, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch(f"frames must be N x D, got shape {X.shape}")
    if K < 1 or len(X) < K:
        raise DegenerateInput(f"need at least K={K} frames, got {len(X)}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(X, K, rng)

    d2 = squared_distances(X, centroids)
    labels = np.argmin(d2, axis=1)
    history = [float(d2[np.arange(len(X)), labels].sum())]
    for _ in range(max_iters):
        for k in range(K):
            members = labels == k
            if members.any():
                centroids[k] = X[members].mean(axis=0)
        own = np.sum((X - centroids[labels]) ** 2, axis=1)
        for k in range(K):
            if not np.any(labels == k):
                far = int(np.argmax(own))
                centroids[k] = X[far]
                labels[far] = k
                own[far] = 0.0
        d2 = squared_distances(X, centroids)
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(X)), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return Codebook(centroids, feature_kind, tuple(history))


def kmeans_assign(features, cb: Codebook) -> np.ndarray:
    """Nearest-centroid labels; ties go to the lowest centroid index."""
    data = features.data if isinstance(features, FeatureSequence) else np.asarray(features)
    if data.ndim != 2 or data.shape[1] != cb.dim:
        raise DimensionMismatch(f"feature dim {data.shape[-1]} != codebook dim {cb.dim}")
    return np.argmin(squared_distances(data, cb.centroids), axis=1)
