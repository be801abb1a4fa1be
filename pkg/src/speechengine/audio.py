"""PCM16 mono WAV I/O, band-limited resampling and duration cropping."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IoError, NotWav, Truncated, UnsupportedFormat

KAISER_BETA = 8.0
TAPS_PER_SIDE = 16
CUTOFF = 0.45  # fraction of the lower sample rate


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be mono (1-d)")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        samples = samples.copy()
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path) -> Waveform:
    """Decode a RIFF/WAVE PCM16 mono file; samples are int16 / 32768."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise NotWav(f"{path}: missing RIFF/WAVE magic")

    fmt = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = pos + 8
        if chunk_id == b"fmt ":
            if size < 16 or body + 16 > len(raw):
                raise Truncated(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", raw[body:body + 16])
        elif chunk_id == b"data":
            if fmt is None:
                raise UnsupportedFormat(f"{path}: data chunk before fmt chunk")
            audio_format, channels, rate, _, block_align, bits = fmt
            if audio_format != 1 or bits != 16:
                raise UnsupportedFormat(f"{path}: only PCM16 is supported "
                                        f"(format={audio_format}, bits={bits})")
            if channels != 1:
                raise UnsupportedFormat(f"{path}: expected mono, got {channels} channels")
            if body + size > len(raw):
                raise Truncated(f"{path}: data chunk claims {size} bytes, "
                                f"{len(raw) - body} present")
            if size % 2:
                raise Truncated(f"{path}: odd data chunk size {size}")
            pcm = np.frombuffer(raw, dtype="<i2", count=size // 2, offset=body)
            return Waveform(pcm.astype(np.float64) / 32768.0, rate)
        pos = body + size + (size & 1)
    if fmt is None:
        raise NotWav(f"{path}: no fmt chunk")
    raise Truncated(f"{path}: no data chunk")


def encode_wav(w: Waveform) -> bytes:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(data), b"WAVE",
        b"fmt ", 16, 1, 1, w.sample_rate, w.sample_rate * 2, 2, 16,
        b"data", len(data),
    )
    return header + data


def write_wav(path, w: Waveform) -> None:
    try:
        Path(path).write_bytes(encode_wav(w))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _kaiser(x, beta=KAISER_BETA):
    # x in [-1, 1]
    inside = np.clip(1.0 - x * x, 0.0, None)
    return np.i0(beta * np.sqrt(inside)) / np.i0(beta)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Windowed-sinc resampling to ``target_rate``.

    The low-pass cutoff sits at 0.45 x the lower of the two rates and the
    Kaiser window spans 16 periods of the lower rate on each side.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    src_rate = w.sample_rate
    if target_rate == src_rate:
        return Waveform(w.samples, src_rate)
    x = w.samples
    n_in = len(x)
    n_out = int(np.floor(n_in * target_rate / src_rate + 0.5))
    if n_out == 0 or n_in == 0:
        return Waveform(np.zeros(n_out), target_rate)

    low = min(src_rate, target_rate)
    fc = CUTOFF * low / src_rate  # cycles per input sample
    half_width = TAPS_PER_SIDE * src_rate / low  # in input samples
    reach = int(np.ceil(half_width))
    taps = np.arange(-reach, reach + 1)

    # Output k sits at input time k * M / L (ratio reduced by the gcd), so its
    # fractional offset, and hence its kernel, depends only on k mod L.
    g = math.gcd(src_rate, target_rate)
    L, M = target_rate // g, src_rate // g
    phases = np.arange(min(L, n_out))
    frac = (phases * M % L) / L
    tau = frac[:, None] - taps[None, :]
    table = 2.0 * fc * np.sinc(2.0 * fc * tau) * _kaiser(tau / half_width)
    table[np.abs(tau) > half_width] = 0.0

    padded = np.concatenate([np.zeros(reach), x, np.zeros(reach + 1)])
    out = np.empty(n_out)
    for lo in range(0, n_out, 1 << 15):
        k = np.arange(lo, min(n_out, lo + (1 << 15)))
        base = k * M // L
        window = padded[base[:, None] + (taps + reach)[None, :]]
        out[k] = np.einsum("ij,ij->i", window, table[k % L])
    return Waveform(np.clip(out, -1.0, 1.0), target_rate)


def crop_duration(w: Waveform, seconds: float, mode: str = "center",
                  seed: int | None = None) -> Waveform:
    """Contiguous slice of ``seconds``; inputs no longer than that pass through."""
    if seconds <= 0:
        raise ValueError(f"seconds must be positive, got {seconds}")
    n = int(np.floor(seconds * w.sample_rate + 0.5))
    if len(w) <= n:
        return w
    if mode == "center":
        start = (len(w) - n) // 2
    elif mode == "random":
        start = int(np.random.default_rng(seed).integers(0, len(w) - n + 1))
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    return Waveform(w.samples[start:start + n], w.sample_rate)
