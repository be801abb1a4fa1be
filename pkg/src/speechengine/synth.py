"""Deterministic synthetic classification corpora.

A class is a spectral recipe (three formant resonances plus an amplitude
modulation rate) applied to a harmonic source; a speaker is a pitch range,
a spectral tilt and a noise floor. Utterances are chains of short segments,
each carrying the class recipe with probability ``class_presence`` and a
random distractor envelope otherwise, so short crops are harder to label
than long ones.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform, write_wav
from .errors import IoError
from .manifest import UtteranceRecord, write_manifest

FORMANT_BANDS = ((300.0, 900.0), (900.0, 2300.0), (2300.0, 3600.0))
MAX_HARMONIC_HZ = 3800.0


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 4
    num_speakers: int = 10
    utterances_per_speaker_per_class: int = 5
    duration_s: float = 1.5
    sample_rate: int = 16000
    seed: int = 0
    class_presence: float = 1.0
    label_noise: float = 0.0
    speaker_seed: int | None = None  # set: fresh speakers and draws, same class recipes

    def __post_init__(self):
        for name in ("num_classes", "num_speakers", "utterances_per_speaker_per_class",
                     "sample_rate"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if not 0.0 < self.class_presence <= 1.0:
            raise ValueError("class_presence must be in (0, 1]")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must be in [0, 1)")


@dataclass(frozen=True)
class ClassRecipe:
    formants: tuple
    bandwidths: tuple
    am_rate: float


@dataclass(frozen=True)
class SpeakerRecipe:
    f0: float
    tilt: float
    noise_floor: float
    gain: float


def class_recipes(spec: SynthSpec) -> list[ClassRecipe]:
    rng = np.random.default_rng([spec.seed, 1])
    C = spec.num_classes
    perms = [rng.permutation(C) for _ in FORMANT_BANDS]
    am_perm = rng.permutation(C)
    recipes = []
    for c in range(C):
        formants = tuple(
            float(lo + (hi - lo) * (perm[c] + 0.5 + rng.uniform(-0.2, 0.2)) / C)
            for (lo, hi), perm in zip(FORMANT_BANDS, perms))
        bandwidths = tuple(float(rng.uniform(60.0, 120.0)) for _ in FORMANT_BANDS)
        am_rate = float(3.0 + 5.0 * (am_perm[c] + 0.5) / C)
        recipes.append(ClassRecipe(formants, bandwidths, am_rate))
    return recipes


def speaker_recipes(spec: SynthSpec) -> list[SpeakerRecipe]:
    rng = np.random.default_rng(_speaker_stream(spec, 2))
    return [SpeakerRecipe(f0=float(100.0 * 2.0 ** rng.uniform(-0.6, 0.9)),
                          tilt=float(rng.uniform(-0.8, 0.8)),
                          noise_floor=float(10.0 ** rng.uniform(-3.3, -2.3)),
                          gain=float(rng.uniform(0.3, 0.8)))
            for _ in range(spec.num_speakers)]


def _speaker_stream(spec: SynthSpec, tag: int, *rest) -> list:
    if spec.speaker_seed is None:
        return [spec.seed, tag, *rest]
    return [spec.seed, tag + 100, spec.speaker_seed, *rest]


def _envelope(freqs, formants, bandwidths):
    env = np.full_like(freqs, 0.02)
    for f, bw in zip(formants, bandwidths):
        env += np.exp(-0.5 * ((freqs - f) / bw) ** 2)
    return env


def _harmonic_sum(f0, t, orders, amps, phases):
    # sum_h a_h sin(2 pi h f0 t + phi_h) as Im of a polynomial in z = exp(2 pi i f0 t)
    coeffs = np.zeros(orders.max() + 1, dtype=complex)
    coeffs[orders] = amps * np.exp(1j * phases)
    z = np.exp(2j * np.pi * f0 * t)
    acc = np.full_like(z, coeffs[-1])
    for c in coeffs[-2::-1]:
        acc = acc * z + c
    return acc.imag


def synthesize(cls: ClassRecipe, spk: SpeakerRecipe, duration_s: float, sample_rate: int,
               class_presence: float, rng: np.random.Generator) -> Waveform:
    n = int(round(duration_s * sample_rate))
    out = np.zeros(n)
    f0 = spk.f0 * (1.0 + 0.03 * rng.standard_normal())
    pos = 0
    ramp = int(0.01 * sample_rate)
    while pos < n:
        seg_len = min(n - pos, int(rng.uniform(0.15, 0.35) * sample_rate))
        t = np.arange(seg_len) / sample_rate
        if rng.random() < class_presence:
            formants = tuple(f * (1.0 + 0.02 * rng.standard_normal()) for f in cls.formants)
            bandwidths = cls.bandwidths
            am_rate = cls.am_rate
        else:
            formants = tuple(rng.uniform(lo, hi) for lo, hi in FORMANT_BANDS)
            bandwidths = tuple(rng.uniform(60.0, 120.0, size=3))
            am_rate = rng.uniform(3.0, 8.0)
        seg_f0 = f0 * (1.0 + 0.03 * rng.standard_normal())
        harmonics = seg_f0 * np.arange(1, int(MAX_HARMONIC_HZ // seg_f0) + 1)
        amps = _envelope(harmonics, formants, bandwidths) * (harmonics / 1000.0) ** spk.tilt
        keep = amps > 1e-3 * amps.max()
        phases = rng.uniform(0, 2 * np.pi, size=keep.sum())
        seg = _harmonic_sum(seg_f0, t, np.where(keep)[0] + 1, amps[keep], phases)
        seg *= 1.0 + 0.6 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
        if seg_len > 2 * ramp:
            fade = np.linspace(0.0, 1.0, ramp)
            seg[:ramp] *= fade
            seg[-ramp:] *= fade[::-1]
        out[pos:pos + seg_len] = seg
        pos += seg_len
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= spk.gain * (1.0 + 0.05 * rng.standard_normal()) / peak
    out += spk.noise_floor * rng.standard_normal(n)
    return Waveform(np.clip(out, -1.0, 1.0), sample_rate)


def class_label(c: int) -> str:
    return f"class{c}"


def speaker_id(s: int) -> str:
    return f"spk{s:02d}"


def generate_waveforms(spec: SynthSpec):
    """Yield ``(record, waveform)`` pairs in manifest order without touching disk."""
    classes, speakers = class_recipes(spec), speaker_recipes(spec)
    noise_rng = np.random.default_rng(_speaker_stream(spec, 3))
    for s, spk in enumerate(speakers):
        for c, cls in enumerate(classes):
            for u in range(spec.utterances_per_speaker_per_class):
                rng = np.random.default_rng(_speaker_stream(spec, 4, s, c, u))
                w = synthesize(cls, spk, spec.duration_s, spec.sample_rate,
                               spec.class_presence, rng)
                label = c
                if noise_rng.random() < spec.label_noise and spec.num_classes > 1:
                    label = (c + 1 + int(noise_rng.integers(spec.num_classes - 1))) % spec.num_classes
                utt_id = f"{speaker_id(s)}_{c * spec.utterances_per_speaker_per_class + u:04d}"
                rec = UtteranceRecord(utt_id, f"wav/{utt_id}.wav", class_label(label),
                                      speaker_id(s), len(w) / spec.sample_rate)
                yield rec, w


def generate_corpus(spec: SynthSpec, out_dir) -> list[UtteranceRecord]:
    """Write one WAV per utterance plus ``manifest.jsonl``; returns the records."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc
    records = []
    for rec, w in generate_waveforms(spec):
        write_wav(out_dir / rec.path, w)
        records.append(rec)
    write_manifest(records, out_dir / "manifest.jsonl")
    return records


def spec_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
