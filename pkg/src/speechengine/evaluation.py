"""Scoring protocols: pooled closed-set EER, weighted accuracy, and data splitters."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio import crop_duration
from .downstream import ClassifierHead, classify, embed
from .errors import DegenerateTrialSet, LengthMismatch, ShapeMismatch, TooFewGroups


@dataclass(frozen=True, eq=False)
class TrialSet:
    scores: np.ndarray
    is_target: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        flags = np.asarray(self.is_target, dtype=bool).reshape(-1)
        if scores.shape != flags.shape:
            raise LengthMismatch(f"{scores.size} scores but {flags.size} target flags")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "is_target", flags)

    @property
    def num_targets(self) -> int:
        return int(self.is_target.sum())

    @property
    def num_nontargets(self) -> int:
        return int((~self.is_target).sum())


def operating_points(trials: TrialSet):
    """(FAR, FRR) for "accept iff score >= theta" at every distinct score, then theta = +inf."""
    nt, nn_ = trials.num_targets, trials.num_nontargets
    if nt == 0 or nn_ == 0:
        raise DegenerateTrialSet(f"need targets and nontargets, got {nt} and {nn_}")
    levels, inverse = np.unique(trials.scores, return_inverse=True)
    tgt = np.bincount(inverse[trials.is_target], minlength=len(levels))
    non = np.bincount(inverse[~trials.is_target], minlength=len(levels))
    accepted_non = np.concatenate([np.cumsum(non[::-1])[::-1], [0]])
    rejected_tgt = np.concatenate([[0], np.cumsum(tgt)])
    return accepted_non / nn_, rejected_tgt / nt


def eer(trials: TrialSet) -> float:
    """Equal error rate with linear interpolation between adjacent ROC points.

    FAR - FRR is non-increasing along the threshold sweep, starting at 1 and
    ending at -1; the EER is read where it first reaches zero.
    """
    far, frr = operating_points(trials)
    d = far - frr
    j = int(np.argmax(d <= 0))
    if d[j] == 0:
        return float(far[j])
    i = j - 1
    t = d[i] / (d[i] - d[j])
    return float(far[i] + t * (far[j] - far[i]))


def closed_set_trials(log_scores, true_labels) -> TrialSet:
    """One trial per (utterance, hypothesized class), pooled across classes."""
    S = np.asarray(log_scores, dtype=np.float64)
    y = np.asarray(true_labels)
    if S.ndim != 2 or y.shape != (S.shape[0],):
        raise ShapeMismatch(f"scores {S.shape} vs labels {y.shape}")
    if np.any(y < 0) or np.any(y >= S.shape[1]):
        raise ShapeMismatch(f"labels outside [0, {S.shape[1]})")
    is_target = np.arange(S.shape[1])[None, :] == y[:, None]
    return TrialSet(S.reshape(-1), is_target.reshape(-1))


def macro_eer(log_scores, true_labels) -> float:
    """Mean of per-class one-vs-rest EERs (classes without both trial kinds are skipped)."""
    S = np.asarray(log_scores, dtype=np.float64)
    y = np.asarray(true_labels)
    rates = []
    for c in range(S.shape[1]):
        flags = y == c
        if flags.any() and not flags.all():
            rates.append(eer(TrialSet(S[:, c], flags)))
    if not rates:
        raise DegenerateTrialSet("no class has both target and nontarget trials")
    return float(np.mean(rates))


def weighted_accuracy(predictions, labels) -> float:
    """Overall fraction of utterances classified correctly."""
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.shape} predictions vs {y.shape} labels")
    if p.size == 0:
        raise LengthMismatch("no predictions")
    return float(np.mean(p == y))


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


# ------------------------------------------------------------------ splitting

@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple  # of (train_groups, test_groups)
    group_key: str = "speaker"

    def split(self, records, fold: int):
        train_groups, test_groups = self.folds[fold]
        test_set = set(test_groups)
        train = [r for r in records if r.group_id not in test_set]
        test = [r for r in records if r.group_id in test_set]
        return train, test


def group_kfold(records, k: int, group_key: str = "speaker", seed: int = 0) -> FoldPlan:
    """Shuffle distinct groups with ``seed`` and deal them into k near-equal test sets."""
    groups = sorted({r.group_id for r in records})
    if k < 2 or len(groups) < k:
        raise TooFewGroups(f"{len(groups)} groups cannot form {k} folds")
    order = [groups[i] for i in np.random.default_rng(seed).permutation(len(groups))]
    parts = np.array_split(np.arange(len(order)), k)
    folds = []
    for part in parts:
        test = tuple(sorted(order[i] for i in part))
        train = tuple(g for g in groups if g not in test)
        folds.append((train, test))
    return FoldPlan(k, tuple(folds), group_key)


def _by_label(records):
    buckets = {}
    for i, r in enumerate(records):
        buckets.setdefault(r.label, []).append(i)
    return [buckets[label] for label in sorted(buckets)]


def dev_split(records, fraction: float, seed: int = 0):
    """Per-label stratified hold-out of round(fraction * n_label) records."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    dev_idx = set()
    for idx in _by_label(records):
        n_dev = int(math.floor(fraction * len(idx) + 0.5))
        picked = rng.permutation(len(idx))[:n_dev]
        dev_idx.update(idx[i] for i in picked)
    train = [r for i, r in enumerate(records) if i not in dev_idx]
    dev = [r for i, r in enumerate(records) if i in dev_idx]
    return train, dev


def subsample_per_class(records, n_per_class: int, seed: int = 0):
    """Seeded uniform sample of min(n_per_class, class size) records per label."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    keep = set()
    for idx in _by_label(records):
        take = min(n_per_class, len(idx))
        keep.update(idx[i] for i in rng.choice(len(idx), size=take, replace=False))
    return [r for i, r in enumerate(records) if i in keep]


# -------------------------------------------------------------------- reports

@dataclass
class EvalReport:
    task_name: str
    label_set: list
    eer_by_duration: dict = field(default_factory=dict)  # seconds (None = full) -> rate
    accuracy_by_duration: dict = field(default_factory=dict)
    weighted_accuracy: float | None = None  # full length
    confusion: list = field(default_factory=list)  # full length, rows = true label
    trial_counts: dict = field(default_factory=dict)
    fingerprint: str = ""
    fold: int = 0
    n_per_class: int | None = None  # None = every available training utterance
    seed: int = 0

    def metrics(self):
        """Flat (duration_s, metric_name, value) triples, two per evaluated duration."""
        rows = []
        for d in sorted(self.eer_by_duration, key=_dur_key):
            rows.append((d, "eer", self.eer_by_duration[d]))
            if d in self.accuracy_by_duration:
                rows.append((d, "weighted_accuracy", self.accuracy_by_duration[d]))
        return rows

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in _DURATION_KEYED:
            out[key] = {_dur_str(d): v for d, v in getattr(self, key).items()}
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        obj = dict(obj)
        for key in _DURATION_KEYED:
            obj[key] = {_dur_parse(k): v for k, v in obj.get(key, {}).items()}
        return cls(**obj)


_DURATION_KEYED = ("eer_by_duration", "accuracy_by_duration", "trial_counts")


def _dur_key(d):
    return math.inf if d is None else d


def _dur_str(d):
    return "full" if d is None else repr(float(d))


def _dur_parse(s):
    return None if s == "full" else float(s)


def duration_sliced_eval(upstream, head: ClassifierHead, test_items, durations,
                         eer_mode: str = "pooled", fingerprint: str = "",
                         embed_fn=None) -> EvalReport:
    """Center-crop every test waveform to each duration; score EER and accuracy.

    ``test_items`` holds ``(waveform, label)`` pairs and ``None`` in
    ``durations`` means the uncropped utterance. ``embed_fn(i, waveform,
    duration)`` may supply pooled upstream vectors (e.g. from a cache); by
    default they are computed here. The confusion matrix and
    ``weighted_accuracy`` are always taken at full length.
    """
    if not durations:
        raise ValueError("durations must be non-empty")
    if eer_mode not in ("pooled", "macro"):
        raise ValueError(f"unknown eer_mode {eer_mode!r}")
    if embed_fn is None:
        def embed_fn(i, w, d):
            return embed(upstream, w if d is None else crop_duration(w, d))
    labels = np.array([head.label_index(label) for _, label in test_items])
    C = head.num_classes
    report = EvalReport(head.task_name, list(head.label_set), fingerprint=fingerprint)

    def log_posteriors(d):
        pooled = np.stack([embed_fn(i, w, d) for i, (w, _) in enumerate(test_items)])
        return classify(pooled, head)[1]

    for d in durations:
        key = None if d is None else float(d)
        logp = log_posteriors(key)
        if eer_mode == "pooled":
            rate = eer(closed_set_trials(logp, labels))
        else:
            rate = macro_eer(logp, labels)
        report.eer_by_duration[key] = rate
        report.accuracy_by_duration[key] = weighted_accuracy(logp.argmax(axis=1), labels)
        report.trial_counts[key] = {"targets": len(labels),
                                    "nontargets": len(labels) * (C - 1)}
    pred = log_posteriors(None).argmax(axis=1)
    report.weighted_accuracy = weighted_accuracy(pred, labels)
    report.confusion = confusion_matrix(pred, labels, C).tolist()
    return report
