import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from speechengine import nn
from speechengine.errors import EmptyBatch, ShapeMismatch
from speechengine.features import Codebook, FeatureSequence, kmeans_assign, kmeans_fit, logmel, mfcc
from speechengine.upstream import (MaskSpec, PretrainConfig, UpstreamConfig, UpstreamModel,
                                   apply_mask, extract, fit_normalization, masked_accuracy,
                                   pretrain, pretrain_step, sample_mask)

TINY = UpstreamConfig(d_feat=6, d_model=8, n_layers=2, heads=2, d_ff=16, num_clusters=5)


def test_mask_extremes():
    assert not sample_mask(50, MaskSpec(0.0, 5)).any()
    assert sample_mask(7, MaskSpec(1.0, 7)).all()


def test_mask_coverage_rate():
    fractions = [sample_mask(10000, MaskSpec(0.08, 10, seed)).mean() for seed in range(50)]
    assert abs(np.mean(fractions) - (1 - 0.92 ** 10)) < 0.02


@given(st.integers(1, 300), st.floats(0.0, 1.0), st.integers(1, 20), st.integers(0, 10**6))
def test_mask_is_union_of_spans(T, p, span, seed):
    spec = MaskSpec(p, span, seed)
    starts = np.random.default_rng(seed).random(T) < p
    expected = np.zeros(T, bool)
    for s in np.flatnonzero(starts):
        expected[s:s + span] = True
    assert np.array_equal(sample_mask(T, spec), expected)


def test_apply_mask_cases(rng):
    x = rng.normal(size=(6, 4))
    emb = rng.normal(size=4)
    assert np.array_equal(apply_mask(x, np.zeros(6, bool), emb), x)
    assert np.all(apply_mask(x, np.ones(6, bool), emb) == emb)
    m = rng.random(6) < 0.5
    out = apply_mask(x, m, emb)
    assert np.array_equal(np.any(out != x, axis=1), m)
    with pytest.raises(ShapeMismatch):
        apply_mask(x, np.zeros(5, bool), emb)


def test_loss_reads_masked_frames_only(rng):
    model = UpstreamModel(TINY, seed=1, dtype=np.float64)
    feats = rng.normal(size=(40, 6))
    targets = rng.integers(5, size=40)
    spec = MaskSpec(0.1, 4, seed=3)
    mask = sample_mask(40, spec)
    assert mask.any() and not mask.all()
    changed = targets.copy()
    changed[~mask] = (changed[~mask] + 1) % 5
    assert pretrain_step(model, feats, targets, spec) == pretrain_step(model, feats, changed, spec)


def test_empty_mask_is_redrawn(rng):
    model = UpstreamModel(TINY, seed=1)
    # p tiny and T short: the first draws are empty, the step must still mask something
    loss = pretrain_step(model, rng.normal(size=(3, 6)), np.zeros(3, int), MaskSpec(0.01, 1, 0))
    assert np.isfinite(loss)


def test_pretrain_step_errors():
    model = UpstreamModel(TINY)
    with pytest.raises(EmptyBatch):
        pretrain_step(model, np.zeros((0, 6)), np.zeros(0, int), MaskSpec())
    with pytest.raises(ShapeMismatch):
        pretrain_step(model, np.zeros((4, 6)), np.zeros(3, int), MaskSpec(0.5, 2))


def test_full_upstream_grad_check(rng):
    model = UpstreamModel(TINY, seed=2, dtype=np.float64)
    model.set_normalization(rng.normal(size=6), rng.uniform(0.5, 2, size=6))
    feats = rng.normal(size=(5, 6))
    targets = rng.integers(5, size=5)
    spec = MaskSpec(0.5, 2, seed=1)
    model.zero_grad()
    pretrain_step(model, feats, targets, spec)
    params = model.parameters()
    err = nn.grad_check(lambda: pretrain_step_value(model, feats, targets, spec),
                        [p.value for p in params], [p.grad.copy() for p in params])
    assert err < 1e-3


def pretrain_step_value(model, feats, targets, spec):
    saved = [p.grad.copy() for p in model.parameters()]
    loss = pretrain_step(model, feats, targets, spec)
    for p, g in zip(model.parameters(), saved):
        p.grad[...] = g
    return loss


def test_extract_shape_and_mask_independence(rng):
    model = UpstreamModel(TINY, seed=0)
    for T in (1, 2, 17):
        fs = FeatureSequence(rng.normal(size=(T, 6)))
        out = extract(model, fs)
        assert out.data.shape == (T, 8)
    fs = FeatureSequence(rng.normal(size=(30, 6)))
    a = extract(model, fs).data
    masked_accuracy(model, [fs.data], [np.zeros(30, int)], MaskSpec(0.3, 3, seed=5))
    b = extract(model, fs).data
    assert np.array_equal(a, b)


def test_state_dict_round_trip(rng):
    a, b = UpstreamModel(TINY, seed=0), UpstreamModel(TINY, seed=1)
    a.set_normalization(rng.normal(size=6), np.ones(6))
    b.load_state_dict(a.state_dict())
    x = rng.normal(size=(4, 6))
    assert np.array_equal(a.forward(x), b.forward(x))
    assert all(name.startswith("upstream.") for name in a.state_dict())


def _corpus_features(corpus, n):
    feats = [logmel(w) for _, w in corpus[:n]]
    cepstra = [mfcc(w) for _, w in corpus[:n]]
    return feats, cepstra


def test_initial_loss_near_uniform(small_corpus):
    feats, cepstra = _corpus_features(small_corpus, 20)
    cb = kmeans_fit(np.concatenate([c.data for c in cepstra]), 50, seed=0, max_iters=20)
    model = UpstreamModel(UpstreamConfig(), seed=0)
    fit_normalization(model, feats)
    losses = [pretrain_step(model, f, kmeans_assign(c, cb), MaskSpec(seed=i))
              for i, (f, c) in enumerate(zip(feats, cepstra))]
    assert abs(np.mean(losses) - math.log(50)) < 0.15 * math.log(50)


def test_short_pretraining_halves_loss(small_corpus):
    feats, cepstra = _corpus_features(small_corpus, 20)
    cb = kmeans_fit(np.concatenate([c.data for c in cepstra]), 50, seed=0, max_iters=20)
    targets = [kmeans_assign(c, cb) for c in cepstra]
    model = UpstreamModel(UpstreamConfig(), seed=0)
    fit_normalization(model, feats)
    history = pretrain(model, feats, targets, MaskSpec(), PretrainConfig(steps=500, seed=1))
    assert np.mean(history[-20:]) < 0.5 * np.mean(history[:20])


def test_pooled_representations_beat_logmel(ser_run):
    """Nearest-centroid accuracy on held-out speakers: pooled representations vs pooled log-mel."""
    from speechengine.pipeline import FeatureCache, load_corpus

    cfg, out, upstream = ser_run
    cache = FeatureCache(cfg, load_corpus(cfg, out))
    records = cache.corpus.records
    test_groups = {"spk08", "spk09"}
    spaces = {"logmel": lambda r: cache.logmel(r.utt_id).mean(axis=0),
              "upstream": lambda r: cache.pooled(r.utt_id, upstream)}
    accuracy = {}
    for name, vec in spaces.items():
        train = [(vec(r), r.label) for r in records if r.group_id not in test_groups]
        test = [(vec(r), r.label) for r in records if r.group_id in test_groups]
        labels = sorted({lab for _, lab in train})
        centroids = np.stack([np.mean([v for v, lab in train if lab == c], axis=0)
                              for c in labels])
        hits = [labels[np.argmin(((centroids - v) ** 2).sum(axis=1))] == lab for v, lab in test]
        accuracy[name] = np.mean(hits)
    assert accuracy["upstream"] >= accuracy["logmel"] + 0.05, accuracy
