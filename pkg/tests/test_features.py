import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import sine
from speechengine.audio import Waveform
from speechengine.errors import DegenerateInput, DimensionMismatch, TooShort
from speechengine.features import (Codebook, FeatureSequence, dct_ii, kmeans_assign, kmeans_fit,
                                   logmel, mel_centers, mfcc, num_frames, squared_distances)


def test_frame_count_one_second():
    assert logmel(Waveform(np.zeros(16000), 16000)).num_frames == 98
    assert num_frames(16000, 16000) == 98


def test_silence_is_log_floor():
    f = logmel(Waveform(np.zeros(1600), 16000))
    assert np.all(f.data == np.log(1e-6))


def test_too_short():
    with pytest.raises(TooShort):
        logmel(Waveform(np.zeros(399), 16000))


def test_tone_peaks_at_nearest_mel_bin():
    f = logmel(sine(1000.0, 0.5, amp=0.5))
    centers = mel_centers(40, 16000)
    assert np.argmax(f.data.mean(axis=0)) == np.argmin(np.abs(centers - 1000.0))


def test_mfcc_of_silence():
    f = mfcc(Waveform(np.zeros(1600), 16000), n_coeffs=13)
    assert np.allclose(f.data[:, 0], f.data[0, 0])
    assert np.allclose(f.data[:, 1:], 0.0, atol=1e-9)


def test_mfcc_shares_framing():
    w = sine(300.0, 0.73)
    assert mfcc(w).num_frames == logmel(w).num_frames


def test_dct_direct_summation():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    N = len(x)
    expected = [math.sqrt((1 if k == 0 else 2) / N)
                * sum(x[n] * math.cos(math.pi * k * (2 * n + 1) / (2 * N)) for n in range(N))
                for k in range(N)]
    assert np.allclose(dct_ii(x), expected, atol=1e-12)


@given(st.floats(0.01, 0.5), st.integers(0, 1000))
def test_doubling_amplitude_never_lowers_logmel(amp, seed):
    x = np.random.default_rng(seed).uniform(-amp, amp, 1200)
    a = logmel(Waveform(x, 16000)).data
    b = logmel(Waveform(2 * x, 16000)).data
    assert np.all(b >= a)


def test_feature_sequence_validation():
    with pytest.raises(ValueError):
        FeatureSequence(np.array([[np.inf]]))
    with pytest.raises(ValueError):
        FeatureSequence(np.zeros((0, 3)))


def test_kmeans_single_cluster_is_mean(rng):
    X = rng.normal(size=(50, 3))
    cb = kmeans_fit(X, 1)
    assert np.allclose(cb.centroids[0], X.mean(axis=0))


def test_kmeans_two_clouds(rng):
    a = rng.uniform(-0.1, 0.1, size=(40, 2))
    b = 10 + rng.uniform(-0.1, 0.1, size=(40, 2))
    cb = kmeans_fit(np.vstack([a, b]), 2, seed=3)
    got = sorted(map(tuple, cb.centroids))
    assert np.allclose(got[0], a.mean(axis=0), atol=0.2)
    assert np.allclose(got[1], b.mean(axis=0), atol=0.2)


def test_kmeans_deterministic(rng):
    X = rng.normal(size=(300, 4))
    assert np.array_equal(kmeans_fit(X, 5, seed=9).centroids, kmeans_fit(X, 5, seed=9).centroids)


def test_kmeans_degenerate():
    with pytest.raises(DegenerateInput):
        kmeans_fit(np.zeros((3, 2)), 4)
    with pytest.raises(DegenerateInput):
        kmeans_fit(np.zeros((10, 2)), 2)


@given(arrays(np.float64, (60, 3), elements=st.floats(-5, 5)), st.integers(1, 6),
       st.integers(0, 99))
def test_kmeans_inertia_non_increasing(X, K, seed):
    if len(np.unique(X, axis=0)) < K:
        return
    cb = kmeans_fit(X, K, seed=seed, max_iters=30)
    h = np.array(cb.inertia_history)
    assert np.all(np.diff(h) <= 1e-9 * max(1.0, h[0]))
    assert len(np.unique(cb.centroids, axis=0)) == K


def test_assign_exact_hits():
    C = np.arange(12.0).reshape(6, 2)
    cb = Codebook(C)
    assert kmeans_assign(FeatureSequence(C), cb).tolist() == list(range(6))
    assert kmeans_assign(FeatureSequence(C[3:4]), cb).tolist() == [3]


def test_assign_tie_goes_to_lowest_index():
    cb = Codebook(np.array([[1.0], [-1.0]]))
    assert kmeans_assign(FeatureSequence(np.array([[0.0]])), cb).tolist() == [0]


def test_assign_matches_brute_force(rng):
    C = rng.normal(size=(7, 5))
    X = rng.normal(size=(100, 5))
    labels = kmeans_assign(FeatureSequence(X), Codebook(C))
    for x, label in zip(X, labels):
        dists = [sum((xi - ci) ** 2 for xi, ci in zip(x, c)) for c in C]
        assert label == min(range(len(C)), key=lambda j: (dists[j], j))


@given(arrays(np.float64, (20, 3), elements=st.floats(-3, 3)),
       arrays(np.float64, (4, 3), elements=st.floats(-3, 3), unique=False))
def test_assignment_minimizes_distance(X, C):
    if len(np.unique(C, axis=0)) < len(C):
        return
    labels = kmeans_assign(FeatureSequence(X), Codebook(C))
    D = squared_distances(X, C)
    assert np.all(D[np.arange(len(X)), labels] <= D.min(axis=1))


def test_assign_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        kmeans_assign(FeatureSequence(np.zeros((2, 3))), Codebook(np.zeros((2, 4))))
