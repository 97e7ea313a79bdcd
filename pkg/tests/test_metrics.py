import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hallo.metrics import (FeatureSet, clip_features, frame_features, frechet_distance, lip_energy,
                           sync_from_energies, sync_proxy, video_features)

from oracles import frechet_1d, pearson


def test_one_dimensional_closed_form():
    rng = np.random.default_rng(0)
    a = rng.normal(1.0, 2.0, size=(100_000, 1))
    b = rng.normal(-0.5, 0.7, size=(100_000, 1))
    got = frechet_distance(FeatureSet(a), FeatureSet(b))
    assert abs(got - frechet_1d(1.0, 2.0, -0.5, 0.7)) / frechet_1d(1.0, 2.0, -0.5, 0.7) < 0.02


def test_identical_sets_are_zero():
    x = FeatureSet(np.random.default_rng(1).normal(size=(300, 12)))
    assert frechet_distance(x, x) < 1e-8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 10))
def test_symmetric_and_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    a = FeatureSet(rng.normal(size=(40, d)) @ rng.normal(size=(d, d)))
    b = FeatureSet(rng.normal(size=(30, d)) + rng.normal(size=d))
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0 and abs(ab - ba) <= 1e-10 * max(1.0, ab)


def test_gaussian_closed_form_diagonal():
    # diagonal covariances: sum of 1-D distances
    rng = np.random.default_rng(2)
    a = FeatureSet(rng.normal(size=(200_000, 2)) * [1.0, 3.0])
    b = FeatureSet(rng.normal(size=(200_000, 2)) * [2.0, 0.5] + [1.0, 0.0])
    want = frechet_1d(0, 1, 1, 2) + frechet_1d(0, 3, 0, 0.5)
    assert abs(frechet_distance(a, b) - want) / want < 0.02


def test_feature_set_validation():
    with pytest.raises(ValueError):
        FeatureSet(np.ones((1, 3)))
    with pytest.raises(ValueError):
        FeatureSet(np.array([[0.0, np.nan], [1.0, 2.0]]))
    with pytest.raises(ValueError):
        frechet_distance(FeatureSet(np.ones((3, 2)) + np.eye(3, 2)), FeatureSet(np.ones((3, 3)) + np.eye(3)))


def test_feature_shapes():
    rng = np.random.default_rng(3)
    frames = rng.uniform(size=(5, 3, 16, 16))
    assert frame_features(frames).shape == (5, 64)
    assert clip_features(frames).dim == 64
    assert video_features(rng.uniform(size=(3, 4, 3, 16, 16))).dim == 80
    with pytest.raises(ValueError):
        frame_features(rng.uniform(size=(5, 3, 10, 10)))


def test_sync_recovers_planted_offset():
    rng = np.random.default_rng(4)
    a = rng.normal(size=30)
    lip = np.roll(a, 2) + 0.01 * rng.normal(size=30)
    r = sync_from_energies(a, lip)
    assert r.offset == 2 and r.sync_c > 0.95 and r.sync_d < 0.35


def test_sync_matches_pearson_at_zero_offset():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=12), rng.normal(size=12)
    r = sync_from_energies(a, b, max_offset=0)
    assert r.offset == 0 and abs(r.sync_c - pearson(a, b)) < 1e-12
    assert abs(r.sync_d - np.sqrt(2 - 2 * r.sync_c)) < 1e-12


def test_sync_tie_prefers_small_offset():
    r = sync_from_energies(np.ones(8), np.ones(8))
    assert r.offset == 0


def test_sync_proxy_end_to_end():
    rng = np.random.default_rng(6)
    s = 14
    open_ = np.abs(np.cumsum(rng.normal(size=s)))
    audio = np.outer(np.cumsum(rng.normal(size=s)), np.ones(4))
    frames = np.zeros((s, 3, 8, 8))
    frames[:, :, 4:6, 2:6] = open_[:, None, None, None]
    mask = np.zeros((4, 4))
    mask[2, 1:3] = 1
    r = sync_proxy(audio, frames, mask)
    assert -1 <= r.sync_c <= 1 and abs(r.offset) <= 5
    assert np.allclose(lip_energy(frames, mask), np.abs(np.diff(open_)))
    with pytest.raises(ValueError):
        sync_proxy(audio[:4], frames[:4], mask)
    with pytest.raises(ValueError):
        lip_energy(frames, np.zeros((4, 4)))


def test_sync_short_sequences_skip_wide_offsets():
    rng = np.random.default_rng(7)
    a = rng.normal(size=4)
    r = sync_from_energies(a, a)
    assert r.offset == 0 and abs(r.sync_c - 1) < 1e-12


def test_frechet_rotation_invariant():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(400, 6)) @ rng.normal(size=(6, 6))
    b = rng.normal(size=(300, 6)) + 0.3
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    before = frechet_distance(FeatureSet(a), FeatureSet(b))
    after = frechet_distance(FeatureSet(a @ q), FeatureSet(b @ q))
    assert abs(before - after) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-10, 10))
def test_sync_affine_invariant(seed, scale, shift):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=20), rng.normal(size=20)
    r1 = sync_from_energies(a, b)
    r2 = sync_from_energies(a, scale * b + shift)
    assert abs(r1.sync_c - r2.sync_c) < 1e-9 and r1.offset == r2.offset


def test_sync_independent_sequences_rarely_correlate():
    hits = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        hits += abs(sync_from_energies(rng.uniform(size=100), rng.uniform(size=100)).sync_c) < 0.5
    assert hits / 200 > 0.95


def test_mean_features_shift_linearly():
    frames = np.random.default_rng(9).uniform(0, 0.8, size=(3, 3, 16, 16))
    a, b = frame_features(frames), frame_features(frames + 0.1)
    assert np.allclose(b[:, :48] - a[:, :48], 0.1, atol=1e-12)
    assert np.allclose(b[:, 48:], a[:, 48:], atol=1e-12)
