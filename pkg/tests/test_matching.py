import numpy as np
import pytest

from refsr.matching import (brute_force_match, cosine_similarity_matrix, match, match_features,
                            tiled_match)
from refsr.numerics import unfold_patches


def test_cosine_basic_values():
    e = np.array([[1.0, 0, 0]])
    assert cosine_similarity_matrix(e, e)[0, 0] == 1.0
    assert cosine_similarity_matrix([[1.0, 0]], [[0.0, 1]])[0, 0] == 0.0
    assert cosine_similarity_matrix([[1.0, 1]], [[1.0, 0]])[0, 0] == pytest.approx(0.70711, abs=1e-5)


def test_cosine_zero_norm_guard():
    S = cosine_similarity_matrix(np.zeros((2, 3)), np.ones((4, 3)))
    assert np.all(S == 0)


def test_cosine_width_mismatch():
    with pytest.raises(ValueError):
        cosine_similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))


def test_match_argmax_and_ties():
    P, C = match(np.array([[0.9, 0.2], [0.1, 0.8]]))
    assert list(P) == [0, 1] and list(C) == [0.9, 0.8]
    P, C = match(np.full((3, 5), 0.3))
    assert np.all(P == 0) and np.all(C == 0.3)


def test_match_random_vs_scan(rng):
    S = rng.standard_normal((64, 81))
    P, C = match(S)
    for i in range(64):
        best, bj = -np.inf, -1
        for j in range(81):
            if S[i, j] > best:
                best, bj = S[i, j], j
        assert P[i] == bj and C[i] == best


def test_self_match_identity(rng):
    f = rng.standard_normal((4, 9, 11))
    m = match_features(f, f)
    assert np.array_equal(m.index, np.arange(99))
    assert np.allclose(m.confidence, 1.0, atol=1e-5)


def test_shift_recovered(rng):
    f = rng.standard_normal((6, 10, 14))
    ref = np.roll(f, 2, axis=2)          # ref[x] = f[x - 2]
    m = match_features(f, ref)
    off = m.offsets()
    dy, dx = off[..., 0], off[..., 1]
    # interior positions away from the wrap-around seam
    assert np.all(dx[1:-1, 1:-3] == 2) and np.all(dy[1:-1, 1:-3] == 0)


def test_brute_force_equivalence_single(rng):
    lr, ref = rng.standard_normal((2, 8, 12, 12))
    a, b = match_features(lr, ref), brute_force_match(lr, ref)
    assert np.array_equal(a.index, b.index)
    assert np.allclose(a.confidence, b.confidence, atol=1e-6)


def test_zero_features_and_singleton():
    m = brute_force_match(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)))
    assert np.all(m.confidence == 0)


def test_single_patch_reference(rng):
    # a 3x3 reference with constant features yields nine identical patches; ties go to 0
    m = match_features(rng.standard_normal((2, 4, 4)), np.ones((2, 3, 3)))
    assert np.all(m.index == 0)


def test_tiled_full_margin_equals_full(rng):
    lr, ref = rng.standard_normal((2, 5, 20, 17))
    a = match_features(lr, ref)
    b = tiled_match(lr, ref, tile=6, margin=40)
    assert np.array_equal(a.index, b.index) and np.array_equal(a.confidence, b.confidence)


def test_tiled_identity_any_margin(rng):
    f = rng.standard_normal((4, 12, 12))
    for margin in (0, 1, 3):
        assert np.array_equal(tiled_match(f, f, 4, margin).index, np.arange(144))


def test_tiled_small_margin_loses_confidence(rng):
    f = rng.standard_normal((6, 24, 24))
    ref = np.roll(f, 3, axis=2)
    c1 = tiled_match(f, ref, 4, 1).confidence.mean()
    c4 = tiled_match(f, ref, 4, 4).confidence.mean()
    assert c1 < c4


def test_tiled_peak_memory_bound(rng):
    lr, ref = rng.standard_normal((2, 4, 32, 32))
    stats = {}
    tiled_match(lr, ref, tile=8, margin=2, stats=stats)
    assert stats["peak_similarity_bytes"] <= 8 * 8 * (8 + 4) ** 2 * 8


def test_tiled_rejects_bad_args(rng):
    f = rng.standard_normal((2, 4, 4))
    with pytest.raises(ValueError):
        tiled_match(f, f, tile=0)
    with pytest.raises(ValueError):
        tiled_match(f, f, margin=-1)


def test_confidence_invariant_to_positive_scaling(rng):
    lp = unfold_patches(rng.standard_normal((1, 3, 6, 6)))[0]
    rp = unfold_patches(rng.standard_normal((1, 3, 7, 5)))[0]
    P, C = match(cosine_similarity_matrix(lp, rp))
    scale = rng.uniform(0.1, 10, (rp.shape[0], 1))
    P2, C2 = match(cosine_similarity_matrix(lp, rp * scale))
    assert np.array_equal(P, P2) and np.allclose(C, C2, atol=1e-5)


def test_confidence_equals_selected_similarity(rng):
    lr, ref = rng.standard_normal((2, 3, 6, 6))
    m = match_features(lr, ref)
    S = cosine_similarity_matrix(unfold_patches(lr[None])[0], unfold_patches(ref[None])[0])
    assert np.allclose(m.confidence, S[np.arange(36), m.index], rtol=0, atol=1e-14)
    assert m.index.min() >= 0 and m.index.max() < 36
