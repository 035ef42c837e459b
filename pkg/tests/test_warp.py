import numpy as np
import pytest

from refsr import warp
from refsr.matching import MatchResult
from refsr.pipeline.experiments import alignment_trial


def _match(index, grid, ref_grid=None):
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    return MatchResult(index, np.ones(index.size), grid, ref_grid or grid)


def identity_match(H, W):
    return _match(np.arange(H * W), (H, W))


@pytest.mark.parametrize("scale", [1, 2])
def test_warp_identity(rng, scale):
    src = rng.standard_normal((1, 3, 6 * scale, 7 * scale))
    out, _ = warp.warp_by_index(src, identity_match(6, 7), scale)
    np.testing.assert_allclose(out, src, atol=1e-12)


def test_warp_shift_ramp():
    H, W = 6, 10
    ramp = np.tile(np.arange(W, dtype=float), (1, 1, H, 1))
    iy, ix = np.divmod(np.arange(H * W), W)
    index = iy * W + np.clip(ix + 2, 0, W - 1)
    out, _ = warp.warp_by_index(ramp, _match(index, (H, W)), 1)
    # interior columns whose neighbourhoods all carry the same +2 shift
    np.testing.assert_allclose(out[0, 0, :, 1:W - 3], ramp[0, 0, :, 3:W - 1], atol=1e-12)


def test_warp_constant_any_index(rng):
    src = np.full((1, 2, 10, 8), 0.37)
    m = _match(rng.integers(0, 20, size=12), (3, 4), (5, 4))
    out, _ = warp.warp_by_index(src, m, 2)
    assert out.shape == (1, 2, 6, 8)
    np.testing.assert_allclose(out, 0.37, atol=1e-14)


def test_warp_index_out_of_range():
    with pytest.raises(IndexError):
        warp.warp_by_index(np.zeros((1, 1, 3, 3)), _match([0] * 8 + [9], (3, 3)), 1)


def test_predict_alignment_zero_last_layer_is_identity(rng):
    chans = [6, 8, 8, 8, 6]
    tp = [(rng.standard_normal((chans[i + 1], chans[i], 3, 3)), rng.standard_normal(chans[i + 1]))
          for i in range(4)]
    tp[-1] = (np.zeros_like(tp[-1][0]), np.zeros_like(tp[-1][1]))
    field, _ = warp.predict_alignment(rng.random((2, 3, 12, 12)), rng.random((2, 3, 12, 12)), tp, grid=(6, 6))
    assert field.residual.shape == (2, 6, 6, 6)
    assert np.all(field.residual == 0)
    assert np.array_equal(field.matrices()[0, 0, 0], np.eye(2, 3))


def test_predict_alignment_bounds(rng):
    chans = [6, 4, 6]
    tp = [(50 * rng.standard_normal((chans[i + 1], chans[i], 3, 3)), rng.standard_normal(chans[i + 1]))
          for i in range(2)]
    field, _ = warp.predict_alignment(rng.random((1, 3, 8, 8)), rng.random((1, 3, 8, 8)), tp)
    r = field.residual
    assert np.abs(r[:, [0, 1, 3, 4]]).max() <= 0.5
    assert np.abs(r[:, [2, 5]]).max() <= 2.0
    assert np.abs(r).max() > 0.4   # the large weights really saturate


def test_predict_alignment_shape_mismatch(rng):
    with pytest.raises(ValueError):
        warp.predict_alignment(rng.random((1, 3, 8, 8)), rng.random((1, 3, 8, 6)), [])


@pytest.mark.parametrize("scale", [1, 2])
def test_patch_affine_identity(rng, scale):
    x = rng.standard_normal((2, 3, 5 * scale, 4 * scale))
    out = warp.apply_patch_affine(x, warp.AffineField.identity(2, 5, 4), scale)
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_zero_init_warp_equals_index_warp(rng):
    src = rng.standard_normal((1, 3, 12, 12))
    m = _match(rng.integers(0, 36, size=36), (6, 6))
    coarse, _ = warp.warp_by_index(src, m, 2)
    aligned = warp.apply_patch_affine(coarse, warp.AffineField.identity(1, 6, 6), 2)
    # overlapping patches are averaged by fold, so equality holds up to rounding
    np.testing.assert_allclose(aligned, coarse, rtol=0, atol=1e-12)


def test_patch_affine_translation_on_ramp():
    H, W = 6, 9
    ramp = np.tile(np.arange(W, dtype=float), (1, 1, H, 1))
    res = np.zeros((1, 6, H, W))
    res[:, 2] = 0.5
    out = warp.apply_patch_affine(ramp, warp.AffineField(res), 1)
    np.testing.assert_allclose(out[0, 0, :, 1:W - 2], ramp[0, 0, :, 1:W - 2] + 0.5, atol=1e-12)


def test_patch_affine_rejects_wrong_level(rng):
    with pytest.raises(ValueError):
        warp.apply_patch_affine(rng.random((1, 1, 8, 8)), warp.AffineField.identity(1, 3, 3), 2)


def test_rotated_patch_recovered_by_descent(rng):
    trial = alignment_trial(rng, steps=50)
    assert trial.aligned < trial.unaligned


def test_squash_bounds_and_identity():
    raw = np.linspace(-100, 100, 6 * 5).reshape(1, 6, 5, 1)
    s = warp.squash(raw)
    assert np.all(np.abs(s[:, [2, 5]]) < 2.0 + 1e-12) and np.all(np.abs(s[:, [0, 1, 3, 4]]) <= 0.5)
    assert np.all(warp.squash(np.zeros((1, 6, 2, 2))) == 0)
