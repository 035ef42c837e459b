import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refsr import numerics as nx
from refsr.images import as_image, read_png, write_png


def catmull_rom(t):
    t = abs(t)
    if t <= 1:
        return 1.5 * t ** 3 - 2.5 * t ** 2 + 1
    if t < 2:
        return -0.5 * t ** 3 + 2.5 * t ** 2 - 4 * t + 2
    return 0.0


# --- conv2d -----------------------------------------------------------------

def test_conv_zero_input_gives_zero(rng):
    out = nx.conv2d(np.zeros((1, 1, 3, 3)), rng.standard_normal((2, 1, 3, 3)), np.zeros(2))
    assert np.all(out == 0)


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 6))
    assert np.array_equal(nx.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1)), x)


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((1, 2, 5, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
    ref = np.zeros((1, 3, 5, 4))
    for o in range(3):
        for i in range(5):
            for j in range(4):
                ref[0, o, i, j] = (xp[0, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(nx.conv2d(x, w, b), ref, atol=1e-12)


def test_conv_input_gradient_finite_differences(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    R = rng.standard_normal((2, 4, 8, 8))
    gx, _, _ = nx.conv2d_backward(R, x, w)
    worst = 0.0
    for _ in range(20):
        idx = tuple(int(rng.integers(0, s)) for s in x.shape)
        e = np.zeros_like(x)
        e[idx] = 1e-6
        num = ((nx.conv2d(x + e, w) * R).sum() - (nx.conv2d(x - e, w) * R).sum()) / 2e-6
        worst = max(worst, abs(num - gx[idx]) / max(abs(num), abs(gx[idx]), 1e-7))
    assert worst < 1e-4


def test_conv_shape_error_names_shapes():
    with pytest.raises(nx.ShapeError) as exc:
        nx.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
    assert "(1, 2, 4, 4)" in str(exc.value) or "2" in str(exc.value)


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        nx.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)))


# --- bicubic ----------------------------------------------------------------

def test_bicubic_constants_preserved():
    up = nx.bicubic_resize(np.full((1, 1, 8, 8), 0.5), "up")
    down = nx.bicubic_resize(np.full((1, 1, 16, 16), 0.25), "down")
    assert up.shape == (1, 1, 16, 16) and np.all(up == 0.5)
    assert down.shape == (1, 1, 8, 8) and np.all(down == 0.25)


def test_bicubic_ramp_matches_kernel_formula():
    W = 12
    x = np.tile(np.arange(W) / W, (1, 1, 6, 1))
    up = nx.bicubic_resize(x, "up")[0, 0, 0]
    for j in range(4, 2 * W - 4):
        u = (j + 0.5) / 2 - 0.5
        direct = sum(catmull_rom(u - i) * i / W for i in range(W))
        assert abs(up[j] - direct) < 1e-6


def test_bicubic_small_extent_rejected():
    with pytest.raises(ValueError):
        nx.bicubic_resize(np.zeros((1, 1, 3, 8)), "up")
    with pytest.raises(ValueError):
        nx.bicubic_resize(np.zeros((1, 1, 7, 8)), "down")


def test_resize_adjoint_identity(rng):
    x = rng.standard_normal((1, 2, 6, 10))
    g = rng.standard_normal((1, 2, 12, 20))
    lhs = (nx.bicubic_resize(x, "up") * g).sum()
    rhs = (x * nx.bicubic_resize_backward(g, x.shape)).sum()
    assert abs(lhs - rhs) < 1e-10


def test_bilinear_resize_constant():
    out = nx.bilinear_resize(np.full((1, 1, 5, 7), 0.3), 9, 4)
    np.testing.assert_allclose(out, 0.3, atol=1e-15)


# --- blur -------------------------------------------------------------------

def test_gaussian_kernel_weights():
    k = nx.gaussian_kernel3x3(0.5)
    raw = np.exp(-np.array([[2, 1, 2], [1, 0, 1], [2, 1, 2]]) / (2 * 0.25))
    np.testing.assert_allclose(k, raw / raw.sum(), rtol=1e-14)
    assert abs(k[1, 1] - 0.61934) < 1e-5
    assert abs(k[0, 1] - 0.08382) < 1e-5
    assert abs(k[0, 0] - 0.01134) < 1e-5


def test_blur_constant_and_impulse():
    c = np.full((1, 3, 7, 7), 0.4)
    assert np.allclose(nx.gaussian_blur3x3(c, 0.8), c, atol=1e-15)
    imp = np.zeros((1, 1, 7, 7))
    imp[0, 0, 3, 3] = 1
    out = nx.gaussian_blur3x3(imp, 0.5)
    np.testing.assert_allclose(out[0, 0, 2:5, 2:5], nx.gaussian_kernel3x3(0.5), atol=1e-15)
    assert out.sum() == pytest.approx(1.0)


def test_blur_rejects_bad_sigma():
    with pytest.raises(ValueError):
        nx.gaussian_blur3x3(np.zeros((1, 1, 4, 4)), 0.0)


# --- grid sampling ------------------------------------------------------------

def test_grid_sample_identity_exact(rng):
    x = rng.standard_normal((2, 3, 5, 7))
    out = nx.grid_sample_bilinear(x, nx.identity_grid(2, 5, 7))
    assert np.array_equal(out, x)


def test_grid_sample_half_pixel_ramp():
    W = 8
    x = np.tile(np.arange(W, dtype=float), (1, 1, 4, 1))
    g = nx.identity_grid(1, 4, W)
    g[..., 0] += 0.5
    out = nx.grid_sample_bilinear(x, g)
    np.testing.assert_allclose(out[0, 0, :, :W - 1], np.tile(np.arange(W - 1) + 0.5, (4, 1)), atol=1e-12)


def test_grid_sample_clamps_out_of_range():
    x = np.arange(6, dtype=float).reshape(1, 1, 2, 3)
    g = np.array([[[[-5.0, -5.0], [10.0, 10.0]]]])
    out = nx.grid_sample_bilinear(x, g)
    assert out[0, 0, 0, 0] == x[0, 0, 0, 0] and out[0, 0, 0, 1] == x[0, 0, -1, -1]


def test_grid_gradient_finite_differences(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    grid = rng.uniform(0.2, 4.8, (1, 4, 4, 2))
    R = rng.standard_normal((1, 2, 4, 4))
    _, gg = nx.grid_sample_bilinear_backward(R, x, grid)
    for _ in range(20):
        idx = tuple(int(rng.integers(0, s)) for s in grid.shape)
        e = np.zeros_like(grid)
        e[idx] = 1e-7
        num = ((nx.grid_sample_bilinear(x, grid + e) - nx.grid_sample_bilinear(x, grid - e)) * R).sum() / 2e-7
        assert abs(num - gg[idx]) / max(abs(num), abs(gg[idx]), 1e-7) < 1e-4


# --- patches ----------------------------------------------------------------

def test_unfold_center_patch_is_input(rng):
    x = rng.standard_normal((1, 1, 3, 3))
    p = nx.unfold_patches(x)
    assert p.shape == (1, 9, 9)
    assert np.array_equal(p[0, 4], x.reshape(-1))


def test_unfold_constant_rows_identical():
    p = nx.unfold_patches(np.full((1, 2, 5, 4), 0.7))
    assert np.all(p == p[:, :1])


def test_unfold_direct_indexing():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    p = nx.unfold_patches(x)
    assert np.array_equal(p[0, 1 * 4 + 1], x[0, 0, 0:3, 0:3].reshape(-1))


def test_unfold_too_small():
    with pytest.raises(ValueError):
        nx.unfold_patches(np.zeros((1, 1, 2, 5)))


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 9), st.integers(3, 9), st.integers(1, 3), st.integers(1, 2), st.integers(0, 10 ** 6))
def test_fold_unfold_round_trip(h, w, c, scale, seed):
    x = np.random.default_rng(seed).standard_normal((1, c, h * scale, w * scale))
    y = nx.fold_patches(nx.unfold_patches(x, 3, scale), h * scale, w * scale, 3, scale)
    np.testing.assert_allclose(y, x, atol=1e-6)


def test_fold_zero_patches():
    assert np.all(nx.fold_patches(np.zeros((1, 16, 9)), 4, 4) == 0)


def test_fold_averages_overlaps():
    # corner pixel (0, 0) of a 3x3 map is covered by the 4 patches centred at
    # (0,0), (0,1), (1,0), (1,1); padded contributions are dropped
    assert nx.fold_counts(3, 3)[0, 0] == 4
    p = np.zeros((1, 9, 9))
    p[0, 1 * 3 + 0, 1] = 1.0   # patch (1,0), element (dy=0, dx=1)
    p[0, 1 * 3 + 1, 0] = 1.0   # patch (1,1), element (dy=0, dx=0)
    assert nx.fold_patches(p, 3, 3)[0, 0, 0, 0] == 0.5


def test_fold_count_mismatch():
    with pytest.raises(ValueError):
        nx.fold_patches(np.zeros((1, 5, 9)), 4, 4)


def test_debug_mode_flags_nonfinite(monkeypatch):
    monkeypatch.setattr(nx, "DEBUG", True)
    with pytest.raises(FloatingPointError):
        nx.gaussian_blur3x3(np.full((1, 1, 4, 4), np.nan), 1.0)


# --- images -----------------------------------------------------------------

def test_image_clamped_and_png_round_trip(tmp_path, rng):
    img = as_image(rng.uniform(-0.5, 1.5, (5, 6, 3)))
    assert img.min() >= 0 and img.max() <= 1
    q = np.round(img * 255) / 255
    write_png(tmp_path / "a.png", q)
    assert np.array_equal(read_png(tmp_path / "a.png"), q)
