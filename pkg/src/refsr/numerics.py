"""Dense tensor kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects laid out as (batch, channel,
height, width). Every kernel preserves the dtype of its input so the same
code runs in float32 for training and float64 for gradient checks.
Boundaries are reflect-padded (numpy ``reflect``: the edge sample is not
repeated).
"""
import os
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

DEBUG = os.environ.get("REFSR_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, what, got, expected):
        super().__init__(f"{what}: got shape {tuple(got)}, expected {tuple(expected)}")
        self.got = tuple(got)
        self.expected = tuple(expected)


def _finite(x):
    if DEBUG and not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite value produced by kernel")
    return x


def as_tensor(x, dtype=None):
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 4:
        raise ShapeError("tensor must be 4-D (b, c, h, w)", x.shape, ("b", "c", "h", "w"))
    return x


# ---------------------------------------------------------------------------
# reflect padding


def reflect_index(i, n):
    """Map integer indices onto [0, n) by mirror reflection without edge repeat."""
    i = np.asarray(i)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i >= n, period - i, i)


def reflect_pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")


def reflect_pad_adjoint(g, p):
    """Adjoint of :func:`reflect_pad`: fold padded border gradients back."""
    if p == 0:
        return g
    g = g.copy()
    H = g.shape[2] - 2 * p
    W = g.shape[3] - 2 * p
    # rows: padded row p-1-r mirrors original row r+1, padded row p+H+r mirrors H-2-r
    for r in range(p):
        g[:, :, p + r + 1, :] += g[:, :, p - 1 - r, :]
        g[:, :, p + H - 2 - r, :] += g[:, :, p + H + r, :]
    g = g[:, :, p:p + H, :]
    for r in range(p):
        g[:, :, :, p + r + 1] += g[:, :, :, p - 1 - r]
        g[:, :, :, p + W - 2 - r] += g[:, :, :, p + W + r]
    return np.ascontiguousarray(g[:, :, :, p:p + W])


# ---------------------------------------------------------------------------
# convolution


def _im2col(x, k):
    """Columns laid out (C*k*k, B*H*W) so the product with weights is one GEMM."""
    B, C, H, W = x.shape
    p = k // 2
    xt = reflect_pad(x, p).transpose(1, 0, 2, 3)
    cols = np.empty((C, k, k, B, H, W), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + H, j:j + W]
    return cols.reshape(C * k * k, B * H * W)


def _check_conv(x, weight, bias):
    if x.ndim != 4:
        raise ShapeError("conv2d input", x.shape, ("b", "c", "h", "w"))
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ShapeError("conv2d weight must be (out, in, k, k) with odd k", weight.shape,
                         ("out", x.shape[1], "k", "k"))
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d weight {tuple(weight.shape)} vs input", x.shape,
                         (x.shape[0], weight.shape[1], x.shape[2], x.shape[3]))
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("conv2d bias", bias.shape, (weight.shape[0],))
    if min(x.shape[2], x.shape[3]) <= weight.shape[2] // 2:
        raise ShapeError("conv2d input too small for reflect padding", x.shape,
                         (x.shape[0], x.shape[1], weight.shape[2] // 2 + 1, weight.shape[2] // 2 + 1))


def conv2d_cols(x, weight, bias=None):
    """:func:`conv2d` that also returns the im2col buffer for reuse in backward."""
    _check_conv(x, weight, bias)
    B, C, H, W = x.shape
    O, _, k, _ = weight.shape
    cols = _im2col(x, k)
    y = (weight.reshape(O, -1) @ cols).reshape(O, B, H, W)
    if bias is not None:
        y += bias[:, None, None, None]
    return _finite(np.ascontiguousarray(y.transpose(1, 0, 2, 3))), cols


def conv2d(x, weight, bias=None):
    """Stride-1 'same' convolution (cross-correlation) with reflect padding."""
    return conv2d_cols(x, weight, bias)[0]


def conv2d_backward(grad_out, x, weight, cols=None):
    """Return (grad_input, grad_weight, grad_bias) of :func:`conv2d`."""
    B, C, H, W = x.shape
    O, _, k, _ = weight.shape
    p = k // 2
    if cols is None:
        cols = _im2col(x, k)
    g2 = grad_out.transpose(1, 0, 2, 3).reshape(O, -1)
    grad_w = (g2 @ cols.T).reshape(weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    gcols = (weight.reshape(O, -1).T @ g2).reshape(C, k, k, B, H, W)
    gxp = np.zeros((C, B, H + 2 * p, W + 2 * p), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + H, j:j + W] += gcols[:, i, j]
    return reflect_pad_adjoint(gxp.transpose(1, 0, 2, 3), p), grad_w, grad_b


# ---------------------------------------------------------------------------
# separable resampling


def cubic_kernel(t, a=-0.5):
    """Keys cubic convolution kernel; ``a=-0.5`` is Catmull-Rom."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@lru_cache(maxsize=64)
def _bicubic_matrix(n_in, n_out):
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centres.

    Downsampling stretches the kernel by the scale factor (antialiased, as in
    MATLAB ``imresize``); upsampling uses the plain kernel.
    """
    scale = n_out / n_in
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    M = np.zeros((n_out, n_in))
    for o in range(n_out):
        centre = (o + 0.5) / scale - 0.5
        lo = int(np.floor(centre - support)) + 1
        taps = np.arange(lo, int(np.ceil(centre + support)))
        w = cubic_kernel((centre - taps) * stretch)
        keep = w != 0
        taps, w = taps[keep], w[keep]
        np.add.at(M[o], reflect_index(taps, n_in), w / w.sum())
    M.setflags(write=False)
    return M


@lru_cache(maxsize=64)
def _bilinear_matrix(n_in, n_out):
    scale = n_out / n_in
    M = np.zeros((n_out, n_in))
    for o in range(n_out):
        c = (o + 0.5) / scale - 0.5
        i0 = int(np.floor(c))
        f = c - i0
        np.add.at(M[o], reflect_index(np.array([i0, i0 + 1]), n_in), np.array([1 - f, f]))
    M.setflags(write=False)
    return M


def _apply_separable(x, Mh, Mw):
    Mh = Mh.astype(x.dtype, copy=False)
    Mw = Mw.astype(x.dtype, copy=False)
    return _finite(np.matmul(np.matmul(Mh, x), Mw.T))


def _apply_separable_adjoint(g, Mh, Mw):
    Mh = Mh.astype(g.dtype, copy=False)
    Mw = Mw.astype(g.dtype, copy=False)
    return np.matmul(np.matmul(Mh.T, g), Mw)


def _resize_shape(x, factor):
    H, W = x.shape[-2:]
    if factor == "up":
        if min(H, W) < 4:
            raise ShapeError("bicubic_resize needs extents >= 4", x.shape, (..., 4, 4))
        return 2 * H, 2 * W
    if factor == "down":
        if min(H, W) < 4 or H % 2 or W % 2:
            raise ShapeError("bicubic downsampling needs even extents >= 4", x.shape,
                             (..., H + H % 2, W + W % 2))
        return H // 2, W // 2
    raise ValueError(f"factor must be 'up' or 'down', got {factor!r}")


def bicubic_resize(x, factor):
    """x2 Catmull-Rom resize; ``factor`` is ``"up"`` or ``"down"``."""
    Ho, Wo = _resize_shape(x, factor)
    H, W = x.shape[-2:]
    return _apply_separable(x, _bicubic_matrix(H, Ho), _bicubic_matrix(W, Wo))


def bicubic_resize_backward(grad_out, in_shape):
    H, W = in_shape[-2:]
    Ho, Wo = grad_out.shape[-2:]
    return _apply_separable_adjoint(grad_out, _bicubic_matrix(H, Ho), _bicubic_matrix(W, Wo))


def bilinear_resize(x, out_h, out_w):
    H, W = x.shape[-2:]
    if (H, W) == (out_h, out_w):
        return x
    return _apply_separable(x, _bilinear_matrix(H, out_h), _bilinear_matrix(W, out_w))


def bilinear_resize_backward(grad_out, in_shape):
    H, W = in_shape[-2:]
    Ho, Wo = grad_out.shape[-2:]
    if (H, W) == (Ho, Wo):
        return grad_out
    return _apply_separable_adjoint(grad_out, _bilinear_matrix(H, Ho), _bilinear_matrix(W, Wo))


# ---------------------------------------------------------------------------
# gaussian blur


def gaussian_kernel3x3(sigma):
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d = np.array([-1.0, 0.0, 1.0])
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur3x3(x, sigma):
    """Depthwise 3x3 Gaussian blur with reflect padding."""
    k = gaussian_kernel3x3(sigma).astype(x.dtype)
    H, W = x.shape[-2:]
    xp = reflect_pad(x, 1)
    out = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            out += k[i, j] * xp[:, :, i:i + H, j:j + W]
    return _finite(out)


def gaussian_blur3x3_backward(grad_out, sigma):
    k = gaussian_kernel3x3(sigma).astype(grad_out.dtype)
    B, C, H, W = grad_out.shape
    gp = np.zeros((B, C, H + 2, W + 2), dtype=grad_out.dtype)
    for i in range(3):
        for j in range(3):
            gp[:, :, i:i + H, j:j + W] += k[i, j] * grad_out
    return reflect_pad_adjoint(gp, 1)


# ---------------------------------------------------------------------------
# bilinear sampling


class BilinearTaps:
    """Bilinear interpolation weights for a set of continuous sample points.

    Coordinates are in pixel units (x along width, y along height) and are
    clamped to the image border; clamped coordinates carry zero derivative.
    The weights and their x/y derivatives are held as sparse
    (points, pixels) matrices.
    """

    def __init__(self, H, W, x, y):
        self.H, self.W = H, W
        x = np.asarray(x)
        y = np.asarray(y)
        self.shape = x.shape
        x = x.reshape(-1)
        y = y.reshape(-1)
        xc = np.clip(x, 0, W - 1)
        yc = np.clip(y, 0, H - 1)
        mx = ((x >= 0) & (x <= W - 1)).astype(x.dtype)
        my = ((y >= 0) & (y <= H - 1)).astype(y.dtype)
        x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(W - 2, 0))
        y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(H - 2, 0))
        x1 = np.minimum(x0 + 1, W - 1)
        y1 = np.minimum(y0 + 1, H - 1)
        fx = xc - x0
        fy = yc - y0
        idx = np.stack([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1], axis=-1).reshape(-1)
        w = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=-1)
        dwx = np.stack([-(1 - fy), 1 - fy, -fy, fy], axis=-1) * mx[:, None]
        dwy = np.stack([-(1 - fx), -fx, 1 - fx, fx], axis=-1) * my[:, None]
        n = x.size
        shape = (n, H * W)

        def mat(v):
            # 4 entries per row; duplicate columns (degenerate extents) add up
            return sparse.csr_matrix((v.reshape(-1), idx, np.arange(0, 4 * n + 1, 4)), shape=shape)

        self.S, self.Sx, self.Sy = mat(w), mat(dwx), mat(dwy)

    def sample(self, img):
        """img (C, H, W) -> values (C, *points)."""
        flat = img.reshape(img.shape[0], -1)
        out = (self.S @ flat.T).T.astype(img.dtype, copy=False)
        return out.reshape((img.shape[0],) + self.shape)

    def backward(self, img, grad_vals):
        """Return (grad_img, grad_x, grad_y) for upstream grad (C, *points)."""
        C = img.shape[0]
        flatT = img.reshape(C, -1).T
        g = grad_vals.reshape(C, -1).T
        gx = (np.asarray(self.Sx @ flatT) * g).sum(1).reshape(self.shape)
        gy = (np.asarray(self.Sy @ flatT) * g).sum(1).reshape(self.shape)
        gimg = (self.S.T @ g).T.astype(img.dtype, copy=False).reshape(img.shape)
        return gimg, gx.astype(img.dtype, copy=False), gy.astype(img.dtype, copy=False)


def grid_sample_bilinear(x, grid):
    """Sample ``x`` (B,C,H,W) at ``grid`` (B,Ho,Wo,2) holding (x, y) pixel coords."""
    B, C, H, W = x.shape
    if grid.ndim != 4 or grid.shape[0] != B or grid.shape[-1] != 2:
        raise ShapeError("grid", grid.shape, (B, "ho", "wo", 2))
    out = np.empty((B, C) + grid.shape[1:3], dtype=x.dtype)
    for b in range(B):
        taps = BilinearTaps(H, W, grid[b, ..., 0], grid[b, ..., 1])
        out[b] = taps.sample(x[b])
    return _finite(out)


def grid_sample_bilinear_backward(grad_out, x, grid):
    """Return (grad_input, grad_grid)."""
    B, C, H, W = x.shape
    gx = np.zeros_like(x)
    gg = np.zeros_like(grid)
    for b in range(B):
        taps = BilinearTaps(H, W, grid[b, ..., 0], grid[b, ..., 1])
        gx[b], gg[b, ..., 0], gg[b, ..., 1] = taps.backward(x[b], grad_out[b])
    return gx, gg


def identity_grid(B, H, W, dtype=np.float64):
    ys, xs = np.meshgrid(np.arange(H, dtype=dtype), np.arange(W, dtype=dtype), indexing="ij")
    g = np.stack([xs, ys], axis=-1)
    return np.broadcast_to(g, (B, H, W, 2)).copy()


# ---------------------------------------------------------------------------
# patches


def unfold_patches(x, k=3, scale=1):
    """Dense patch extraction, one patch per grid cell.

    With ``scale=1`` this is stride-1 extraction of k x k patches centred on
    every pixel (reflect padded), giving H*W rows of length C*k*k. With
    ``scale=s`` the patches are (k*s) x (k*s) taken at stride s, i.e. the same
    patch grid expressed at an s-times finer resolution.
    Returns an array of shape (B, N, C*K*K), K = k*scale.
    """
    if k % 2 == 0:
        raise ValueError("patch size must be odd")
    B, C, H, W = x.shape
    K = k * scale
    pad = (k // 2) * scale
    if H < k * scale or W < k * scale or H % scale or W % scale:
        raise ShapeError(f"unfold_patches needs extents >= {K} divisible by {scale}", x.shape,
                         (B, C, max(H, K), max(W, K)))
    xp = reflect_pad(x, pad)
    win = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::scale, ::scale]
    Hg, Wg = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Hg * Wg, C * K * K))


def _fold_sum(patches, H, W, k, scale):
    B, N, D = patches.shape
    K = k * scale
    pad = (k // 2) * scale
    Hg, Wg = H // scale, W // scale
    if N != Hg * Wg or D % (K * K):
        raise ShapeError("fold_patches patch count", patches.shape, (B, Hg * Wg, f"C*{K * K}"))
    C = D // (K * K)
    p = patches.reshape(B, Hg, Wg, C, K, K)
    canvas = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=patches.dtype)
    for i in range(K):
        for j in range(K):
            canvas[:, :, i:i + H:scale, j:j + W:scale] += p[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return canvas[:, :, pad:pad + H, pad:pad + W]


@lru_cache(maxsize=32)
def fold_counts(H, W, k=3, scale=1):
    ones = np.ones((1, (H // scale) * (W // scale), (k * scale) ** 2))
    c = _fold_sum(ones, H, W, k, scale)[0, 0]
    c.setflags(write=False)
    return c


def fold_patches(patches, H, W, k=3, scale=1):
    """Recompose patches into a (B, C, H, W) tensor averaging overlaps.

    Inverse of :func:`unfold_patches`: ``fold(unfold(x)) == x``. Patch pixels
    falling in the padded border are dropped.
    """
    out = _fold_sum(patches, H, W, k, scale)
    return _finite(out / fold_counts(H, W, k, scale).astype(patches.dtype))


def fold_patches_backward(grad_out, k=3, scale=1):
    B, C, H, W = grad_out.shape
    K = k * scale
    pad = (k // 2) * scale
    g = grad_out / fold_counts(H, W, k, scale).astype(grad_out.dtype)
    gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(gp, (K, K), axis=(2, 3))[:, :, ::scale, ::scale]
    Hg, Wg = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Hg * Wg, C * K * K))


# ---------------------------------------------------------------------------
# small elementwise helpers shared by the networks


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out
