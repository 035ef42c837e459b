"""Aligned attention: index-map warping plus patch-wise affine refinement.

The index map lives on the matching grid (H, W). A feature level whose
resolution is ``scale`` times the matching grid is warped with patches of
size 3*scale taken at stride ``scale``, so one index map serves every level.
"""
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .numerics import (BilinearTaps, ShapeError, bicubic_resize, conv2d_cols, conv2d_backward,
                       fold_counts, fold_patches, fold_patches_backward, reflect_index, relu)

PATCH = 3
BOUND_SCALE = 0.5
BOUND_TRANS = 2.0

# residual layout: row-major 2x3 affine [a11, a12, tx, a21, a22, ty]
_TRANS = np.array([False, False, True, False, False, True])


# ---------------------------------------------------------------------------
# coarse warp


def warp_operator(index, grid, ref_grid, scale):
    """Sparse (out_pixels, src_pixels) matrix copying matched patches and averaging overlaps."""
    H, W = grid
    Hr, Wr = ref_grid
    index = np.asarray(index)
    if index.shape != (H * W,):
        raise ShapeError("index map", index.shape, (H * W,))
    if index.min() < 0 or index.max() >= Hr * Wr:
        raise IndexError(f"index map entry outside [0, {Hr * Wr})")
    s = scale
    K = PATCH * s
    off = np.arange(K) - s  # patch rows relative to s*grid_row
    Ho, Wo = H * s, W * s
    Hs, Ws = Hr * s, Wr * s
    iy, ix = np.divmod(np.arange(H * W), W)
    jy, jx = np.divmod(index, Wr)
    oy = s * iy[:, None, None] + off[None, :, None]
    ox = s * ix[:, None, None] + off[None, None, :]
    sy = reflect_index(s * jy[:, None, None] + off[None, :, None], Hs)
    sx = reflect_index(s * jx[:, None, None] + off[None, None, :], Ws)
    oy, ox = np.broadcast_arrays(oy, ox)
    sy, sx = np.broadcast_arrays(sy, sx)
    inside = (oy >= 0) & (oy < Ho) & (ox >= 0) & (ox < Wo)
    rows = (oy * Wo + ox)[inside]
    cols = (sy * Ws + sx)[inside]
    counts = fold_counts(Ho, Wo, PATCH, s).reshape(-1)
    M = sparse.csr_matrix((1.0 / counts[rows], (rows, cols)), shape=(Ho * Wo, Hs * Ws))
    M.sum_duplicates()
    return M


def _apply_rows(M, x, out_hw):
    B, C = x.shape[:2]
    flat = x.reshape(B * C, -1)
    out = (M @ flat.T).T.astype(x.dtype, copy=False)
    return out.reshape(B, C, *out_hw)


def warp_by_index(source, match, scale):
    """Coarsely warp ``source`` (1, C, scale*Hr, scale*Wr) onto the LR grid."""
    H, W = match.grid
    Hr, Wr = match.ref_grid
    if source.shape[2:] != (Hr * scale, Wr * scale):
        raise ShapeError("warp source", source.shape,
                         (source.shape[0], source.shape[1], Hr * scale, Wr * scale))
    M = warp_operator(match.index, match.grid, match.ref_grid, scale)
    return _apply_rows(M, source, (H * scale, W * scale)), M


def warp_by_index_backward(grad_out, M, src_shape):
    return _apply_rows(M.T.tocsr(), grad_out, src_shape[2:])


# ---------------------------------------------------------------------------
# affine field


@dataclass
class AffineField:
    """Per-patch affine residuals from identity on an (H, W) grid.

    ``residual`` is (B, 6, H, W) in the [a11, a12, tx, a21, a22, ty] layout,
    already squashed into (-bound_scale, bound_scale) for the linear entries
    and (-bound_trans, bound_trans) pixels for the translations.
    """
    residual: np.ndarray
    bound_scale: float = BOUND_SCALE
    bound_trans: float = BOUND_TRANS

    @classmethod
    def identity(cls, B, H, W, dtype=np.float64, **bounds):
        return cls(np.zeros((B, 6, H, W), dtype=dtype), **bounds)

    @property
    def grid(self):
        return self.residual.shape[2:]

    def matrices(self):
        """Full (B, H, W, 2, 3) affine matrices."""
        r = np.moveaxis(self.residual, 1, -1).reshape(*self.residual.shape[:1], *self.grid, 2, 3)
        eye = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=r.dtype)
        return r + eye


def _bounds(bound_scale, bound_trans, dtype):
    return np.where(_TRANS, bound_trans, bound_scale).astype(dtype)[None, :, None, None]


def squash(raw, bound_scale=BOUND_SCALE, bound_trans=BOUND_TRANS):
    b = _bounds(bound_scale, bound_trans, raw.dtype)
    return b * np.tanh(raw / b)


def squash_backward(grad, raw, bound_scale=BOUND_SCALE, bound_trans=BOUND_TRANS):
    b = _bounds(bound_scale, bound_trans, raw.dtype)
    return grad * (1.0 - np.tanh(raw / b) ** 2)


T_LAYERS = 4


def predict_alignment(lr_up, ref_matched, t_params, grid=None,
                      bound_scale=BOUND_SCALE, bound_trans=BOUND_TRANS):
    """Run the local transformer on concat(lr_up, ref_matched).

    ``t_params`` is a list of (weight, bias) pairs; ReLU between layers, none
    after the last. If ``grid`` is given and differs from the image extent the
    concatenated input is bicubic-downsampled by 2 to the matching grid.
    Returns (AffineField, cache).
    """
    if lr_up.shape[0] != ref_matched.shape[0] or lr_up.shape[2:] != ref_matched.shape[2:]:
        raise ShapeError("predict_alignment operands", ref_matched.shape,
                         (lr_up.shape[0], ref_matched.shape[1]) + lr_up.shape[2:])
    x = np.concatenate([lr_up, ref_matched], axis=1)
    if grid is not None and tuple(grid) != x.shape[2:]:
        x = bicubic_resize(x, "down")
        if x.shape[2:] != tuple(grid):
            raise ShapeError("alignment input vs matching grid", x.shape, x.shape[:2] + tuple(grid))
    acts, cols = [x], []
    h = x
    for i, (w, b) in enumerate(t_params):
        h, c = conv2d_cols(h, w, b)
        if i < len(t_params) - 1:
            h = relu(h)
        acts.append(h)
        cols.append(c)
    raw = acts[-1]
    field = AffineField(squash(raw, bound_scale, bound_trans), bound_scale, bound_trans)
    return field, {"acts": acts, "cols": cols, "raw": raw, "params": t_params,
                   "bounds": (bound_scale, bound_trans)}


def predict_alignment_backward(grad_residual, cache):
    """Return list of (grad_weight, grad_bias) for the transformer layers."""
    acts, params = cache["acts"], cache["params"]
    g = squash_backward(grad_residual, cache["raw"], *cache["bounds"])
    grads = [None] * len(params)
    for i in reversed(range(len(params))):
        w, _ = params[i]
        if i < len(params) - 1:
            g = g * (acts[i + 1] > 0)
        gx, gw, gb = conv2d_backward(g, acts[i], w, cache["cols"][i])
        grads[i] = (gw, gb)
        g = gx
    return grads


# ---------------------------------------------------------------------------
# patch-wise affine resampling


def _patch_coords(field, b, scale):
    """Sample coordinates (N, K, K) for every patch of batch item ``b``."""
    H, W = field.grid
    s = scale
    K = PATCH * s
    r = field.residual[b].reshape(6, H * W)
    a11, a12, tx, a21, a22, ty = (r[i][:, None, None] for i in range(6))
    iy, ix = np.divmod(np.arange(H * W), W)
    cy = (s * iy + (s - 1) / 2.0)[:, None, None]
    cx = (s * ix + (s - 1) / 2.0)[:, None, None]
    u = (np.arange(K) - (K - 1) / 2.0).astype(r.dtype)
    du = u[None, None, :]   # along x
    dv = u[None, :, None]   # along y
    x = cx + (1.0 + a11) * du + a12 * dv + s * tx
    y = cy + a21 * du + (1.0 + a22) * dv + s * ty
    x, y = np.broadcast_arrays(x, y)
    return x, y, du, dv


class PatchAffineSampler:
    """Sampling taps of one affine field at one level, reusable across tensors."""

    def __init__(self, field, scale, shape):
        B, C, Hs, Ws = shape
        H, W = field.grid
        if (Hs, Ws) != (H * scale, W * scale) or field.residual.shape[0] != B:
            raise ShapeError("feature level vs affine field", shape,
                             (field.residual.shape[0], C, H * scale, W * scale))
        self.field, self.scale, self.extent = field, scale, (Hs, Ws)
        self.taps, self.offsets = [], []
        for b in range(B):
            x, y, du, dv = _patch_coords(field, b, scale)
            self.taps.append(BilinearTaps(Hs, Ws, x, y))
            self.offsets.append((du, dv))

    def forward(self, feat):
        B, C, Hs, Ws = feat.shape
        H, W = self.field.grid
        K = PATCH * self.scale
        patches = np.empty((B, H * W, C, K, K), dtype=feat.dtype)
        for b, taps in enumerate(self.taps):
            patches[b] = np.moveaxis(taps.sample(feat[b]), 0, 1)
        return fold_patches(patches.reshape(B, H * W, -1), Hs, Ws, PATCH, self.scale)

    def backward(self, grad_out, feat):
        """Return (grad_feat, grad_residual)."""
        B, C = feat.shape[:2]
        H, W = self.field.grid
        s = self.scale
        K = PATCH * s
        gp = fold_patches_backward(grad_out, PATCH, s).reshape(B, H * W, C, K, K)
        gfeat = np.zeros_like(feat)
        gres = np.zeros_like(self.field.residual)
        for b, taps in enumerate(self.taps):
            du, dv = self.offsets[b]
            gimg, gx, gy = taps.backward(feat[b], np.moveaxis(gp[b], 1, 0))
            gfeat[b] = gimg
            parts = [gx * du, gx * dv, s * gx, gy * du, gy * dv, s * gy]
            gres[b] = np.stack([q.sum(axis=(1, 2)) for q in parts]).reshape(6, H, W)
        return gfeat, gres


def apply_patch_affine(feat_matched, field, scale):
    """Resample each patch of ``feat_matched`` through its own affine, then refold.

    The affine acts about the patch centre; translations are in matching-grid
    pixels and are multiplied by ``scale`` at finer levels.
    """
    return PatchAffineSampler(field, scale, feat_matched.shape).forward(feat_matched)


def apply_patch_affine_backward(grad_out, feat_matched, field, scale):
    """Return (grad_feat_matched, grad_residual)."""
    return PatchAffineSampler(field, scale, feat_matched.shape).backward(grad_out, feat_matched)


def patch_affine_sample(src, center, affine, size):
    """Sample one ``size`` x ``size`` patch of ``src`` (C, H, W) through a 2x3 affine.

    ``center`` is (cy, cx); returns (patch, taps, du, dv) so callers can
    differentiate with :meth:`BilinearTaps.backward`.
    """
    u = np.arange(size) - (size - 1) / 2.0
    du = u[None, :]
    dv = u[:, None]
    A = np.asarray(affine)
    x = center[1] + A[0, 0] * du + A[0, 1] * dv + A[0, 2]
    y = center[0] + A[1, 0] * du + A[1, 1] * dv + A[1, 2]
    x, y = np.broadcast_arrays(x, y)
    taps = BilinearTaps(src.shape[1], src.shape[2], x, y)
    return taps.sample(src), taps, du, dv


def patch_affine_sample_backward(src, taps, du, dv, grad_patch):
    """Gradient of a sampled patch w.r.t. the 2x3 affine."""
    _, gx, gy = taps.backward(src, grad_patch)
    return np.array([[(gx * du).sum(), (gx * dv).sum(), gx.sum()],
                     [(gy * du).sum(), (gy * dv).sum(), gy.sum()]])

