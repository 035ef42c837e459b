"""Training objectives with analytic gradients w.r.t. the SR image.

Contextual terms compare per-pixel embeddings produced by a frozen
:class:`PixelEmbedding` (one conv layer + ReLU). Nearest-neighbour
assignments are hard and treated as locally constant when differentiating;
pass a previously returned assignment back in to freeze it.
"""
from dataclasses import dataclass, field

import numpy as np

from .numerics import (ShapeError, bicubic_resize, bicubic_resize_backward, bilinear_resize,
                       conv2d, conv2d_backward, gaussian_blur3x3, gaussian_blur3x3_backward, relu)

BLUR_SIGMA = 0.5
W_FID = 0.1
SRA_LAMBDA = 0.1
NORM_EPS = 1e-8
_CHUNK = 2048


@dataclass
class LossValue:
    value: float
    grad: np.ndarray                    # d value / d sr
    terms: dict = field(default_factory=dict)
    assignments: dict = field(default_factory=dict)


class PixelEmbedding:
    """relu(conv3x3(x)) with fixed weights; maps images to per-pixel features."""

    def __init__(self, weight, bias):
        self.weight = weight
        self.bias = bias

    def __call__(self, x):
        return relu(conv2d(x, self.weight.astype(x.dtype), self.bias.astype(x.dtype)))

    def backward(self, grad_feat, x, feat):
        gx, _, _ = conv2d_backward(grad_feat * (feat > 0), x, self.weight.astype(x.dtype))
        return gx


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(what, b.shape, a.shape)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    ok = n >= NORM_EPS
    return np.where(ok, v / np.where(ok, n, 1.0), 0.0), n[..., 0], ok[..., 0]


def nearest_assignment(x_feat, y_feat):
    """For each pixel of x (B,C,H,W) the flat index of the most cosine-similar pixel of y."""
    B, C = x_feat.shape[:2]
    xs = _unit(x_feat.reshape(B, C, -1).transpose(0, 2, 1))[0]
    ys = _unit(y_feat.reshape(B, C, -1).transpose(0, 2, 1))[0]
    out = np.empty(xs.shape[:2], dtype=np.int64)
    for b in range(B):
        for i0 in range(0, xs.shape[1], _CHUNK):
            out[b, i0:i0 + _CHUNK] = np.argmax(xs[b, i0:i0 + _CHUNK] @ ys[b].T, axis=1)
    return out


def contextual_distance(x_feat, y_feat, assignment=None):
    """Per-pixel delta_i = min_j (1 - cos(x_i, y_j)).

    Returns (delta (B, H, W), mean, assignment (B, H*W)).
    """
    if x_feat.shape[:2] != y_feat.shape[:2]:
        raise ShapeError("contextual features channel mismatch", y_feat.shape,
                         x_feat.shape[:2] + y_feat.shape[2:])
    if assignment is None:
        assignment = nearest_assignment(x_feat, y_feat)
    B, C, H, W = x_feat.shape
    xs = _unit(x_feat.reshape(B, C, -1).transpose(0, 2, 1))[0]
    ys = _unit(y_feat.reshape(B, C, -1).transpose(0, 2, 1))[0]
    picked = np.take_along_axis(ys, assignment[..., None], axis=1)
    delta = 1.0 - (xs * picked).sum(-1)
    delta = delta.reshape(B, H, W)
    return delta, float(delta.mean()), assignment


def contextual_distance_backward(grad_delta, x_feat, y_feat, assignment):
    """Gradient of sum(grad_delta * delta) w.r.t. x_feat (assignment held fixed)."""
    B, C, H, W = x_feat.shape
    xv = x_feat.reshape(B, C, -1).transpose(0, 2, 1)
    xs, xn, xok = _unit(xv)
    ys = _unit(y_feat.reshape(B, C, -1).transpose(0, 2, 1))[0]
    picked = np.take_along_axis(ys, assignment[..., None], axis=1)
    cos = (xs * picked).sum(-1, keepdims=True)
    dcos = (picked - cos * xs) / np.where(xok, xn, 1.0)[..., None]
    g = -grad_delta.reshape(B, -1, 1) * dcos * xok[..., None]
    return g.transpose(0, 2, 1).reshape(B, C, H, W)


def _embedded_contextual(sr, other, embed, weights=None, assignment=None):
    """Weighted mean of delta(embed(sr), embed(other)) and its gradient w.r.t. sr."""
    fx = embed(sr)
    fy = embed(other)
    delta, _, assignment = contextual_distance(fx, fy, assignment)
    if weights is None:
        weights = np.full(delta.shape, 1.0 / delta.size, dtype=delta.dtype)
    value = float((delta * weights).sum())
    gfx = contextual_distance_backward(weights, fx, fy, assignment)
    return value, embed.backward(gfx, sr, fx), assignment


def l1_loss(sr, hr):
    _check_same(sr, hr, "l1_loss operands")
    d = sr - hr
    return LossValue(float(np.abs(d).mean()), np.sign(d) / d.size, {"l1": float(np.abs(d).mean())})


def reconstruction_loss(sr, hr, embed, assignment=None, sigma=BLUR_SIGMA):
    """Blurred-L1 low-frequency term plus mean contextual distance to ``hr``."""
    _check_same(sr, hr, "reconstruction_loss operands")
    d = gaussian_blur3x3(sr, sigma) - gaussian_blur3x3(hr, sigma)
    blur = float(np.abs(d).mean())
    g = gaussian_blur3x3_backward(np.sign(d) / d.size, sigma)
    cx, gcx, assignment = _embedded_contextual(sr, hr, embed, assignment=assignment)
    return LossValue(blur + cx, g + gcx, {"blur": blur, "contextual": cx}, {"rec": assignment})


def confidence_weights(conf, shape):
    """Resize a confidence map to ``shape`` (B, H, W) and clamp to [0, 1]."""
    conf = np.asarray(conf)
    if conf.ndim == 2:
        conf = conf[None]
    if conf.ndim == 3:
        conf = conf[:, None]
    c = bilinear_resize(conf, *shape[1:])[:, 0]
    return np.clip(c, 0.0, 1.0)


def fidelity_loss(sr, ref, conf, embed, assignment=None):
    """Confidence-weighted mean contextual distance from ``sr`` pixels to ``ref``.

    Weights are normalised per image; an image whose confidences sum to less
    than 1e-8 contributes 0.
    """
    if sr.shape[:2] != ref.shape[:2]:
        raise ShapeError("fidelity_loss operands", ref.shape, sr.shape[:2] + ref.shape[2:])
    c = confidence_weights(conf, (sr.shape[0],) + sr.shape[2:]).astype(sr.dtype)
    total = c.sum(axis=(1, 2), keepdims=True)
    live = total >= NORM_EPS
    if not live.any():
        return LossValue(0.0, np.zeros_like(sr), {"fid": 0.0})
    # per-image normalised weights, averaged over the batch
    weights = np.where(live, c / np.where(live, total, 1.0), 0.0) / sr.shape[0]
    value, grad, assignment = _embedded_contextual(sr, ref, embed, weights, assignment)
    return LossValue(value, grad, {"fid": value}, {"fid": assignment})


def sra_loss(sr, wide, tele, conf, embed, lam=SRA_LAMBDA, assignment=None):
    """|down(sr) - wide|_1 (mean) + lam * fidelity(sr, tele)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    want = wide.shape[:2] + (2 * wide.shape[2], 2 * wide.shape[3])
    if sr.shape != want:
        raise ShapeError("sra_loss: sr must be twice the extent of wide", sr.shape, want)
    d = bicubic_resize(sr, "down") - wide
    cons = float(np.abs(d).mean())
    grad = bicubic_resize_backward(np.sign(d) / d.size, sr.shape)
    terms = {"consistency": cons, "fid": 0.0}
    assignments = {}
    value = cons
    if lam > 0:
        fid = fidelity_loss(sr, tele, conf, embed, assignment)
        value += lam * fid.value
        grad = grad + lam * fid.grad
        terms["fid"] = fid.value
        assignments = fid.assignments
    return LossValue(value, grad, terms, assignments)
