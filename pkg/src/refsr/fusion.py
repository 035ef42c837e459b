"""Confidence-gated fusion of warped reference information into the SR path."""
import numpy as np

from .numerics import (ShapeError, bicubic_resize, bicubic_resize_backward, conv2d,
                       conv2d_backward, relu, sigmoid)

MODES = ("adaptive", "soft", "sum")


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(what, b.shape, a.shape)


def _check_conf(conf, like):
    want = (like.shape[0], 1) + like.shape[2:]
    if conf.shape != want:
        raise ShapeError("confidence map must be resized to the level extent", conf.shape, want)


# ---------------------------------------------------------------------------
# confidence embedding g / g_r: conv3x3 -> relu -> conv3x3 -> sigmoid


def gate_forward(conf, params, activation="sigmoid"):
    """Embed a (B, 1, H, W) confidence map into gate values.

    ``params`` is ``{"w1", "b1", "w2", "b2"}``. ``activation="none"`` skips
    the final sigmoid (used to express the identity embedding in tests).
    """
    h_pre = conv2d(conf, params["w1"], params["b1"])
    h = relu(h_pre)
    z = conv2d(h, params["w2"], params["b2"])
    out = sigmoid(z) if activation == "sigmoid" else z
    return out, {"conf": conf, "h": h, "out": out, "activation": activation}


def gate_backward(grad_out, cache, params):
    """Return (grad_conf, grads dict)."""
    g = grad_out
    if cache["activation"] == "sigmoid":
        g = g * cache["out"] * (1.0 - cache["out"])
    gh, gw2, gb2 = conv2d_backward(g, cache["h"], params["w2"])
    gh = gh * (cache["h"] > 0)
    gc, gw1, gb1 = conv2d_backward(gh, cache["conf"], params["w1"])
    return gc, {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}


def identity_gate_params(dtype=np.float64):
    """Weights under which ``gate_forward(..., activation="none")`` returns its input."""
    w1 = np.zeros((2, 1, 3, 3), dtype=dtype)
    w1[0, 0, 1, 1], w1[1, 0, 1, 1] = 1.0, -1.0
    w2 = np.zeros((1, 2, 3, 3), dtype=dtype)
    w2[0, 0, 1, 1], w2[0, 1, 1, 1] = 1.0, -1.0
    return {"w1": w1, "b1": np.zeros(2, dtype), "w2": w2, "b2": np.zeros(1, dtype)}


# ---------------------------------------------------------------------------
# feature-space fusion


def adaptive_feature_fuse(f_sr, f_ref, conf, gates, mode="adaptive", activation="sigmoid"):
    """Fuse SR features with aligned reference features.

    adaptive: g(C) * h([f_sr, f_ref]) + f_sr
    soft:     C * h([f_sr, f_ref]) + f_sr
    sum:      f_sr + f_ref

    ``gates`` holds ``"g"`` (gate params) and ``"h_w"``, ``"h_b"``.
    Returns (fused, cache).
    """
    _check_same(f_sr, f_ref, "aligned reference features")
    if mode == "sum":
        return f_sr + f_ref, {"mode": mode}
    if mode not in MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    _check_conf(conf, f_sr)
    cat = np.concatenate([f_sr, f_ref], axis=1)
    hv = conv2d(cat, gates["h_w"], gates["h_b"])
    if mode == "adaptive":
        gv, gcache = gate_forward(conf, gates["g"], activation)
    else:
        gv, gcache = conf, None
    cache = {"mode": mode, "cat": cat, "hv": hv, "gv": gv, "gcache": gcache, "gates": gates}
    return gv * hv + f_sr, cache


def adaptive_feature_fuse_backward(grad_out, cache):
    """Return dict with grads for f_sr, f_ref, conf and (where used) gate params."""
    mode = cache["mode"]
    if mode == "sum":
        return {"f_sr": grad_out, "f_ref": grad_out, "conf": None}
    gates = cache["gates"]
    ghv = grad_out * cache["gv"]
    ggv = (grad_out * cache["hv"]).sum(axis=1, keepdims=True)
    gcat, ghw, ghb = conv2d_backward(ghv, cache["cat"], gates["h_w"])
    c = grad_out.shape[1]
    out = {"f_sr": grad_out + gcat[:, :c], "f_ref": gcat[:, c:], "h_w": ghw, "h_b": ghb}
    if mode == "adaptive":
        out["conf"], out["g"] = gate_backward(ggv, cache["gcache"], gates["g"])
    else:
        out["conf"] = ggv
    return out


# ---------------------------------------------------------------------------
# image-space high-frequency fusion


def hf_residual(ref):
    """Detail band of ``ref``: ref minus its bicubic down-then-up copy."""
    return ref - bicubic_resize(bicubic_resize(ref, "down"), "up")


def hf_residual_backward(grad_out):
    d_shape = grad_out.shape[:2] + (grad_out.shape[2] // 2, grad_out.shape[3] // 2)
    g_down = bicubic_resize_backward(grad_out, d_shape)
    return grad_out - bicubic_resize_backward(g_down, grad_out.shape)


def image_space_fuse(decoded, hf_aligned, conf, g_r, activation="sigmoid"):
    """decoded + g_r(C) * hf_aligned. Returns (image, cache); no clamping here."""
    _check_same(decoded, hf_aligned, "aligned high-frequency residual")
    _check_conf(conf, decoded)
    gv, gcache = gate_forward(conf, g_r, activation)
    return decoded + gv * hf_aligned, {"gv": gv, "gcache": gcache, "hf": hf_aligned, "g_r": g_r}


def image_space_fuse_backward(grad_out, cache):
    ggv = (grad_out * cache["hf"]).sum(axis=1, keepdims=True)
    gconf, gparams = gate_backward(ggv, cache["gcache"], cache["g_r"])
    return {"decoded": grad_out, "hf": grad_out * cache["gv"], "conf": gconf, "g_r": gparams}
