"""Network assembly: encoders, backbone, decoder, alignment and fusion sites.

Parameters are a flat, ordered ``dict`` of float arrays so optimizers and
checkpoints can treat them uniformly. The matching encoder ``phi.*`` is
frozen: index and confidence maps depend only on the images, never on the
trainable weights.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fusion, warp
from .losses import PixelEmbedding
from .matching import DEFAULT_MARGIN, DEFAULT_TILE, match_features, tiled_match
from .numerics import (ShapeError, bicubic_resize, bicubic_resize_backward, bilinear_resize,
                       conv2d, conv2d_backward, conv2d_cols, relu)

MIN_EXTENT = 16
CKPT_MAGIC = b"REFSR-CKPT 1\n"


@dataclass(frozen=True)
class ModelConfig:
    phi_channels: int = 16
    psi_channels: tuple = (16, 32)
    backbone_channels: int = 64
    n_resblocks: int = 4
    t_channels: int = 32
    gate_hidden: int = 8
    bound_scale: float = warp.BOUND_SCALE
    bound_trans: float = warp.BOUND_TRANS
    fusion_mode: str = "adaptive"
    tile: int = DEFAULT_TILE
    margin: int = DEFAULT_MARGIN

    def to_dict(self):
        d = asdict(self)
        d["psi_channels"] = list(self.psi_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        if "psi_channels" in d:
            d["psi_channels"] = tuple(d["psi_channels"])
        return cls(**d)

    def fingerprint(self):
        """Hash of the architecture-defining fields (fusion mode and search excluded)."""
        d = self.to_dict()
        for k in ("fusion_mode", "tile", "margin"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def layer_shapes(config):
    """Ordered {name: shape} of every parameter tensor."""
    c = config
    f1, f0 = c.psi_channels[1], c.psi_channels[0]
    shapes = {}

    def conv(name, cout, cin, k=3):
        shapes[name + ".w"] = (cout, cin, k, k)
        shapes[name + ".b"] = (cout,)

    conv("phi.0", c.phi_channels, 3)
    conv("phi.1", c.phi_channels, c.phi_channels)
    conv("phi.2", c.phi_channels, c.phi_channels)
    conv("psi.0", f0, 3)
    conv("psi.1", f1, f0)
    conv("t.0", c.t_channels, 6)
    conv("t.1", c.t_channels, c.t_channels)
    conv("t.2", c.t_channels, c.t_channels)
    conv("t.3", 6, c.t_channels)
    conv("head", c.backbone_channels, 3)
    for i in range(c.n_resblocks):
        conv(f"rb{i}.0", c.backbone_channels, c.backbone_channels)
        conv(f"rb{i}.1", c.backbone_channels, c.backbone_channels)
    conv("dec.lr", f1, c.backbone_channels)
    conv("dec.hr", f0, f1)
    conv("dec.out", 3, f0)
    for lvl, ch in ((0, f1), (1, f0)):
        conv(f"fuse{lvl}.g.1", c.gate_hidden, 1)
        conv(f"fuse{lvl}.g.2", 1, c.gate_hidden)
        conv(f"fuse{lvl}.h", ch, 2 * ch)
    conv("gr.1", c.gate_hidden, 1)
    conv("gr.2", 1, c.gate_hidden)
    return shapes


FROZEN_PREFIX = ("phi.",)


def trainable(name):
    return not name.startswith(FROZEN_PREFIX)


@dataclass
class ModelParams:
    config: ModelConfig
    seed: int
    tensors: dict

    def __getitem__(self, name):
        return self.tensors[name]

    def checksum(self):
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t, dtype="<f4").tobytes())
        return h.hexdigest()

    def astype(self, dtype):
        return ModelParams(self.config, self.seed, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self):
        return ModelParams(self.config, self.seed, {k: v.copy() for k, v in self.tensors.items()})

    def gate(self, prefix):
        t = self.tensors
        return {"w1": t[prefix + ".1.w"], "b1": t[prefix + ".1.b"],
                "w2": t[prefix + ".2.w"], "b2": t[prefix + ".2.b"]}

    def embedding(self):
        """Level-1 matching-encoder features, used as the contextual-loss space."""
        return PixelEmbedding(self.tensors["phi.0.w"], self.tensors["phi.0.b"])


def init_params(seed=0, config=None):
    """Fan-in scaled uniform weights, zero biases, zero final transformer layer."""
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in layer_shapes(config).items():
        if name.endswith(".b") or name.startswith("t.3."):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = 1.0 / np.sqrt(np.prod(shape[1:]))
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return ModelParams(config, seed, tensors)


# ---------------------------------------------------------------------------
# reference preparation (independent of trainable weights)


def _phi(params, x):
    t = params.tensors
    h = relu(conv2d(x, t["phi.0.w"].astype(x.dtype), t["phi.0.b"].astype(x.dtype)))
    h = relu(conv2d(h, t["phi.1.w"].astype(x.dtype), t["phi.1.b"].astype(x.dtype)))
    return conv2d(h, t["phi.2.w"].astype(x.dtype), t["phi.2.b"].astype(x.dtype))


@dataclass
class Prepared:
    """Per-pair quantities that do not depend on trainable weights."""
    lr_up: np.ndarray
    matches: list
    conf_lr: np.ndarray          # (B, 1, h, w)
    conf_hr: np.ndarray          # (B, 1, 2h, 2w)
    ref_matched: np.ndarray      # (B, 3, 2h, 2w)
    hf_matched: np.ndarray       # (B, 3, 2h, 2w)
    ops: list = field(default_factory=list)   # per item {scale: sparse warp}


def _as_batch(x, dtype=None):
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 3:  # H, W, C image
        x = np.moveaxis(x, -1, 0)[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError("expected (B,3,H,W) tensor or (H,W,3) image", x.shape, ("b", 3, "h", "w"))
    return x


def _check_extents(lr, ref):
    h, w = lr.shape[2:]
    Hr, Wr = ref.shape[2:]
    if min(h, w, Hr, Wr) < MIN_EXTENT or Hr % 2 or Wr % 2:
        raise ShapeError(f"extents must be >= {MIN_EXTENT} (reference even)", ref.shape,
                         (ref.shape[0], 3, max(Hr + Hr % 2, MIN_EXTENT), max(Wr + Wr % 2, MIN_EXTENT)))
    if lr.shape[0] != ref.shape[0]:
        raise ShapeError("batch mismatch", ref.shape, (lr.shape[0],) + ref.shape[1:])


def prepare(params, lr, ref, search="full"):
    lr = _as_batch(lr)
    ref = _as_batch(ref, lr.dtype)
    _check_extents(lr, ref)
    lr_up = bicubic_resize(lr, "up")
    f_lr = bicubic_resize(_phi(params, lr_up), "down")
    f_ref = bicubic_resize(_phi(params, ref), "down")
    hf = fusion.hf_residual(ref)
    cfg = params.config
    matches, ops, ref_m, hf_m = [], [], [], []
    for b in range(lr.shape[0]):
        if search == "full":
            m = match_features(f_lr[b], f_ref[b])
        elif search == "tiled":
            m = tiled_match(f_lr[b], f_ref[b], cfg.tile, cfg.margin)
        else:
            raise ValueError(f"search must be 'full' or 'tiled', got {search!r}")
        matches.append(m)
        op2 = warp.warp_operator(m.index, m.grid, m.ref_grid, 2)
        op1 = warp.warp_operator(m.index, m.grid, m.ref_grid, 1)
        ops.append({1: op1, 2: op2})
        ref_m.append(warp._apply_rows(op2, ref[b:b + 1], lr_up.shape[2:]))
        hf_m.append(warp._apply_rows(op2, hf[b:b + 1], lr_up.shape[2:]))
    conf = np.stack([m.confidence_map for m in matches])[:, None].astype(lr.dtype)
    return Prepared(lr_up, matches, conf, bilinear_resize(conf, *lr_up.shape[2:]),
                    np.concatenate(ref_m), np.concatenate(hf_m), ops)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    sr: np.ndarray
    decoded: np.ndarray
    matches: list
    field: warp.AffineField
    aligned: list        # per fusion level, coarse (lr grid) first
    fused: list
    hf_aligned: np.ndarray
    gate_means: dict
    prepared: Prepared
    cache: dict = field(default_factory=dict, repr=False)


def _w(params, name, dtype):
    return params.tensors[name + ".w"].astype(dtype, copy=False), \
        params.tensors[name + ".b"].astype(dtype, copy=False)


def _conv(params, name, x, cache):
    y, cols = conv2d_cols(x, *_w(params, name, x.dtype))
    cache[name] = (x, cols)
    return y


def _conv_back(params, name, g, cache, grads):
    x, cols = cache[name]
    gx, gw, gb = conv2d_backward(g, x, _w(params, name, g.dtype)[0], cols)
    grads[name + ".w"], grads[name + ".b"] = gw, gb
    return gx


_GATE_KEYS = {"w1": "1.w", "b1": "1.b", "w2": "2.w", "b2": "2.b"}


def _gate(params, prefix, dtype):
    return {k: v.astype(dtype, copy=False) for k, v in params.gate(prefix).items()}


def _fuse_gates(params, lvl, dtype):
    t = params.tensors
    return {"g": _gate(params, f"fuse{lvl}.g", dtype),
            "h_w": t[f"fuse{lvl}.h.w"].astype(dtype, copy=False),
            "h_b": t[f"fuse{lvl}.h.b"].astype(dtype, copy=False)}


def _backbone(params, lr, cache):
    x = relu(_conv(params, "head", lr, cache))
    cache["head.out"] = x
    for i in range(params.config.n_resblocks):
        a = relu(_conv(params, f"rb{i}.0", x, cache))
        cache[f"rb{i}.a"] = a
        x = x + _conv(params, f"rb{i}.1", a, cache)
    return x


def _backbone_backward(params, g, cache, grads):
    for i in reversed(range(params.config.n_resblocks)):
        ga = _conv_back(params, f"rb{i}.1", g, cache, grads) * (cache[f"rb{i}.a"] > 0)
        g = g + _conv_back(params, f"rb{i}.0", ga, cache, grads)
    _conv_back(params, "head", g * (cache["head.out"] > 0), cache, grads)


def decoder_only(params, lr):
    """The reference-free path: backbone and decoder with every fusion site skipped."""
    lr = _as_batch(lr)
    cache = {}
    f_sr = _backbone(params, lr, cache)
    d1 = _conv(params, "dec.lr", f_sr, cache)
    d2 = relu(_conv(params, "dec.hr", bicubic_resize(d1, "up"), cache))
    return _conv(params, "dec.out", d2, cache) + bicubic_resize(lr, "up")


def forward(params, lr, ref, search="full", prepared=None, fusion_mode=None):
    """Full reference-based x2 super-resolution forward pass.

    ``lr`` and ``ref`` are (B,3,H,W) tensors or (H,W,3) images. ``prepared``
    may carry a cached :func:`prepare` result for the same pair.
    """
    lr = _as_batch(lr)
    ref = _as_batch(ref, lr.dtype)
    dt = lr.dtype
    mode = fusion_mode or params.config.fusion_mode
    cfg = params.config
    P = prepared if prepared is not None else prepare(params, lr, ref, search)
    B = lr.shape[0]
    c = {"mode": mode}

    # reference pyramid, coarse-warped by the shared index map
    r0 = relu(_conv(params, "psi.0", ref, c))
    r1 = relu(_conv(params, "psi.1", bicubic_resize(r0, "down"), c))
    c["r0"], c["r1"] = r0, r1
    r1m = np.concatenate([warp._apply_rows(P.ops[b][1], r1[b:b + 1], P.conf_lr.shape[2:])
                          for b in range(B)])
    r0m = np.concatenate([warp._apply_rows(P.ops[b][2], r0[b:b + 1], P.lr_up.shape[2:])
                          for b in range(B)])
    c["r1m"], c["r0m"] = r1m, r0m

    # patch-wise alignment
    t_params = [_w(params, f"t.{i}", dt) for i in range(warp.T_LAYERS)]
    afield, c["tcache"] = warp.predict_alignment(P.lr_up, P.ref_matched, t_params,
                                                 grid=P.conf_lr.shape[2:],
                                                 bound_scale=cfg.bound_scale,
                                                 bound_trans=cfg.bound_trans)
    s1 = warp.PatchAffineSampler(afield, 1, r1m.shape)
    s2 = warp.PatchAffineSampler(afield, 2, r0m.shape)
    c["s1"], c["s2"] = s1, s2
    a1 = s1.forward(r1m)
    a0 = s2.forward(r0m)
    hfa = s2.forward(P.hf_matched)

    # SR path with the three fusion sites
    f_sr = _backbone(params, lr, c)
    d1 = _conv(params, "dec.lr", f_sr, c)
    f1, c["fc1"] = fusion.adaptive_feature_fuse(d1, a1, P.conf_lr, _fuse_gates(params, 0, dt), mode)
    c["f1_shape"] = f1.shape
    d2 = relu(_conv(params, "dec.hr", bicubic_resize(f1, "up"), c))
    c["d2"] = d2
    f2, c["fc2"] = fusion.adaptive_feature_fuse(d2, a0, P.conf_hr, _fuse_gates(params, 1, dt), mode)
    decoded = _conv(params, "dec.out", f2, c) + P.lr_up
    sr, c["icache"] = fusion.image_space_fuse(decoded, hfa, P.conf_hr, _gate(params, "gr", dt))

    gate_means = {"image": float(c["icache"]["gv"].mean())}
    if mode == "adaptive":
        gate_means["level0"] = float(c["fc1"]["gv"].mean())
        gate_means["level1"] = float(c["fc2"]["gv"].mean())
    return ForwardTrace(sr, decoded, P.matches, afield, [a1, a0], [f1, f2], hfa, gate_means, P, c)


def backward(params, trace, grad_sr):
    """Gradients of a scalar loss w.r.t. every trainable parameter.

    ``grad_sr`` is d loss / d sr. Returns {name: grad} for trainable names.
    """
    c = trace.cache
    P = trace.prepared
    B = grad_sr.shape[0]
    grads = {}

    gi = fusion.image_space_fuse_backward(grad_sr, c["icache"])
    for k, v in gi["g_r"].items():
        grads["gr." + _GATE_KEYS[k]] = v
    _, gres = c["s2"].backward(gi["hf"], P.hf_matched)

    def fuse_back(g, fc, lvl):
        out = fusion.adaptive_feature_fuse_backward(g, fc)
        if c["mode"] != "sum":
            grads[f"fuse{lvl}.h.w"], grads[f"fuse{lvl}.h.b"] = out["h_w"], out["h_b"]
        if c["mode"] == "adaptive":
            for k, v in out["g"].items():
                grads[f"fuse{lvl}.g." + _GATE_KEYS[k]] = v
        return out["f_sr"], out["f_ref"]

    gf2 = _conv_back(params, "dec.out", gi["decoded"], c, grads)
    gd2, ga0 = fuse_back(gf2, c["fc2"], 1)
    gu = _conv_back(params, "dec.hr", gd2 * (c["d2"] > 0), c, grads)
    gf1 = bicubic_resize_backward(gu, c["f1_shape"])
    gd1, ga1 = fuse_back(gf1, c["fc1"], 0)
    _backbone_backward(params, _conv_back(params, "dec.lr", gd1, c, grads), c, grads)

    # reference features through patch affine and coarse warp
    gr0m, g = c["s2"].backward(ga0, c["r0m"])
    gres = gres + g
    gr1m, g = c["s1"].backward(ga1, c["r1m"])
    gres = gres + g
    r0, r1 = c["r0"], c["r1"]
    gr1 = np.concatenate([warp._apply_rows(P.ops[b][1].T.tocsr(), gr1m[b:b + 1], r1.shape[2:])
                          for b in range(B)])
    gr0 = np.concatenate([warp._apply_rows(P.ops[b][2].T.tocsr(), gr0m[b:b + 1], r0.shape[2:])
                          for b in range(B)])
    gr0d = _conv_back(params, "psi.1", gr1 * (r1 > 0), c, grads)
    gr0 = (gr0 + bicubic_resize_backward(gr0d, r0.shape)) * (r0 > 0)
    _conv_back(params, "psi.0", gr0, c, grads)

    for i, (gw, gb) in enumerate(warp.predict_alignment_backward(gres, c["tcache"])):
        grads[f"t.{i}.w"], grads[f"t.{i}.b"] = gw, gb

    out = {}
    for name, t in params.tensors.items():
        if trainable(name):
            out[name] = grads[name] if name in grads else np.zeros_like(t, dtype=grad_sr.dtype)
    return out


def to_image(x):
    """(1,3,H,W) tensor -> (H,W,3) array clamped to [0, 1]."""
    return np.clip(np.moveaxis(np.asarray(x)[0], 0, -1), 0.0, 1.0)


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(params, path):
    """Write a one-line JSON manifest followed by a little-endian float32 payload."""
    index, chunks, offset = [], [], 0
    for name, t in params.tensors.items():
        data = np.ascontiguousarray(t, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(t.shape), "offset": offset, "bytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {"config": params.config.to_dict(), "fingerprint": params.config.fingerprint(),
                "seed": params.seed, "checksum": params.checksum(), "tensors": index,
                "payload_bytes": offset}
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for data in chunks:
            fh.write(data)
    return path


def load_checkpoint(path, config=None):
    """Read a checkpoint; if ``config`` is given its fingerprint must match."""
    with open(path, "rb") as fh:
        if fh.readline() != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        try:
            manifest = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
        payload = fh.read()
    stored = ModelConfig.from_dict(manifest["config"])
    if stored.fingerprint() != manifest["fingerprint"]:
        raise CheckpointError(f"manifest fingerprint {manifest['fingerprint']} does not match "
                              f"its config ({stored.fingerprint()})")
    if config is not None and config.fingerprint() != manifest["fingerprint"]:
        raise CheckpointError(f"config fingerprint mismatch: checkpoint has {manifest['fingerprint']}, "
                              f"expected {config.fingerprint()}")
    expected = layer_shapes(stored)
    tensors = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        end = entry["offset"] + entry["bytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated inside tensor {name!r} "
                                  f"(needs {end} bytes, have {len(payload)})")
        shape = tuple(entry["shape"])
        if expected.get(name) != shape:
            raise CheckpointError(f"tensor {name!r} has shape {shape}, config expects {expected.get(name)}")
        t = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=entry["offset"])
        tensors[name] = t.reshape(shape).astype(np.float32)
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    params = ModelParams(stored, manifest["seed"], {k: tensors[k] for k in expected})
    if not all(np.isfinite(t).all() for t in params.tensors.values()):
        raise CheckpointError(f"{path}: non-finite weights")
    return params
