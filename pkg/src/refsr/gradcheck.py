"""Finite-difference verification of every hand-written backward pass.

Each check draws a random float64 instance, contracts the op's output with a
random weight tensor R to get a scalar, and compares the analytic directional
derivative along random directions with a central difference. The relative
error is |a - n| / max(|a|, |n|, floor).

ReLU, |x|, clamping and bilinear interpolation are only piecewise smooth.
A central difference whose segment straddles a kink is not an estimate of
the derivative, so every difference is taken at two step sizes; when the two
disagree the direction is redrawn and the event is counted as a kink skip.
A wrong gradient still shows up as two agreeing differences that disagree
with the analytic value.
"""
from dataclasses import dataclass
import time

import numpy as np

from . import fusion, losses, model, numerics as nx, warp

H_STEP = 1e-6
FLOOR = 1e-7
PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
N_INSTANCES = 20
N_DIRECTIONS = 2
KINK_RATIO = 10.0
KINK_TOL = 1e-5
MAX_REDRAWS = 8


@dataclass
class CheckResult:
    name: str
    kind: str
    instances: int
    max_rel: float
    seconds: float
    kinks: int = 0

    @property
    def tol(self):
        return PRIMITIVE_TOL if self.kind == "primitive" else COMPOSITE_TOL

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel) and self.max_rel < self.tol)


def rel_error(a, n, floor=FLOOR):
    return abs(a - n) / max(abs(a), abs(n), floor)


def central_difference(f, h):
    """Derivative estimate from ``f(t)`` (scalar function of the step) with kink detection.

    Returns None when estimates at ``h`` and ``h / KINK_RATIO`` disagree by
    more than their relative tolerance plus the rounding noise of the finer one.
    """
    hf = h / KINK_RATIO
    vals = [f(h), f(-h), f(hf), f(-hf)]
    coarse = (vals[0] - vals[1]) / (2 * h)
    fine = (vals[2] - vals[3]) / (2 * hf)
    noise = 100 * np.finfo(np.float64).eps * max(1.0, *map(abs, vals)) / hf
    if abs(coarse - fine) > KINK_TOL * max(abs(coarse), abs(fine)) + noise:
        return None
    return coarse


class OnKink(Exception):
    """The instance sits (numerically) on a kink in every direction tried."""


def _directional(step, ana_of, rng, h, kinks):
    """Draw directions until one gives a kink-free difference; returns rel. error."""
    for _ in range(MAX_REDRAWS):
        v = ana_of(rng)
        num = central_difference(lambda t: step(v, t), h)
        if num is not None:
            return rel_error(v["__ana__"], num)
        kinks[0] += 1
    raise OnKink


def directional_check(f, inputs, grads, rng, n_dirs=N_DIRECTIONS, h=H_STEP):
    """Worst relative error of <grad, v> vs a central difference of ``f`` along v.

    ``inputs`` and ``grads`` are dicts of arrays with matching keys; ``f``
    takes a dict like ``inputs`` and returns a float. Each input is perturbed
    on its own, then all together.
    """
    worst = 0.0
    groups = [[k] for k in inputs] + ([list(inputs)] if len(inputs) > 1 else [])
    for keys in groups:
        def draw(r, keys=keys):
            v = {k: r.standard_normal(inputs[k].shape) for k in keys}
            v["__ana__"] = sum(float((grads[k] * v[k]).sum()) for k in keys)
            return v

        def step(v, t, keys=keys):
            return f({**inputs, **{k: inputs[k] + t * v[k] for k in keys}})

        for _ in range(n_dirs):
            worst = max(worst, _directional(step, draw, rng, h, _KINKS))
    return worst


_KINKS = [0]   # running count of redrawn directions


def _contract(out, R):
    return float((out * R).sum())


# ---------------------------------------------------------------------------
# individual instances; each returns the worst relative error for one draw


def _shape(rng, c=None, lo=6, hi=10):
    return (int(rng.integers(1, 3)), c or int(rng.integers(1, 4)),
            int(rng.integers(lo, hi)), int(rng.integers(lo, hi)))


def check_conv2d(rng):
    B, _, H, W = _shape(rng)
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    inp = {"x": rng.standard_normal((B, cin, H, W)), "w": rng.standard_normal((cout, cin, 3, 3)),
           "b": rng.standard_normal(cout)}
    R = rng.standard_normal((B, cout, H, W))
    f = lambda d: _contract(nx.conv2d(d["x"], d["w"], d["b"]), R)
    gx, gw, gb = nx.conv2d_backward(R, inp["x"], inp["w"])
    return directional_check(f, inp, {"x": gx, "w": gw, "b": gb}, rng)


def check_reflect_pad(rng):
    p = int(rng.integers(1, 3))
    inp = {"x": rng.standard_normal(_shape(rng))}
    R = rng.standard_normal(nx.reflect_pad(inp["x"], p).shape)
    f = lambda d: _contract(nx.reflect_pad(d["x"], p), R)
    return directional_check(f, inp, {"x": nx.reflect_pad_adjoint(R, p)}, rng)


def _resize_check(direction):
    def check(rng):
        B, C, H, W = _shape(rng, lo=4, hi=9)
        inp = {"x": rng.standard_normal((B, C, 2 * H, 2 * W) if direction == "down" else (B, C, H, W))}
        R = rng.standard_normal(nx.bicubic_resize(inp["x"], direction).shape)
        f = lambda d: _contract(nx.bicubic_resize(d["x"], direction), R)
        return directional_check(f, inp, {"x": nx.bicubic_resize_backward(R, inp["x"].shape)}, rng)
    return check


def check_bilinear_resize(rng):
    shape = _shape(rng)
    oh, ow = int(rng.integers(4, 20)), int(rng.integers(4, 20))
    inp = {"x": rng.standard_normal(shape)}
    R = rng.standard_normal(shape[:2] + (oh, ow))
    f = lambda d: _contract(nx.bilinear_resize(d["x"], oh, ow), R)
    return directional_check(f, inp, {"x": nx.bilinear_resize_backward(R, shape)}, rng)


def check_gaussian_blur(rng):
    sigma = float(rng.uniform(0.3, 2.0))
    inp = {"x": rng.standard_normal(_shape(rng))}
    R = rng.standard_normal(inp["x"].shape)
    f = lambda d: _contract(nx.gaussian_blur3x3(d["x"], sigma), R)
    return directional_check(f, inp, {"x": nx.gaussian_blur3x3_backward(R, sigma)}, rng)


def check_grid_sample(rng):
    B, C, H, W = _shape(rng)
    Ho, Wo = int(rng.integers(3, 8)), int(rng.integers(3, 8))
    grid = np.stack([rng.uniform(0.1, W - 1.1, (B, Ho, Wo)), rng.uniform(0.1, H - 1.1, (B, Ho, Wo))], -1)
    inp = {"x": rng.standard_normal((B, C, H, W)), "grid": grid}
    R = rng.standard_normal((B, C, Ho, Wo))
    f = lambda d: _contract(nx.grid_sample_bilinear(d["x"], d["grid"]), R)
    gx, gg = nx.grid_sample_bilinear_backward(R, inp["x"], grid)
    return directional_check(f, inp, {"x": gx, "grid": gg}, rng)


def check_fold(rng):
    s = int(rng.integers(1, 3))
    B, C = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    H, W = s * int(rng.integers(3, 6)), s * int(rng.integers(3, 6))
    N, D = (H // s) * (W // s), C * (3 * s) ** 2
    inp = {"p": rng.standard_normal((B, N, D))}
    R = rng.standard_normal((B, C, H, W))
    f = lambda d: _contract(nx.fold_patches(d["p"], H, W, 3, s), R)
    return directional_check(f, inp, {"p": nx.fold_patches_backward(R, 3, s)}, rng)


def check_squash(rng):
    inp = {"raw": 2 * rng.standard_normal((2, 6, 3, 4))}
    R = rng.standard_normal(inp["raw"].shape)
    f = lambda d: _contract(warp.squash(d["raw"]), R)
    return directional_check(f, inp, {"raw": warp.squash_backward(R, inp["raw"])}, rng)


def _gate_params(rng, hidden=4):
    return {"w1": rng.standard_normal((hidden, 1, 3, 3)), "b1": 0.3 * rng.standard_normal(hidden),
            "w2": 0.5 * rng.standard_normal((1, hidden, 3, 3)), "b2": 0.3 * rng.standard_normal(1)}


def check_gate(rng):
    B, _, H, W = _shape(rng)
    g = _gate_params(rng)
    inp = {"conf": rng.uniform(-1, 1, (B, 1, H, W)), **g}
    R = rng.standard_normal((B, 1, H, W))
    f = lambda d: _contract(fusion.gate_forward(d["conf"], d)[0], R)
    out, cache = fusion.gate_forward(inp["conf"], g)
    gc, gp = fusion.gate_backward(R, cache, g)
    return directional_check(f, inp, {"conf": gc, **gp}, rng)


def _fuse_check(mode):
    def check(rng):
        B, C, H, W = _shape(rng)
        g = _gate_params(rng)
        inp = {"f_sr": rng.standard_normal((B, C, H, W)), "f_ref": rng.standard_normal((B, C, H, W)),
               "conf": rng.uniform(-1, 1, (B, 1, H, W)), "h_w": rng.standard_normal((C, 2 * C, 3, 3)),
               "h_b": rng.standard_normal(C), **g}
        R = rng.standard_normal((B, C, H, W))

        def run(d):
            gates = {"g": {k: d[k] for k in g}, "h_w": d["h_w"], "h_b": d["h_b"]}
            return fusion.adaptive_feature_fuse(d["f_sr"], d["f_ref"], d["conf"], gates, mode)

        out, cache = run(inp)
        gr = fusion.adaptive_feature_fuse_backward(R, cache)
        keys = ["f_sr", "f_ref"]
        grads = {"f_sr": gr["f_sr"], "f_ref": gr["f_ref"]}
        if mode != "sum":
            keys += ["conf", "h_w", "h_b"]
            grads.update(conf=gr["conf"], h_w=gr["h_w"], h_b=gr["h_b"])
        if mode == "adaptive":
            keys += list(g)
            grads.update(gr["g"])
        return directional_check(lambda d: _contract(run({**inp, **d})[0], R),
                                 {k: inp[k] for k in keys}, grads, rng)
    return check


def check_hf_residual(rng):
    B, C, H, W = _shape(rng, lo=4, hi=8)
    inp = {"x": rng.standard_normal((B, C, 2 * H, 2 * W))}
    R = rng.standard_normal(inp["x"].shape)
    f = lambda d: _contract(fusion.hf_residual(d["x"]), R)
    return directional_check(f, inp, {"x": fusion.hf_residual_backward(R)}, rng)


def check_image_fuse(rng):
    B, _, H, W = _shape(rng)
    g = _gate_params(rng)
    inp = {"dec": rng.standard_normal((B, 3, H, W)), "hf": rng.standard_normal((B, 3, H, W)),
           "conf": rng.uniform(-1, 1, (B, 1, H, W)), **g}
    R = rng.standard_normal((B, 3, H, W))
    run = lambda d: fusion.image_space_fuse(d["dec"], d["hf"], d["conf"], {k: d[k] for k in g})
    _, cache = run(inp)
    gr = fusion.image_space_fuse_backward(R, cache)
    grads = {"dec": gr["decoded"], "hf": gr["hf"], "conf": gr["conf"], **gr["g_r"]}
    return directional_check(lambda d: _contract(run(d)[0], R), inp, grads, rng)


def check_predict_alignment(rng):
    B = int(rng.integers(1, 3))
    h, w = int(rng.integers(4, 7)), int(rng.integers(4, 7))
    chans = [6, 5, 5, 6]
    inp = {"lr_up": rng.standard_normal((B, 3, 2 * h, 2 * w)),
           "ref": rng.standard_normal((B, 3, 2 * h, 2 * w))}
    for i in range(3):
        inp[f"w{i}"] = rng.standard_normal((chans[i + 1], chans[i], 3, 3)) / np.sqrt(9 * chans[i])
        inp[f"b{i}"] = 0.1 * rng.standard_normal(chans[i + 1])
    R = rng.standard_normal((B, 6, h, w))

    def run(d):
        tp = [(d[f"w{i}"], d[f"b{i}"]) for i in range(3)]
        return warp.predict_alignment(inp["lr_up"], inp["ref"], tp, grid=(h, w))

    params = {k: v for k, v in inp.items() if k[0] in "wb"}
    field, cache = run(params)
    gl = warp.predict_alignment_backward(R, cache)
    grads = {}
    for i, (gw, gb) in enumerate(gl):
        grads[f"w{i}"], grads[f"b{i}"] = gw, gb
    return directional_check(lambda d: _contract(run(d)[0].residual, R), params, grads, rng)


def _patch_affine_check(scale):
    def check(rng):
        B, C = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        h, w = int(rng.integers(3, 6)), int(rng.integers(3, 6))
        inp = {"feat": rng.standard_normal((B, C, h * scale, w * scale)),
               "res": 0.3 * rng.uniform(-1, 1, (B, 6, h, w))}
        R = rng.standard_normal(inp["feat"].shape)
        run = lambda d: warp.apply_patch_affine(d["feat"], warp.AffineField(d["res"]), scale)
        gf, gres = warp.apply_patch_affine_backward(R, inp["feat"], warp.AffineField(inp["res"]), scale)
        return directional_check(lambda d: _contract(run(d), R), inp, {"feat": gf, "res": gres}, rng)
    return check


def check_warp_by_index(rng):
    from .matching import match_features
    s = int(rng.integers(1, 3))
    h, w, hr, wr = (int(v) for v in rng.integers(3, 6, 4))
    m = match_features(rng.standard_normal((4, h, w)), rng.standard_normal((4, hr, wr)))
    inp = {"src": rng.standard_normal((1, 2, hr * s, wr * s))}
    R = rng.standard_normal((1, 2, h * s, w * s))
    _, M = warp.warp_by_index(inp["src"], m, s)
    f = lambda d: _contract(warp.warp_by_index(d["src"], m, s)[0], R)
    return directional_check(f, inp, {"src": warp.warp_by_index_backward(R, M, inp["src"].shape)}, rng)


def check_contextual(rng):
    B, C = int(rng.integers(1, 3)), int(rng.integers(2, 5))
    x = rng.standard_normal((B, C, 5, 6))
    y = rng.standard_normal((B, C, int(rng.integers(3, 7)), 5))
    _, _, a = losses.contextual_distance(x, y)
    R = rng.standard_normal((B, 5, 6))
    f = lambda d: _contract(losses.contextual_distance(d["x"], y, a)[0], R)
    return directional_check(f, {"x": x}, {"x": losses.contextual_distance_backward(R, x, y, a)}, rng)


def _embed(rng, c=6):
    return losses.PixelEmbedding(rng.standard_normal((c, 3, 3, 3)) / 5, 0.1 * rng.standard_normal(c))


def check_reconstruction(rng):
    B, H, W = int(rng.integers(1, 3)), int(rng.integers(6, 10)), int(rng.integers(6, 10))
    sr, hr = rng.random((B, 3, H, W)), rng.random((B, 3, H, W))
    emb = _embed(rng)
    lv = losses.reconstruction_loss(sr, hr, emb)
    f = lambda d: losses.reconstruction_loss(d["sr"], hr, emb, lv.assignments["rec"]).value
    return directional_check(f, {"sr": sr}, {"sr": lv.grad}, rng)


def check_fidelity(rng):
    B, H, W = int(rng.integers(1, 3)), int(rng.integers(6, 10)), int(rng.integers(6, 10))
    sr, ref = rng.random((B, 3, 2 * H, 2 * W)), rng.random((B, 3, H, W))
    conf = rng.uniform(-0.2, 1.0, (B, 1, H, W))
    emb = _embed(rng)
    lv = losses.fidelity_loss(sr, ref, conf, emb)
    f = lambda d: losses.fidelity_loss(d["sr"], ref, conf, emb, lv.assignments["fid"]).value
    return directional_check(f, {"sr": sr}, {"sr": lv.grad}, rng)


def check_sra(rng):
    B, H, W = int(rng.integers(1, 3)), int(rng.integers(6, 10)), int(rng.integers(6, 10))
    sr, wide, tele = rng.random((B, 3, 2 * H, 2 * W)), rng.random((B, 3, H, W)), rng.random((B, 3, H, W))
    conf = rng.uniform(0, 1, (B, 1, H, W))
    emb = _embed(rng)
    lam = float(rng.uniform(0, 1))
    lv = losses.sra_loss(sr, wide, tele, conf, emb, lam)
    f =lambda d: losses.sra_loss(d["sr"], wide, tele, conf, emb, lam, lv.assignments.get("fid")).value
    return directional_check(f, {"sr": sr}, {"sr": lv.grad}, rng)


# ---------------------------------------------------------------------------
# end to end: scalar training loss -> every trainable parameter


TOY_CONFIG = model.ModelConfig(phi_channels=6, psi_channels=(4, 6), backbone_channels=8,
                               n_resblocks=1, t_channels=6, gate_hidden=4)


def toy_params(rng, config=TOY_CONFIG):
    """Float64 parameters with every bias and the last transformer layer made non-zero."""
    p = model.init_params(int(rng.integers(0, 2 ** 31)), config).astype(np.float64)
    for k, t in p.tensors.items():
        if k.startswith("t.3") or k.endswith(".b"):
            p.tensors[k] = 0.05 * rng.standard_normal(t.shape)
    return p


SAMPLED_WEIGHTS = 50


def _sparsify(v, rng, n):
    """Zero all but ``n`` randomly chosen entries of the direction ``v``."""
    sizes = [v[k].size for k in v]
    keep = np.zeros(sum(sizes), dtype=bool)
    keep[rng.choice(keep.size, min(n, keep.size), replace=False)] = True
    out, start = {}, 0
    for k, size in zip(v, sizes):
        out[k] = np.where(keep[start:start + size].reshape(v[k].shape), v[k], 0.0)
        start += size
    return out


def _e2e_check(loss_name, fusion_mode="adaptive"):
    def check(rng):
        p = toy_params(rng)
        lr = rng.random((1, 3, 16, 16))
        ref = rng.random((1, 3, 16, 16))
        hr = rng.random((1, 3, 32, 32))
        prep = model.prepare(p, lr, ref)
        embed = p.embedding()

        def loss(params, assign=None):
            tr = model.forward(params, lr, ref, prepared=prep, fusion_mode=fusion_mode)
            if loss_name == "l1":
                return losses.l1_loss(tr.sr, hr), tr
            if loss_name == "sra":
                return losses.sra_loss(tr.sr, lr, ref, prep.conf_lr, embed, 0.5,
                                       (assign or {}).get("fid")), tr
            rec = losses.reconstruction_loss(tr.sr, hr, embed, (assign or {}).get("rec"))
            fid = losses.fidelity_loss(tr.sr, ref, prep.conf_lr, embed, (assign or {}).get("fid"))
            return losses.LossValue(rec.value + 0.5 * fid.value, rec.grad + 0.5 * fid.grad, {},
                                    {**rec.assignments, **fid.assignments}), tr

        lv, tr = loss(p)
        grads = model.backward(p, tr, lv.grad)
        names = sorted(grads)
        # a few single tensors, all trainable parameters jointly, and a
        # direction supported on SAMPLED_WEIGHTS randomly chosen scalars
        picks = [names[i] for i in rng.choice(len(names), 3, replace=False)]
        worst = 0.0
        for keys, sparse in [([k], False) for k in picks] + [(names, False), (names, True)]:
            def draw(r, keys=keys, sparse=sparse):
                v = {k: r.standard_normal(p.tensors[k].shape) for k in keys}
                if sparse:
                    v = _sparsify(v, r, SAMPLED_WEIGHTS)
                v["__ana__"] = sum(float((grads[k] * v[k]).sum()) for k in keys)
                return v

            def step(v, t, keys=keys):
                q = p.copy()
                for k in keys:
                    q.tensors[k] = p.tensors[k] + t * v[k]
                return loss(q, lv.assignments)[0].value

            worst = max(worst, _directional(step, draw, rng, H_STEP, _KINKS))
        return worst
    return check


PRIMITIVES = {
    "conv2d": check_conv2d,
    "reflect_pad": check_reflect_pad,
    "bicubic_resize_up": _resize_check("up"),
    "bicubic_resize_down": _resize_check("down"),
    "bilinear_resize": check_bilinear_resize,
    "gaussian_blur3x3": check_gaussian_blur,
    "grid_sample_bilinear": check_grid_sample,
    "fold_patches": check_fold,
    "squash": check_squash,
    "warp_by_index": check_warp_by_index,
}

COMPOSITES = {
    "gate": check_gate,
    "adaptive_feature_fuse[adaptive]": _fuse_check("adaptive"),
    "adaptive_feature_fuse[soft]": _fuse_check("soft"),
    "adaptive_feature_fuse[sum]": _fuse_check("sum"),
    "hf_residual": check_hf_residual,
    "image_space_fuse": check_image_fuse,
    "predict_alignment": check_predict_alignment,
    "apply_patch_affine[scale=1]": _patch_affine_check(1),
    "apply_patch_affine[scale=2]": _patch_affine_check(2),
    "contextual_distance": check_contextual,
    "reconstruction_loss": check_reconstruction,
    "fidelity_loss": check_fidelity,
    "sra_loss": check_sra,
    "end_to_end[rec+fid]": _e2e_check("full"),
    "end_to_end[l1]": _e2e_check("l1"),
    "end_to_end[sra]": _e2e_check("sra"),
    "end_to_end[soft]": _e2e_check("l1", "soft"),
}


def run_suite(seed=1, instances=N_INSTANCES, only=None):
    """Run every check ``instances`` times; returns a list of :class:`CheckResult`."""
    results = []
    table = [(n, "primitive", c) for n, c in PRIMITIVES.items()] + \
            [(n, "composite", c) for n, c in COMPOSITES.items()]
    for i, (name, kind, check) in enumerate(table):
        if only and name not in only:
            continue
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        before = _KINKS[0]
        worst, done, redraws = 0.0, 0, 0
        while done < instances:
            try:
                worst = max(worst, check(rng))
                done += 1
            except OnKink:
                redraws += 1
                if redraws > instances:
                    worst = float("inf")
                    break
        results.append(CheckResult(name, kind, instances, worst, time.perf_counter() - t0,
                                   _KINKS[0] - before))
    return results


def format_report(results):
    lines = [f"{'op':36s} {'kind':9s} {'n':>3s} {'max_rel':>10s} {'tol':>7s} {'kinks':>5s}  status"]
    for r in results:
        lines.append(f"{r.name:36s} {r.kind:9s} {r.instances:3d} {r.max_rel:10.2e} {r.tol:7.0e} "
                     f"{r.kinks:5d}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
