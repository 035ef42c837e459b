"""Small, seeded experiments measuring the directional claims of the method.

Each function returns plain numbers so tests, scripts and the CLI can share
them. Budgets are chosen to run in minutes on one CPU core.
"""
from dataclasses import dataclass, replace

import numpy as np

from .. import warp
from ..numerics import gaussian_blur3x3
from .data import real_dataset, synth_dataset, texture
from .train import Adam, TrainConfig, adapt_sra, domain_eval, super_resolve, train

ABLATION_CONFIG = TrainConfig(steps=150, extent=32, n_train=32, n_eval=16)


# ---------------------------------------------------------------------------
# per-patch affine recovery


@dataclass
class AlignmentTrial:
    unaligned: float
    aligned: float

    @property
    def reduction(self):
        return 1.0 - self.aligned / self.unaligned if self.unaligned > 0 else 0.0


def _smooth_texture(rng, n):
    img = np.moveaxis(texture(rng, n), -1, 0)[None]
    for _ in range(2):
        img = gaussian_blur3x3(img, 1.0)
    return img[0]


def _residual_affine(raw, bound_scale, bound_trans):
    r = warp.squash(raw.reshape(1, 6, 1, 1), bound_scale, bound_trans).reshape(6)
    return np.array([[1 + r[0], r[1], r[2]], [r[3], 1 + r[4], r[5]]])


def alignment_trial(rng, size=9, extent=48, steps=150, lr=0.05,
                    bound_scale=warp.BOUND_SCALE, bound_trans=warp.BOUND_TRANS):
    """Recover a known within-bounds affine misalignment of one patch by gradient descent.

    The target patch is sampled from a smooth texture through a random
    rotation (up to 10 degrees), scale (0.9 to 1.1) and shift (up to 1.5 px)
    about the patch centre. The estimate starts at the identity and is
    optimised through the same bounded residual used by the alignment network.
    """
    src = _smooth_texture(rng, extent)
    c = (extent - 1) / 2.0
    center = (c + rng.uniform(-4, 4), c + rng.uniform(-4, 4))
    th = np.deg2rad(rng.uniform(-10, 10))
    s = rng.uniform(0.9, 1.1)
    t = rng.uniform(-1.5, 1.5, size=2)
    true = np.array([[s * np.cos(th), -s * np.sin(th), t[0]], [s * np.sin(th), s * np.cos(th), t[1]]])
    target = warp.patch_affine_sample(src, center, true, size)[0]

    def l2(A):
        return float(((warp.patch_affine_sample(src, center, A, size)[0] - target) ** 2).sum())

    raw = np.zeros(6)
    opt = Adam({"raw": raw}, lr=lr)
    for _ in range(steps):
        A = _residual_affine(raw, bound_scale, bound_trans)
        patch, taps, du, dv = warp.patch_affine_sample(src, center, A, size)
        gA = warp.patch_affine_sample_backward(src, taps, du, dv, 2 * (patch - target))
        g = np.array([gA[0, 0], gA[0, 1], gA[0, 2], gA[1, 0], gA[1, 1], gA[1, 2]])
        graw = warp.squash_backward(g.reshape(1, 6, 1, 1), raw.reshape(1, 6, 1, 1),
                                    bound_scale, bound_trans).reshape(6)
        opt.step({"raw": raw}, {"raw": graw})
    return AlignmentTrial(l2(np.eye(2, 3)), l2(_residual_affine(raw, bound_scale, bound_trans)))


def alignment_recoverability(n=50, seed=0, **kw):
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
    return [alignment_trial(r, **kw) for r in rngs]


# ---------------------------------------------------------------------------
# training ablations


def _eval_pairs(config):
    return synth_dataset(config.seed + 10_000, config.n_eval, config.extent)


def fusion_ablation(seed, base=ABLATION_CONFIG):
    """Eval PSNR of adaptive vs summation fusion under an identical budget."""
    out = {}
    for mode in ("adaptive", "sum"):
        out[mode] = train(replace(base, seed=seed, fusion_mode=mode)).final_eval["psnr"]
    return out


def feature_gate_activation(params, pairs, search="full"):
    """Mean of the feature-fusion gates g(C) (both decoder levels) over ``pairs``."""
    vals = []
    for p in pairs:
        gm = super_resolve(params, p.lr, p.ref, search)[1].gate_means
        vals.append((gm["level0"] + gm["level1"]) / 2)
    return float(np.mean(vals))


def fidelity_ablation(seed, w_fid=0.1, base=ABLATION_CONFIG):
    """Mean feature-gate activation with and without the fidelity term."""
    cfg = replace(base, seed=seed, fusion_mode="adaptive", loss="full")
    pairs = _eval_pairs(cfg)
    out = {}
    for w in (0.0, w_fid):
        params = train(replace(cfg, w_fid=w), eval_pairs=pairs[:2]).params
        out[w] = feature_gate_activation(params, pairs, cfg.search)
    return out


def sra_ablation(seed, base=ABLATION_CONFIG, adapt_steps=60, n_pairs=16):
    """Domain-shifted eval PSNR before and after self-supervised adaptation.

    A model is trained on synthetic pairs, adapted on one set of camera-domain
    (wide, tele) pairs without ground truth, and scored on a disjoint set.
    """
    cfg = replace(base, seed=seed)
    params = train(cfg, eval_pairs=_eval_pairs(cfg)[:2]).params
    adapt_set = real_dataset(seed + 20_000, n_pairs, cfg.extent)
    held_out = real_dataset(seed + 30_000, n_pairs, cfg.extent)
    res = adapt_sra(params, [p.wide for p in adapt_set], [p.tele for p in adapt_set],
                    replace(cfg, steps=adapt_steps))
    return {"before": domain_eval(params, held_out, cfg.search),
            "after": domain_eval(res.params, held_out, cfg.search),
            "sra_before": res.before["sra_loss"], "sra_after": res.after["sra_loss"]}
