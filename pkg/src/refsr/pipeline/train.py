"""Training, evaluation, and self-supervised adaptation loops."""
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import model as M
from ..images import to_tensor
from ..losses import SRA_LAMBDA, W_FID, l1_loss, fidelity_loss, reconstruction_loss, sra_loss
from ..numerics import bicubic_resize
from .data import synth_dataset
from .metrics import psnr, ssim

log = logging.getLogger(__name__)

LOSS_MODES = ("full", "l1")
LOG_FIELDS = ("step", "loss_total", "loss_rec", "loss_fid", "eval_psnr", "eval_ssim")
EVAL_SEED_OFFSET = 10_000


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 200
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    w_fid: float = W_FID
    sra_lambda: float = SRA_LAMBDA
    extent: int = 64
    n_train: int = 64
    n_eval: int = 16
    search: str = "full"
    fusion_mode: str = "adaptive"
    loss: str = "full"
    eval_every: int = 0          # 0: evaluate only after the last step
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("steps", "batch_size", "extent", "n_train", "n_eval"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.w_fid < 0 or self.sra_lambda < 0 or self.eval_every < 0:
            raise ValueError("w_fid, sra_lambda and eval_every must be non-negative")
        if self.search not in ("full", "tiled"):
            raise ValueError(f"unknown search mode {self.search!r}")
        if self.fusion_mode not in ("adaptive", "soft", "sum"):
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}")
        if self.extent % 4 or self.extent < 32:
            raise ValueError("extent must be a multiple of 4 and >= 32")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self):
        return M.ModelConfig.from_dict({**self.model, "fusion_mode": self.fusion_mode})


class Adam:
    """Adaptive-moment descent with bias-corrected first and second moments."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name].astype(params[name].dtype)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[name] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[name].dtype)


# ---------------------------------------------------------------------------
# cached per-pair preparation


def stack_prepared(items):
    """Concatenate single-pair :class:`Prepared` results into one batch."""
    cat = lambda name: np.concatenate([getattr(p, name) for p in items])
    return M.Prepared(cat("lr_up"), [m for p in items for m in p.matches], cat("conf_lr"),
                      cat("conf_hr"), cat("ref_matched"), cat("hf_matched"),
                      [o for p in items for o in p.ops])


class PairCache:
    """Tensors and :func:`model.prepare` results for a fixed list of (lr, ref[, target]) pairs."""

    def __init__(self, params, lrs, refs, search="full", dtype=np.float32):
        self.lr = [to_tensor(x, dtype) for x in lrs]
        self.ref = [to_tensor(x, dtype) for x in refs]
        self.prepared = [M.prepare(params, l, r, search) for l, r in zip(self.lr, self.ref)]

    def __len__(self):
        return len(self.lr)

    def batch(self, idx):
        return (np.concatenate([self.lr[i] for i in idx]), np.concatenate([self.ref[i] for i in idx]),
                stack_prepared([self.prepared[i] for i in idx]))


# ---------------------------------------------------------------------------
# evaluation


def bicubic_baseline(lr):
    return np.clip(np.moveaxis(bicubic_resize(np.moveaxis(lr, -1, 0)[None], "up")[0], 0, -1), 0, 1)


def super_resolve(params, lr, ref, search="full", fusion_mode=None, prepared=None):
    """(H, W, 3) lr and ref images -> (2H, 2W, 3) image plus the forward trace."""
    tr = M.forward(params, to_tensor(lr), to_tensor(ref), search, prepared, fusion_mode)
    return M.to_image(tr.sr), tr


def evaluate(params, lrs, refs, targets, search="full", fusion_mode=None, cache=None):
    """Mean PSNR/SSIM of model outputs and of bicubic upsampling, plus mean image gate."""
    rows = []
    for i, (lr, ref, hr) in enumerate(zip(lrs, refs, targets)):
        prep = cache.prepared[i] if cache is not None else None
        sr, tr = super_resolve(params, lr, ref, search, fusion_mode, prep)
        bic = bicubic_baseline(lr)
        rows.append((psnr(sr, hr), ssim(sr, hr), psnr(bic, hr), ssim(bic, hr), tr.gate_means["image"]))
    r = np.mean(rows, axis=0)
    return {"psnr": r[0], "ssim": r[1], "bicubic_psnr": r[2], "bicubic_ssim": r[3], "gate": r[4],
            "per_pair": rows}


def gate_activation(params, lrs, refs, search="full"):
    """Mean image-space gate g_r(C) over a set of pairs."""
    vals = [super_resolve(params, l, r, search)[1].gate_means["image"] for l, r in zip(lrs, refs)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: M.ModelParams
    rows: list
    final_eval: dict
    checkpoint: Path = None


def _loss(config, sr, hr, ref, conf, embed):
    if config.loss == "l1":
        lv = l1_loss(sr, hr)
        return lv.value, lv.grad, lv.value, 0.0
    rec = reconstruction_loss(sr, hr, embed)
    total, grad, fid_value = rec.value, rec.grad, 0.0
    if config.w_fid > 0:
        fid = fidelity_loss(sr, ref, conf, embed)
        total += config.w_fid * fid.value
        grad = grad + config.w_fid * fid.grad
        fid_value = fid.value
    return total, grad, rec.value, fid_value


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, LOG_FIELDS)
        w.writeheader()
        w.writerows(rows)


def train(config, out_dir=None, train_pairs=None, eval_pairs=None, init=None):
    """Train from ``config``; writes ``metrics.csv`` and ``model.ckpt`` into ``out_dir`` if given."""
    params = init.copy() if init is not None else M.init_params(config.seed, config.model_config())
    if train_pairs is None:
        train_pairs = synth_dataset(config.seed, config.n_train, config.extent)
    if eval_pairs is None:
        eval_pairs = synth_dataset(config.seed + EVAL_SEED_OFFSET, config.n_eval, config.extent)
    data = PairCache(params, [p.lr for p in train_pairs], [p.ref for p in train_pairs], config.search)
    hrs = [to_tensor(p.hr) for p in train_pairs]
    ev = PairCache(params, [p.lr for p in eval_pairs], [p.ref for p in eval_pairs], config.search)
    evargs = ([p.lr for p in eval_pairs], [p.ref for p in eval_pairs], [p.hr for p in eval_pairs],
              config.search, config.fusion_mode, ev)

    embed = params.embedding()
    opt = Adam({k: v for k, v in params.tensors.items() if M.trainable(k)},
               config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    order, cursor = rng.permutation(len(data)), 0
    bs = min(config.batch_size, len(data))
    rows, result = [], None

    for step in range(1, config.steps + 1):
        if cursor + bs > len(order):
            order, cursor = rng.permutation(len(data)), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        lr, ref, prep = data.batch(idx)
        hr = np.concatenate([hrs[i] for i in idx])
        tr = M.forward(params, lr, ref, config.search, prep, config.fusion_mode)
        total, grad, rec, fid = _loss(config, tr.sr, hr, ref, prep.conf_lr, embed)
        if not np.isfinite(total):
            raise TrainingError(f"non-finite loss at step {step}")
        opt.step(params.tensors, M.backward(params, tr, grad))
        row = {"step": step, "loss_total": total, "loss_rec": rec, "loss_fid": fid,
               "eval_psnr": "", "eval_ssim": ""}
        if step == config.steps or (config.eval_every and step % config.eval_every == 0):
            result = evaluate(params, *evargs)
            row["eval_psnr"], row["eval_ssim"] = result["psnr"], result["ssim"]
            log.info("step %d loss %.5f eval psnr %.3f (bicubic %.3f)", step, total,
                     result["psnr"], result["bicubic_psnr"])
        rows.append(row)

    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "metrics.csv", rows)
        ckpt = M.save_checkpoint(params, out / "model.ckpt")
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return TrainResult(params, rows, result, ckpt)


# ---------------------------------------------------------------------------
# self-supervised adaptation


@dataclass
class AdaptResult:
    params: M.ModelParams
    rows: list
    before: dict
    after: dict
    checkpoint: Path = None


def sra_objective(params, cache, lam, search="full", idx=None):
    """Mean sra_loss terms over the cached (wide, tele) pairs."""
    embed = params.embedding()
    idx = range(len(cache)) if idx is None else idx
    vals = []
    for i in idx:
        lr, ref, prep = cache.batch([i])
        tr = M.forward(params, lr, ref, search, prep)
        lv = sra_loss(tr.sr, lr, ref, prep.conf_lr, embed, lam)
        vals.append((lv.value, lv.terms["consistency"], lv.terms["fid"]))
    v = np.mean(vals, axis=0)
    return {"sra_loss": float(v[0]), "consistency": float(v[1]), "fid": float(v[2])}


def adapt_sra(params, wides, teles, config, out_dir=None):
    """Fine-tune on ground-truth-free (wide, tele) pairs by minimising sra_loss only.

    Uses ``config.steps``, ``batch_size``, optimizer settings and ``sra_lambda``.
    """
    params = params.copy()
    cache = PairCache(params, wides, teles, config.search)
    embed = params.embedding()
    lam = config.sra_lambda
    before = sra_objective(params, cache, lam, config.search)
    opt = Adam({k: v for k, v in params.tensors.items() if M.trainable(k)},
               config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    bs = min(config.batch_size, len(cache))
    order, cursor = rng.permutation(len(cache)), 0
    rows = []
    for step in range(1, config.steps + 1):
        if cursor + bs > len(order):
            order, cursor = rng.permutation(len(cache)), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        lr, ref, prep = cache.batch(idx)
        tr = M.forward(params, lr, ref, config.search, prep)
        lv = sra_loss(tr.sr, lr, ref, prep.conf_lr, embed, lam)
        if not np.isfinite(lv.value):
            raise TrainingError(f"non-finite loss at step {step}")
        opt.step(params.tensors, M.backward(params, tr, lv.grad))
        rows.append({"step": step, "loss_total": lv.value, "loss_rec": lv.terms["consistency"],
                     "loss_fid": lv.terms["fid"], "eval_psnr": "", "eval_ssim": ""})
    after = sra_objective(params, cache, lam, config.search)
    log.info("sra_loss %.5f -> %.5f", before["sra_loss"], after["sra_loss"])
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "metrics.csv", rows)
        ckpt = M.save_checkpoint(params, out / "model.ckpt")
        (out / "sra.json").write_text(json.dumps({"before": before, "after": after}, indent=2))
    return AdaptResult(params, rows, before, after, ckpt)


def domain_eval(params, real_pairs, search="full"):
    """Mean PSNR against the held-out camera-domain targets."""
    return float(np.mean([psnr(super_resolve(params, p.wide, p.tele, search)[0], p.target)
                          for p in real_pairs]))
