"""Procedural dual-camera pairs.

``hr`` plays the wide-angle image at full resolution, ``lr`` its bicubic x2
downsample, and ``ref`` a telephoto analog: the central crop of ``hr``
resampled through a small random affine (rotation, scale, shift) and given
a per-channel gain.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, ImageDraw

from ..images import as_image, read_png, to_tensor, write_png
from ..numerics import BilinearTaps, bicubic_resize, gaussian_blur3x3

MAX_ROTATION_DEG = 10.0
SCALE_RANGE = (0.9, 1.1)
MAX_SHIFT = 4.0
GAIN_RANGE = (0.9, 1.1)
CROP_FRACTION = 0.5


@dataclass
class SynthPair:
    hr: np.ndarray
    lr: np.ndarray
    ref: np.ndarray
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# textures


def _sinusoids(rng, n, k=4):
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    out = np.zeros((n, n, 3))
    for _ in range(k):
        period = rng.uniform(4.0, 16.0)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
        out += wave[..., None] * rng.uniform(-1, 1, size=3)
    return out / k


def _grating(rng, n):
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    period = rng.uniform(5.0, 12.0)
    theta = rng.uniform(0, np.pi)
    t = (xx * np.cos(theta) + yy * np.sin(theta)) / period
    bars = np.tanh(3.0 * np.sin(2 * np.pi * t))
    return bars[..., None] * rng.uniform(-1, 1, size=3)


def _polygons(rng, n, count, supersample=4):
    size = n * supersample
    canvas = PILImage.new("RGB", (size, size), (0, 0, 0))
    mask = PILImage.new("L", (size, size), 0)
    draw, mdraw = ImageDraw.Draw(canvas), ImageDraw.Draw(mask)
    for _ in range(count):
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(0.08, 0.3) * size
        k = rng.integers(3, 7)
        ang = np.sort(rng.uniform(0, 2 * np.pi, k))
        pts = [(float(cx + r * np.cos(a)), float(cy + r * np.sin(a))) for a in ang]
        colour = tuple(int(v) for v in rng.integers(0, 256, 3))
        draw.polygon(pts, fill=colour)
        mdraw.polygon(pts, fill=255)
    rgb = np.asarray(canvas, dtype=np.float64) / 255.0
    alpha = np.asarray(mask, dtype=np.float64) / 255.0
    # box-filter supersampling for anti-aliased edges
    rgb = rgb.reshape(n, supersample, n, supersample, 3).mean(axis=(1, 3))
    alpha = alpha.reshape(n, supersample, n, supersample).mean(axis=(1, 3))
    return rgb, alpha[..., None]


def texture(rng, n):
    """A colour texture in [0.1, 0.9] with repeated, matchable structure."""
    base = rng.uniform(0.3, 0.7, size=3) + 0.25 * _sinusoids(rng, n)
    if rng.random() < 0.6:
        base = base + 0.2 * _grating(rng, n)
    poly, alpha = _polygons(rng, n, int(rng.integers(2, 6)))
    img = base * (1 - 0.8 * alpha) + 0.8 * alpha * poly
    return np.clip(img, 0.1, 0.9)


# ---------------------------------------------------------------------------
# reference synthesis


def random_affine(rng, crop_shape):
    """2x3 matrix mapping a reference pixel (x, y, 1) into hr coordinates.

    The map rotates and scales about the crop centre and then shifts.
    """
    theta = np.deg2rad(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    scale = rng.uniform(*SCALE_RANGE)
    shift = rng.uniform(-MAX_SHIFT, MAX_SHIFT, size=2)
    return theta, scale, shift


def affine_matrix(theta, scale, shift, crop_origin, crop_shape):
    ch, cw = crop_shape
    oy, ox = crop_origin
    c = np.array([ox + (cw - 1) / 2.0, oy + (ch - 1) / 2.0])
    R = scale * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    local = np.array([(cw - 1) / 2.0, (ch - 1) / 2.0])
    # hr = c + R (p - local) + shift
    t = c - R @ local + shift
    return np.hstack([R, t[:, None]])


def render_reference(hr, affine, crop_shape):
    """Resample ``hr`` (H, W, 3) on the crop grid through ``affine``."""
    ch, cw = crop_shape
    ys, xs = np.mgrid[0:ch, 0:cw].astype(np.float64)
    x = affine[0, 0] * xs + affine[0, 1] * ys + affine[0, 2]
    y = affine[1, 0] * xs + affine[1, 1] * ys + affine[1, 2]
    taps = BilinearTaps(hr.shape[0], hr.shape[1], x, y)
    return np.moveaxis(taps.sample(np.moveaxis(hr, -1, 0)), 0, -1)


def downsample(img):
    """Bicubic /2 of an (H, W, C) image."""
    return np.moveaxis(bicubic_resize(np.moveaxis(img, -1, 0)[None], "down")[0], 0, -1)


def upsample(img):
    return np.moveaxis(bicubic_resize(np.moveaxis(img, -1, 0)[None], "up")[0], 0, -1)


def make_pair(rng, extent, crop_fraction=CROP_FRACTION):
    if extent % 4 or extent < 32:
        raise ValueError("extent must be a multiple of 4 and >= 32")
    hr = texture(rng, extent)
    crop = int(round(extent * crop_fraction / 2)) * 2
    origin = ((extent - crop) // 2, (extent - crop) // 2)
    theta, scale, shift = random_affine(rng, (crop, crop))
    A = affine_matrix(theta, scale, shift, origin, (crop, crop))
    gains = rng.uniform(*GAIN_RANGE, size=3)
    ref = as_image(render_reference(hr, A, (crop, crop)) * gains)
    meta = {"affine": A.tolist(), "rotation_deg": float(np.rad2deg(theta)), "scale": float(scale),
            "shift": shift.tolist(), "gains": gains.tolist(), "crop_origin": list(origin),
            "crop_shape": [crop, crop]}
    return SynthPair(hr, as_image(downsample(hr)), ref, meta)


def synth_dataset(seed, n, extent, crop_fraction=CROP_FRACTION):
    """``n`` deterministic pairs; pair i uses its own child generator."""
    if extent % 2 or extent < 32:
        raise ValueError("extent must be even and >= 32")
    children = np.random.SeedSequence(seed).spawn(n)
    return [make_pair(np.random.default_rng(s), extent, crop_fraction) for s in children]


# ---------------------------------------------------------------------------
# "real camera" domain for self-supervised adaptation


REAL_BLUR_SIGMA = 1.0
REAL_GAIN_RANGE = (0.85, 1.15)


@dataclass
class RealPair:
    wide: np.ndarray     # model input, no ground truth available to training
    tele: np.ndarray     # reference
    target: np.ndarray   # 2x wide, used only for evaluation


def real_domain(pair, rng):
    """Shift a pair into the camera domain: extra blur and a gain change on the wide image.

    The target is the blurred, gain-shifted hr; the wide input is its x2 downsample.
    """
    x = np.moveaxis(pair.hr, -1, 0)[None]
    blurred = np.moveaxis(gaussian_blur3x3(x, REAL_BLUR_SIGMA)[0], 0, -1)
    gain = rng.uniform(*REAL_GAIN_RANGE, size=3)
    target = as_image(blurred * gain)
    return RealPair(as_image(downsample(target)), pair.ref, target)


def real_dataset(seed, n, extent):
    pairs = synth_dataset(seed, n, extent)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(n + 1)[-1])
    return [real_domain(p, rng) for p in pairs]


# ---------------------------------------------------------------------------
# on-disk layout: pair_%04d/{hr,lr,ref}.png + meta.json


def save_dataset(pairs, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(pairs):
        d = out / f"pair_{i:04d}"
        d.mkdir(exist_ok=True)
        write_png(d / "hr.png", p.hr)
        write_png(d / "lr.png", p.lr)
        write_png(d / "ref.png", p.ref)
        (d / "meta.json").write_text(json.dumps(p.meta, indent=2, sort_keys=True))
    return out


def load_dataset(root):
    root = Path(root)
    dirs = sorted(d for d in root.glob("pair_*") if d.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no pair_* directories under {root}")
    pairs = []
    for d in dirs:
        meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
        pairs.append(SynthPair(read_png(d / "hr.png"), read_png(d / "lr.png"),
                               read_png(d / "ref.png"), meta))
    return pairs


def stack(images, dtype=np.float32):
    return np.concatenate([to_tensor(im, dtype) for im in images])
