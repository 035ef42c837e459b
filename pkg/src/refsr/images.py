"""Image values and 8-bit PNG serialization.

An image is an (H, W, C) float array in [0, 1] with C in {1, 3}. PNG values
are treated as linear: ``value = byte / 255``.
"""
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


def as_image(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3 or x.shape[-1] not in (1, 3):
        raise ValueError(f"image must be (H, W, 1|3), got {x.shape}")
    return np.clip(x, 0.0, 1.0)


def read_png(path):
    with PILImage.open(path) as im:
        im = im.convert("L" if im.mode in ("L", "I", "I;16") else "RGB")
        return as_image(np.asarray(im, dtype=np.float64) / 255.0)


def write_png(path, img):
    img = as_image(img)
    data = np.round(img * 255.0).astype(np.uint8)
    mode = "L" if data.shape[-1] == 1 else "RGB"
    PILImage.fromarray(data[..., 0] if mode == "L" else data, mode=mode).save(Path(path))
    return Path(path)


def to_tensor(img, dtype=np.float32):
    """(H, W, C) image -> (1, C, H, W) tensor."""
    return np.ascontiguousarray(np.moveaxis(np.asarray(img, dtype=dtype), -1, 0)[None])


def from_tensor(x):
    """(1, C, H, W) tensor -> clamped (H, W, C) image."""
    return as_image(np.moveaxis(np.asarray(x)[0], 0, -1))
