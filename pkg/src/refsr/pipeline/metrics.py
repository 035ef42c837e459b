"""Full-reference quality metrics on [0, 1] images."""
import numpy as np

PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_WIN = 11
K1, K2 = 0.01, 0.03
_LUMA = np.array([0.299, 0.587, 0.114])


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """10 log10(1 / MSE) in dB, capped at 100 dB for MSE < 1e-10."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def luminance(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ _LUMA
    if img.ndim == 3:
        return img[..., 0]
    return img


def _gauss1d():
    r = SSIM_WIN // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-x * x / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b):
    """Mean local SSIM of the luminance channel (11x11 Gaussian window, sigma 1.5).

    Windows are only evaluated where they fit entirely inside the image.
    """
    a, b = _pair(a, b)
    x, y = luminance(a), luminance(b)
    if min(x.shape) < SSIM_WIN:
        raise ValueError(f"ssim needs extents >= {SSIM_WIN}, got {x.shape}")
    g = _gauss1d()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    c1, c2 = K1 ** 2, K2 ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())
