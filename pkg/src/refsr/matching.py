"""Cosine-similarity nearest-patch field between LR and reference features."""
from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, unfold_patches

NORM_EPS = 1e-8
# GEMM rounding depends on matrix shape; candidates this close to the row
# maximum are re-scored with a shape-independent dot product
TIE_WINDOW = 1e-12
DEFAULT_TILE = 32
DEFAULT_MARGIN = 8


@dataclass
class MatchResult:
    """Index map and confidence map over an (H, W) LR patch grid.

    ``index`` holds, for each LR patch in row-major order, the flat index of
    the chosen reference patch on the (ref_h, ref_w) reference grid;
    ``confidence`` holds the cosine similarity of that pair.
    """
    index: np.ndarray       # (H*W,) int64
    confidence: np.ndarray  # (H*W,) float
    grid: tuple             # (H, W)
    ref_grid: tuple         # (ref_h, ref_w)

    @property
    def confidence_map(self):
        return self.confidence.reshape(self.grid)

    def offsets(self):
        """Per-patch (dy, dx) displacement from LR position to matched ref position."""
        H, W = self.grid
        iy, ix = np.divmod(np.arange(H * W), W)
        jy, jx = np.divmod(self.index, self.ref_grid[1])
        return np.stack([jy - iy, jx - ix], axis=-1).reshape(H, W, 2)


def _normalize_rows(p):
    p = np.asarray(p, dtype=np.float64)
    n = np.linalg.norm(p, axis=1, keepdims=True)
    safe = np.where(n < NORM_EPS, 1.0, n)
    return np.where(n < NORM_EPS, 0.0, p / safe)


def cosine_similarity_matrix(lr_patches, ref_patches):
    """S[i, j] = <p_i, q_j> / (|p_i| |q_j|); near-zero-norm rows give 0."""
    lr_patches = np.atleast_2d(lr_patches)
    ref_patches = np.atleast_2d(ref_patches)
    if lr_patches.shape[1] != ref_patches.shape[1]:
        raise ShapeError("patch width mismatch", ref_patches.shape,
                         (ref_patches.shape[0], lr_patches.shape[1]))
    return _normalize_rows(lr_patches) @ _normalize_rows(ref_patches).T


def match(S):
    """Row-wise argmax/max; ``np.argmax`` returns the first maximum so ties go low."""
    S = np.atleast_2d(S)
    if S.size == 0:
        raise ValueError("empty similarity matrix")
    index = np.argmax(S, axis=1)
    return index, S[np.arange(S.shape[0]), index]


def _select(q, r, S):
    """Canonical argmax of S = q @ r.T for unit rows q, r.

    Every candidate within TIE_WINDOW of its row maximum is re-scored with a
    per-pair dot product whose rounding does not depend on how S was blocked,
    so full and tiled searches agree bit for bit. Ties go to the lowest index.
    """
    top = S.max(axis=1)
    index = np.argmax(S, axis=1)
    close = S >= (top - TIE_WINDOW)[:, None]
    for i in np.flatnonzero(close.sum(axis=1) > 1):
        cand = np.flatnonzero(close[i])
        scores = (r[cand] * q[i]).sum(axis=1)
        index[i] = cand[np.argmax(scores)]
    return index, (q * r[index]).sum(axis=1)


def _single(feat):
    feat = np.asarray(feat)
    if feat.ndim == 3:
        return feat
    if feat.ndim == 4 and feat.shape[0] == 1:
        return feat[0]
    raise ShapeError("feature map must be (C,H,W) or (1,C,H,W)", feat.shape, (1, "c", "h", "w"))


def _check_pair(lr_feat, ref_feat):
    lr_feat, ref_feat = _single(lr_feat), _single(ref_feat)
    if lr_feat.shape[0] != ref_feat.shape[0]:
        raise ShapeError("channel mismatch between LR and Ref features", ref_feat.shape,
                         (lr_feat.shape[0],) + ref_feat.shape[1:])
    return lr_feat, ref_feat


def match_features(lr_feat, ref_feat):
    """Exhaustive 3x3 patch matching of two (C, H, W) feature maps."""
    lr_feat, ref_feat = _check_pair(lr_feat, ref_feat)
    lp = _normalize_rows(unfold_patches(lr_feat[None])[0])
    rp = _normalize_rows(unfold_patches(ref_feat[None])[0])
    index, conf = _select(lp, rp, lp @ rp.T)
    return MatchResult(index, conf, lr_feat.shape[1:], ref_feat.shape[1:])


def _ref_span(lo, hi, n_lr, n_ref, margin):
    a = (lo * n_ref) // n_lr - margin
    b = -((-hi * n_ref) // n_lr) + margin
    return max(a, 0), min(b, n_ref)


def tiled_match(lr_feat, ref_feat, tile=DEFAULT_TILE, margin=DEFAULT_MARGIN, stats=None):
    """Block-local variant of :func:`match_features`.

    The LR grid is cut into ``tile`` x ``tile`` blocks; each block is compared
    only against the proportionally corresponding reference region grown by
    ``margin`` positions on every side. Indices stay global. If ``stats`` is a
    dict, the largest similarity block held at once is stored under
    ``"peak_similarity_bytes"``.
    """
    if tile < 1 or margin < 0:
        raise ValueError("tile must be >= 1 and margin >= 0")
    lr_feat, ref_feat = _check_pair(lr_feat, ref_feat)
    H, W = lr_feat.shape[1:]
    Hr, Wr = ref_feat.shape[1:]
    lp = _normalize_rows(unfold_patches(lr_feat[None])[0]).reshape(H, W, -1)
    rp = _normalize_rows(unfold_patches(ref_feat[None])[0]).reshape(Hr, Wr, -1)
    index = np.empty((H, W), dtype=np.int64)
    conf = np.empty((H, W))
    peak = 0
    for y0 in range(0, H, tile):
        y1 = min(y0 + tile, H)
        ry0, ry1 = _ref_span(y0, y1, H, Hr, margin)
        for x0 in range(0, W, tile):
            x1 = min(x0 + tile, W)
            rx0, rx1 = _ref_span(x0, x1, W, Wr, margin)
            q = lp[y0:y1, x0:x1].reshape(-1, lp.shape[-1])
            r = rp[ry0:ry1, rx0:rx1].reshape(-1, rp.shape[-1])
            S = q @ r.T
            peak = max(peak, S.nbytes)
            local, best = _select(q, r, S)
            ly, lx = np.divmod(local, rx1 - rx0)
            index[y0:y1, x0:x1] = ((ly + ry0) * Wr + (lx + rx0)).reshape(y1 - y0, x1 - x0)
            conf[y0:y1, x0:x1] = best.reshape(y1 - y0, x1 - x0)
    if stats is not None:
        stats["peak_similarity_bytes"] = peak
    return MatchResult(index.reshape(-1), conf.reshape(-1), (H, W), (Hr, Wr))


def brute_force_match(lr_feat, ref_feat):
    """Naive scalar-loop reference implementation of :func:`match_features`."""
    lr_feat, ref_feat = _check_pair(lr_feat, ref_feat)
    lr_feat = lr_feat.astype(np.float64)
    ref_feat = ref_feat.astype(np.float64)
    C, H, W = lr_feat.shape
    _, Hr, Wr = ref_feat.shape

    def patch(f, y, x):
        h, w = f.shape[1:]
        out = []
        for c in range(C):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    # mirror without repeating the edge sample
                    yy = -yy if yy < 0 else (2 * (h - 1) - yy if yy >= h else yy)
                    xx = -xx if xx < 0 else (2 * (w - 1) - xx if xx >= w else xx)
                    out.append(f[c, yy, xx])
        return out

    def norm(v):
        return sum(t * t for t in v) ** 0.5

    ref_patches = [patch(ref_feat, y, x) for y in range(Hr) for x in range(Wr)]
    ref_norms = [norm(q) for q in ref_patches]
    index = np.zeros(H * W, dtype=np.int64)
    conf = np.zeros(H * W)
    for i in range(H * W):
        p = patch(lr_feat, *divmod(i, W))
        pn = norm(p)
        best, best_j = None, 0
        for j, q in enumerate(ref_patches):
            if pn < NORM_EPS or ref_norms[j] < NORM_EPS:
                s = 0.0
            else:
                s = sum(a * b for a, b in zip(p, q)) / (pn * ref_norms[j])
            if best is None or s > best:
                best, best_j = s, j
        index[i] = best_j
        conf[i] = best
    return MatchResult(index, conf, (H, W), (Hr, Wr))
