"""Flat-world homographies and bird's-eye-view evaluation.

Scores and masks are warped from the perspective image into a BEV raster by
inverse mapping: each BEV pixel ``(x, y)`` samples the perspective image at
``H^-1 (x, y, 1)``.  Samples landing outside the source become void.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .layers import IGNORE_LABEL
from .metrics import MaxFResult, MetricsReport, confusion, max_f, metrics

# 400 px lateral x 800 px longitudinal
BEV_SHAPE = (800, 400)


class DegenerateConfiguration(ValueError):
    pass


def _collinear(a, b, c, tol=1e-9):
    area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    scale = max(np.hypot(b[0] - a[0], b[1] - a[1]) * np.hypot(c[0] - a[0], c[1] - a[1]), 1e-300)
    return abs(area) <= tol * scale


def _check_quad(pts, name):
    if pts.shape != (4, 2):
        raise ValueError(f"{name}: expected 4 points, got shape {pts.shape}")
    for i in range(4):
        tri = [pts[j] for j in range(4) if j != i]
        if _collinear(*tri):
            raise DegenerateConfiguration(f"{name}: three of the four points are collinear")


def _normalizer(pts):
    centre = pts.mean(axis=0)
    d = np.sqrt(((pts - centre) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d
    return np.array([[s, 0, -s * centre[0]], [0, s, -s * centre[1]], [0, 0, 1.0]])


def homography_from_points(src, dst) -> np.ndarray:
    """Direct linear transform for 4 correspondences (x, y) -> (x', y').

    Points are Hartley-normalised before the 8x9 system is solved by SVD.
    The result is scaled so that ``H[2, 2] == 1`` when that entry is nonzero.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    _check_quad(src, "src")
    _check_quad(dst, "dst")
    ts, td = _normalizer(src), _normalizer(dst)
    sh = np.c_[src, np.ones(4)] @ ts.T
    dh = np.c_[dst, np.ones(4)] @ td.T
    rows = []
    for (x, y, _), (u, v, _) in zip(sh, dh):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    if abs(h[2, 2]) > 1e-15:
        h = h / h[2, 2]
    if abs(np.linalg.det(h)) <= 1e-12:
        raise DegenerateConfiguration("estimated homography is singular")
    return h


def apply_homography(h, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    ph = np.c_[pts, np.ones(len(pts))] @ np.asarray(h).T
    return ph[:, :2] / ph[:, 2:3]


def _source_coords(h, out_shape):
    hinv = np.linalg.inv(h)
    oh, ow = out_shape
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    den = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / den
        sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / den
    return sx, sy


def warp_to_bev(image, h, out_shape=BEV_SHAPE, mode: str = "bilinear", void_value=np.nan):
    """Inverse-warp a 2-D map into an ``out_shape`` BEV raster.

    ``mode="bilinear"`` for scores (returns float with ``void_value`` outside
    the source), ``mode="nearest"`` for label masks (returns uint8 with
    :data:`IGNORE_LABEL` outside).  A source sample is inside when its
    coordinates lie in ``[0, w-1] x [0, h-1]``.
    """
    if abs(np.linalg.det(h)) <= 1e-12:
        raise DegenerateConfiguration("homography is not invertible")
    image = np.asarray(image)
    sh, sw = image.shape
    sx, sy = _source_coords(h, out_shape)
    inside = np.isfinite(sx) & np.isfinite(sy) & (sx >= 0) & (sx <= sw - 1) & (sy >= 0) & (sy <= sh - 1)
    sx = np.where(inside, sx, 0.0)
    sy = np.where(inside, sy, 0.0)
    if mode == "nearest":
        xi = np.clip(np.floor(sx + 0.5).astype(np.int64), 0, sw - 1)
        yi = np.clip(np.floor(sy + 0.5).astype(np.int64), 0, sh - 1)
        out = image[yi, xi].astype(np.uint8)
        out[~inside] = IGNORE_LABEL
        return out
    if mode != "bilinear":
        raise ValueError(f"unknown sampling mode {mode!r}")
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, sw - 1)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    fx = sx - x0
    fy = sy - y0
    img = image.astype(np.float64)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    out[~inside] = void_value
    return out


@dataclass
class BEVResult:
    report: MetricsReport
    maxf: MaxFResult
    scores: np.ndarray
    gt: np.ndarray


def warp_pair(scores, gt, h, out_shape=BEV_SHAPE):
    """Warp a score map and its ground truth; void wherever either is void."""
    ws = warp_to_bev(scores, h, out_shape, mode="bilinear")
    wg = warp_to_bev(gt, h, out_shape, mode="nearest")
    void = ~np.isfinite(ws)
    wg = wg.copy()
    wg[void] = IGNORE_LABEL
    ws = np.where(void, 0.0, ws)
    return ws, wg


def evaluate_bev(scores, gt, h, gamma: float = 1.0, sweep: Optional[Sequence[float]] = None,
                 tau: float = 0.5, out_shape=BEV_SHAPE) -> BEVResult:
    """Metrics at ``tau`` and max-F computed on non-void BEV pixels."""
    ws, wg = warp_pair(scores, gt, h, out_shape)
    rep = metrics(confusion(ws, wg, tau), gamma)
    return BEVResult(rep, max_f(ws, wg, gamma, sweep), ws, wg)


def parse_correspondences(values: Sequence[float]):
    """Eight source floats then eight destination floats -> two (4, 2) arrays."""
    values = [float(v) for v in values]
    if len(values) != 16:
        raise ValueError(f"expected 16 floats (4 source + 4 destination points), got {len(values)}")
    return np.array(values[:8]).reshape(4, 2), np.array(values[8:]).reshape(4, 2)


def evaluate_bev_batch(scores, gt, h, gamma: float = 1.0, sweep: Optional[Sequence[float]] = None,
                       tau: float = 0.5, out_shape=BEV_SHAPE) -> BEVResult:
    """:func:`evaluate_bev` over a stack of ``(N, h, w)`` maps pooled into one count."""
    scores, gt = np.asarray(scores), np.asarray(gt)
    if scores.ndim == 2:
        return evaluate_bev(scores, gt, h, gamma, sweep, tau, out_shape)
    pairs = [warp_pair(s, g, h, out_shape) for s, g in zip(scores, gt)]
    ws = np.stack([p[0] for p in pairs])
    wg = np.stack([p[1] for p in pairs])
    rep = metrics(confusion(ws, wg, tau), gamma)
    return BEVResult(rep, max_f(ws, wg, gamma, sweep), ws, wg)
