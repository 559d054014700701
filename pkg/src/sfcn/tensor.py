"""Dense NCHW float64 tensors and the shape primitives used by skip fusion.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)`` and
dtype ``float64``.  Every function here is pure: inputs are never modified
and results are freshly allocated.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


def as_tensor(a, copy: bool = False) -> np.ndarray:
    """Validate ``a`` as a 4-D finite float64 tensor and return it."""
    t = np.array(a, dtype=np.float64, copy=copy) if copy else np.asarray(a, dtype=np.float64)
    if t.ndim != 4:
        raise ShapeError(f"expected a 4-D (n, c, h, w) tensor, got shape {t.shape}")
    if min(t.shape) < 1:
        raise ShapeError(f"all extents must be >= 1, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite values")
    return t


def zeros(n: int, c: int, h: int, w: int) -> np.ndarray:
    return as_tensor(np.zeros((n, c, h, w)))


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack ``b``'s channels after ``a``'s; batch and spatial extents must agree."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects 4-D tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(
            f"concat_channels: n/h/w mismatch {a.shape} vs {b.shape}"
        )
    return np.concatenate([a, b], axis=1)


def slice_channels(a: np.ndarray, start: int, stop: int) -> np.ndarray:
    return a[:, start:stop].copy()


def crop_offsets(h: int, w: int, th: int, tw: int) -> tuple[int, int]:
    if th > h or tw > w:
        raise ShapeError(f"crop target {th}x{tw} larger than source {h}x{w}")
    return (h - th) // 2, (w - tw) // 2


def center_crop(a: np.ndarray, th: int, tw: int) -> np.ndarray:
    oy, ox = crop_offsets(a.shape[2], a.shape[3], th, tw)
    return a[:, :, oy:oy + th, ox:ox + tw].copy()


def _axis_weights(src: int, dst: int):
    # corner-aligned sampling: j -> j*(src-1)/(dst-1)
    if dst > 1:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
    else:
        pos = np.zeros(1)
    lo = np.clip(np.floor(pos).astype(np.int64), 0, src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resize(a: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Corner-aligned bilinear resampling to ``th x tw``.

    Output index ``j`` samples source coordinate ``j * (src - 1) / (dst - 1)``
    (or 0 when ``dst == 1``), independently along rows and columns.
    """
    if th < 1 or tw < 1:
        raise ShapeError(f"resize target must be >= 1, got {th}x{tw}")
    h, w = a.shape[2], a.shape[3]
    if (th, tw) == (h, w):
        return np.array(a, dtype=np.float64)
    y0, y1, fy = _axis_weights(h, th)
    x0, x1, fx = _axis_weights(w, tw)
    top = a[:, :, y0, :]
    bot = a[:, :, y1, :]
    fy = fy[None, None, :, None]
    rows = top * (1.0 - fy) + bot * fy
    left = rows[:, :, :, x0]
    right = rows[:, :, :, x1]
    fx = fx[None, None, None, :]
    out = left * (1.0 - fx) + right * fx
    # convex combinations can overshoot by an ulp
    return np.clip(out, a.min(), a.max())
