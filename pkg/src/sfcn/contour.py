"""Grayscale contour maps for the auxiliary stream.

:func:`detect_contour` is a lightweight oriented-gradient detector with
non-maximum suppression.  Maps produced by an external detector (for example
Structured Forests) enter through :func:`load_contour` instead; the network
only cares that the map is a single-channel grid of values in [0, 1].
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .pnm import read_gray, to_uint8, write_pnm
from .tensor import ShapeError

GRAY_WEIGHTS = (0.299, 0.587, 0.114)
SIGMA = 1.0
# ties within this fraction of the global maximum survive suppression, so
# rounding noise cannot break a symmetric ridge apart
NMS_RTOL = 1e-9


def _gaussian_kernel(sigma: float = SIGMA, radius: int = 2) -> np.ndarray:
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def _nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    bins = (np.floor((angle + 22.5) / 45.0).astype(np.int64)) % 4
    # neighbour offsets (drow, dcol) along the gradient for 0, 45, 90, 135 degrees
    offsets = [(0, 1), (1, 1), (1, 0), (1, -1)]
    padded = np.pad(mag, 1)
    h, w = mag.shape
    tol = NMS_RTOL * mag.max()
    keep = np.zeros_like(mag, dtype=bool)
    for b, (dr, dc) in enumerate(offsets):
        fwd = padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        bwd = padded[1 - dr:1 - dr + h, 1 - dc:1 - dc + w]
        keep |= (bins == b) & (mag >= fwd - tol) & (mag >= bwd - tol)
    return np.where(keep, mag, 0.0)


def detect_contour(image: np.ndarray) -> np.ndarray:
    """Contour strength map in [0, 1] for a (1, 3, h, w) image.

    Grayscale conversion, 5x5 Gaussian smoothing (sigma 1), central-difference
    gradients, 4-direction non-maximum suppression, then division by the
    global maximum.  A flat image yields an all-zero map.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 4 or image.shape[0] != 1 or image.shape[1] != 3:
        raise ShapeError(f"detect_contour expects a (1, 3, h, w) image, got {image.shape}")
    r, g, b = image[0]
    gray = GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b
    k = _gaussian_kernel()
    smooth = ndimage.correlate1d(gray, k, axis=0, mode="nearest")
    smooth = ndimage.correlate1d(smooth, k, axis=1, mode="nearest")
    diff = np.array([-0.5, 0.0, 0.5])
    gx = ndimage.correlate1d(smooth, diff, axis=1, mode="nearest")
    gy = ndimage.correlate1d(smooth, diff, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak < 1e-12:
        return np.zeros_like(gray)
    thin = _nms(mag, gx, gy)
    return thin / thin.max()


def load_contour(path) -> np.ndarray:
    """Read an 8-bit single-channel contour image and map it to [0, 1]."""
    return read_gray(path).astype(np.float64) / 255.0


def save_contour(path, cmap: np.ndarray) -> None:
    write_pnm(path, to_uint8(cmap))


def replicate3(cmap: np.ndarray) -> np.ndarray:
    """Broadcast an (h, w) contour map to a (1, 3, h, w) tensor."""
    cmap = np.asarray(cmap, dtype=np.float64)
    if cmap.ndim != 2:
        raise ShapeError(f"contour map must be 2-D, got shape {cmap.shape}")
    return np.repeat(cmap[None, None], 3, axis=1)
