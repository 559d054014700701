"""Normalized-coordinate location maps and road-frequency statistics."""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from .pnm import to_uint8, write_pnm


@lru_cache(maxsize=32)
def _location_maps(hf: int, wf: int) -> np.ndarray:
    xs = np.arange(wf) / (wf - 1) if wf > 1 else np.zeros(1)
    ys = np.arange(hf) / (hf - 1) if hf > 1 else np.zeros(1)
    out = np.empty((1, 2, hf, wf))
    out[0, 0] = xs[None, :]
    out[0, 1] = ys[:, None]
    out.setflags(write=False)
    return out


def location_maps(hf: int, wf: int) -> np.ndarray:
    """Return the (1, 2, hf, wf) prior: channel 0 is x/(wf-1), channel 1 is y/(hf-1).

    The result is a cached read-only constant shared by every caller.
    """
    if hf < 1 or wf < 1:
        raise ValueError(f"location map extent must be >= 1, got {hf}x{wf}")
    return _location_maps(int(hf), int(wf))


def road_frequency(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel fraction of masks labelling the pixel as road (value 1)."""
    masks = list(masks)
    if not masks:
        raise ValueError("road_frequency needs at least one mask")
    shape = masks[0].shape
    total = np.zeros(shape, dtype=np.int64)
    for m in masks:
        if m.shape != shape:
            raise ValueError(f"mask extent mismatch: {m.shape} vs {shape}")
        total += np.asarray(m) == 1
    return total / len(masks)


def write_frequency_map(freq: np.ndarray, pgm_path, csv_path) -> None:
    write_pnm(pgm_path, to_uint8(freq))
    header = ",".join(f"x{j}" for j in range(freq.shape[1]))
    np.savetxt(csv_path, freq, delimiter=",", fmt="%.17g", header=header, comments="")
