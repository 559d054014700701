"""Seeded synthetic street scenes with exact road masks.

A scene is a perspective road (a trapezoid narrowing towards a jittered
vanishing point) flanked by sidewalks and terrain, a sky with road-coloured
building blocks above the horizon, optional lane markings, occluding
vehicles carved out of the road mask, multiplicative shadows that leave the
mask untouched, and additive noise.  Every sample is a pure function of
``(params, index)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .layers import IGNORE_LABEL
from .pnm import PNMError, read_pnm, to_uint8, write_pnm

SCENE_LABELS = ("uu", "um", "umm")
MASK_ROAD, MASK_BACKGROUND, MASK_VOID = 255, 0, 128
MAX_ATTEMPTS = 50


@dataclass
class SceneParams:
    size: int = 64
    vp_jitter: tuple = (-0.15, 0.15)
    horizon: tuple = (0.3, 0.45)
    base_width: tuple = (0.4, 0.9)
    occluders: tuple = (0, 3)
    shadows: tuple = (0, 2)
    noise: float = 0.05
    seed: int = 7
    lane_markings: bool = True
    road_color: tuple = (0.42, 0.42, 0.44)

    def __post_init__(self):
        for name in ("vp_jitter", "horizon", "base_width", "occluders", "shadows", "road_color"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.size < 32 or self.size % 32:
            raise ValueError(f"scene size must be a positive multiple of 32, got {self.size}")
        for name in ("vp_jitter", "horizon", "base_width", "occluders", "shadows"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        if not (-0.5 < self.vp_jitter[0] and self.vp_jitter[1] < 0.5):
            raise ValueError("vp_jitter must lie inside the image")
        if not (0.05 <= self.horizon[0] and self.horizon[1] <= 0.8):
            raise ValueError("horizon range must lie within [0.05, 0.8]")
        if not (0.0 < self.base_width[0] and self.base_width[1] <= 1.0):
            raise ValueError("base_width must lie within (0, 1]")
        if self.occluders[0] < 0 or self.shadows[0] < 0:
            raise ValueError("occluder/shadow counts must be nonnegative")
        if self.noise < 0:
            raise ValueError("noise amplitude must be nonnegative")
        if not all(0.0 <= c <= 1.0 for c in self.road_color):
            raise ValueError("road_color components must lie in [0, 1]")


@dataclass
class Sample:
    image: np.ndarray  # (1, 3, h, w) in [0, 1]
    mask: np.ndarray  # (h, w) uint8: 1 road, 0 background, 255 void
    label: str
    meta: dict = field(default_factory=dict)


def trapezoid_edges(rows, quad):
    """Left/right road x-extent at image y-coordinates ``rows``."""
    (bl, br, tr, tl) = quad
    size_y = bl[1]
    top = tl[1]
    t = (size_y - rows) / (size_y - top)
    xl = bl[0] + (tl[0] - bl[0]) * t
    xr = br[0] + (tr[0] - br[0]) * t
    return xl, xr


def trapezoid_mask(size: int, quad) -> np.ndarray:
    """Pixels whose centres fall inside the road trapezoid."""
    yc = np.arange(size) + 0.5
    xc = np.arange(size) + 0.5
    xl, xr = trapezoid_edges(yc, quad)
    top = quad[3][1]
    inside = (xc[None, :] >= xl[:, None]) & (xc[None, :] <= xr[:, None])
    return inside & (yc[:, None] >= top)


def _polygon_mask(size, pts):
    # even-odd rule on pixel centres
    yc, xc = np.mgrid[0:size, 0:size] + 0.5
    inside = np.zeros((size, size), dtype=bool)
    n = len(pts)
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (yc >= min(y0, y1)) & (yc < max(y0, y1))
        xint = x0 + (yc - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xc < xint)
    return inside


def _render(p: SceneParams, rng: np.random.Generator, label: str):
    s = p.size
    yc, xc = np.mgrid[0:s, 0:s] + 0.5
    img = np.zeros((s, s, 3))

    hy = rng.uniform(*p.horizon) * s
    vx = s / 2 + rng.uniform(*p.vp_jitter) * s
    base = rng.uniform(*p.base_width) * s
    centre = s / 2 + rng.uniform(-0.1, 0.1) * s
    # the edges converge on a virtual vanishing point above the horizon, so
    # the road keeps some width where it meets the horizon
    vy = hy - 0.3 * s
    top_y = hy + 0.02 * s
    frac = (s - top_y) / (s - vy)
    bl = (centre - base / 2, float(s))
    br = (centre + base / 2, float(s))
    tl = (bl[0] + (vx - bl[0]) * frac, top_y)
    tr = (br[0] + (vx - br[0]) * frac, top_y)
    quad = (bl, br, tr, tl)

    # sky gradient
    t = np.clip(yc / max(hy, 1.0), 0, 1)[..., None]
    img[:] = (1 - t) * np.array([0.55, 0.7, 0.95]) + t * np.array([0.85, 0.88, 0.92])

    # buildings above the horizon, coloured close to the road
    for _ in range(rng.integers(2, 5)):
        bw = rng.uniform(0.12, 0.3) * s
        bx = rng.uniform(-0.05, 0.95) * s
        bh = rng.uniform(0.15, 0.9) * hy
        shade = rng.uniform(-0.05, 0.08)
        region = (xc >= bx) & (xc < bx + bw) & (yc >= hy - bh) & (yc < hy)
        img[region] = np.array(p.road_color) + shade

    # terrain below the horizon: grass or dirt, different per side
    ground = yc >= hy
    terrains = np.array([[0.30, 0.48, 0.22], [0.48, 0.40, 0.30], [0.35, 0.42, 0.28]])
    left_t = terrains[rng.integers(len(terrains))]
    right_t = terrains[rng.integers(len(terrains))]
    left_side = xc < vx
    img[ground & left_side] = left_t
    img[ground & ~left_side] = right_t
    grain = rng.normal(0.0, 1.0, (s, s))
    img[ground] += (2.0 * p.noise * grain[ground])[:, None]

    # sidewalks: a widened trapezoid, light and slightly textured
    sw = rng.uniform(0.05, 0.15) * s
    swl = (bl[0] - sw, float(s))
    swr = (br[0] + sw, float(s))
    wfrac = 0.35
    swq = (swl, swr, (tr[0] + sw * wfrac * frac, top_y), (tl[0] - sw * wfrac * frac, top_y))
    side = trapezoid_mask(s, swq)
    tone = np.array(p.road_color) + rng.uniform(0.06, 0.16)
    img[side] = tone
    tiles = ((np.floor(yc / 4) + np.floor(xc / 4)) % 2 == 0) & side
    img[tiles] -= 0.03

    road = trapezoid_mask(s, quad)
    img[road] = p.road_color
    img[road] += (p.noise * rng.normal(0.0, 1.0, (s, s))[road])[:, None]

    if p.lane_markings and label != "uu":
        offsets = [0.5] if label == "um" else [1 / 3, 2 / 3]
        xl, xr = trapezoid_edges(yc[:, 0], quad)
        for off in offsets:
            line_x = xl + (xr - xl) * off
            width = np.maximum(0.5, 0.02 * (xr - xl))
            dashed = (np.floor(yc[:, 0] / 5) % 2 == 0) if label == "um" else np.ones(s, bool)
            on = (np.abs(xc - line_x[:, None]) <= width[:, None]) & dashed[:, None] & road
            img[on] = 0.92

    mask = road.copy()
    occluded = np.zeros_like(road)
    for _ in range(rng.integers(p.occluders[0], p.occluders[1] + 1)):
        ys, xs = np.nonzero(road)
        if ys.size == 0:
            break
        k = rng.integers(ys.size)
        cy, cx = ys[k] + 0.5, xs[k] + 0.5
        scale = 0.3 + 0.7 * (cy - hy) / max(s - hy, 1.0)
        ow, oh = rng.uniform(0.06, 0.14) * s * scale, rng.uniform(0.04, 0.09) * s * scale
        colour = rng.uniform(0.05, 0.95, 3)
        if rng.random() < 0.5:
            region = (np.abs(xc - cx) <= ow / 2) & (yc <= cy) & (yc >= cy - oh)
        else:
            region = ((xc - cx) / (ow / 2)) ** 2 + ((yc - cy + oh / 2) / (oh / 2)) ** 2 <= 1.0
        img[region] = colour
        occluded |= region
    mask &= ~occluded

    for _ in range(rng.integers(p.shadows[0], p.shadows[1] + 1)):
        cx, cy = rng.uniform(0, s), rng.uniform(hy, s)
        r = rng.uniform(0.1, 0.3) * s
        angles = np.sort(rng.uniform(0, 2 * np.pi, 4))
        pts = [(cx + r * np.cos(a), cy + r * np.sin(a)) for a in angles]
        region = _polygon_mask(s, pts)
        img[region] *= rng.uniform(0.55, 0.75)

    if p.noise > 0:
        img += p.noise * 0.5 * rng.normal(0.0, 1.0, img.shape)
    img = np.clip(img, 0.0, 1.0)
    meta = {"quad": quad, "horizon": hy, "vanishing_x": vx, "occluded": occluded}
    return img, mask, meta


def generate_scene(p: SceneParams, index: int) -> Sample:
    """Render scene ``index``; retries with fresh sub-seeds until the road fraction is in [0.05, 0.8]."""
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([p.seed, index, attempt])
        label = SCENE_LABELS[int(rng.integers(len(SCENE_LABELS)))]
        img, mask, meta = _render(p, rng, label)
        frac = mask.mean()
        if 0.05 <= frac <= 0.8:
            meta["attempt"] = attempt
            image = np.ascontiguousarray(img.transpose(2, 0, 1)[None])
            return Sample(image, mask.astype(np.uint8), label, meta)
    raise RuntimeError(f"scene {index}: road fraction out of bounds after {MAX_ATTEMPTS} attempts")


# ------------------------------------------------------------------ files


def mask_to_file(mask: np.ndarray) -> np.ndarray:
    out = np.full(mask.shape, MASK_BACKGROUND, dtype=np.uint8)
    out[mask == 1] = MASK_ROAD
    out[mask == IGNORE_LABEL] = MASK_VOID
    return out


def mask_from_file(raw: np.ndarray) -> np.ndarray:
    out = np.zeros(raw.shape, dtype=np.uint8)
    out[raw == MASK_ROAD] = 1
    out[raw == MASK_VOID] = IGNORE_LABEL
    bad = ~np.isin(raw, (MASK_ROAD, MASK_BACKGROUND, MASK_VOID))
    if bad.any():
        raise PNMError("mask file contains values other than 0, 128 and 255")
    return out


def image_to_file(image: np.ndarray) -> np.ndarray:
    return to_uint8(image[0].transpose(1, 2, 0))


def image_from_file(raw: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray((raw.astype(np.float64) / 255.0).transpose(2, 0, 1)[None])


def quantize(sample: Sample) -> Sample:
    """The sample as it reads back after an 8-bit round trip."""
    return Sample(image_from_file(image_to_file(sample.image)), sample.mask.copy(), sample.label, sample.meta)


MANIFEST_HEADER = "# image\tmask\tlabel"


def generate_dataset(p: SceneParams, count: int, out_dir, start: int = 0, name: str = "manifest.tsv"):
    """Write ``count`` scenes as PPM/PGM pairs plus a tab-separated manifest.

    Returns the manifest path.  Paths in the manifest are relative to it.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(name)[0]
    lines = [f"# seed={p.seed} count={count} start={start} size={p.size}", MANIFEST_HEADER]
    for idx in range(start, start + count):
        sample = generate_scene(p, idx)
        img_rel = os.path.join(f"{stem}_images", f"{idx:06d}.ppm")
        mask_rel = os.path.join(f"{stem}_masks", f"{idx:06d}.pgm")
        write_pnm(os.path.join(out_dir, img_rel), image_to_file(sample.image))
        write_pnm(os.path.join(out_dir, mask_rel), mask_to_file(sample.mask))
        lines.append(f"{img_rel}\t{mask_rel}\t{sample.label}")
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


@dataclass
class ManifestEntry:
    image: str
    mask: str
    label: str
    contour: Optional[str] = None


def read_manifest(path) -> list[ManifestEntry]:
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) not in (3, 4):
                raise ValueError(f"{path}:{lineno}: expected 3 or 4 tab-separated columns")
            resolved = [os.path.join(base, c) for c in cols[:2]]
            contour = os.path.join(base, cols[3]) if len(cols) == 4 else None
            entries.append(ManifestEntry(resolved[0], resolved[1], cols[2], contour))
    if not entries:
        raise ValueError(f"{path}: manifest lists no samples")
    return entries


def load_dataset(path) -> list[Sample]:
    """Read every sample listed in a manifest.  Contour paths land in ``meta``."""
    samples = []
    for e in read_manifest(path):
        for f in (e.image, e.mask):
            if not os.path.exists(f):
                raise FileNotFoundError(f)
        raw = read_pnm(e.image)
        if raw.ndim != 3:
            raise PNMError(f"{e.image}: expected a colour (P6) image")
        mraw = read_pnm(e.mask)
        if mraw.ndim != 2:
            raise PNMError(f"{e.mask}: expected a grayscale (P5) mask")
        meta = {"image_path": e.image, "mask_path": e.mask}
        if e.contour:
            meta["contour_path"] = e.contour
        samples.append(Sample(image_from_file(raw), mask_from_file(mraw), e.label, meta))
    return samples


def params_dict(p: SceneParams) -> dict:
    return asdict(p)
