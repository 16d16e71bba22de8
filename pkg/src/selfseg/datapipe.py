"""Slice preprocessing, tiling, train/validation pools, stitched prediction
and a synthetic multi-phase phantom."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import unet
from .nn import ShapeError
from .slic import SuperpixelMap, slic_segment

PHASE_AGGREGATE, PHASE_MORTAR, PHASE_POROSITY = 0, 1, 2


# --------------------------------------------------------------------------
# preprocessing

def clip_porous(img, threshold):
    """Zero every pixel below ``threshold`` (pores and air)."""
    img = np.asarray(img)
    return np.where(img < threshold, np.zeros((), dtype=img.dtype), img)


def standardize_slice(img):
    """Return ``(standardized, mean, std)``; the output has mean 0 and std 1."""
    img = np.asarray(img, dtype=np.float64)
    mean = float(img.mean())
    std = float(img.std())
    if not std > 0:
        raise ValueError("cannot standardize a constant slice")
    return (img - mean) / std, mean, std


def destandardize(img, mean, std):
    return np.asarray(img) * std + mean


@dataclass
class SliceStack:
    """Ordered slices of one sample plus per-slice metadata."""

    slices: np.ndarray
    sample_id: str = "sample"
    pixel_size_mm: float = 0.093
    clip_thresholds: list = field(default_factory=list)
    means: list = field(default_factory=list)
    stds: list = field(default_factory=list)

    def __post_init__(self):
        self.slices = np.asarray(self.slices)
        if self.slices.ndim != 3:
            raise ShapeError("a slice stack is an (n, h, w) array")

    def __len__(self):
        return len(self.slices)


def preprocess_stack(raw: SliceStack, thresholds=None):
    """Clip pores and standardize every slice independently.

    Returns ``(standardized SliceStack, pore masks)`` where pore masks mark
    the pixels that were clipped.
    """
    thresholds = thresholds if thresholds is not None else raw.clip_thresholds
    if len(thresholds) != len(raw):
        raise ValueError("one clip threshold per slice is required")
    out, pores, means, stds = [], [], [], []
    for img, tau in zip(raw.slices, thresholds):
        pores.append(np.asarray(img) < tau)
        std_img, m, s = standardize_slice(clip_porous(img, tau))
        out.append(std_img)
        means.append(m)
        stds.append(s)
    stack = SliceStack(np.stack(out), raw.sample_id, raw.pixel_size_mm,
                       list(thresholds), means, stds)
    return stack, np.stack(pores)


# --------------------------------------------------------------------------
# tiling

@dataclass(frozen=True)
class TileSpec:
    row: int
    col: int
    size: int = 256
    slice_id: int = 0
    tag: str = ""

    def crop(self, img):
        return img[..., self.row:self.row + self.size, self.col:self.col + self.size]


def tile_positions(slice_h, slice_w, tile=256, inset=128, slice_id=0):
    """Thirteen tile origins: 4 inset corners, 4 edge midpoints, 4 diagonals, center.

    Diagonal tiles are centered midway between the image center and the
    center of the corresponding corner tile.
    """
    if slice_h < tile + 2 * inset or slice_w < tile + 2 * inset:
        raise ShapeError(
            f"slice {slice_h}x{slice_w} too small for tile {tile} with inset {inset}")
    top, left = inset, inset
    bottom, right = slice_h - inset - tile, slice_w - inset - tile
    mid_r, mid_c = (slice_h - tile) // 2, (slice_w - tile) // 2

    def diag(corner_r, corner_c):
        r = (corner_r + tile / 2 + slice_h / 2) / 2 - tile / 2
        c = (corner_c + tile / 2 + slice_w / 2) / 2 - tile / 2
        return int(np.floor(r)), int(np.floor(c))

    layout = [
        ("NW", (top, left)), ("NE", (top, right)),
        ("SW", (bottom, left)), ("SE", (bottom, right)),
        ("N", (top, mid_c)), ("S", (bottom, mid_c)),
        ("W", (mid_r, left)), ("E", (mid_r, right)),
        ("dNW", diag(top, left)), ("dNE", diag(top, right)),
        ("dSW", diag(bottom, left)), ("dSE", diag(bottom, right)),
        ("C", (mid_r, mid_c)),
    ]
    return [TileSpec(r, c, tile, slice_id, tag) for tag, (r, c) in layout]


@dataclass
class TilePool:
    """Tiles with their fixed superpixel maps and optional fixed-label masks."""

    images: np.ndarray
    maps: list
    fixed: np.ndarray | None = None
    specs: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        idx = list(idx)
        return TilePool(
            self.images[idx],
            [self.maps[i] for i in idx],
            None if self.fixed is None else self.fixed[idx],
            [self.specs[i] for i in idx] if self.specs else [],
        )


def extract_tiles(stack, specs_per_slice):
    """Crop every spec from its slice; returns ``(tiles, flat spec list)``."""
    tiles, specs = [], []
    for specs_i in specs_per_slice:
        for spec in specs_i:
            tiles.append(spec.crop(stack[spec.slice_id]))
            specs.append(spec)
    return np.stack(tiles), specs


def split_counts(n, split_ratio):
    r_train, r_val = split_ratio
    if r_train < 0 or r_val < 0 or r_train + r_val == 0:
        raise ValueError("split ratio must be non-negative and not all zero")
    n_val = int(np.floor(n * r_val / (r_train + r_val)))
    return n - n_val, n_val


def build_pools(tiles, split_ratio=(2, 1), seed=0, n_segments=16, compactness=0.1,
                slic_iters=10, fixed=None, specs=None, maps=None):
    """Seeded disjoint train/validation split of ``tiles`` with superpixel maps.

    Superpixels are computed once per tile with identical parameters for
    both pools (unless precomputed ``maps`` are passed). The validation share
    is ``floor(n * r_val / (r_train + r_val))``; the remainder trains.
    """
    tiles = np.asarray(tiles)
    n = len(tiles)
    if n == 0:
        raise ValueError("no tiles to split")
    if maps is None:
        maps = [slic_segment(t, n_segments, compactness, slic_iters) for t in tiles]
    pool = TilePool(tiles, list(maps), None if fixed is None else np.asarray(fixed),
                    list(specs) if specs is not None else [])
    n_train, _ = split_counts(n, split_ratio)
    order = np.random.default_rng(seed).permutation(n)
    return pool.subset(sorted(order[:n_train])), pool.subset(sorted(order[n_train:]))


# --------------------------------------------------------------------------
# stitched prediction

def grid_starts(size, tile, overlap):
    if tile > size:
        raise ShapeError(f"tile {tile} larger than slice extent {size}")
    if not 0 <= overlap < tile:
        raise ValueError("overlap must satisfy 0 <= overlap < tile")
    step = tile - overlap
    starts = list(range(0, size - tile + 1, step))
    if starts[-1] != size - tile:
        starts.append(size - tile)
    return starts


def coverage_count(h, w, tile, overlap):
    cover = np.zeros((h, w), dtype=np.int32)
    for r in grid_starts(h, tile, overlap):
        for c in grid_starts(w, tile, overlap):
            cover[r:r + tile, c:c + tile] += 1
    return cover


def predict_slice(params, img, tile=256, overlap=32, batch_size=8):
    """Raw score field ``(h, w, c)`` of a slice from overlapping tiles.

    Every pixel's score is the plain average of the infer-mode outputs of all
    tiles covering it. Tiles are visited in row-major order.
    """
    img = np.asarray(img)
    h, w = img.shape
    ok, why = unet.check_compat(params.config, tile, tile)
    if not ok:
        raise ShapeError(why)
    origins = [(r, c) for r in grid_starts(h, tile, overlap) for c in grid_starts(w, tile, overlap)]
    acc = np.zeros((h, w, params.config.out_channels), dtype=np.float64)
    cover = np.zeros((h, w, 1), dtype=np.float64)
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        x = np.stack([img[r:r + tile, c:c + tile] for r, c in chunk])[..., None]
        y = unet.forward(params, x.astype(params.dtype), mode="infer")
        for (r, c), yi in zip(chunk, y):
            acc[r:r + tile, c:c + tile] += yi
            cover[r:r + tile, c:c + tile] += 1
    return acc / cover


# --------------------------------------------------------------------------
# synthetic phantom

@dataclass
class PhantomSpec:
    """Synthetic three-phase slices standing in for a concrete scan.

    Intensities are fractions of the 16-bit range. Shapes are drawn in order
    aggregates then pores; later shapes overwrite earlier ones.
    """

    n_slices: int = 6
    height: int = 512
    width: int = 512
    n_aggregates: int = 40
    aggregate_radius: tuple = (14.0, 40.0)
    n_pores: int = 25
    pore_radius: tuple = (3.0, 9.0)
    mortar_mean: float = 0.55
    aggregate_mean: float = 0.65
    pore_mean: float = 0.10
    aggregate_spread: float = 0.02
    noise_std: float = 0.07
    smooth_sigma: float = 0.0
    brightness_drift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.pore_mean < min(self.mortar_mean, self.aggregate_mean):
            raise ValueError("pores must be darker than mortar and aggregate")

    @property
    def contrast_gap(self):
        return abs(self.aggregate_mean - self.mortar_mean)


def _ellipse_mask(yy, xx, cy, cx, ry, rx, theta):
    dy, dx = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (dx * ct + dy * st) / rx
    v = (-dx * st + dy * ct) / ry
    return u * u + v * v <= 1.0


def render_phantom_slice(spec: PhantomSpec, rng):
    """One slice: ``(clean intensity, label)`` before noise."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w]
    labels = np.full((h, w), PHASE_MORTAR, dtype=np.uint8)
    clean = np.full((h, w), spec.mortar_mean)
    lo, hi = spec.aggregate_radius
    for _ in range(spec.n_aggregates):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(lo, hi), rng.uniform(lo, hi)
        mask = _ellipse_mask(yy, xx, cy, cx, ry, rx, rng.uniform(0, np.pi))
        level = spec.aggregate_mean + rng.uniform(-1, 1) * spec.aggregate_spread
        labels[mask] = PHASE_AGGREGATE
        clean[mask] = level
    lo, hi = spec.pore_radius
    for _ in range(spec.n_pores):
        cy, cx, r = rng.uniform(0, h), rng.uniform(0, w), rng.uniform(lo, hi)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        labels[mask] = PHASE_POROSITY
        clean[mask] = spec.pore_mean
    return clean, labels


def gen_phantom(spec: PhantomSpec):
    """Generate ``(raw uint16 SliceStack, ground-truth labels, clean intensities)``.

    Labels use 0 = aggregate, 1 = mortar, 2 = porosity. Noise is additive
    Gaussian, optionally smoothed, and a linear brightness drift across the
    slice width may be added to the solid phases.
    """
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(spec.seed)
    raws, gts, cleans = [], [], []
    for _ in range(spec.n_slices):
        clean, labels = render_phantom_slice(spec, rng)
        noise = rng.normal(0.0, spec.noise_std, size=clean.shape)
        if spec.smooth_sigma > 0:
            noise = gaussian_filter(noise, spec.smooth_sigma)
            noise *= spec.noise_std / max(noise.std(), 1e-12)
        img = clean + noise
        if spec.brightness_drift:
            ramp = np.linspace(-0.5, 0.5, spec.width)[None, :] * spec.brightness_drift
            img = img + np.where(labels != PHASE_POROSITY, ramp, 0.0)
        raws.append(np.clip(np.rint(img * 65535), 0, 65535).astype(np.uint16))
        gts.append(labels)
        cleans.append(clean)
    pore_cut = (spec.pore_mean + min(spec.mortar_mean, spec.aggregate_mean)) / 2
    stack = SliceStack(np.stack(raws), sample_id=f"phantom-{spec.seed}",
                       clip_thresholds=[int(pore_cut * 65535)] * spec.n_slices)
    return stack, np.stack(gts), np.stack(cleans)
