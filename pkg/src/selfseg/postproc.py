"""Final label generation: channel thresholding, binary morphology cleanup,
monotone cubic threshold interpolation across slices, three-phase composition."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .nn import ShapeError

HOLE_AREA = 512
MIN_OBJECT_AREA = 128
GT_MIN_OBJECT_AREA = 256
BASELINE_HOLE_AREA = 256
DEFAULT_RADIUS = 2

FOUR_CONN = ndimage.generate_binary_structure(2, 1)
EIGHT_CONN = ndimage.generate_binary_structure(2, 2)


def threshold_channel(scores, tau):
    """Binary mask of pixels whose score is at least ``tau``."""
    return np.asarray(scores) >= tau


def disk(radius):
    if radius < 1:
        raise ValueError("structuring element radius must be >= 1")
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return yy * yy + xx * xx <= radius * radius


def fill_holes(b, max_area=HOLE_AREA):
    """Fill background 4-components that miss the border and have area <= ``max_area``."""
    if max_area < 0:
        raise ValueError("max_area must be >= 0")
    b = np.asarray(b, dtype=bool)
    comps, n = ndimage.label(~b, structure=FOUR_CONN)
    if n == 0:
        return b.copy()
    sizes = np.bincount(comps.ravel(), minlength=n + 1)
    border = np.unique(np.concatenate([comps[0], comps[-1], comps[:, 0], comps[:, -1]]))
    fill = sizes <= max_area
    fill[0] = False
    fill[border] = False
    return b | fill[comps]


def erode(b, radius=DEFAULT_RADIUS):
    """Erosion by a disk; pixels outside the image count as background."""
    return ndimage.binary_erosion(np.asarray(b, dtype=bool), structure=disk(radius),
                                  border_value=0)


def dilate(b, radius=DEFAULT_RADIUS):
    return ndimage.binary_dilation(np.asarray(b, dtype=bool), structure=disk(radius),
                                   border_value=0)


def remove_small(b, min_area=MIN_OBJECT_AREA):
    """Clear 8-connected foreground components with area below ``min_area``."""
    if min_area < 0:
        raise ValueError("min_area must be >= 0")
    b = np.asarray(b, dtype=bool)
    comps, n = ndimage.label(b, structure=EIGHT_CONN)
    if n == 0:
        return b.copy()
    sizes = np.bincount(comps.ravel(), minlength=n + 1)
    keep = sizes >= min_area
    keep[0] = False
    return keep[comps]


def cleanup_aggregates(b, hole_area=HOLE_AREA, radius=DEFAULT_RADIUS,
                       min_area=MIN_OBJECT_AREA):
    """Fill holes, erode, drop small objects, dilate back."""
    b = fill_holes(b, hole_area)
    b = erode(b, radius)
    b = remove_small(b, min_area)
    return dilate(b, radius)


def direct_threshold_baseline(img, tau, min_area=MIN_OBJECT_AREA, hole_area=BASELINE_HOLE_AREA):
    """Aggregates by thresholding the input slice itself, then light cleanup."""
    b = threshold_channel(img, tau)
    b = remove_small(b, min_area)
    return fill_holes(b, hole_area)


def compose_threephase(agg, pore, aggregate_id=0, mortar_id=1, porosity_id=2):
    """Label image: pores first, then aggregates, mortar everywhere else."""
    agg = np.asarray(agg, dtype=bool)
    pore = np.asarray(pore, dtype=bool)
    if agg.shape != pore.shape:
        raise ShapeError(f"aggregate mask {agg.shape} and pore mask {pore.shape} differ")
    out = np.full(agg.shape, mortar_id, dtype=np.uint8)
    out[agg] = aggregate_id
    out[pore] = porosity_id
    return out


# --------------------------------------------------------------------------
# threshold curves

def pchip_slopes(x, y):
    """Shape-preserving derivatives at the knots of a monotone cubic Hermite interpolant.

    Interior slopes are the weighted harmonic mean of the neighbouring
    secants (zero at local extrema and where a secant vanishes). End slopes
    use the one-sided three-point formula, clipped so they never point
    against the adjacent secant nor exceed three times it.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h = np.diff(x)
    delta = np.diff(y) / h
    n = len(x)
    d = np.zeros(n)
    if n == 2:
        d[:] = delta[0]
        return d
    for k in range(1, n - 1):
        if delta[k - 1] * delta[k] <= 0:
            d[k] = 0.0
        else:
            w1 = 2 * h[k] + h[k - 1]
            w2 = h[k] + 2 * h[k - 1]
            # a vanishing secant overflows the reciprocals; the slope tends to 0
            with np.errstate(over="ignore"):
                d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k])
    d[0] = _end_slope(h[0], h[1], delta[0], delta[1])
    d[-1] = _end_slope(h[-1], h[-2], delta[-1], delta[-2])
    return d


def _end_slope(h0, h1, m0, m1):
    d = ((2 * h0 + h1) * m0 - h0 * m1) / (h0 + h1)
    if np.sign(d) != np.sign(m0):
        return 0.0
    if np.sign(m0) != np.sign(m1) and abs(d) > abs(3 * m0):
        return 3 * m0
    return d


@dataclass
class ThresholdCurve:
    """Knots ``(slice index, threshold)`` with strictly increasing indices."""

    index: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        self.index = np.asarray(self.index, dtype=np.float64)
        self.tau = np.asarray(self.tau, dtype=np.float64)
        if self.index.shape != self.tau.shape or self.index.ndim != 1:
            raise ValueError("knot indices and thresholds must be equal-length vectors")
        if len(self.index) < 1:
            raise ValueError("a threshold curve needs at least one knot")
        if np.any(np.diff(self.index) <= 0):
            raise ValueError("knot indices must be strictly increasing")

    def __call__(self, slice_index):
        return interp_thresholds(self, slice_index)


def interp_thresholds(curve: ThresholdCurve, slice_index):
    """Threshold at ``slice_index`` (scalar or array); clamps outside the knots."""
    q = np.asarray(slice_index, dtype=np.float64)
    x, y = curve.index, curve.tau
    if len(x) == 1:
        return np.full(q.shape, y[0]) if q.ndim else float(y[0])
    d = pchip_slopes(x, y)
    qc = np.clip(q, x[0], x[-1])
    k = np.clip(np.searchsorted(x, qc, side="right") - 1, 0, len(x) - 2)
    h = x[k + 1] - x[k]
    t = (qc - x[k]) / h
    t2, t3 = t * t, t * t * t
    out = ((2 * t3 - 3 * t2 + 1) * y[k] + (t3 - 2 * t2 + t) * h * d[k]
           + (-2 * t3 + 3 * t2) * y[k + 1] + (t3 - t2) * h * d[k + 1])
    # exact at knots regardless of rounding in the basis polynomials
    out = np.where(t == 0, y[k], np.where(t == 1, y[k + 1], out))
    return out if q.ndim else float(out)


def write_threshold_csv(path, curve: ThresholdCurve):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("slice_index", "tau"))
        for i, t in zip(curve.index, curve.tau):
            writer.writerow((repr(float(i)), repr(float(t))))


def read_threshold_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no threshold knots")
    return ThresholdCurve([float(r["slice_index"]) for r in rows],
                          [float(r["tau"]) for r in rows])


def otsu_threshold(values):
    """Otsu's threshold of a sample of values (used when no manual knots exist)."""
    from skimage.filters import threshold_otsu

    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0 or values.min() == values.max():
        raise ValueError("Otsu's method needs at least two distinct values")
    return float(threshold_otsu(values))
