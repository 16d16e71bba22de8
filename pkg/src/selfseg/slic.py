"""Grayscale SLIC superpixels.

Centers are seeded on a regular grid of step ``S = sqrt(h*w/k)``, nudged to
the lowest-gradient pixel of their 3x3 neighbourhood, then refined by local
k-means in which every pixel inside a ``2S x 2S`` window around a center is
compared using

    D = sqrt(d_c**2 + (d_s / S)**2 * m**2)

with ``d_c`` the intensity difference and ``d_s`` the Euclidean pixel
distance. A final pass makes every superpixel 4-connected by merging stray
components into the neighbouring region they share the longest border with.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.measure import label as label_components


@dataclass(frozen=True)
class SuperpixelMap:
    ids: np.ndarray
    count: int

    @property
    def shape(self):
        return self.ids.shape

    def sizes(self):
        return np.bincount(self.ids.ravel(), minlength=self.count)


def _grid_shape(h, w, k):
    # factor k into rows x cols matching the image aspect; ties favour columns
    best = None
    for ny in range(1, k + 1):
        nx = max(1, int(round(k / ny)))
        if ny > h or nx > w:
            continue
        key = (abs(ny * nx - k), abs(np.log((h / ny) / (w / nx))), -nx)
        if best is None or key < best[0]:
            best = (key, ny, nx)
    if best is None:
        return 1, 1
    return best[1], best[2]


def _perturb(img, centers):
    """Move every center to the lowest-gradient pixel in its 3x3 neighbourhood."""
    h, w = img.shape
    padded = np.pad(img, 1, mode="edge")
    gy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    gx = padded[1:-1, 2:] - padded[1:-1, :-2]
    grad = gx * gx + gy * gy
    out = []
    for cy, cx in centers:
        y0, y1 = max(cy - 1, 0), min(cy + 2, h)
        x0, x1 = max(cx - 1, 0), min(cx + 2, w)
        win = grad[y0:y1, x0:x1]
        iy, ix = np.unravel_index(np.argmin(win), win.shape)
        out.append((y0 + iy, x0 + ix))
    return out


def slic_segment(img, n_segments, compactness=0.1, iters=10, rng_seed=None):
    """Partition a 2-D grayscale image into roughly ``n_segments`` superpixels.

    The procedure is deterministic; ``rng_seed`` is accepted for interface
    symmetry with the other stochastic stages and is unused.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("slic_segment expects a non-empty 2-D image")
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    if compactness <= 0:
        raise ValueError("compactness must be > 0")
    h, w = img.shape
    step = np.sqrt(h * w / n_segments)
    ny, nx = _grid_shape(h, w, n_segments)
    if n_segments == 1 or step < 1 or ny * nx == 1:
        return SuperpixelMap(np.zeros((h, w), dtype=np.int32), 1)

    ys = ((np.arange(ny) + 0.5) * h / ny).astype(int)
    xs = ((np.arange(nx) + 0.5) * w / nx).astype(int)
    seeds = _perturb(img, [(y, x) for y in ys for x in xs])
    cy = np.array([s[0] for s in seeds], dtype=np.float64)
    cx = np.array([s[1] for s in seeds], dtype=np.float64)
    ci = img[cy.astype(int), cx.astype(int)]
    n_centers = len(seeds)

    spatial_w = (compactness / step) ** 2
    radius = int(np.ceil(step))
    labels = np.full((h, w), -1, dtype=np.int32)
    dist = np.empty((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(iters):
        dist.fill(np.inf)
        for c in range(n_centers):
            y0 = max(int(cy[c]) - radius, 0)
            y1 = min(int(cy[c]) + radius + 1, h)
            x0 = max(int(cx[c]) - radius, 0)
            x1 = min(int(cx[c]) + radius + 1, w)
            d = ((img[y0:y1, x0:x1] - ci[c]) ** 2
                 + spatial_w * ((yy[y0:y1, x0:x1] - cy[c]) ** 2
                                + (xx[y0:y1, x0:x1] - cx[c]) ** 2))
            win = dist[y0:y1, x0:x1]
            better = d < win
            win[better] = d[better]
            labels[y0:y1, x0:x1][better] = c
        # windows of radius ceil(S) around a grid cover the image, but guard anyway
        if (labels < 0).any():
            miss = labels < 0
            d_all = ((yy[miss, None] - cy) ** 2 + (xx[miss, None] - cx) ** 2)
            labels[miss] = np.argmin(d_all, axis=1)
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=n_centers)
        nonempty = counts > 0
        sy = np.bincount(flat, weights=yy.ravel(), minlength=n_centers)
        sx = np.bincount(flat, weights=xx.ravel(), minlength=n_centers)
        si = np.bincount(flat, weights=img.ravel(), minlength=n_centers)
        cy[nonempty] = sy[nonempty] / counts[nonempty]
        cx[nonempty] = sx[nonempty] / counts[nonempty]
        ci[nonempty] = si[nonempty] / counts[nonempty]

    return enforce_connectivity(labels)


def _relabel(ids):
    _, inv = np.unique(ids, return_inverse=True)
    inv = inv.reshape(ids.shape).astype(np.int32)
    return SuperpixelMap(inv, int(inv.max()) + 1)


def enforce_connectivity(ids):
    """Merge every non-largest 4-connected piece of a label into a neighbour.

    Each stray piece joins the adjacent label with which it shares the most
    4-neighbour edges (lowest id on ties). Pieces are only merged into kept
    components, so every round removes at least one component and the loop
    terminates.
    """
    ids = np.array(ids, dtype=np.int64, copy=True)
    while True:
        comps = label_components(ids, background=-1, connectivity=1)
        n_comp = comps.max()
        comp_size = np.bincount(comps.ravel(), minlength=n_comp + 1)
        comp_label = np.zeros(n_comp + 1, dtype=np.int64)
        comp_label[comps.ravel()] = ids.ravel()
        # largest component of each label (lowest component index on ties)
        order = np.lexsort((np.arange(n_comp + 1), -comp_size))
        keep = {}
        for c in order:
            if c == 0:
                continue
            keep.setdefault(comp_label[c], c)
        orphans = [c for c in range(1, n_comp + 1) if keep[comp_label[c]] != c]
        if not orphans:
            break
        # edges between horizontally / vertically adjacent pixels of different components
        a = np.concatenate([comps[:, :-1].ravel(), comps[:-1, :].ravel()])
        b = np.concatenate([comps[:, 1:].ravel(), comps[1:, :].ravel()])
        diff = a != b
        a, b = a[diff], b[diff]
        a, b = np.concatenate([a, b]), np.concatenate([b, a])
        orphan_set = np.zeros(n_comp + 1, dtype=bool)
        orphan_set[orphans] = True
        # only merge into kept components so two orphans can never swap labels
        sel = orphan_set[a] & ~orphan_set[b]
        a, b = a[sel], comp_label[b[sel]]
        target = {}
        for comp in np.unique(a):
            vals, cnt = np.unique(b[a == comp], return_counts=True)
            target[comp] = vals[np.argmax(cnt)]
        if not target:
            break
        new_label = comp_label.copy()
        for comp, lab in target.items():
            new_label[comp] = lab
        ids = new_label[comps]
    return _relabel(ids)


def region_pixels(sp: SuperpixelMap, i):
    """Pixel coordinates ``(row, col)`` of superpixel ``i`` as an ``(m, 2)`` array."""
    if not 0 <= i < sp.count:
        raise IndexError(f"superpixel index {i} out of range [0, {sp.count})")
    return np.argwhere(sp.ids == i)


def target_count_from_physical(img_h, img_w, pixel_size_mm, target_mm):
    """Number of superpixels whose side is about ``target_mm`` in physical units."""
    if pixel_size_mm <= 0 or target_mm <= 0:
        raise ValueError("pixel size and target size must be positive")
    side_px = target_mm / pixel_size_mm
    return max(1, int(round(img_h * img_w / side_px ** 2)))


def boundaries(sp: SuperpixelMap):
    """Boolean mask of pixels whose right or lower neighbour has another id."""
    ids = sp.ids
    edge = np.zeros(ids.shape, dtype=bool)
    edge[:, :-1] |= ids[:, :-1] != ids[:, 1:]
    edge[:-1, :] |= ids[:-1, :] != ids[1:, :]
    return edge


def boundary_overlay(img, sp: SuperpixelMap):
    """8-bit RGB preview of ``img`` with superpixel borders drawn in magenta."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    gray = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    rgb = np.repeat((gray * 255).astype(np.uint8)[..., None], 3, axis=2)
    rgb[boundaries(sp)] = (255, 0, 255)
    return rgb
