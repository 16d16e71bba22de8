"""Input checks shared by the estimator API and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .nn import ShapeError


def check_images(X, name="X", dtype=np.float64):
    """Coerce ``X`` to a finite ``(n, h, w)`` float array; a single 2-D image becomes ``n = 1``."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=dtype,
                    ensure_all_finite=True, input_name=name)
    if X.ndim == 2:
        X = X[None]
    if X.ndim == 4 and X.shape[-1] == 1:
        X = X[..., 0]
    if X.ndim != 3:
        raise ShapeError(f"{name} must be (n, h, w) grayscale images, got shape {X.shape}")
    return X


def check_fixed_masks(fixed, shape, n_classes, name="fixed"):
    """Fixed-label masks: integer class ids, ``-1`` where the label is free."""
    if fixed is None:
        return None
    fixed = np.asarray(fixed)
    if fixed.ndim == 2:
        fixed = fixed[None]
    if fixed.shape != tuple(shape):
        raise ShapeError(f"{name} has shape {fixed.shape}, expected {tuple(shape)}")
    if not np.issubdtype(fixed.dtype, np.integer):
        raise ValueError(f"{name} must hold integer class ids")
    if fixed.size and (fixed.min() < -1 or fixed.max() >= n_classes):
        raise ValueError(f"{name} ids must lie in [-1, {n_classes})")
    return fixed.astype(np.int16)


def check_superpixel_maps(maps, n, shape, name="superpixels"):
    from .slic import SuperpixelMap

    if maps is None:
        return None
    maps = list(maps)
    if len(maps) != n:
        raise ShapeError(f"{name}: {len(maps)} maps for {n} images")
    out = []
    for m in maps:
        if not isinstance(m, SuperpixelMap):
            ids = np.asarray(m, dtype=np.int32)
            m = SuperpixelMap(ids, int(ids.max()) + 1)
        if m.shape != tuple(shape):
            raise ShapeError(f"{name}: map of shape {m.shape} for images of shape {tuple(shape)}")
        out.append(m)
    return out
