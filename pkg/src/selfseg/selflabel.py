"""Self-annotation: turning network scores into dynamic training labels.

The loop per image is: standardize each output channel, classify pixels by
argmax, replace each pixel's class by the most frequent class of its
superpixel, optionally overwrite pixels whose class is fixed in advance,
and one-hot encode the result as the cross-entropy target.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ShapeError
from .slic import SuperpixelMap

NORM_EPS = 1e-8
NO_LABEL = -1

DEFAULT_CLASSES = ("aggregate", "mortar", "porosity")


@dataclass(frozen=True)
class ClassSet:
    names: tuple

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValueError("a class set needs at least two classes")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"class names must be unique: {self.names}")

    def __len__(self):
        return len(self.names)

    def index(self, name):
        return self.names.index(name)

    @classmethod
    def for_mode(cls, mode):
        if mode in ("US3", "SS3"):
            return cls(DEFAULT_CLASSES)
        if mode == "US4":
            return cls(DEFAULT_CLASSES + ("extra",))
        raise ValueError(f"unknown mode {mode!r}")


def normalize_channels(y, eps=NORM_EPS, return_cache=False):
    """Standardize every channel of every image over its spatial extent.

    ``y`` is ``(n, h, w, c)`` (or a single ``(h, w, c)`` image). The
    population standard deviation is used and ``eps`` is added to it, so a
    constant channel maps to zeros.
    """
    y = np.asarray(y)
    mu = y.mean(axis=(-3, -2), keepdims=True)
    centered = y - mu
    sigma = np.sqrt((centered ** 2).mean(axis=(-3, -2), keepdims=True))
    out = centered / (sigma + eps)
    if return_cache:
        return out, (centered, sigma, eps)
    return out


def normalize_channels_backward(grad_out, cache):
    centered, sigma, eps = cache
    s = sigma + eps
    g_mean = grad_out.mean(axis=(-3, -2), keepdims=True)
    gx_mean = (grad_out * centered).mean(axis=(-3, -2), keepdims=True)
    safe_sigma = np.where(sigma > 0, sigma, 1.0)
    return (grad_out - g_mean) / s - centered * gx_mean / (s * s * safe_sigma)


def argmax_classify(y_norm, channels=None):
    """Per-pixel index of the highest score; ties go to the lowest channel.

    With ``channels`` given, only those channels compete and the returned
    labels are their original channel indices.
    """
    y_norm = np.asarray(y_norm)
    if y_norm.shape[-1] < 2:
        raise ShapeError("argmax classification needs at least two channels")
    if channels is None:
        return np.argmax(y_norm, axis=-1)
    channels = np.asarray(channels)
    return channels[np.argmax(y_norm[..., channels], axis=-1)]


def superpixel_refine(labels, sp: SuperpixelMap, n_classes=None, voters=None):
    """Assign every superpixel the most frequent label found inside it.

    With a boolean ``voters`` mask only those pixels are counted; a
    superpixel without any voter falls back to counting all its pixels.
    """
    labels = np.asarray(labels)
    if labels.shape != sp.ids.shape:
        raise ShapeError(f"label image {labels.shape} does not match superpixel map {sp.ids.shape}")
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    keys = sp.ids.ravel() * n_classes + labels.ravel()
    size = sp.count * n_classes
    counts = np.bincount(keys, minlength=size).reshape(sp.count, n_classes)
    if voters is not None:
        voters = np.asarray(voters, dtype=bool)
        if voters.shape != labels.shape:
            raise ShapeError(f"voter mask {voters.shape} does not match labels {labels.shape}")
        voted = np.bincount(keys[voters.ravel()], minlength=size).reshape(sp.count, n_classes)
        has_vote = voted.sum(axis=1) > 0
        counts[has_vote] = voted[has_vote]
    mode = np.argmax(counts, axis=1)
    return mode[sp.ids]


def inject_fixed_labels(labels, fixed):
    """Overwrite labels wherever ``fixed`` holds a class id (``-1`` = free)."""
    labels = np.asarray(labels)
    fixed = np.asarray(fixed)
    if labels.shape != fixed.shape:
        raise ShapeError(f"label image {labels.shape} does not match fixed mask {fixed.shape}")
    return np.where(fixed >= 0, fixed, labels)


def fixed_mask_from_binary(mask, class_id):
    """Build a fixed-label mask assigning ``class_id`` where ``mask`` is set."""
    return np.where(np.asarray(mask, dtype=bool), class_id, NO_LABEL).astype(np.int16)


def one_hot(labels, n_classes, dtype=np.float64):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return np.eye(n_classes, dtype=dtype)[labels]


def cross_entropy(y_norm, target):
    """Softmax cross-entropy summed over the pixels of one image.

    Returns ``(loss, grad)`` with ``grad = softmax(y_norm) - target``. For a
    batch ``(n, h, w, c)`` the loss is a length-``n`` vector of per-image sums.
    """
    y_norm = np.asarray(y_norm)
    target = np.asarray(target)
    if y_norm.shape != target.shape:
        raise ShapeError(f"scores {y_norm.shape} and targets {target.shape} differ")
    shifted = y_norm - y_norm.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_z
    per_pixel = -(log_p * target).sum(axis=-1)
    loss = per_pixel.sum(axis=(-2, -1))
    grad = np.exp(log_p) - target
    return loss, grad


def make_dynamic_label(y, sp: SuperpixelMap, mode="US", fixed=None, channels=None,
                       n_classes=None):
    """Dynamic label and one-hot target for a single ``(h, w, c)`` output.

    ``mode="US"`` classifies over all channels. ``mode="SS"`` classifies
    over ``channels`` only (by default all but the last channel, which is
    reserved for the fixed class), refines using only the pixels without a
    fixed label as voters, then injects the fixed labels.
    """
    y = np.asarray(y)
    n_classes = n_classes or y.shape[-1]
    labels = label_from_normalized(normalize_channels(y), sp, mode, fixed, channels)
    return labels, one_hot(labels, n_classes, dtype=y.dtype)


def label_from_normalized(y_norm, sp, mode="US", fixed=None, channels=None):
    """Dynamic label of one image from its normalized output."""
    c = y_norm.shape[-1]
    if mode == "US":
        return superpixel_refine(argmax_classify(y_norm, channels), sp, c)
    if mode != "SS":
        raise ValueError(f"mode must be 'US' or 'SS', got {mode!r}")
    if fixed is None:
        raise ValueError("semi-supervised labelling needs a fixed-label mask")
    if channels is None:
        channels = list(range(c - 1))
    fixed = np.asarray(fixed)
    labels = superpixel_refine(argmax_classify(y_norm, channels), sp, c, voters=fixed < 0)
    return inject_fixed_labels(labels, fixed)


def self_annotation_loss(y, maps, mode="US", fixed=None, channels=None, return_labels=False):
    """Mean per-image dynamic cross-entropy of a batch and its gradient w.r.t. ``y``.

    ``y`` is the raw network output ``(n, h, w, c)``; ``maps`` holds one
    superpixel map per image and ``fixed`` one fixed-label mask per image
    (semi-supervised mode). The gradient is that of the batch mean. Labels
    are targets only: no gradient flows through their construction.
    """
    n = y.shape[0]
    y_norm, norm_cache = normalize_channels(y, return_cache=True)
    c = y.shape[-1]
    labels = np.stack([
        label_from_normalized(y_norm[i], maps[i], mode,
                              None if fixed is None else fixed[i], channels)
        for i in range(n)
    ])
    targets = one_hot(labels, c, dtype=y.dtype)
    losses, g_norm = cross_entropy(y_norm, targets)
    grad = normalize_channels_backward(g_norm / n, norm_cache)
    out = (float(losses.mean()), losses, grad)
    if return_labels:
        out += (labels,)
    return out
