"""Image, cache and manifest files.

Formats:
  * 16-bit binary PGM (P5, maxval 65535, big-endian samples) for raw slices
  * 8-bit binary PGM or PNG for label images (pixel value = class id)
  * single-channel 16-bit PNG via Pillow
  * standardized-slice cache: header + float64 little-endian samples
  * JSON manifest per sample listing slices in order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

CACHE_MAGIC = b"SSEGSTD1"
# magic, version, height, width, mean, std
CACHE_HEADER = struct.Struct("<8sIIIdd")
CACHE_VERSION = 1


class FormatError(ValueError):
    pass


def _pgm_tokens(data):
    """Parse the PGM header; returns ``(width, height, maxval, offset)``."""
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(int(data[start:pos]))
    # exactly one whitespace byte separates the header from the samples
    return tokens[0], tokens[1], tokens[2], pos + 1


def read_pgm(path):
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval, off = _pgm_tokens(data)
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * dtype.itemsize
    if len(data) - off < n:
        raise FormatError(f"{path}: expected {n} sample bytes, found {len(data) - off}")
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    return arr.astype(np.uint16 if maxval > 255 else np.uint8)


def write_pgm(path, img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise FormatError("PGM images are 2-D")
    if img.dtype == np.uint8:
        maxval, body = 255, img.tobytes()
    elif img.dtype == np.uint16:
        maxval, body = 65535, img.astype(">u2").tobytes()
    else:
        raise FormatError(f"PGM writer supports uint8/uint16, got {img.dtype}")
    h, w = img.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + body)


def read_png(path):
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a single-channel PNG")
    return arr.astype(np.uint16) if arr.dtype.itemsize > 1 else arr.astype(np.uint8)


def write_png(path, img):
    img = np.asarray(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if img.ndim == 3 and img.shape[2] == 3 and img.dtype == np.uint8:
        Image.fromarray(img, mode="RGB").save(path)
    elif img.dtype == np.uint8 and img.ndim == 2:
        Image.fromarray(img, mode="L").save(path)
    elif img.dtype == np.uint16 and img.ndim == 2:
        Image.fromarray(img.astype(np.uint16)).save(path)
    else:
        raise FormatError(f"unsupported PNG array {img.dtype} {img.shape}")


def read_image(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".png":
        return read_png(path)
    raise FormatError(f"unknown image type: {path}")


def write_image(path, img):
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return write_pgm(path, img)
    if suffix == ".png":
        return write_png(path, img)
    raise FormatError(f"unknown image type: {path}")


def write_label_image(path, labels):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise FormatError("label ids must fit in 8 bits")
    write_image(path, labels.astype(np.uint8))


# --------------------------------------------------------------------------
# standardized slice cache

def write_cache(path, img, mean, std):
    img = np.asarray(img, dtype="<f8")
    if img.ndim != 2:
        raise FormatError("cached slices are 2-D")
    h, w = img.shape
    header = CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, h, w, float(mean), float(std))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(header + img.tobytes())


def read_cache(path):
    """Return ``(image, mean, std)`` from :func:`write_cache` output."""
    data = Path(path).read_bytes()
    if len(data) < CACHE_HEADER.size:
        raise FormatError(f"{path}: truncated cache header")
    magic, version, h, w, mean, std = CACHE_HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise FormatError(f"{path}: not a standardized-slice cache")
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    body = data[CACHE_HEADER.size:]
    if len(body) != h * w * 8:
        raise FormatError(f"{path}: expected {h * w * 8} bytes of samples, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(h, w).astype(np.float64), mean, std


# --------------------------------------------------------------------------
# manifests

def write_manifest(path, sample_id, files, pixel_size_mm, clip_thresholds, extra=None):
    if len(files) != len(clip_thresholds):
        raise ValueError("one clip threshold per slice file is required")
    doc = {
        "sample_id": sample_id,
        "pixel_size_mm": pixel_size_mm,
        "slices": [{"file": str(f), "clip_threshold": int(t)}
                   for f, t in zip(files, clip_thresholds)],
    }
    if extra:
        doc.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    for key in ("sample_id", "pixel_size_mm", "slices"):
        if key not in doc:
            raise FormatError(f"{path}: manifest lacks '{key}'")
    if not doc["slices"]:
        raise FormatError(f"{path}: manifest lists no slices")
    return doc


def load_stack(manifest_path):
    """Read the raw slices of a manifest into a :class:`~selfseg.datapipe.SliceStack`."""
    from .datapipe import SliceStack

    manifest_path = Path(manifest_path)
    doc = read_manifest(manifest_path)
    base = manifest_path.parent
    slices = []
    for entry in doc["slices"]:
        f = base / entry["file"]
        if not f.exists():
            raise FileNotFoundError(f"slice listed in manifest not found: {f}")
        slices.append(read_image(f))
    shapes = {s.shape for s in slices}
    if len(shapes) != 1:
        raise FormatError(f"{manifest_path}: slices differ in size {sorted(shapes)}")
    return SliceStack(np.stack(slices), doc["sample_id"], float(doc["pixel_size_mm"]),
                      [e["clip_threshold"] for e in doc["slices"]])
