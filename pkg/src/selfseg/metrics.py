"""Pixel-level scores of binary aggregate masks against ground truth."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ShapeError
from .postproc import GT_MIN_OBJECT_AREA, remove_small

METHODS = ("logit-threshold", "direct-threshold", "direct-argmax")
SCORE_NAMES = ("precision", "recall", "iou", "f1")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def confusion(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num, den, both_empty):
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def scores(c: ConfusionCounts):
    """``(precision, recall, iou, f1)``.

    A zero denominator yields 1 when prediction and ground truth are both
    empty and 0 otherwise.
    """
    both_empty = c.tp + c.fp == 0 and c.tp + c.fn == 0
    p = _ratio(c.tp, c.tp + c.fp, both_empty)
    r = _ratio(c.tp, c.tp + c.fn, both_empty)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn, both_empty)
    f1 = _ratio(2 * p * r, p + r, both_empty)
    return p, r, iou, f1


def clean_ground_truth(gt_mask, min_area=GT_MIN_OBJECT_AREA):
    return remove_small(gt_mask, min_area)


def evaluate_suite(predictions, gt_masks, slice_ids=None, gt_min_area=GT_MIN_OBJECT_AREA):
    """Score each method's per-slice aggregate masks against cleaned ground truth.

    ``predictions`` maps a method name to a sequence of binary masks (one per
    ground-truth slice). Returns a list of row dicts with one row per method
    and slice plus a ``mean`` row per method.
    """
    if gt_masks is None or len(gt_masks) == 0:
        raise ValueError("evaluation needs ground-truth slices")
    slice_ids = list(range(len(gt_masks))) if slice_ids is None else list(slice_ids)
    gts = [clean_ground_truth(g, gt_min_area) for g in gt_masks]
    rows = []
    for method, preds in predictions.items():
        if len(preds) != len(gts):
            raise ValueError(f"{method}: {len(preds)} predictions for {len(gts)} ground-truth slices")
        per = []
        for sid, pred, gt in zip(slice_ids, preds, gts):
            vals = scores(confusion(pred, gt))
            per.append(vals)
            rows.append({"method": method, "slice": sid, **dict(zip(SCORE_NAMES, vals))})
        mean = np.mean(per, axis=0)
        rows.append({"method": method, "slice": "mean",
                     **dict(zip(SCORE_NAMES, map(float, mean)))})
    return rows


def mean_score(rows, method, name="iou"):
    for row in rows:
        if row["method"] == method and row["slice"] == "mean":
            return row[name]
    raise KeyError(method)


def write_scores_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("method", "slice") + SCORE_NAMES)
        for row in rows:
            writer.writerow([row["method"], row["slice"]] + [repr(float(row[k])) for k in SCORE_NAMES])


def agreement_image(pred, gt):
    """RGB image: true positives white, false positives red, false negatives blue."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    rgb = np.zeros(pred.shape + (3,), dtype=np.uint8)
    rgb[pred & gt] = (255, 255, 255)
    rgb[pred & ~gt] = (255, 0, 0)
    rgb[~pred & gt] = (0, 0, 255)
    return rgb
