"""COCO-style detection metrics: IoU matching, PR curves, AP and mAP.

AP uses 101-point interpolation (max precision at recall >= r over
r in {0.00, 0.01, ..., 1.00}); mAP averages per-class APs; the headline
number additionally averages over IoU thresholds 0.50:0.05:0.95.
Classes with zero ground-truth instances are excluded from the mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, box_from_xywh, iou

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

# COCO-style category ids are 1-based; internal class ids are 0-based.
CATEGORY_ID_OFFSET = 1


def match_detections(dets: list[Box], gts: list[Box],
                     iou_threshold: float) -> list[bool]:
    """Greedy TP/FP flags for a single class on a single image.

    Detections are visited in descending score (stable order for ties);
    each ground truth may be claimed at most once, by the best-IoU
    unmatched ground truth with IoU >= threshold.  Returned flags align
    with the input detection order.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    flags = [False] * len(dets)
    taken = [False] * len(gts)
    for i in order:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            v = iou(dets[i], gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold:
            taken[best_j] = True
            flags[i] = True
    return flags


@dataclass
class PRCurve:
    """Score-ordered precision/recall points for one class and threshold."""

    recalls: np.ndarray
    precisions: np.ndarray
    tp_cum: np.ndarray
    fp_cum: np.ndarray
    n_gt: int


def build_pr_curve(scores: list[float], tp_flags: list[bool], n_gt: int) -> PRCurve:
    """PR points from per-detection (score, TP) pairs pooled over images."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    tp = np.array([tp_flags[i] for i in order], dtype=np.float64)
    fp = 1.0 - tp
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    denom = tp_cum + fp_cum
    precisions = np.divide(tp_cum, denom, out=np.zeros_like(tp_cum), where=denom > 0)
    recalls = tp_cum / n_gt if n_gt > 0 else np.zeros_like(tp_cum)
    return PRCurve(recalls, precisions, tp_cum, fp_cum, n_gt)


def average_precision(curve: PRCurve) -> float:
    """101-point interpolated AP: mean over r of max precision at recall >= r."""
    if curve.n_gt == 0:
        raise ValueError("AP undefined for a class with zero ground truths")
    if len(curve.recalls) == 0:
        return 0.0
    # Monotone envelope: best precision achievable at or beyond each cut.
    prec_envelope = np.maximum.accumulate(curve.precisions[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    # First index where recall >= r; past the last point, precision is 0.
    idx = np.searchsorted(curve.recalls, grid, side="left")
    interp = np.where(idx < len(prec_envelope),
                      prec_envelope[np.minimum(idx, len(prec_envelope) - 1)], 0.0)
    return float(interp.mean())


@dataclass
class APTable:
    """AP per class and IoU threshold; NaN marks classes with no ground truth."""

    class_ids: list[int]
    thresholds: tuple[float, ...]
    ap: np.ndarray  # shape (n_classes, n_thresholds), NaN where undefined
    per_class_5095: dict[int, float] = field(init=False)
    map_per_threshold: dict[float, float] = field(init=False)
    map_50: float = field(init=False)
    map_5095: float = field(init=False)

    def __post_init__(self):
        valid = ~np.isnan(self.ap[:, 0])
        self.per_class_5095 = {
            c: float(self.ap[i].mean())
            for i, c in enumerate(self.class_ids) if valid[i]
        }
        self.map_per_threshold = {}
        for j, t in enumerate(self.thresholds):
            col = self.ap[valid, j]
            self.map_per_threshold[t] = float(col.mean()) if col.size else float("nan")
        self.map_50 = self.map_per_threshold.get(0.5, float("nan"))
        self.map_5095 = float(np.mean(list(self.map_per_threshold.values())))


def map_coco(dets_by_image: dict, gts_by_image: dict, class_ids: list[int],
             thresholds: tuple[float, ...] = COCO_THRESHOLDS) -> APTable:
    """Full COCO-style evaluation over per-image Box lists.

    ``dets_by_image`` and ``gts_by_image`` map image id -> list[Box]; the
    image id universe is the union of both mappings.
    """
    if not class_ids:
        raise ValueError("empty class universe")
    image_ids = sorted(set(dets_by_image) | set(gts_by_image))
    ap = np.full((len(class_ids), len(thresholds)), np.nan)
    for ci, cls in enumerate(class_ids):
        gts_per_img = {img: [b for b in gts_by_image.get(img, []) if b.class_id == cls]
                       for img in image_ids}
        dets_per_img = {img: [b for b in dets_by_image.get(img, []) if b.class_id == cls]
                        for img in image_ids}
        n_gt = sum(len(v) for v in gts_per_img.values())
        if n_gt == 0:
            continue
        for ti, thr in enumerate(thresholds):
            scores: list[float] = []
            flags: list[bool] = []
            for img in image_ids:
                f = match_detections(dets_per_img[img], gts_per_img[img], thr)
                scores.extend(b.score for b in dets_per_img[img])
                flags.extend(f)
            ap[ci, ti] = average_precision(build_pr_curve(scores, flags, n_gt))
    return APTable(list(class_ids), tuple(thresholds), ap)


# ---------------------------------------------------------------------
# COCO result-file interop
# ---------------------------------------------------------------------

def write_results(dets_by_image: dict, path) -> None:
    """Write detections as a COCO result JSON (bbox in xywh)."""
    records = []
    for img_id in sorted(dets_by_image):
        for b in dets_by_image[img_id]:
            x, y, w, h = b.to_xywh()
            records.append({
                "image_id": img_id,
                "category_id": b.class_id + CATEGORY_ID_OFFSET,
                "bbox": [round(x, 2), round(y, 2), round(w, 2), round(h, 2)],
                "score": round(float(b.score), 6),
            })
    with open(path, "w", encoding="utf-8") as f:
        json.dump(records, f, separators=(",", ":"), sort_keys=True)


def read_results(path) -> dict:
    """Read a COCO result JSON into image id -> list[Box]."""
    with open(path, encoding="utf-8") as f:
        records = json.load(f)
    out: dict = {}
    for r in records:
        x, y, w, h = r["bbox"]
        if w <= 0 or h <= 0:
            raise ValueError(f"non-positive bbox extent in result for image {r['image_id']}")
        box = box_from_xywh(x, y, w, h, r["category_id"] - CATEGORY_ID_OFFSET,
                            score=float(r["score"]))
        out.setdefault(r["image_id"], []).append(box)
    return out
