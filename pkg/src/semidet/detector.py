"""Anchor-free dense detector: tiny conv backbone (stride 8), four head
branches (class logits, centerness, ltrb regression, per-side uncertainty),
standard inside-box label assignment, supervised losses, and box decoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import Box, iou
from .optim import ParamDict

# Keeps log(delta) bounded and the Laplace likelihood non-negative.
DELTA_FLOOR = 1.0
LTRB_FLOOR = 1e-3


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int
    channels: tuple[int, int, int] = (8, 16, 16)
    tower_channels: int = 16
    stride: int = 8
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    cls_bias_init: float = -2.0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.stride != 2 ** len(self.channels):
            raise ValueError("stride must equal 2**len(channels)")


def init_detector_params(config: DetectorConfig, seed: int) -> ParamDict:
    """He-normal conv weights; zero biases except the classification prior."""
    rng = np.random.default_rng(seed)
    params: ParamDict = {}

    def conv(name: str, cout: int, cin: int, k: int = 3, bias: float = 0.0):
        std = math.sqrt(2.0 / (cin * k * k))
        w = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)))
        w.requires_grad = True
        b = Tensor(np.full(cout, bias))
        b.requires_grad = True
        params[f"{name}.w"] = w
        params[f"{name}.b"] = b

    c1, c2, c3 = config.channels
    conv("backbone.conv1", c1, 3)
    conv("backbone.conv2", c2, c1)
    conv("backbone.conv3", c3, c2)
    tc = config.tower_channels
    conv("cls_tower", tc, c3)
    conv("reg_tower", tc, c3)
    conv("cls_head", config.num_classes, tc, bias=config.cls_bias_init)
    conv("ctr_head", 1, tc)
    conv("reg_head", 4, tc)
    conv("unc_head", 4, tc)
    return params


@dataclass
class HeadOutputs:
    """Per-location predictions on the stride-8 grid, batched NCHW."""

    cls_logits: Tensor  # (N, C, h, w)
    ctr_logits: Tensor  # (N, 1, h, w)
    ltrb: Tensor        # (N, 4, h, w), strictly positive, pixel units
    delta: Tensor       # (N, 4, h, w), per-side uncertainty >= DELTA_FLOOR
    stride: int


def forward(params: ParamDict, images: np.ndarray, config: DetectorConfig) -> HeadOutputs:
    """Run the detector on a float image batch (N, H, W, 3) in [0, 1]."""
    if images.ndim == 3:
        images = images[None]
    n, h, w, _ = images.shape
    s = config.stride
    if h % s or w % s:
        raise ValueError(f"image size {h}x{w} not divisible by stride {s}")
    x = Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))

    def block(t, name, stride):
        return ad.relu(ad.conv2d(t, params[f"{name}.w"], params[f"{name}.b"],
                                 stride=stride, padding=1))

    t = block(x, "backbone.conv1", 2)
    t = block(t, "backbone.conv2", 2)
    t = block(t, "backbone.conv3", 2)
    cls_t = block(t, "cls_tower", 1)
    reg_t = block(t, "reg_tower", 1)

    def head(tower, name):
        return ad.conv2d(tower, params[f"{name}.w"], params[f"{name}.b"], padding=1)

    cls_logits = head(cls_t, "cls_head")
    ctr_logits = head(cls_t, "ctr_head")
    # Small floor keeps predicted box sides strictly positive so IoU terms
    # stay finite even when the raw regression output saturates negative.
    ltrb = (ad.softplus(head(reg_t, "reg_head")) + LTRB_FLOOR) * float(s)
    delta = ad.softplus(head(reg_t, "unc_head")) + DELTA_FLOOR
    return HeadOutputs(cls_logits, ctr_logits, ltrb, delta, s)


# ---------------------------------------------------------------------
# label assignment
# ---------------------------------------------------------------------

def grid_centers(grid_h: int, grid_w: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    cx = (np.arange(grid_w) + 0.5) * stride
    cy = (np.arange(grid_h) + 0.5) * stride
    return np.meshgrid(cx, cy)  # each (grid_h, grid_w)


def centerness_target(l: float, t: float, r: float, b: float) -> float:
    """sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)); 1 iff centered."""
    if min(l, t, r, b) <= 0:
        raise ValueError("centerness requires strictly positive side distances")
    return math.sqrt((min(l, r) / max(l, r)) * (min(t, b) / max(t, b)))


@dataclass
class LocationTargets:
    """Per-location targets; background rows carry class -1 and zeros."""

    class_idx: np.ndarray   # (h, w) int, -1 = background
    fg: np.ndarray          # (h, w) bool
    ltrb: np.ndarray        # (4, h, w)
    centerness: np.ndarray  # (h, w)
    box_idx: np.ndarray     # (h, w) int, index into the input box list, -1 = background


def assign_targets(boxes: list[Box], grid_h: int, grid_w: int,
                   stride: int) -> LocationTargets:
    """Standard inside-box assignment (no center sampling).

    A location is foreground when its center falls strictly inside at
    least one box; among candidates the smallest-area box wins, ties
    broken by lowest class id.
    """
    cx, cy = grid_centers(grid_h, grid_w, stride)
    class_idx = np.full((grid_h, grid_w), -1, dtype=np.int64)
    box_idx = np.full((grid_h, grid_w), -1, dtype=np.int64)
    ltrb = np.zeros((4, grid_h, grid_w))
    ctr = np.zeros((grid_h, grid_w))
    assigned = np.zeros((grid_h, grid_w), dtype=bool)
    for bi, b in sorted(enumerate(boxes), key=lambda ib: (ib[1].area, ib[1].class_id)):
        l = cx - b.x_min
        t = cy - b.y_min
        r = b.x_max - cx
        bt = b.y_max - cy
        inside = (l > 0) & (t > 0) & (r > 0) & (bt > 0) & ~assigned
        if not inside.any():
            continue
        assigned |= inside
        class_idx[inside] = b.class_id
        box_idx[inside] = bi
        ltrb[0][inside] = l[inside]
        ltrb[1][inside] = t[inside]
        ltrb[2][inside] = r[inside]
        ltrb[3][inside] = bt[inside]
        ctr[inside] = np.sqrt(
            (np.minimum(l, r) / np.maximum(l, r))[inside]
            * (np.minimum(t, bt) / np.maximum(t, bt))[inside])
    return LocationTargets(class_idx, assigned, ltrb, ctr, box_idx)


def stack_targets(targets: list[LocationTargets], num_classes: int):
    """Batch per-image targets into constant arrays for the loss."""
    n = len(targets)
    h, w = targets[0].class_idx.shape
    onehot = np.zeros((n, num_classes, h, w))
    fg = np.zeros((n, 1, h, w))
    ltrb = np.zeros((n, 4, h, w))
    ctr = np.zeros((n, 1, h, w))
    for i, tg in enumerate(targets):
        fg[i, 0] = tg.fg
        ltrb[i] = tg.ltrb
        ctr[i, 0] = tg.centerness
        ys, xs = np.nonzero(tg.fg)
        onehot[i, tg.class_idx[ys, xs], ys, xs] = 1.0
    return onehot, fg, ltrb, ctr


# ---------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------

def focal_terms(cls_logits: Tensor, onehot: np.ndarray, gamma: float,
                alpha: float) -> Tensor:
    """Per-element sigmoid focal loss (no reduction)."""
    t = Tensor(onehot)
    x = cls_logits
    p = ad.sigmoid(x)
    one_minus_p = 1.0 - p
    # log p = -softplus(-x); log(1-p) = -softplus(x) (numerically stable)
    pos = t * (alpha * one_minus_p * one_minus_p * ad.softplus(-x))
    neg = (1.0 - t) * ((1.0 - alpha) * p * p * ad.softplus(x))
    return pos + neg


def iou_loss_terms(pred_ltrb: Tensor, target_ltrb: np.ndarray,
                   fg: np.ndarray) -> Tensor:
    """-log(IoU) per location, masked so background contributes exactly 0."""
    g = Tensor(target_ltrb)
    fg_t = Tensor(fg)
    pl, pt = pred_ltrb[:, 0:1], pred_ltrb[:, 1:2]
    pr, pb = pred_ltrb[:, 2:3], pred_ltrb[:, 3:4]
    gl, gt = g[:, 0:1], g[:, 1:2]
    gr, gb = g[:, 2:3], g[:, 3:4]
    iw = ad.minimum(pl, gl) + ad.minimum(pr, gr)
    ih = ad.minimum(pt, gt) + ad.minimum(pb, gb)
    inter = iw * ih
    area_p = (pl + pr) * (pt + pb)
    area_g = (gl + gr) * (gt + gb)
    union = area_p + area_g - inter
    # background slots are masked to IoU = 1 before the division so they
    # contribute exactly zero loss and zero gradient
    union_safe = fg_t * union + (1.0 - fg_t)
    safe = (fg_t * inter) * ad.reciprocal(union_safe) + (1.0 - fg_t)
    return -1.0 * ad.log(safe)


def bce_terms(logits: Tensor, target: np.ndarray) -> Tensor:
    t = Tensor(target)
    return t * ad.softplus(-1.0 * logits) + (1.0 - t) * ad.softplus(logits)


def laplace_nll_terms(pred: Tensor, target: np.ndarray, delta: Tensor) -> Tensor:
    """|d - d*|/delta + log(delta), elementwise (non-negative for delta >= 1)."""
    err = ad.absolute(pred - Tensor(target))
    return err * ad.reciprocal(delta) + ad.log(delta)


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    reg: float
    ctr: float
    unc: float


def supervised_loss(outputs: HeadOutputs, targets: list[LocationTargets],
                    config: DetectorConfig) -> LossBreakdown:
    """Focal + IoU + centerness BCE + Laplace uncertainty likelihood.

    Foreground terms are normalized by the foreground count; with no
    foreground anywhere, only the classification term remains.
    """
    num_classes = config.num_classes
    onehot, fg, ltrb_t, ctr_t = stack_targets(targets, num_classes)
    n_pos = float(fg.sum())
    norm = 1.0 / max(1.0, n_pos)
    fg_t = Tensor(fg)

    cls_loss = ad.reduce_sum(
        focal_terms(outputs.cls_logits, onehot, config.focal_gamma,
                    config.focal_alpha)) * norm
    reg_loss = ad.reduce_sum(
        iou_loss_terms(outputs.ltrb, ltrb_t, fg)) * norm
    ctr_loss = ad.reduce_sum(
        fg_t * bce_terms(outputs.ctr_logits, ctr_t)) * norm
    unc_loss = ad.reduce_sum(
        fg_t * laplace_nll_terms(outputs.ltrb, ltrb_t, outputs.delta)) * (norm / 4.0)

    total = cls_loss + reg_loss + ctr_loss + unc_loss
    return LossBreakdown(total, cls_loss.item(), reg_loss.item(),
                         ctr_loss.item(), unc_loss.item())


# ---------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------

def nms(boxes: list[Box], iou_threshold: float) -> list[Box]:
    """Greedy class-wise NMS; discards same-class boxes with IoU > threshold."""
    remaining = sorted(boxes, key=lambda b: -b.score)
    kept: list[Box] = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [b for b in remaining
                     if b.class_id != best.class_id or iou(b, best) <= iou_threshold]
    return kept


def decode_detections(outputs: HeadOutputs, image_index: int,
                      image_hw: tuple[int, int], score_mode: str = "cls",
                      score_threshold: float = 0.3, nms_iou: float = 0.5,
                      max_pre_nms: int = 200) -> list[Box]:
    """Decode one image's head outputs into scored, NMS-filtered boxes.

    ``score_mode`` is "cls" (classification score only, the pseudo-label
    convention) or "cls_ctr" (cls * sqrt(centerness)).  Each kept box
    carries the per-side uncertainty of its source location.
    """
    if score_mode not in ("cls", "cls_ctr"):
        raise ValueError(f"unknown score_mode {score_mode!r}")
    if not (0.0 <= score_threshold <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    i = image_index
    probs = expit(outputs.cls_logits.data[i])          # (C, h, w)
    if score_mode == "cls_ctr":
        ctr = np.sqrt(expit(outputs.ctr_logits.data[i]))  # (1, h, w)
        probs = probs * ctr
    ltrb = outputs.ltrb.data[i]                         # (4, h, w)
    delta = outputs.delta.data[i]
    c_dim, gh, gw = probs.shape
    cx, cy = grid_centers(gh, gw, outputs.stride)
    img_h, img_w = image_hw

    cls_ids, ys, xs = np.nonzero(probs >= score_threshold)
    if len(cls_ids) == 0:
        return []
    scores = probs[cls_ids, ys, xs]
    if len(scores) > max_pre_nms:
        keep = np.argsort(-scores, kind="stable")[:max_pre_nms]
        cls_ids, ys, xs, scores = cls_ids[keep], ys[keep], xs[keep], scores[keep]

    boxes: list[Box] = []
    for cls, y, x, sc in zip(cls_ids, ys, xs, scores):
        l, t, r, b = ltrb[:, y, x]
        x0 = min(max(cx[y, x] - l, 0.0), img_w)
        y0 = min(max(cy[y, x] - t, 0.0), img_h)
        x1 = min(max(cx[y, x] + r, 0.0), img_w)
        y1 = min(max(cy[y, x] + b, 0.0), img_h)
        if x1 - x0 <= 0 or y1 - y0 <= 0:
            continue
        boxes.append(Box(x0, y0, x1, y1, int(cls), float(sc),
                         delta=tuple(float(v) for v in delta[:, y, x])))
    boxes.sort(key=lambda b: -b.score)
    return nms(boxes, nms_iou)
