"""Teacher-student self-training: burn-in, EMA teacher updates,
pseudo-label generation, the uncertainty-gated unsupervised losses, and
the combined training loop with validation-based model selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import detector as det
from .autodiff import Tensor, backward, no_grad
from .augment import AugPolicy, sample_batch_scale, strong_augment, weak_augment
from .boxes import Box
from .data import SceneDataset, DatasetSplit
from .detector import (DetectorConfig, HeadOutputs, LocationTargets,
                       assign_targets, decode_detections, focal_terms, forward,
                       stack_targets, supervised_loss, DELTA_FLOOR)
from .evalmap import APTable, map_coco
from .optim import ParamDict, SGDState, clone_params, copy_values, sgd_step


@dataclass
class SelfTrainConfig:
    alpha: float = 0.99
    tau: float = 0.5
    sigma: float = 0.1
    lambda_u: float = 2.0
    burn_in_iters: int = 800
    bg_weight: float = 0.1       # background down-weight in the unsupervised cls loss
    pseudo_nms_iou: float = 0.5
    batch_labeled: int = 8
    batch_unlabeled: int = 4
    eval_score_mode: str = "cls"
    eval_score_threshold: float = 0.05
    eval_nms_iou: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be non-negative")


@dataclass
class TeacherStudentState:
    teacher: ParamDict
    student: ParamDict
    optimizer: SGDState
    config: SelfTrainConfig
    iteration: int = 0

    def __post_init__(self):
        if self.teacher.keys() != self.student.keys():
            raise ValueError("teacher/student parameter name sets differ")
        for name in self.teacher:
            if self.teacher[name].shape != self.student[name].shape:
                raise ValueError(f"teacher/student shape mismatch at {name!r}")


@dataclass(frozen=True)
class PseudoLabel:
    """A surviving teacher prediction, valid on the matching strong view."""

    box: Box
    delta_t: tuple[float, float, float, float]
    source_view: int


@dataclass
class TrainBatch:
    labeled_views: np.ndarray          # (B_l, H, W, 3) strong views
    labeled_boxes: list[list[Box]]     # per labeled view, view coordinates
    weak_views: np.ndarray | None      # (B_u, H, W, 3)
    strong_views: np.ndarray | None    # (B_u, H, W, 3), same geometry as weak


@dataclass
class StepRecord:
    total: float
    sup_cls: float
    sup_reg: float
    sup_ctr: float
    sup_unc: float
    unsup_cls: float
    unsup_reg: float
    n_pseudo: int


def ema_update(state: TeacherStudentState) -> None:
    """theta_teacher <- alpha*theta_teacher + (1-alpha)*theta_student."""
    a = state.config.alpha
    for name, t in state.teacher.items():
        s = state.student[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch at {name!r}")
        t.data = a * t.data + (1.0 - a) * s.data


def box_weight(delta_t, floor: float = 0.0) -> float:
    """Localization-confidence weight exp(-(mean(delta) - floor)), in [0, 1].

    ``floor`` removes the detector's uncertainty offset so a box at the
    minimum representable uncertainty is fully trusted.
    """
    excess = max(0.0, float(np.mean(delta_t)) - floor)
    return min(1.0, math.exp(-excess))


def generate_pseudo_labels(teacher: ParamDict, weak_view: np.ndarray,
                           det_config: DetectorConfig, tau: float,
                           nms_iou: float, source_view: int = 0) -> list[PseudoLabel]:
    """Teacher inference on a weak view; cls-only scoring, threshold, NMS.

    Never populates teacher gradients.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    with no_grad():
        outputs = forward(teacher, weak_view[None], det_config)
    return pseudo_labels_from_outputs(outputs, 0, weak_view.shape[:2], tau,
                                      nms_iou, source_view)


def pseudo_labels_from_outputs(outputs: HeadOutputs, image_index: int,
                               image_hw, tau: float, nms_iou: float,
                               source_view: int) -> list[PseudoLabel]:
    boxes = decode_detections(outputs, image_index, image_hw, score_mode="cls",
                              score_threshold=tau, nms_iou=nms_iou)
    return [PseudoLabel(box=b, delta_t=b.delta, source_view=source_view)
            for b in boxes]


def unsup_cls_loss(student_outputs: HeadOutputs,
                   pseudo_labels: list[list[PseudoLabel]],
                   det_config: DetectorConfig, bg_weight: float = 0.5,
                   weight_floor: float = DELTA_FLOOR) -> tuple[Tensor, list[LocationTargets]]:
    """Hard-label focal loss against pseudo-boxes with per-box trust weights.

    Foreground contributions are scaled by ``box_weight`` of the source
    pseudo-box; locations outside all pseudo-boxes train as background at
    ``bg_weight`` (0 disables background supervision).  Also returns the
    per-image assignment so the regression gate can reuse it.
    """
    n, c, gh, gw = student_outputs.cls_logits.shape
    stride = student_outputs.stride
    targets = [assign_targets([p.box for p in labels], gh, gw, stride)
               for labels in pseudo_labels]
    onehot, fg, _, _ = stack_targets(targets, det_config.num_classes)
    weight = np.full((n, 1, gh, gw), bg_weight)
    for i, (labels, tg) in enumerate(zip(pseudo_labels, targets)):
        weights_per_box = [box_weight(p.delta_t, floor=weight_floor) for p in labels]
        ys, xs = np.nonzero(tg.fg)
        for y, x in zip(ys, xs):
            weight[i, 0, y, x] = weights_per_box[tg.box_idx[y, x]]
    n_pos = float(fg.sum())
    if n_pos == 0 and bg_weight == 0.0:
        return Tensor(0.0), targets
    terms = focal_terms(student_outputs.cls_logits, onehot,
                        det_config.focal_gamma, det_config.focal_alpha)
    # Foreground normalized by pseudo-foreground count; background by its
    # own element count so missed objects are not aggressively suppressed
    # when few pseudo-boxes survive.
    is_fg = fg > 0
    n_bg = float(terms.data.size - is_fg.sum() * det_config.num_classes)
    fg_w = np.where(is_fg, weight, 0.0) / max(1.0, n_pos)
    bg_w = np.where(is_fg, 0.0, bg_weight) / max(1.0, n_bg)
    loss = ad.reduce_sum(Tensor(fg_w + bg_w) * terms)
    return loss, targets


def unsup_reg_loss(student_outputs: HeadOutputs, teacher_ltrb: np.ndarray,
                   teacher_delta: np.ndarray, fg: np.ndarray,
                   sigma: float) -> Tensor:
    """Per-side L1 toward the teacher, gated on teacher confidence.

    A side contributes |d_t - d_s| only where delta_t + sigma <= delta_s
    (boundary included) at a pseudo-foreground location.  Teacher values
    are constants; no gradient reaches the teacher.  Distances are measured
    in stride units and the gated sum is normalized by the full side count
    at pseudo-foreground locations.  The normalizer is independent of sigma
    so tightening the gate can only shrink the loss, and it keeps the term
    on the same scale as the other loss components regardless of how many
    pseudo-boxes survive.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    student_delta = student_outputs.delta.data
    gate = (teacher_delta + sigma <= student_delta) & (fg > 0)
    if not gate.any():
        return Tensor(0.0)
    n_sides = 4.0 * max(1.0, float((fg > 0).any(axis=1).sum()))
    norm = 1.0 / (n_sides * float(student_outputs.stride))
    gate_t = Tensor(gate.astype(np.float64))
    diff = ad.absolute(student_outputs.ltrb - Tensor(teacher_ltrb))
    return ad.reduce_sum(gate_t * diff) * norm


def slice_outputs(outputs: HeadOutputs, lo: int, hi: int) -> HeadOutputs:
    sl = slice(lo, hi)
    return HeadOutputs(outputs.cls_logits[sl], outputs.ctr_logits[sl],
                       outputs.ltrb[sl], outputs.delta[sl], outputs.stride)


def train_step(state: TeacherStudentState, batch: TrainBatch,
               det_config: DetectorConfig) -> StepRecord:
    """One combined student step:
    L = L_sup + lambda_u * (L_cls_unsup + L_reg_unsup), then SGD on the
    student and one EMA update of the teacher.
    """
    cfg = state.config
    h, w = batch.labeled_views.shape[1:3]
    gh, gw = h // det_config.stride, w // det_config.stride
    n_l = len(batch.labeled_views)
    use_unsup = (cfg.lambda_u > 0.0 and batch.strong_views is not None
                 and len(batch.strong_views) > 0)

    if use_unsup:
        all_views = np.concatenate([batch.labeled_views, batch.strong_views])
    else:
        all_views = batch.labeled_views
    out_all = forward(state.student, all_views, det_config)
    out_l = slice_outputs(out_all, 0, n_l) if use_unsup else out_all

    targets = [assign_targets(bxs, gh, gw, det_config.stride)
               for bxs in batch.labeled_boxes]
    sup = supervised_loss(out_l, targets, det_config)
    total = sup.total

    unsup_cls_val = unsup_reg_val = 0.0
    n_pseudo = 0
    if use_unsup:
        with no_grad():
            t_out = forward(state.teacher, batch.weak_views, det_config)
        hw = batch.weak_views.shape[1:3]
        pseudo = [pseudo_labels_from_outputs(t_out, i, hw, cfg.tau,
                                             cfg.pseudo_nms_iou, i)
                  for i in range(len(batch.weak_views))]
        n_pseudo = sum(len(p) for p in pseudo)
        out_u = slice_outputs(out_all, n_l, n_l + len(batch.strong_views))
        l_cls, pseudo_targets = unsup_cls_loss(out_u, pseudo, det_config,
                                               bg_weight=cfg.bg_weight)
        fg = np.stack([t.fg for t in pseudo_targets])[:, None]
        l_reg = unsup_reg_loss(out_u, t_out.ltrb.data, t_out.delta.data,
                               fg, cfg.sigma)
        unsup_cls_val, unsup_reg_val = l_cls.item(), l_reg.item()
        total = total + cfg.lambda_u * (l_cls + l_reg)

    backward(total)
    sgd_step(state.student, state.optimizer)
    ema_update(state)
    state.iteration += 1
    return StepRecord(total.item(), sup.cls, sup.reg, sup.ctr, sup.unc,
                      unsup_cls_val, unsup_reg_val, n_pseudo)


# ---------------------------------------------------------------------
# batch construction and the loop
# ---------------------------------------------------------------------

class BatchBuilder:
    """Deterministic per-step batches: all randomness is derived from
    (base_seed, iteration), so training is resumable bit-exactly."""

    def __init__(self, dataset: SceneDataset, split: DatasetSplit,
                 policy: AugPolicy, base_seed: int,
                 batch_labeled: int = 4, batch_unlabeled: int = 4):
        if not split.labeled:
            raise ValueError("empty labeled set")
        self.dataset = dataset
        self.split = split
        self.policy = policy
        self.base_seed = base_seed
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled
        mean = np.mean([dataset.images[i].mean(axis=(0, 1))
                        for i in split.labeled], axis=0)
        self.fill = mean

    def build(self, iteration: int, with_unlabeled: bool) -> TrainBatch:
        rng = np.random.default_rng((self.base_seed, iteration))
        scale = sample_batch_scale(self.policy, rng,
                                   self.dataset.spec.image_size)
        ids = rng.choice(self.split.labeled, size=self.batch_labeled, replace=True)
        views, boxes = [], []
        for i in ids:
            wv, bx, _ = weak_augment(self.dataset.images[int(i)],
                                     self.dataset.boxes[int(i)], self.policy,
                                     rng, scale_override=scale)
            views.append(strong_augment(wv, self.policy, rng, self.fill))
            boxes.append(bx)
        labeled_views = np.stack(views)

        weak_views = strong_views = None
        unlabeled = self.split.unlabeled
        if with_unlabeled and unlabeled:
            uids = rng.choice(unlabeled, size=self.batch_unlabeled, replace=True)
            wvs, svs = [], []
            for i in uids:
                wv, _, _ = weak_augment(self.dataset.images[int(i)], [],
                                        self.policy, rng, scale_override=scale)
                wvs.append(wv)
                svs.append(strong_augment(wv, self.policy, rng, self.fill))
            weak_views = np.stack(wvs)
            strong_views = np.stack(svs)
        return TrainBatch(labeled_views, boxes, weak_views, strong_views)


def burn_in(state: TeacherStudentState, builder: BatchBuilder,
            det_config: DetectorConfig, iters: int) -> list[StepRecord]:
    """Supervised-only training of the student, then teacher <- student."""
    if iters < 0:
        raise ValueError("iters must be non-negative")
    records = []
    lambda_u = state.config.lambda_u
    try:
        state.config.lambda_u = 0.0
        for _ in range(iters):
            batch = builder.build(state.iteration, with_unlabeled=False)
            records.append(train_step(state, batch, det_config))
    finally:
        state.config.lambda_u = lambda_u
    copy_values(state.teacher, state.student)
    return records


def evaluate_params(params: ParamDict, dataset: SceneDataset, ids,
                    det_config: DetectorConfig, cfg: SelfTrainConfig,
                    chunk: int = 32) -> APTable:
    """Decode on clean (unaugmented) images and score COCO-style."""
    dets_by_image = {}
    gts_by_image = {i: dataset.boxes[i] for i in ids}
    ids = list(ids)
    hw = (dataset.spec.image_size, dataset.spec.image_size)
    with no_grad():
        for lo in range(0, len(ids), chunk):
            sub = ids[lo:lo + chunk]
            images = np.stack([dataset.images[i] for i in sub])
            out = forward(params, images, det_config)
            for k, img_id in enumerate(sub):
                dets_by_image[img_id] = decode_detections(
                    out, k, hw, score_mode=cfg.eval_score_mode,
                    score_threshold=cfg.eval_score_threshold,
                    nms_iou=cfg.eval_nms_iou)
    return map_coco(dets_by_image, gts_by_image,
                    list(range(det_config.num_classes)))


@dataclass
class EvalPoint:
    iteration: int
    table: APTable


@dataclass
class TrainResult:
    evals: list[EvalPoint]
    best_val_map: float
    best_teacher: ParamDict
    final_state: TeacherStudentState


def train_loop(state: TeacherStudentState, dataset: SceneDataset,
               split: DatasetSplit, policy: AugPolicy,
               det_config: DetectorConfig, total_iters: int, eval_every: int,
               base_seed: int,
               on_eval=None,
               best_val_map: float = -1.0,
               best_teacher: ParamDict | None = None,
               lr_schedule=None) -> TrainResult:
    """Burn-in then combined steps; the TEACHER is evaluated on the
    validation split every ``eval_every`` iterations and the best-val
    snapshot is kept for final selection.  Resumable: continues from
    ``state.iteration``.  ``lr_schedule``, if given, maps an iteration
    index to the learning rate for that step.
    """
    cfg = state.config
    builder = BatchBuilder(dataset, split, policy, base_seed,
                           cfg.batch_labeled, cfg.batch_unlabeled)
    evals: list[EvalPoint] = []
    if best_teacher is None:
        best_teacher = clone_params(state.teacher)

    while state.iteration < total_iters:
        it = state.iteration
        if lr_schedule is not None:
            state.optimizer.learning_rate = lr_schedule(it)
        if it < cfg.burn_in_iters:
            lambda_u = cfg.lambda_u
            try:
                cfg.lambda_u = 0.0
                batch = builder.build(it, with_unlabeled=False)
                train_step(state, batch, det_config)
            finally:
                cfg.lambda_u = lambda_u
            if state.iteration == cfg.burn_in_iters:
                copy_values(state.teacher, state.student)
        else:
            batch = builder.build(it, with_unlabeled=cfg.lambda_u > 0.0)
            train_step(state, batch, det_config)

        if state.iteration % eval_every == 0 or state.iteration == total_iters:
            table = evaluate_params(state.teacher, dataset, split.val,
                                    det_config, cfg)
            point = EvalPoint(state.iteration, table)
            evals.append(point)
            if table.map_5095 > best_val_map:
                best_val_map = table.map_5095
                best_teacher = clone_params(state.teacher)
            if on_eval is not None:
                on_eval(point)
    return TrainResult(evals, best_val_map, best_teacher, state)
