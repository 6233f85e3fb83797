"""Training objectives: Hungarian set losses, pseudo-label losses, total loss.

Matching always runs outside the tape on detached values; the loss is then
rebuilt on the tape with the assignment held fixed. The assignment is
piecewise constant in the predictions, so gradients flow only through the
matched cost terms.

Class convention: the background class is the LAST class index of a slot's
probability row (index 1 for the person stage, index 17 for the keypoint
stage).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import AffineAug, Box, Keypoint, iou, project_labels
from .matching import box_cost_matrix, hungarian_solve, keypoint_cost_matrix
from .posemodel import PredictionSet

_PROB_FLOOR = 1e-12  # probabilities are clipped before log for numerical safety


class LossError(Exception):
    pass


@dataclass
class LossWeights:
    """Loss hyperparameters; defaults follow the published training recipe.

    pseudo_suppress_iou restores, for desk-scale models, the set-predictor
    property that no two (pseudo-)boxes cover the same instance: among
    teacher slots clearing tau, lower-confidence boxes overlapping a kept
    box beyond this IoU are suppressed. Keypoint pseudo-labels keep only the
    most confident slot per joint class for the same reason. Set to None to
    disable suppression.
    """

    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    lambda_u: float = 0.5
    tau: float = 0.9
    background_weight: float = 1.0  # optional down-weighting knob, 1.0 = as written
    pseudo_suppress_iou: float | None = 0.4

    def __post_init__(self):
        if min(self.lambda_iou, self.lambda_l1, self.lambda_u) < 0:
            raise LossError("loss weights must be nonnegative")
        if not (0.0 < self.tau <= 1.0):
            raise LossError(f"tau must lie in (0, 1], got {self.tau}")


@dataclass
class LossBreakdown:
    supervised: float
    unsup_cls: float
    unsup_reg: float
    total: float
    counts: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Differentiable geometry pieces
# ---------------------------------------------------------------------------


def giou_tensor(gt_boxes: np.ndarray, pred_boxes: Tensor) -> Tensor:
    """GIoU of (M, 4) center-form boxes, differentiable w.r.t. predictions."""
    gt = np.asarray(gt_boxes, dtype=np.float64)
    gx0 = gt[:, 0] - gt[:, 2] / 2
    gy0 = gt[:, 1] - gt[:, 3] / 2
    gx1 = gt[:, 0] + gt[:, 2] / 2
    gy1 = gt[:, 1] + gt[:, 3] / 2
    g_area = (gx1 - gx0) * (gy1 - gy0)

    px0 = ad.sub(pred_boxes[:, 0], ad.mul(pred_boxes[:, 2], 0.5))
    py0 = ad.sub(pred_boxes[:, 1], ad.mul(pred_boxes[:, 3], 0.5))
    px1 = ad.add(pred_boxes[:, 0], ad.mul(pred_boxes[:, 2], 0.5))
    py1 = ad.add(pred_boxes[:, 1], ad.mul(pred_boxes[:, 3], 0.5))
    p_area = ad.mul(ad.sub(px1, px0), ad.sub(py1, py0))

    iw = ad.maximum(0.0, ad.sub(ad.minimum(gx1, px1), ad.maximum(gx0, px0)))
    ih = ad.maximum(0.0, ad.sub(ad.minimum(gy1, py1), ad.maximum(gy0, py0)))
    inter = ad.mul(iw, ih)
    union = ad.sub(ad.add(g_area, p_area), inter)
    cw = ad.sub(ad.maximum(gx1, px1), ad.minimum(gx0, px0))
    ch = ad.sub(ad.maximum(gy1, py1), ad.minimum(gy0, py0))
    enclosing = ad.mul(cw, ch)
    return ad.sub(ad.div(inter, union), ad.div(ad.sub(enclosing, union), enclosing))


def box_loss_vector(gt_boxes: np.ndarray, pred_boxes: Tensor, w: LossWeights) -> Tensor:
    """Per-pair box regression loss: lambda_iou*(1-GIoU) + lambda_l1*L1."""
    l1 = ad.tsum(ad.absolute(ad.sub(pred_boxes, np.asarray(gt_boxes, dtype=np.float64))), axis=1)
    return ad.add(ad.mul(ad.sub(1.0, giou_tensor(gt_boxes, pred_boxes)), w.lambda_iou),
                  ad.mul(l1, w.lambda_l1))


def box_loss(gt: Box, pred: Tensor, w: LossWeights) -> Tensor:
    """Single-pair wrapper; `pred` is a (4,) tensor in center form."""
    gt.validate()
    return ad.tsum(box_loss_vector(gt.as_array()[None, :], ad.reshape(pred, (1, 4)), w))


def keypoint_loss_vector(gt_coords: np.ndarray, pred_coords: Tensor, w: LossWeights) -> Tensor:
    """Per-pair keypoint regression loss: lambda_l1 * L1 on coordinates."""
    l1 = ad.tsum(ad.absolute(ad.sub(pred_coords, np.asarray(gt_coords, dtype=np.float64))), axis=1)
    return ad.mul(l1, w.lambda_l1)


def _log_probs(class_probs: Tensor) -> Tensor:
    return ad.log(ad.clip(class_probs, _PROB_FLOOR, 1.0))


def _zero() -> Tensor:
    return Tensor(0.0)


# ---------------------------------------------------------------------------
# Supervised Hungarian losses
# ---------------------------------------------------------------------------


def hungarian_loss_boxes(gt_persons, pred: PredictionSet, w: LossWeights) -> Tensor:
    """Set loss for the person stage: matched CE + box regression, rest background.

    Unmatched slots contribute only -log p(background); their geometry is
    excluded from the loss.
    """
    n_slots, n_classes = pred.class_probs.shape
    bg = n_classes - 1
    n_gt = len(gt_persons)
    if n_gt > n_slots:
        raise LossError(f"{n_gt} ground truths exceed {n_slots} prediction slots")

    log_p = _log_probs(pred.class_probs)
    if n_gt == 0:
        return ad.mul(ad.neg(ad.tsum(log_p[:, bg])), w.background_weight)

    costs = box_cost_matrix([p.box for p in gt_persons], pred.class_probs.data,
                            pred.geometry.data, w.lambda_iou, w.lambda_l1)
    assignment = hungarian_solve(costs)
    slots = np.array([s for _, s in assignment.pairs])
    gt_arr = np.stack([gt_persons[i].box.as_array() for i, _ in assignment.pairs])

    matched_ce = ad.neg(ad.tsum(log_p[slots, np.zeros(n_gt, dtype=int)]))
    unmatched = np.array(sorted(set(range(n_slots)) - set(slots.tolist())), dtype=int)
    bg_ce = _zero() if unmatched.size == 0 else ad.neg(
        ad.tsum(log_p[unmatched, np.full(unmatched.size, bg)]))
    reg = ad.tsum(box_loss_vector(gt_arr, pred.geometry[slots], w))
    return ad.add(ad.add(matched_ce, ad.mul(bg_ce, w.background_weight)), reg)


def hungarian_loss_keypoints(gt_keypoints, pred: PredictionSet, w: LossWeights) -> Tensor:
    """Set loss for the keypoint stage over the visible ground-truth joints."""
    n_slots, n_classes = pred.class_probs.shape
    bg = n_classes - 1
    visible = [kp for kp in gt_keypoints if kp.visibility > 0]
    n_gt = len(visible)
    if n_gt > n_slots:
        raise LossError(f"{n_gt} keypoints exceed {n_slots} prediction slots")

    log_p = _log_probs(pred.class_probs)
    if n_gt == 0:
        return ad.mul(ad.neg(ad.tsum(log_p[:, bg])), w.background_weight)

    costs = keypoint_cost_matrix(visible, pred.class_probs.data, pred.geometry.data, w.lambda_l1)
    assignment = hungarian_solve(costs)
    slots = np.array([s for _, s in assignment.pairs])
    classes = np.array([visible[i].class_id for i, _ in assignment.pairs])
    gt_arr = np.array([[visible[i].x, visible[i].y] for i, _ in assignment.pairs])

    matched_ce = ad.neg(ad.tsum(log_p[slots, classes]))
    unmatched = np.array(sorted(set(range(n_slots)) - set(slots.tolist())), dtype=int)
    bg_ce = _zero() if unmatched.size == 0 else ad.neg(
        ad.tsum(log_p[unmatched, np.full(unmatched.size, bg)]))
    reg = ad.tsum(keypoint_loss_vector(gt_arr, pred.geometry[slots], w))
    return ad.add(ad.add(matched_ce, ad.mul(bg_ce, w.background_weight)), reg)


# ---------------------------------------------------------------------------
# Unsupervised (pseudo-label) losses
# ---------------------------------------------------------------------------


@dataclass
class UnsupResult:
    reg: Tensor
    cls: Tensor
    n_pseudo: int            # teacher slots that became pseudo-labels
    n_negatives: int         # student slots counted as confident background
    n_dropped: int           # pseudo-labels lost to the frame projection


def select_pseudo_labels(teacher_pred: PredictionSet, tau: float, stage: str,
                         suppress_iou: float | None = 0.4):
    """Teacher slots with non-background argmax and confidence >= tau.

    Confidence is the slot's maximum non-background class probability. For
    boxes, lower-confidence slots overlapping an already-kept pseudo-box
    beyond `suppress_iou` are dropped; for keypoints, only the most
    confident slot per joint class survives. Returns Box labels for the box
    stage, Keypoint labels (carrying the argmax joint class) otherwise.
    """
    probs = teacher_pred.class_probs.data
    geo = teacher_pred.geometry.data
    bg = probs.shape[1] - 1
    non_bg = probs[:, :bg]
    conf = non_bg.max(axis=1)
    keep = (conf >= tau) & (probs.argmax(axis=1) != bg)
    order = sorted(np.flatnonzero(keep), key=lambda j: -conf[j])
    labels = []
    seen_classes: set[int] = set()
    for j in order:
        if stage == "boxes":
            box = Box(*geo[j])
            if suppress_iou is not None and any(iou(box, kept) > suppress_iou
                                                for kept in labels):
                continue
            labels.append(box)
        else:
            class_id = int(non_bg[j].argmax())
            if suppress_iou is not None and class_id in seen_classes:
                continue
            seen_classes.add(class_id)
            labels.append(Keypoint(float(geo[j, 0]), float(geo[j, 1]), class_id, 2))
    return labels


def unsup_losses(teacher_pred: PredictionSet, student_pred: PredictionSet,
                 weak: AffineAug, strong: AffineAug, w: LossWeights,
                 stage: str) -> UnsupResult:
    """Pseudo-label losses for one unlabeled image (or crop).

    Teacher predictions (weak frame, detached) above tau become pseudo-labels,
    are projected into the strong frame, and are Hungarian-matched to the
    student's predictions. The classification loss takes its positives from
    the teacher and its negatives from the student's own confident background
    slots; uncertain slots are left out so the positive/negative ratio is not
    distorted by an unconfident teacher.
    """
    if stage not in ("boxes", "keypoints"):
        raise LossError(f"unknown stage {stage!r}")
    n_slots, n_classes = student_pred.class_probs.shape
    bg = n_classes - 1

    raw_labels = select_pseudo_labels(teacher_pred, w.tau, stage, w.pseudo_suppress_iou)
    labels, dropped = project_labels(raw_labels, weak, strong)

    log_p = _log_probs(student_pred.class_probs)
    student_probs = student_pred.class_probs.data

    matched_slots: np.ndarray = np.array([], dtype=int)
    reg = _zero()
    pos_ce = _zero()
    if labels:
        if len(labels) > n_slots:
            labels = labels[:n_slots]
        if stage == "boxes":
            costs = box_cost_matrix(labels, student_probs, student_pred.geometry.data,
                                    w.lambda_iou, w.lambda_l1)
        else:
            costs = keypoint_cost_matrix(labels, student_probs, student_pred.geometry.data,
                                         w.lambda_l1)
        assignment = hungarian_solve(costs)
        matched_slots = np.array([s for _, s in assignment.pairs])
        if stage == "boxes":
            gt_arr = np.stack([labels[i].as_array() for i, _ in assignment.pairs])
            classes = np.zeros(len(labels), dtype=int)
            reg = ad.tsum(box_loss_vector(gt_arr, student_pred.geometry[matched_slots], w))
        else:
            gt_arr = np.array([[labels[i].x, labels[i].y] for i, _ in assignment.pairs])
            classes = np.array([labels[i].class_id for i, _ in assignment.pairs])
            reg = ad.tsum(keypoint_loss_vector(gt_arr, student_pred.geometry[matched_slots], w))
        pos_ce = ad.neg(ad.tsum(log_p[matched_slots, classes]))

    unmatched = np.array(sorted(set(range(n_slots)) - set(matched_slots.tolist())), dtype=int)
    negatives = unmatched[student_probs[unmatched, bg] >= w.tau] if unmatched.size else unmatched
    neg_ce = _zero() if negatives.size == 0 else ad.neg(
        ad.tsum(log_p[negatives, np.full(negatives.size, bg)]))

    return UnsupResult(reg=reg, cls=ad.add(pos_ce, neg_ce),
                       n_pseudo=len(labels), n_negatives=int(negatives.size),
                       n_dropped=dropped)


def total_loss(sup: Tensor, unsup_reg: Tensor, unsup_cls: Tensor,
               w: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """total = supervised + lambda_u * (unsup_reg + unsup_cls)."""
    total = ad.add(sup, ad.mul(ad.add(unsup_reg, unsup_cls), w.lambda_u))
    breakdown = LossBreakdown(
        supervised=sup.item(),
        unsup_cls=unsup_cls.item(),
        unsup_reg=unsup_reg.item(),
        total=total.item(),
    )
    return total, breakdown
