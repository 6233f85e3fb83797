"""Detection and keypoint evaluation (AP/AR over IoU and OKS) plus NDCG.

The evaluator follows the COCO protocol: greedy score-descending matching
per image at overlap thresholds 0.50:0.05:0.95, average precision as the
exact area under the right-interpolated precision-recall curve, averaged
over thresholds, and average recall at up to 20 detections per image.
Buckets with no ground-truth instances report None rather than 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box, Keypoint, iou


class MetricsError(Exception):
    pass


# Per-joint falloff constants: twice the COCO keypoint sigmas, ordered as the
# canonical 17-joint scheme. Kept in one table so they are auditable.
OKS_K = 2.0 * np.array([
    0.026, 0.025, 0.025, 0.035, 0.035,   # nose, eyes, ears
    0.079, 0.079, 0.072, 0.072,          # shoulders, elbows
    0.062, 0.062,                        # wrists
    0.107, 0.107, 0.087, 0.087,          # hips, knees
    0.089, 0.089,                        # ankles
])

IOU_THRESHOLDS = np.round(np.arange(0.50, 0.951, 0.05), 2)
MAX_DETECTIONS = 20

# COCO object-size buckets in squared pixels
AREA_SMALL = 32.0 ** 2
AREA_MEDIUM = 96.0 ** 2


@dataclass
class OksParams:
    k: np.ndarray = None

    def __post_init__(self):
        if self.k is None:
            self.k = OKS_K.copy()
        if np.any(self.k <= 0):
            raise MetricsError("per-joint falloff constants must be positive")


def oks(gt_keypoints: list[Keypoint], gt_area_px: float, pred_keypoints: list[Keypoint],
        image_size: tuple[int, int], params: OksParams | None = None) -> float:
    """Object keypoint similarity: mean Gaussian falloff over visible joints.

    Distances are measured in pixels; the scale is the ground-truth box area
    in squared pixels. Joints with ground-truth visibility 0 contribute
    nothing. Raises if no joint is visible (callers filter such instances).
    """
    p = params or OksParams()
    h, w = image_size
    total = 0.0
    n_visible = 0
    by_class = {kp.class_id: kp for kp in pred_keypoints}
    for gt in gt_keypoints:
        if gt.visibility == 0:
            continue
        pred = by_class.get(gt.class_id)
        if pred is None:
            raise MetricsError(f"prediction missing joint class {gt.class_id}")
        dx = (gt.x - pred.x) * w
        dy = (gt.y - pred.y) * h
        d2 = dx * dx + dy * dy
        total += math.exp(-d2 / (2.0 * gt_area_px * p.k[gt.class_id] ** 2))
        n_visible += 1
    if n_visible == 0:
        raise MetricsError("oks needs at least one visible ground-truth joint")
    return total / n_visible


# ---------------------------------------------------------------------------
# AP / AR evaluation
# ---------------------------------------------------------------------------


@dataclass
class GroundTruth:
    image_id: str
    box: Box
    keypoints: list[Keypoint] | None = None

    def area_px(self, image_size) -> float:
        h, w = image_size
        return self.box.area * h * w

    def n_visible(self) -> int:
        if self.keypoints is None:
            return 0
        return sum(1 for kp in self.keypoints if kp.visibility > 0)


@dataclass
class Prediction:
    image_id: str
    score: float
    box: Box
    keypoints: list[Keypoint] | None = None

    def area_px(self, image_size) -> float:
        h, w = image_size
        return self.box.area * h * w


@dataclass
class EvalResult:
    """COCO-style metric set; a field is None when its bucket has no ground truth."""

    ap: float | None
    ap50: float | None
    ap75: float | None
    ap_s: float | None
    ap_m: float | None
    ap_l: float | None
    ar: float | None

    def as_dict(self) -> dict:
        return {
            "AP": self.ap, "AP50": self.ap50, "AP75": self.ap75,
            "AP_S": self.ap_s, "AP_M": self.ap_m, "AP_L": self.ap_l,
            "AR": self.ar,
        }


def _overlap(gt: GroundTruth, pred: Prediction, mode: str, image_size) -> float:
    if mode == "box_iou":
        return iou(gt.box, pred.box)
    return oks(gt.keypoints, gt.area_px(image_size), pred.keypoints, image_size)


def _match_image(gts: list[GroundTruth], preds: list[Prediction], mode: str,
                 threshold: float, image_size, area_range) -> list[tuple[float, int]]:
    """Greedy per-image matching; returns (score, flag) with flag 1=TP, 0=FP, -1=ignored.

    Ground truths outside the area range are ignorable: a prediction matches
    them only when no in-range match is available, and such matches (like
    out-of-range unmatched predictions) drop out of the PR curve entirely.
    """
    lo, hi = area_range
    gt_ignored = [not (lo <= g.area_px(image_size) < hi) for g in gts]
    matchable = [mode != "keypoint_oks" or g.n_visible() > 0 for g in gts]
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)[:MAX_DETECTIONS]
    taken = [False] * len(gts)
    results = []
    for i in order:
        pred = preds[i]
        best_j = -1
        for pass_ignored in (False, True):
            best_ov = threshold
            for j, gt in enumerate(gts):
                if taken[j] or not matchable[j] or gt_ignored[j] != pass_ignored:
                    continue
                ov = _overlap(gt, pred, mode, image_size)
                if ov >= best_ov:
                    best_ov, best_j = ov, j
            if best_j >= 0:
                break
        if best_j >= 0:
            taken[best_j] = True
            results.append((pred.score, -1 if gt_ignored[best_j] else 1))
        else:
            in_range = lo <= pred.area_px(image_size) < hi
            results.append((pred.score, 0 if in_range else -1))
    return results


def _pr_area(flags_sorted: np.ndarray, n_gt: int) -> tuple[float, float]:
    """Exact area under the right-interpolated PR curve, and final recall."""
    tp = np.cumsum(flags_sorted == 1)
    fp = np.cumsum(flags_sorted == 0)
    denom = tp + fp
    precision = np.where(denom > 0, tp / np.maximum(denom, 1), 0.0)
    recall = tp / n_gt
    # interpolate: precision at recall r is the max precision at recall >= r
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for p, r in zip(interp, recall):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return ap, float(recall[-1]) if len(recall) else 0.0


def _evaluate_range(gts_by_image, preds_by_image, mode, image_sizes, area_range):
    n_gt = 0
    for image_id, gts in gts_by_image.items():
        lo, hi = area_range
        for g in gts:
            if mode == "keypoint_oks" and g.n_visible() == 0:
                continue
            if lo <= g.area_px(image_sizes[image_id]) < hi:
                n_gt += 1
    if n_gt == 0:
        return None, None, None, None

    ap_per_threshold = []
    recall_per_threshold = []
    for t in IOU_THRESHOLDS:
        scored = []
        for image_id, gts in gts_by_image.items():
            preds = preds_by_image.get(image_id, [])
            scored.extend(_match_image(gts, preds, mode, t, image_sizes[image_id], area_range))
        scored.sort(key=lambda sf: -sf[0])
        flags = np.array([f for _, f in scored if f >= 0], dtype=int)
        ap, recall = _pr_area(flags, n_gt) if len(flags) else (0.0, 0.0)
        ap_per_threshold.append(ap)
        recall_per_threshold.append(recall)
    return (float(np.mean(ap_per_threshold)),
            float(ap_per_threshold[0]),                      # threshold 0.50
            float(ap_per_threshold[5]),                      # threshold 0.75
            float(np.mean(recall_per_threshold)))


def evaluate(gts: list[GroundTruth], preds: list[Prediction], mode: str,
             image_sizes: dict[str, tuple[int, int]]) -> EvalResult:
    """Score predictions against ground truth; see module docstring for protocol."""
    if mode not in ("box_iou", "keypoint_oks"):
        raise MetricsError(f"unknown evaluation mode {mode!r}")
    gts_by_image: dict[str, list[GroundTruth]] = {}
    for g in gts:
        gts_by_image.setdefault(g.image_id, []).append(g)
    preds_by_image: dict[str, list[Prediction]] = {}
    for p in preds:
        preds_by_image.setdefault(p.image_id, []).append(p)
    for image_id in preds_by_image:
        gts_by_image.setdefault(image_id, [])

    full = (0.0, math.inf)
    ap, ap50, ap75, ar = _evaluate_range(gts_by_image, preds_by_image, mode, image_sizes, full)
    ap_s, _, _, _ = _evaluate_range(gts_by_image, preds_by_image, mode, image_sizes,
                                    (0.0, AREA_SMALL))
    ap_m, _, _, _ = _evaluate_range(gts_by_image, preds_by_image, mode, image_sizes,
                                    (AREA_SMALL, AREA_MEDIUM))
    ap_l, _, _, _ = _evaluate_range(gts_by_image, preds_by_image, mode, image_sizes,
                                    (AREA_MEDIUM, math.inf))
    return EvalResult(ap=ap, ap50=ap50, ap75=ap75, ap_s=ap_s, ap_m=ap_m, ap_l=ap_l, ar=ar)


# ---------------------------------------------------------------------------
# NDCG
# ---------------------------------------------------------------------------


def ndcg_at_k(relevances: list[float], k: int) -> float:
    """Normalized discounted cumulative gain; 0 by convention when IDCG is 0."""
    if k < 1:
        raise MetricsError(f"k must be >= 1, got {k}")

    def dcg(rels):
        return sum(rel / math.log2(i + 2) for i, rel in enumerate(rels[:k]))

    ideal = dcg(sorted(relevances, reverse=True))
    if ideal == 0:
        return 0.0
    return dcg(list(relevances)) / ideal
