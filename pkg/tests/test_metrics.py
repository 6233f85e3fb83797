import math

import numpy as np
import pytest

from artpose import metrics
from artpose.geometry import Box, Keypoint, NUM_KEYPOINTS
from artpose.metrics import (
    EvalResult,
    GroundTruth,
    OksParams,
    Prediction,
    evaluate,
    ndcg_at_k,
    oks,
)


def full_keypoints(coords, vis=2):
    return [Keypoint(x, y, j, vis) for j, (x, y) in enumerate(coords)]


def same_coords():
    rng = np.random.default_rng(0)
    return [(float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8)))
            for _ in range(NUM_KEYPOINTS)]


class TestOks:
    def test_identical_is_one(self):
        coords = same_coords()
        gt = full_keypoints(coords)
        assert oks(gt, 500.0, full_keypoints(coords), (64, 64)) == pytest.approx(1.0)

    def test_single_joint_hand_formula(self):
        gt = [Keypoint(0.5, 0.5, 0, 2)]
        pred = [Keypoint(0.5 + 10 / 64, 0.5, 0, 2)]
        area = 800.0
        k = metrics.OKS_K[0]
        expected = math.exp(-(10.0 ** 2) / (2 * area * k * k))
        assert oks(gt, area, pred, (64, 64)) == pytest.approx(expected, abs=1e-12)

    def test_invisible_joint_ignored(self):
        coords = same_coords()
        gt = full_keypoints(coords)
        gt[3] = Keypoint(0.9, 0.9, 3, 0)  # far away but invisible
        pred = full_keypoints(coords)
        assert oks(gt, 500.0, pred, (64, 64)) == pytest.approx(1.0)

    def test_zero_visible_errors(self):
        gt = [Keypoint(0.5, 0.5, 0, 0)]
        with pytest.raises(metrics.MetricsError):
            oks(gt, 500.0, [Keypoint(0.5, 0.5, 0, 2)], (64, 64))

    def test_monotone_in_displacement(self):
        gt = [Keypoint(0.5, 0.5, 5, 2)]
        prev = 1.1
        for d in np.linspace(0, 0.3, 10):
            val = oks(gt, 500.0, [Keypoint(0.5 + d, 0.5, 5, 2)], (64, 64))
            assert val < prev + 1e-12
            prev = val

    def test_bad_falloff_rejected(self):
        with pytest.raises(metrics.MetricsError):
            OksParams(k=np.zeros(17))


def box_gt(image_id, box):
    return GroundTruth(image_id=image_id, box=box)


def box_pred(image_id, score, box):
    return Prediction(image_id=image_id, score=score, box=box)


class TestEvaluateBoxes:
    def test_perfect_detector(self):
        sizes = {}
        gts, preds = [], []
        rng = np.random.default_rng(1)
        for i in range(4):
            img = f"im{i}"
            sizes[img] = (64, 64)
            for _ in range(int(rng.integers(1, 3))):
                b = Box(float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7)), 0.5, 0.55)
                gts.append(box_gt(img, b))
                preds.append(box_pred(img, 1.0, b))
        result = evaluate(gts, preds, "box_iou", sizes)
        assert result.ap == pytest.approx(1.0)
        assert result.ar == pytest.approx(1.0)

    def test_empty_predictions(self):
        gts = [box_gt("a", Box(0.5, 0.5, 0.4, 0.4))]
        result = evaluate(gts, [], "box_iou", {"a": (64, 64)})
        assert result.ap == 0.0 and result.ar == 0.0

    def test_empty_gt_reports_absent(self):
        preds = [box_pred("a", 0.9, Box(0.5, 0.5, 0.4, 0.4))]
        result = evaluate([], preds, "box_iou", {"a": (64, 64)})
        assert result.ap is None and result.ar is None

    def test_three_image_hand_worked_pr_curve(self):
        # Hand-worked oracle, all boxes land in the small-area bucket of
        # 64x64 images. Image A: exact match (score .9) plus a disjoint
        # false positive (.8). Image B: pred at IoU 0.6 (score .7).
        # Image C: one undetected gt. Total gt = 3.
        #   t in {.50,.55,.60}: flags [TP@.9, FP@.8, TP@.7]
        #     PR prefix points: (1, 1/3), (1/2, 1/3), (2/3, 2/3)
        #     right-max interpolation: AP = 1/3*1 + 1/3*2/3 = 5/9, recall 2/3
        #   t in {.65...95}: flags [TP, FP, FP] -> AP = 1/3, recall 1/3
        #   AP = (3*(5/9) + 7*(1/3))/10 = 0.4
        #   AR = (3*(2/3) + 7*(1/3))/10 = 13/30
        sizes = {"A": (64, 64), "B": (64, 64), "C": (64, 64)}
        gts = [
            box_gt("A", Box(0.5, 0.5, 0.4, 0.4)),
            box_gt("B", Box(0.3, 0.3, 0.2, 0.2)),
            box_gt("C", Box(0.6, 0.6, 0.2, 0.2)),
        ]
        preds = [
            box_pred("A", 0.9, Box(0.5, 0.5, 0.4, 0.4)),
            box_pred("A", 0.8, Box(0.85, 0.85, 0.2, 0.2)),
            box_pred("B", 0.7, Box(0.35, 0.3, 0.2, 0.2)),
        ]
        result = evaluate(gts, preds, "box_iou", sizes)
        assert result.ap == pytest.approx(0.4, abs=1e-9)
        assert result.ap50 == pytest.approx(5 / 9, abs=1e-9)
        assert result.ap75 == pytest.approx(1 / 3, abs=1e-9)
        assert result.ar == pytest.approx(13 / 30, abs=1e-9)
        assert result.ap_s == pytest.approx(0.4, abs=1e-9)
        assert result.ap_m is None and result.ap_l is None

    def test_order_invariance(self):
        rng = np.random.default_rng(2)
        sizes = {"a": (64, 64), "b": (64, 64)}
        gts = [box_gt("a", Box(0.4, 0.4, 0.3, 0.3)), box_gt("b", Box(0.6, 0.6, 0.3, 0.3))]
        preds = [
            box_pred("a", 0.9, Box(0.42, 0.4, 0.3, 0.3)),
            box_pred("a", 0.5, Box(0.8, 0.2, 0.2, 0.2)),
            box_pred("b", 0.7, Box(0.6, 0.62, 0.3, 0.3)),
        ]
        base = evaluate(gts, preds, "box_iou", sizes)
        for _ in range(5):
            perm = rng.permutation(len(preds))
            shuffled = [preds[i] for i in perm]
            result = evaluate(gts, shuffled, "box_iou", sizes)
            assert result.ap == pytest.approx(base.ap)
            assert result.ar == pytest.approx(base.ar)

    def test_score_shift_invariance(self):
        sizes = {"a": (64, 64)}
        gts = [box_gt("a", Box(0.4, 0.4, 0.3, 0.3))]
        preds = [box_pred("a", 0.6, Box(0.42, 0.4, 0.3, 0.3)),
                 box_pred("a", 0.2, Box(0.8, 0.2, 0.2, 0.2))]
        base = evaluate(gts, preds, "box_iou", sizes)
        shifted = [Prediction(p.image_id, p.score + 0.39, p.box) for p in preds]
        result = evaluate(gts, shifted, "box_iou", sizes)
        assert result.ap == base.ap and result.ar == base.ar


def brute_force_evaluate(gts, preds, sizes):
    """Independent small-instance oracle: explicit loops straight from the
    protocol definition (greedy best-overlap per score rank, literal PR
    rectangle summation). Only sane for a handful of instances."""
    from artpose.geometry import iou as box_iou

    n_gt = len(gts)
    ap_list, rec_list = [], []
    for t in metrics.IOU_THRESHOLDS:
        entries = []
        for image_id in sizes:
            img_gts = [g for g in gts if g.image_id == image_id]
            img_preds = sorted((p for p in preds if p.image_id == image_id),
                               key=lambda p: -p.score)
            used = set()
            for p in img_preds:
                cand = [(box_iou(g.box, p.box), j) for j, g in enumerate(img_gts) if j not in used]
                cand = [(ov, j) for ov, j in cand if ov >= t]
                if cand:
                    ov, j = max(cand)
                    used.add(j)
                    entries.append((p.score, 1))
                else:
                    entries.append((p.score, 0))
        entries.sort(key=lambda e: -e[0])
        points = []
        tp = fp = 0
        for _, flag in entries:
            tp, fp = tp + flag, fp + (1 - flag)
            points.append((tp / n_gt, tp / (tp + fp)))
        ap = 0.0
        prev_r = 0.0
        for i, (r, _) in enumerate(points):
            if r > prev_r:
                best_p = max(p for (r2, p) in points[i:] if True)
                ap += (r - prev_r) * max(p for r2, p in points[i:])
                prev_r = r
        ap_list.append(ap)
        rec_list.append(points[-1][0] if points else 0.0)
    return float(np.mean(ap_list)), float(np.mean(rec_list))


class TestBruteForceConformance:
    def test_matches_brute_force_small_instances(self):
        rng = np.random.default_rng(3)
        for trial in range(40):
            sizes = {"img": (64, 64)}
            n_gt = int(rng.integers(1, 4))
            n_pred = int(rng.integers(0, 4))
            gts, preds = [], []
            for _ in range(n_gt):
                w, h = rng.uniform(0.15, 0.4, 2)
                gts.append(box_gt("img", Box(float(rng.uniform(w / 2, 1 - w / 2)),
                                             float(rng.uniform(h / 2, 1 - h / 2)),
                                             float(w), float(h))))
            for _ in range(n_pred):
                base = gts[int(rng.integers(0, n_gt))].box
                jitter = rng.normal(0, 0.05, 2)
                box = Box(min(max(base.cx + float(jitter[0]), 0.15), 0.85),
                          min(max(base.cy + float(jitter[1]), 0.15), 0.85),
                          base.w, base.h)
                preds.append(box_pred("img", float(rng.uniform(0.1, 1.0)), box))
            fast = evaluate(gts, preds, "box_iou", sizes)
            slow_ap, slow_ar = brute_force_evaluate(gts, preds, sizes)
            assert fast.ap == pytest.approx(slow_ap, abs=1e-9), f"trial {trial}"
            assert fast.ar == pytest.approx(slow_ar, abs=1e-9), f"trial {trial}"
            assert fast.ap50 >= fast.ap75 - 1e-12


class TestEvaluateKeypoints:
    def test_perfect_keypoints(self):
        coords = same_coords()
        gt_box = Box(0.5, 0.5, 0.6, 0.6)
        gts = [GroundTruth("a", gt_box, full_keypoints(coords))]
        preds = [Prediction("a", 1.0, gt_box, full_keypoints(coords))]
        result = evaluate(gts, preds, "keypoint_oks", {"a": (64, 64)})
        assert result.ap == pytest.approx(1.0)

    def test_zero_visible_gt_excluded(self):
        coords = same_coords()
        gts = [GroundTruth("a", Box(0.5, 0.5, 0.6, 0.6), full_keypoints(coords, vis=0))]
        preds = [Prediction("a", 1.0, Box(0.5, 0.5, 0.6, 0.6), full_keypoints(coords))]
        result = evaluate(gts, preds, "keypoint_oks", {"a": (64, 64)})
        assert result.ap is None


class TestNdcg:
    def test_ideal_ranking(self):
        assert ndcg_at_k([2, 2, 1, 0], k=4) == pytest.approx(1.0)

    def test_hand_case(self):
        # DCG = 0/log2(2) + 2/log2(3); IDCG = 2/log2(2) -> 0.6309...
        assert ndcg_at_k([0, 2], k=2) == pytest.approx(0.6309, abs=1e-4)

    def test_all_zero_is_zero(self):
        assert ndcg_at_k([0, 0, 0], k=3) == 0.0

    def test_k_one(self):
        assert ndcg_at_k([1, 2], k=1) == pytest.approx(0.5)

    def test_bad_k(self):
        with pytest.raises(metrics.MetricsError):
            ndcg_at_k([1], k=0)

    def test_equal_relevance_permutation_below_k(self):
        base = ndcg_at_k([2, 1, 1, 1, 0], k=3)
        assert ndcg_at_k([2, 1, 1, 0, 1], k=3) == pytest.approx(base)

    def test_appending_zeros_changes_nothing(self):
        # zero-relevance items beyond position k affect neither DCG nor IDCG
        assert ndcg_at_k([2, 1], k=2) == ndcg_at_k([2, 1, 0, 0, 0], k=2)
