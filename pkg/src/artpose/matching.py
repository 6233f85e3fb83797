"""Minimum-cost assignment and the cost-matrix constructions for both stages.

The solver is the classic potentials/augmenting-path Hungarian algorithm on
a square matrix; rectangular inputs (G ground truths, N prediction slots,
G <= N) are padded with constant high-cost dummy rows that are stripped from
the output. Costs are carried as (float_cost, tie_weight) pairs, where the
tie weight is a base-(N+1) positional encoding of the chosen slot indices.
Python integers never overflow, so among all minimum-cost assignments the
solver returns exactly the lexicographically smallest slot vector: ties
break toward the lowest prediction slot for the lowest ground-truth index.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box, giou


class MatchingError(Exception):
    pass


@dataclass
class MatchAssignment:
    """Injective map from ground-truth indices to prediction slots."""

    pairs: list[tuple[int, int]]  # (gt_index, pred_slot)
    total_cost: float

    def slot_of(self, gt_index: int) -> int:
        for g, s in self.pairs:
            if g == gt_index:
                return s
        raise KeyError(gt_index)

    @property
    def matched_slots(self) -> set[int]:
        return {s for _, s in self.pairs}


def hungarian_solve(costs: np.ndarray) -> MatchAssignment:
    """Solve the rectangular assignment problem exactly.

    `costs` is (G, N) with G <= N; entries must be finite. Returns the
    assignment minimizing total cost, with deterministic lexicographic
    tie-breaking over prediction slots.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise MatchingError(f"cost matrix must be 2-D, got shape {costs.shape}")
    n_rows, n_cols = costs.shape
    if n_rows == 0:
        return MatchAssignment(pairs=[], total_cost=0.0)
    if n_rows > n_cols:
        raise MatchingError(f"more ground truths ({n_rows}) than prediction slots ({n_cols})")
    if not np.isfinite(costs).all():
        raise MatchingError("cost matrix contains non-finite entries")

    n = n_cols
    dummy_cost = float(costs.max()) + 1.0
    base = n + 1

    # value of assigning row i to column j: (cost, tie weight); real rows get
    # the highest positional weights so their slot choice dominates ties
    def entry(i: int, j: int) -> tuple[float, int]:
        c = costs[i, j] if i < n_rows else dummy_cost
        return (float(c), j * base ** (n - 1 - i))

    inf = (math.inf, 0)
    zero = (0.0, 0)

    def sub(a, b):
        return (a[0] - b[0], a[1] - b[1])

    def add(a, b):
        return (a[0] + b[0], a[1] + b[1])

    # potentials method, 1-indexed over columns; p[j] = row assigned to col j
    u = [zero] * (n + 1)
    v = [zero] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = sub(sub(entry(i0 - 1, j - 1), u[i0]), v[j])
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] = add(u[p[j]], delta)
                    v[j] = sub(v[j], delta)
                else:
                    minv[j] = sub(minv[j], delta)
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    pairs = []
    total = 0.0
    for j in range(1, n + 1):
        i = p[j] - 1
        if i < n_rows:
            pairs.append((i, j - 1))
            total += float(costs[i, j - 1])
    pairs.sort()
    return MatchAssignment(pairs=pairs, total_cost=total)


def brute_force_assignment(costs: np.ndarray) -> MatchAssignment:
    """Factorial enumeration oracle; use only for small G."""
    costs = np.asarray(costs, dtype=np.float64)
    n_rows, n_cols = costs.shape
    perms = np.array(list(itertools.permutations(range(n_cols), n_rows)), dtype=int)
    totals = costs[np.arange(n_rows)[None, :], perms].sum(axis=1)
    best = int(totals.argmin())
    return MatchAssignment(pairs=[(i, int(perms[best, i])) for i in range(n_rows)],
                           total_cost=float(totals[best]))


# ---------------------------------------------------------------------------
# Cost matrices
# ---------------------------------------------------------------------------


def box_cost_matrix(gt_boxes: list[Box], class_probs: np.ndarray, pred_boxes: np.ndarray,
                    lambda_iou: float, lambda_l1: float, person_class: int = 0) -> np.ndarray:
    """Matching cost between ground-truth persons and box prediction slots.

    entry(i, j) = -p_j(person) + lambda_iou * (1 - giou(b_i, b_j))
                  + lambda_l1 * ||b_i - b_j||_1
    """
    n_gt = len(gt_boxes)
    n_slots = class_probs.shape[0]
    out = np.zeros((n_gt, n_slots))
    for i, gt in enumerate(gt_boxes):
        gt_arr = gt.as_array()
        for j in range(n_slots):
            pb = Box(*pred_boxes[j])
            out[i, j] = (
                -class_probs[j, person_class]
                + lambda_iou * (1.0 - giou(gt, pb))
                + lambda_l1 * float(np.abs(gt_arr - pred_boxes[j]).sum())
            )
    return out


def keypoint_cost_matrix(gt_keypoints, class_probs: np.ndarray,
                         pred_coords: np.ndarray, lambda_l1: float) -> np.ndarray:
    """Matching cost between visible ground-truth joints and keypoint slots.

    entry(i, j) = -p_j(class of joint i) + lambda_l1 * ||k_i - k_j||_1
    """
    for kp in gt_keypoints:
        if kp.visibility == 0:
            raise MatchingError("keypoint_cost_matrix: caller must filter visibility-0 joints")
    n_gt = len(gt_keypoints)
    n_slots = class_probs.shape[0]
    out = np.zeros((n_gt, n_slots))
    for i, kp in enumerate(gt_keypoints):
        l1 = np.abs(pred_coords[:, 0] - kp.x) + np.abs(pred_coords[:, 1] - kp.y)
        out[i] = -class_probs[:, kp.class_id] + lambda_l1 * l1
    return out


def inference_keypoint_assignment(class_probs: np.ndarray, num_classes: int = 17,
                                  report_threshold: float = 0.1) -> list[tuple[int, bool]]:
    """Assign each joint class to a distinct slot by maximizing probability.

    Returns, per joint class, its (slot, present) pair. Hungarian runs on the
    num_classes x N matrix of -p_j(class); a matched slot whose class
    probability falls below `report_threshold` is reported absent.
    """
    n_slots = class_probs.shape[0]
    if n_slots < num_classes:
        raise MatchingError(
            f"inference assignment needs at least {num_classes} slots, got {n_slots}")
    costs = -class_probs[:, :num_classes].T  # (num_classes, N)
    assignment = hungarian_solve(costs)
    result = []
    for class_id, slot in assignment.pairs:
        present = bool(class_probs[slot, class_id] >= report_threshold)
        result.append((slot, present))
    return result
