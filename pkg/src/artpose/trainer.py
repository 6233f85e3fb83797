"""Supervised and semi-supervised training loops with an EMA teacher.

One training run owns its student parameters (single writer). The teacher
is a frozen copy updated only through the exponential moving average; the
optimizer never touches it. All randomness (batch order, augmentations,
pixel noise) is drawn from one seeded generator per run, so identical seeds
replay identical steps.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .dataio import Person, SceneRecord
from .geometry import (
    STRONG_RANGES,
    WEAK_RANGES,
    AugRanges,
    Box,
    Keypoint,
    apply_aug,
    crop_raster,
    sample_aug,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    hungarian_loss_boxes,
    hungarian_loss_keypoints,
    total_loss,
    unsup_losses,
)
from .posemodel import SetPredictor


class TrainerError(Exception):
    pass


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer with a lower learning rate for the stem.

    Mirrors the two-tier rate split of the training recipe: the patch
    embedding (backbone analog) trains 10x slower than the heads by default.
    """

    def __init__(self, params: dict[str, Tensor], lr_head: float = 1e-3,
                 lr_stem: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr = {name: (lr_stem if name.startswith("stem.") else lr_head) for name in params}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data = p.data - self.lr[name] * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# Teacher-student pair
# ---------------------------------------------------------------------------


@dataclass
class TeacherStudent:
    student: SetPredictor
    teacher: SetPredictor
    ema_decay: float = 0.996

    @classmethod
    def bootstrap(cls, student: SetPredictor, ema_decay: float = 0.996) -> "TeacherStudent":
        """Teacher starts as a frozen copy of the student."""
        teacher = student.clone()
        for p in teacher.params.values():
            p.requires_grad = False
        return cls(student=student, teacher=teacher, ema_decay=ema_decay)


def ema_update(ts: TeacherStudent) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, per parameter."""
    a = ts.ema_decay
    for name, tp in ts.teacher.params.items():
        sp = ts.student.params[name]
        if tp.data.shape != sp.data.shape:
            raise TrainerError(f"parameter shape mismatch for {name}")
        tp.data = a * tp.data + (1.0 - a) * sp.data


# ---------------------------------------------------------------------------
# Batches and telemetry
# ---------------------------------------------------------------------------


@dataclass
class BatchPlan:
    labeled: list[SceneRecord]
    unlabeled: list[SceneRecord] = field(default_factory=list)


@dataclass
class RatioLogEntry:
    """Positive/negative tallies for one step, per batch part."""

    iteration: int
    labeled_pos: int
    labeled_neg: int
    unsup_pos: int       # pseudo-labels that cleared tau
    unsup_neg: int       # student slots confidently background
    dropped: int         # pseudo-labels lost to frame projection

    def background_share(self) -> float:
        total = self.unsup_pos + self.unsup_neg
        return self.unsup_neg / total if total else 0.0


class TelemetryWriter:
    """Line-delimited JSON records; first line names the producing config."""

    def __init__(self, path, config_hash: str):
        self.path = path
        self._fh = open(path, "w")
        self._fh.write(json.dumps({"config_hash": config_hash}) + "\n")

    def write(self, iteration: int, breakdown: LossBreakdown, entry: RatioLogEntry | None) -> None:
        record = {
            "iteration": iteration,
            "supervised": breakdown.supervised,
            "unsup_cls": breakdown.unsup_cls,
            "unsup_reg": breakdown.unsup_reg,
            "total": breakdown.total,
            "pos_count": entry.unsup_pos if entry else 0,
            "neg_count": entry.unsup_neg if entry else 0,
        }
        self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# Crop handling for the keypoint stage
# ---------------------------------------------------------------------------


def person_crop(scene: SceneRecord, person, resolution) -> SceneRecord:
    """Crop one person's box and renormalize that person's joints to it."""
    box = person.box
    raster = crop_raster(scene.raster, box, resolution)
    x0, y0, x1, y1 = box.corners()
    kps = []
    annotated = 0
    for kp in person.keypoints:
        nx = (kp.x - x0) / (x1 - x0)
        ny = (kp.y - y0) / (y1 - y0)
        if kp.visibility > 0 and 0.0 <= nx <= 1.0 and 0.0 <= ny <= 1.0:
            kps.append(Keypoint(float(nx), float(ny), kp.class_id, kp.visibility))
            annotated += 1
        else:
            kps.append(Keypoint(0.0, 0.0, kp.class_id, 0))
    cropped = Person(box=Box(0.5, 0.5, 1.0, 1.0), keypoints=kps, num_annotated=annotated)
    return SceneRecord(id=f"{scene.id}#p", raster=raster, persons=[cropped],
                       domain_tag=scene.domain_tag)


def labeled_keypoint_crops(scenes: list[SceneRecord], resolution) -> list[SceneRecord]:
    crops = []
    for scene in scenes:
        for person in scene.persons:
            if person.num_annotated > 0:
                crops.append(person_crop(scene, person, resolution))
    return crops


def pseudo_label_boxes_for_stage_two(detector: SetPredictor, scenes: list[SceneRecord],
                                     resolution, threshold: float = 0.5) -> list[SceneRecord]:
    """Confident detector boxes on unlabeled scenes become unlabeled crops."""
    crops = []
    for scene in scenes:
        pred = detector.predict_scene(scene.raster)
        probs = pred.class_probs.data
        boxes = pred.geometry.data
        for j in range(probs.shape[0]):
            if probs[j, 0] >= threshold:
                raster = crop_raster(scene.raster, Box(*boxes[j]), resolution)
                crops.append(SceneRecord(id=f"{scene.id}#b{j}", raster=raster, persons=[],
                                         domain_tag=scene.domain_tag))
    return crops


# ---------------------------------------------------------------------------
# Training steps
# ---------------------------------------------------------------------------


def _scene_loss(scene: SceneRecord, pred, w: LossWeights, stage: str) -> tuple[Tensor, int]:
    if stage == "boxes":
        return hungarian_loss_boxes(scene.persons, pred, w), len(scene.persons)
    visible = scene.persons[0].visible_keypoints() if scene.persons else []
    return hungarian_loss_keypoints(visible, pred, w), len(visible)


def _supervised_part(scenes: list[SceneRecord], model: SetPredictor, w: LossWeights,
                     stage: str) -> tuple[Tensor, int, int]:
    """Supervised loss over one batch part, consumed as given (on the tape)."""
    items = scenes if stage == "boxes" else labeled_keypoint_crops(scenes, model.cfg.input_resolution)
    if not items:
        raise TrainerError("supervised batch part is empty")
    rasters = np.stack([s.raster for s in items])
    preds = model.predictions(rasters)
    n = len(items)
    total = None
    pos = 0
    for scene, pred in zip(items, preds):
        term, matched = _scene_loss(scene, pred, w, stage)
        pos += matched
        total = term if total is None else ad.add(total, term)
    slots = model.cfg.num_queries
    return ad.mul(total, 1.0 / n), pos, n * slots - pos


def train_step_supervised(batch: BatchPlan, model: SetPredictor, w: LossWeights,
                          optimizer: Adam, stage: str) -> LossBreakdown:
    """Forward, Hungarian loss, backward, optimizer update on labeled data."""
    if batch.unlabeled:
        raise TrainerError("supervised step received unlabeled scenes")
    if not batch.labeled:
        raise TrainerError("empty batch")
    optimizer.zero_grad()
    with Tape():
        sup, pos, neg = _supervised_part(batch.labeled, model, w, stage)
        total, breakdown = total_loss(sup, Tensor(0.0), Tensor(0.0), w)
        backward(total)
    optimizer.step()
    breakdown.counts = {"labeled_pos": pos, "labeled_neg": neg}
    return breakdown


def train_step_semisup(batch: BatchPlan, ts: TeacherStudent, w: LossWeights,
                       optimizer: Adam, stage: str, rng: np.random.Generator,
                       iteration: int = 0) -> tuple[LossBreakdown, RatioLogEntry]:
    """One teacher-student step over a labeled + unlabeled batch.

    The teacher sees weak augmentations without a tape; pseudo-labels above
    tau are projected into the student's strongly augmented frame. Only the
    student receives gradients; the teacher then moves by EMA.
    """
    if not batch.labeled or not batch.unlabeled:
        raise TrainerError("semi-supervised step needs both batch parts")
    optimizer.zero_grad()

    # teacher inference is pixel-only work, safe to do before the tape opens
    weak_augs, strong_augs, weak_rasters, strong_rasters = [], [], [], []
    for scene in batch.unlabeled:
        weak = sample_aug(WEAK_RANGES, rng)
        strong = sample_aug(STRONG_RANGES, rng)
        weak_augs.append(weak)
        strong_augs.append(strong)
        weak_rasters.append(apply_aug(weak, scene, rng).raster)
        strong_rasters.append(apply_aug(strong, scene, rng).raster)
    teacher_preds = [p.detached() for p in ts.teacher.predictions(np.stack(weak_rasters))]

    n_u = len(batch.unlabeled)
    with Tape():
        sup, l_pos, l_neg = _supervised_part(batch.labeled, ts.student, w, stage)
        student_preds = ts.student.predictions(np.stack(strong_rasters))
        reg_sum, cls_sum = Tensor(0.0), Tensor(0.0)
        u_pos = u_neg = dropped = 0
        for tp, sp, weak, strong in zip(teacher_preds, student_preds, weak_augs, strong_augs):
            result = unsup_losses(tp, sp, weak, strong, w, stage)
            reg_sum = ad.add(reg_sum, result.reg)
            cls_sum = ad.add(cls_sum, result.cls)
            u_pos += result.n_pseudo
            u_neg += result.n_negatives
            dropped += result.n_dropped
        reg = ad.mul(reg_sum, 1.0 / n_u)
        cls = ad.mul(cls_sum, 1.0 / n_u)
        total, breakdown = total_loss(sup, reg, cls, w)
        backward(total)
    optimizer.step()
    ema_update(ts)

    entry = RatioLogEntry(iteration=iteration, labeled_pos=l_pos, labeled_neg=l_neg,
                          unsup_pos=u_pos, unsup_neg=u_neg, dropped=dropped)
    breakdown.counts = {
        "labeled_pos": l_pos, "labeled_neg": l_neg,
        "unsup_pos": u_pos, "unsup_neg": u_neg, "dropped": dropped,
    }
    return breakdown, entry


# ---------------------------------------------------------------------------
# Run loops
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 300
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    lr_head: float = 1e-3
    lr_stem: float = 1e-4
    ema_decay: float = 0.996
    seed: int = 0
    augment_labeled: bool = True
    labeled_aug_ranges: AugRanges = field(default_factory=lambda: WEAK_RANGES)
    # mean-teacher style ramp: lambda_u scales linearly from 0 over this many
    # steps (0 disables), so the unlabeled term phases in as the teacher matures
    lambda_u_ramp_steps: int = 0
    checkpoint_every: int = 0
    checkpoint_path: str | None = None


def _batches(scenes: list[SceneRecord], size: int, rng: np.random.Generator):
    """Endless shuffled batch stream, reshuffling each epoch."""
    while True:
        order = rng.permutation(len(scenes))
        for start in range(0, len(order) - size + 1, size):
            yield [scenes[i] for i in order[start:start + size]]


def _maybe_augment(scenes: list[SceneRecord], tc: TrainConfig,
                   rng: np.random.Generator) -> list[SceneRecord]:
    if not tc.augment_labeled:
        return scenes
    return [apply_aug(sample_aug(tc.labeled_aug_ranges, rng), s, rng) for s in scenes]


def run_supervised(model: SetPredictor, scenes: list[SceneRecord], w: LossWeights,
                   tc: TrainConfig, stage: str,
                   telemetry: TelemetryWriter | None = None,
                   hook=None, hook_every: int = 0) -> list[LossBreakdown]:
    """Train on labeled scenes; `hook(step, model)` fires every `hook_every` steps."""
    rng = np.random.default_rng(tc.seed)
    optimizer = Adam(model.params, lr_head=tc.lr_head, lr_stem=tc.lr_stem)
    stream = _batches(scenes, min(tc.batch_labeled, len(scenes)), rng)
    history = []
    for step in range(tc.steps):
        batch = BatchPlan(labeled=_maybe_augment(next(stream), tc, rng))
        breakdown = train_step_supervised(batch, model, w, optimizer, stage)
        history.append(breakdown)
        if telemetry:
            telemetry.write(step, breakdown, None)
        if hook and hook_every and (step + 1) % hook_every == 0:
            hook(step + 1, model)
        if tc.checkpoint_every and tc.checkpoint_path and (step + 1) % tc.checkpoint_every == 0:
            model.save(tc.checkpoint_path)
    return history


def run_semisup(ts: TeacherStudent, labeled: list[SceneRecord], unlabeled: list[SceneRecord],
                w: LossWeights, tc: TrainConfig, stage: str,
                telemetry: TelemetryWriter | None = None,
                hook=None, hook_every: int = 0
                ) -> tuple[list[LossBreakdown], list[RatioLogEntry]]:
    """Teacher-student loop; `hook(step, ts)` fires every `hook_every` steps."""
    rng = np.random.default_rng(tc.seed)
    optimizer = Adam(ts.student.params, lr_head=tc.lr_head, lr_stem=tc.lr_stem)
    labeled_stream = _batches(labeled, min(tc.batch_labeled, len(labeled)), rng)
    unlabeled_stream = _batches(unlabeled, min(tc.batch_unlabeled, len(unlabeled)), rng)
    history, ratio_log = [], []
    for step in range(tc.steps):
        batch = BatchPlan(labeled=_maybe_augment(next(labeled_stream), tc, rng),
                          unlabeled=next(unlabeled_stream))
        w_step = w
        if tc.lambda_u_ramp_steps > 0:
            scale = min(1.0, (step + 1) / tc.lambda_u_ramp_steps)
            w_step = dataclasses.replace(w, lambda_u=w.lambda_u * scale)
        breakdown, entry = train_step_semisup(batch, ts, w_step, optimizer, stage, rng,
                                              iteration=step)
        history.append(breakdown)
        ratio_log.append(entry)
        if telemetry:
            telemetry.write(step, breakdown, entry)
        if hook and hook_every and (step + 1) % hook_every == 0:
            hook(step + 1, ts)
        if tc.checkpoint_every and tc.checkpoint_path and (step + 1) % tc.checkpoint_every == 0:
            ts.student.save(tc.checkpoint_path)
    return history, ratio_log
