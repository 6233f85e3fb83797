"""End-to-end pipelines: model evaluation, index building, and the synthetic
domain-shift benchmark that semi-supervised training must beat.

The benchmark mirrors the central claim at desk scale: train on a small
labeled source set, adapt with unlabeled target scenes through the EMA
teacher, and compare target-domain AP against a supervised-only baseline
trained for the same total number of steps on the same labeled data.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import SceneRecord, StickWorldConfig, generate_stickworld
from .geometry import FLIP_ONLY_RANGES, Box
from .losses import LossWeights
from .metrics import EvalResult, GroundTruth, Prediction, evaluate
from .posemodel import (
    SetPredictor,
    detector_config,
    keypointer_config,
    keypoints_in_box,
)
from .retrieval import IndexEntry, RetrievalIndex, compute_descriptor
from .trainer import (
    RatioLogEntry,
    TeacherStudent,
    TelemetryWriter,
    TrainConfig,
    pseudo_label_boxes_for_stage_two,
    run_semisup,
    run_supervised,
)


def config_hash(obj) -> str:
    """Stable short hash of a (dataclass or dict) configuration."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        obj = dataclasses.asdict(obj)
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Evaluation pipelines
# ---------------------------------------------------------------------------


def detection_ground_truth(scenes: list[SceneRecord]) -> tuple[list[GroundTruth], dict]:
    gts, sizes = [], {}
    for s in scenes:
        sizes[s.id] = (s.height, s.width)
        for p in s.persons:
            gts.append(GroundTruth(image_id=s.id, box=p.box, keypoints=p.keypoints))
    return gts, sizes


def predict_boxes(detector: SetPredictor, scenes: list[SceneRecord]) -> list[Prediction]:
    """Every slot becomes a scored detection; AP handles the ranking."""
    preds = []
    for s in scenes:
        out = detector.predict_scene(s.raster)
        probs = out.class_probs.data
        boxes = out.geometry.data
        for j in range(probs.shape[0]):
            preds.append(Prediction(image_id=s.id, score=float(probs[j, 0]),
                                    box=Box(*boxes[j])))
    return preds


def evaluate_detector(detector: SetPredictor, scenes: list[SceneRecord]) -> EvalResult:
    gts, sizes = detection_ground_truth(scenes)
    return evaluate(gts, predict_boxes(detector, scenes), "box_iou", sizes)


def predict_keypoints(scenes: list[SceneRecord], keypointer: SetPredictor,
                      detector: SetPredictor | None = None, use_gt_boxes: bool = False,
                      box_threshold: float = 0.5) -> list[Prediction]:
    """Stage-two predictions per box; gt-box mode isolates the keypoint stage."""
    if not use_gt_boxes and detector is None:
        raise ValueError("detected-box mode needs a detector")
    preds = []
    for s in scenes:
        if use_gt_boxes:
            boxes = [(p.box, 1.0) for p in s.persons if p.num_annotated > 0]
        else:
            det = detector.predict_scene(s.raster)
            probs = det.class_probs.data
            geo = det.geometry.data
            boxes = [(Box(*geo[j]), float(probs[j, 0]))
                     for j in range(probs.shape[0]) if probs[j, 0] >= box_threshold]
        for box, box_score in boxes:
            kps, joint_scores = keypoints_in_box(s.raster, box, keypointer)
            preds.append(Prediction(image_id=s.id, score=box_score * float(joint_scores.mean()),
                                    box=box, keypoints=kps))
    return preds


def evaluate_keypoints(scenes: list[SceneRecord], keypointer: SetPredictor,
                       detector: SetPredictor | None = None, use_gt_boxes: bool = False,
                       box_threshold: float = 0.5) -> EvalResult:
    gts, sizes = detection_ground_truth(scenes)
    preds = predict_keypoints(scenes, keypointer, detector, use_gt_boxes, box_threshold)
    return evaluate(gts, preds, "keypoint_oks", sizes)


def predictions_to_coco_results(preds: list[Prediction], sizes: dict) -> list[dict]:
    """COCO results records: bbox entries, plus keypoints when present."""
    out = []
    for p in preds:
        h, w = sizes[p.image_id]
        x0, y0, x1, y1 = p.box.corners()
        rec = {
            "image_id": int(p.image_id) if p.image_id.isdigit() else p.image_id,
            "category_id": 1,
            "bbox": [x0 * w, y0 * h, (x1 - x0) * w, (y1 - y0) * h],
            "score": p.score,
        }
        if p.keypoints is not None:
            flat = []
            for kp in sorted(p.keypoints, key=lambda k: k.class_id):
                flat.extend([kp.x * w, kp.y * h, 2 if kp.visibility > 0 else 0])
            rec["keypoints"] = flat
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# Index building
# ---------------------------------------------------------------------------


def render_thumbnail(raster: np.ndarray, box: Box, path: Path, scale: int = 3) -> None:
    from PIL import Image

    from .geometry import crop_raster

    h, w = raster.shape
    side = max(box.w * w, box.h * h)
    patch = crop_raster(raster, _square_box(box), (int(side) + 8, int(side) + 8))
    img = Image.fromarray((np.clip(patch, 0, 1) * 255).astype(np.uint8), mode="L")
    img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(path)


def _square_box(box: Box) -> Box:
    side = min(1.0, max(box.w, box.h) * 1.15)
    cx = min(max(box.cx, side / 2), 1 - side / 2)
    cy = min(max(box.cy, side / 2), 1 - side / 2)
    return Box(cx, cy, side, side)


def build_index(scenes: list[SceneRecord], thumbs_dir: str | None = None,
                detector: SetPredictor | None = None,
                keypointer: SetPredictor | None = None,
                box_threshold: float = 0.5) -> RetrievalIndex:
    """Index poses from annotations, or from model predictions when given.

    With models supplied, each confident detection contributes one entry;
    otherwise ground-truth annotations are indexed directly.
    """
    index = RetrievalIndex()
    thumbs = Path(thumbs_dir) if thumbs_dir else None
    if thumbs:
        thumbs.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        if detector is not None and keypointer is not None:
            det = detector.predict_scene(scene.raster)
            probs, geo = det.class_probs.data, det.geometry.data
            poses = []
            for j in range(probs.shape[0]):
                if probs[j, 0] >= box_threshold:
                    box = Box(*geo[j])
                    kps, _ = keypoints_in_box(scene.raster, box, keypointer)
                    poses.append((box, kps))
        else:
            poses = [(p.box, p.keypoints) for p in scene.persons if p.num_annotated >= 2]
        for person_index, (box, kps) in enumerate(poses):
            visible = [kp for kp in kps if kp.visibility > 0]
            if len(visible) < 2:
                continue
            name = f"{scene.id}_{person_index}.png"
            if thumbs:
                render_thumbnail(scene.raster, box, thumbs / name)
            index.add(IndexEntry(image_id=scene.id, person_index=person_index,
                                 descriptor=compute_descriptor(kps),
                                 thumbnail=f"/thumbnails/{name}"))
    return index


# ---------------------------------------------------------------------------
# Domain-shift benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkConfig:
    """Small enough for a laptop CPU, large enough to show the adaptation gain.

    Baseline and semi-supervised runs start from identical initializations
    and train for the same number of steps on the same labeled stream; the
    semi-supervised run additionally consumes unlabeled target scenes from
    step one, mirroring a training setup whose classification heads start
    fresh. The deployed semi-supervised model is the EMA teacher.
    """

    seeds: tuple[int, ...] = (0, 1, 2)
    n_labeled: int = 50
    n_unlabeled: int = 500
    n_test: int = 100
    raster_size: int = 64
    source: StickWorldConfig = field(default_factory=lambda: StickWorldConfig(
        figures_per_scene=(1, 2), stroke_width=(1.2, 2.0), occlusion_rate=0.03,
        domain="source"))
    target: StickWorldConfig = field(default_factory=lambda: StickWorldConfig(
        figures_per_scene=(1, 2), limb_length_distortion=0.55,
        stroke_width=(2.2, 3.2), occlusion_rate=0.08, domain="target"))
    detector_steps: int = 2000
    keypoint_steps: int = 1500
    lr_head: float = 1e-3
    lr_stem: float = 1e-4
    ema_decay: float = 0.996
    kp_ema_decay: float = 0.993  # shorter run, tighter teacher tracking
    lambda_u_ramp_steps: int = 0
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    pseudo_box_threshold: float = 0.5


@dataclass
class SeedOutcome:
    seed: int
    box_ap_baseline: float
    box_ap_semisup: float
    box_ap_source_domain: float
    kp_ap_baseline: float
    kp_ap_semisup: float
    ratio_log_boxes: list[RatioLogEntry]
    ratio_log_keypoints: list[RatioLogEntry]
    models: dict = field(default_factory=dict)


@dataclass
class BenchmarkResult:
    config: BenchmarkConfig
    outcomes: list[SeedOutcome]
    elapsed: float = 0.0

    def box_improvements(self) -> list[float]:
        return [o.box_ap_semisup - o.box_ap_baseline for o in self.outcomes]

    def kp_improvements(self) -> list[float]:
        return [o.kp_ap_semisup - o.kp_ap_baseline for o in self.outcomes]

    def summary(self) -> dict:
        return {
            "config_hash": config_hash(self.config),
            "seeds": [o.seed for o in self.outcomes],
            "box_ap_baseline": [o.box_ap_baseline for o in self.outcomes],
            "box_ap_semisup": [o.box_ap_semisup for o in self.outcomes],
            "box_ap_source_domain": [o.box_ap_source_domain for o in self.outcomes],
            "kp_ap_baseline": [o.kp_ap_baseline for o in self.outcomes],
            "kp_ap_semisup": [o.kp_ap_semisup for o in self.outcomes],
            "box_improvements": self.box_improvements(),
            "kp_improvements": self.kp_improvements(),
        }


def benchmark_datasets(cfg: BenchmarkConfig, seed: int):
    """Seed-deterministic labeled/unlabeled/test bundles for one run."""
    source = dataclasses.replace(cfg.source, seed=1000 + seed, raster_size=cfg.raster_size)
    target = dataclasses.replace(cfg.target, seed=2000 + seed, raster_size=cfg.raster_size)
    target_test_cfg = dataclasses.replace(cfg.target, seed=3000 + seed,
                                          raster_size=cfg.raster_size)
    source_test_cfg = dataclasses.replace(cfg.source, seed=4000 + seed,
                                          raster_size=cfg.raster_size)
    labeled = generate_stickworld(source, cfg.n_labeled)
    unlabeled = [s.strip_annotations() for s in generate_stickworld(target, cfg.n_unlabeled)]
    target_test = generate_stickworld(target_test_cfg, cfg.n_test)
    source_test = generate_stickworld(source_test_cfg, cfg.n_test)
    return labeled, unlabeled, target_test, source_test


def run_benchmark_seed(cfg: BenchmarkConfig, seed: int, w: LossWeights | None = None,
                       telemetry_dir: str | None = None, log=print) -> SeedOutcome:
    w = w or LossWeights()
    labeled, unlabeled, target_test, source_test = benchmark_datasets(cfg, seed)
    tdir = Path(telemetry_dir) if telemetry_dir else None
    chash = config_hash(cfg)

    def telemetry(name):
        if tdir is None:
            return None
        tdir.mkdir(parents=True, exist_ok=True)
        return TelemetryWriter(tdir / f"{name}_seed{seed}.jsonl", chash)

    def tc_for(steps, batch_labeled):
        return TrainConfig(steps=steps, batch_labeled=batch_labeled,
                           batch_unlabeled=cfg.batch_unlabeled,
                           lr_head=cfg.lr_head, lr_stem=cfg.lr_stem, seed=seed,
                           ema_decay=cfg.ema_decay,
                           labeled_aug_ranges=FLIP_ONLY_RANGES,
                           lambda_u_ramp_steps=cfg.lambda_u_ramp_steps)

    # --- detector: paired supervised-only and semi-supervised runs --------
    det_tc = tc_for(cfg.detector_steps, cfg.batch_labeled)
    det_base = SetPredictor(detector_config(), seed=seed)
    tw = telemetry("detector_baseline")
    run_supervised(det_base, labeled, w, det_tc, "boxes", telemetry=tw)
    if tw:
        tw.close()

    ts = TeacherStudent.bootstrap(SetPredictor(detector_config(), seed=seed),
                                  ema_decay=cfg.ema_decay)
    tw = telemetry("detector_semisup")
    _, ratio_boxes = run_semisup(ts, labeled, unlabeled, w, det_tc, "boxes", telemetry=tw)
    if tw:
        tw.close()
    det_semi = ts.teacher  # the EMA teacher is the deployed model

    box_ap_baseline = evaluate_detector(det_base, target_test).ap or 0.0
    box_ap_semisup = evaluate_detector(det_semi, target_test).ap or 0.0
    box_ap_source = evaluate_detector(det_base, source_test).ap or 0.0
    log(f"[seed {seed}] box AP target: baseline {box_ap_baseline:.4f} "
        f"semisup {box_ap_semisup:.4f} (source-domain {box_ap_source:.4f})")

    # --- keypoint stage: same pairing, unlabeled stream from pseudo-boxes -
    kp_tc = tc_for(cfg.keypoint_steps, 3)
    kp_base = SetPredictor(keypointer_config(), seed=seed)
    tw = telemetry("keypoint_baseline")
    run_supervised(kp_base, labeled, w, kp_tc, "keypoints", telemetry=tw)
    if tw:
        tw.close()

    crops = pseudo_label_boxes_for_stage_two(
        det_semi, unlabeled, keypointer_config().input_resolution,
        threshold=cfg.pseudo_box_threshold)
    log(f"[seed {seed}] pseudo-box crops for keypoint stage: {len(crops)}")
    kp_ts = TeacherStudent.bootstrap(SetPredictor(keypointer_config(), seed=seed),
                                     ema_decay=cfg.kp_ema_decay)
    ratio_kps: list[RatioLogEntry] = []
    if crops:
        tw = telemetry("keypoint_semisup")
        _, ratio_kps = run_semisup(kp_ts, labeled, crops, w,
                                   dataclasses.replace(kp_tc, batch_unlabeled=3,
                                                       ema_decay=cfg.kp_ema_decay),
                                   "keypoints", telemetry=tw)
        if tw:
            tw.close()
    kp_semi = kp_ts.teacher

    kp_ap_baseline = evaluate_keypoints(target_test, kp_base, use_gt_boxes=True).ap or 0.0
    kp_ap_semisup = evaluate_keypoints(target_test, kp_semi, use_gt_boxes=True).ap or 0.0
    log(f"[seed {seed}] keypoint AP target (gt boxes): baseline {kp_ap_baseline:.4f} "
        f"semisup {kp_ap_semisup:.4f}")

    return SeedOutcome(seed=seed,
                       box_ap_baseline=box_ap_baseline, box_ap_semisup=box_ap_semisup,
                       box_ap_source_domain=box_ap_source,
                       kp_ap_baseline=kp_ap_baseline, kp_ap_semisup=kp_ap_semisup,
                       ratio_log_boxes=ratio_boxes, ratio_log_keypoints=ratio_kps,
                       models={"det_base": det_base, "det_semi": det_semi,
                               "kp_base": kp_base, "kp_semi": kp_semi})


def run_benchmark(cfg: BenchmarkConfig | None = None, w: LossWeights | None = None,
                  telemetry_dir: str | None = None, log=print) -> BenchmarkResult:
    cfg = cfg or BenchmarkConfig()
    outcomes = [run_benchmark_seed(cfg, seed, w, telemetry_dir, log) for seed in cfg.seeds]
    return BenchmarkResult(config=cfg, outcomes=outcomes)


def background_share_curve(ratio_log: list[RatioLogEntry], window: int = 25) -> np.ndarray:
    """Windowed mean of the unlabeled background share over training."""
    shares = np.array([e.background_share() for e in ratio_log])
    if len(shares) < window:
        return shares
    kernel = np.ones(window) / window
    return np.convolve(shares, kernel, mode="valid")
