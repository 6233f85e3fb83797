"""Scene records, COCO keypoint JSON I/O, dataset validation, and StickWorld.

StickWorld is a synthetic stand-in for the photograph -> art domain shift:
articulated 17-joint stick figures rendered as anti-aliased line segments,
where the target domain distorts limb lengths and stroke statistics while
the source domain keeps canonical proportions. Annotations are exact by
construction, which makes the generator usable as an oracle.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    KEYPOINT_NAMES,
    NUM_KEYPOINTS,
    SKELETON_EDGES,
    Box,
    Keypoint,
)


class DataError(Exception):
    pass


@dataclass
class Person:
    box: Box
    keypoints: list[Keypoint]  # 17 slots; slot i carries joint class i
    num_annotated: int = 0

    def visible_keypoints(self) -> list[Keypoint]:
        return [kp for kp in self.keypoints if kp.visibility > 0]


@dataclass
class SceneRecord:
    id: str
    raster: np.ndarray  # (H, W) grayscale in [0, 1]
    persons: list[Person]
    domain_tag: str = "source"

    @property
    def height(self) -> int:
        return self.raster.shape[0]

    @property
    def width(self) -> int:
        return self.raster.shape[1]

    def strip_annotations(self) -> "SceneRecord":
        return dataclasses.replace(self, persons=[])


# ---------------------------------------------------------------------------
# COCO keypoint JSON
# ---------------------------------------------------------------------------


def load_coco(path) -> list[SceneRecord]:
    """Read COCO keypoint JSON into normalized scene records.

    Boxes convert from top-left x,y,w,h pixels to center form; keypoints
    normalize by image width/height. Persons with zero annotated keypoints
    are kept (they still train detection) with num_annotated == 0.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed COCO JSON: {e}") from e

    images = {img["id"]: img for img in doc.get("images", [])}
    by_image: dict[int, list[dict]] = {img_id: [] for img_id in images}
    for ann in doc.get("annotations", []):
        kps = ann.get("keypoints", [])
        if len(kps) != NUM_KEYPOINTS * 3:
            raise DataError(
                f"{path}: annotation {ann.get('id')} has keypoints array of "
                f"length {len(kps)}, expected {NUM_KEYPOINTS * 3}")
        if ann["image_id"] not in images:
            raise DataError(f"{path}: annotation {ann.get('id')} references unknown image {ann['image_id']}")
        by_image[ann["image_id"]].append(ann)

    scenes = []
    for img_id, img in images.items():
        w, h = img["width"], img["height"]
        persons = []
        for ann in by_image[img_id]:
            bx, by, bw, bh = ann["bbox"]
            if bw <= 0 or bh <= 0:
                raise DataError(f"{path}: annotation {ann.get('id')} has degenerate bbox {ann['bbox']}")
            box = Box((bx + bw / 2) / w, (by + bh / 2) / h, bw / w, bh / h)
            kps = []
            n_annotated = 0
            flat = ann["keypoints"]
            for j in range(NUM_KEYPOINTS):
                x, y, v = flat[3 * j], flat[3 * j + 1], int(flat[3 * j + 2])
                if v > 0:
                    n_annotated += 1
                    kps.append(Keypoint(x / w, y / h, j, v))
                else:
                    kps.append(Keypoint(0.0, 0.0, j, 0))
            persons.append(Person(box=box, keypoints=kps, num_annotated=n_annotated))
        scenes.append(SceneRecord(
            id=str(img_id),
            raster=np.zeros((h, w)),
            persons=persons,
            domain_tag=img.get("domain_tag", "source"),
        ))
    scenes.sort(key=lambda s: int(s.id) if s.id.isdigit() else 0)
    return scenes


def save_coco(scenes: list[SceneRecord], path) -> None:
    """Emit scenes as COCO keypoint JSON (annotations only, no pixels)."""
    images = []
    annotations = []
    ann_id = 1
    for i, scene in enumerate(scenes):
        img_id = int(scene.id) if scene.id.isdigit() else i + 1
        h, w = scene.raster.shape
        images.append({
            "id": img_id,
            "width": w,
            "height": h,
            "file_name": f"{img_id}.png",
            "domain_tag": scene.domain_tag,
        })
        for person in scene.persons:
            x0, y0, x1, y1 = person.box.corners()
            flat = []
            for kp in person.keypoints:
                if kp.visibility > 0:
                    flat.extend([kp.x * w, kp.y * h, kp.visibility])
                else:
                    flat.extend([0, 0, 0])
            annotations.append({
                "id": ann_id,
                "image_id": img_id,
                "category_id": 1,
                "bbox": [x0 * w, y0 * h, (x1 - x0) * w, (y1 - y0) * h],
                "area": (x1 - x0) * w * (y1 - y0) * h,
                "iscrowd": 0,
                "keypoints": flat,
                "num_keypoints": person.num_annotated,
            })
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{
            "id": 1,
            "name": "person",
            "supercategory": "person",
            "keypoints": KEYPOINT_NAMES,
            "skeleton": [[a + 1, b + 1] for a, b in SKELETON_EDGES],
        }],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def save_coco_results(results: list[dict], path) -> None:
    """COCO results format: [{image_id, category_id, bbox|keypoints, score}]."""
    with open(path, "w") as fh:
        json.dump(results, fh)


# ---------------------------------------------------------------------------
# Scene bundles (annotations + pixels) for the pipelines
# ---------------------------------------------------------------------------


def save_scenes(scenes: list[SceneRecord], path) -> None:
    """Persist rasters and annotations together (npz + embedded JSON)."""
    rasters = np.stack([s.raster for s in scenes]) if scenes else np.zeros((0, 0, 0))
    meta = []
    for s in scenes:
        meta.append({
            "id": s.id,
            "domain_tag": s.domain_tag,
            "persons": [{
                "box": [p.box.cx, p.box.cy, p.box.w, p.box.h],
                "keypoints": [[kp.x, kp.y, kp.class_id, kp.visibility] for kp in p.keypoints],
                "num_annotated": p.num_annotated,
            } for p in s.persons],
        })
    np.savez_compressed(path, rasters=rasters, meta=json.dumps(meta))


def load_scenes(path) -> list[SceneRecord]:
    with np.load(path, allow_pickle=False) as data:
        rasters = data["rasters"]
        meta = json.loads(str(data["meta"]))
    scenes = []
    for i, m in enumerate(meta):
        persons = []
        for p in m["persons"]:
            cx, cy, w, h = p["box"]
            kps = [Keypoint(x, y, int(c), int(v)) for x, y, c, v in p["keypoints"]]
            persons.append(Person(Box(cx, cy, w, h), kps, int(p["num_annotated"])))
        scenes.append(SceneRecord(id=m["id"], raster=rasters[i], persons=persons,
                                  domain_tag=m["domain_tag"]))
    return scenes


# ---------------------------------------------------------------------------
# Annotation-protocol validation
# ---------------------------------------------------------------------------


def validate_annotation_rules(scene: SceneRecord) -> list[str]:
    """Advisory data-quality checks tied to the annotation protocol.

    Rule 1: a figure whose body is recognizable must have more than six
    annotatable keypoints; 1-6 annotated keypoints is flagged. Zero is
    allowed (detection-only annotation). Rule 2: at most four annotated
    figures per image. Occlusion-approximation and profile-view rules are
    annotation-time human judgments and cannot be machine-checked here.
    """
    violations = []
    annotated_figures = 0
    for i, person in enumerate(scene.persons):
        if 1 <= person.num_annotated <= 6:
            violations.append(
                f"scene {scene.id} person {i}: only {person.num_annotated} "
                f"keypoints annotated (rule 1 requires more than six)")
        if person.num_annotated > 0:
            annotated_figures += 1
    if annotated_figures > 4:
        violations.append(
            f"scene {scene.id}: {annotated_figures} annotated figures "
            f"(rule 2 allows at most four)")
    return violations


# ---------------------------------------------------------------------------
# StickWorld
# ---------------------------------------------------------------------------


@dataclass
class StickWorldConfig:
    """Generator knobs; distortion 0 reproduces source-domain proportions."""

    figures_per_scene: tuple[int, int] = (1, 2)
    limb_length_distortion: float = 0.0
    stroke_width: tuple[float, float] = (1.2, 2.0)
    occlusion_rate: float = 0.05
    seed: int = 0
    raster_size: int = 64
    domain: str = "source"

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("# StickWorld generator configuration\n")
            fh.write(f"figures_per_scene = {self.figures_per_scene[0]},{self.figures_per_scene[1]}\n")
            fh.write(f"limb_length_distortion = {self.limb_length_distortion}\n")
            fh.write(f"stroke_width = {self.stroke_width[0]},{self.stroke_width[1]}\n")
            fh.write(f"occlusion_rate = {self.occlusion_rate}\n")
            fh.write(f"seed = {self.seed}\n")
            fh.write(f"raster_size = {self.raster_size}\n")
            fh.write(f"domain = {self.domain}\n")

    @classmethod
    def from_file(cls, path) -> "StickWorldConfig":
        values: dict[str, str] = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise DataError(f"{path}: bad config line {line!r}")
                key, val = (part.strip() for part in line.split("=", 1))
                values[key] = val

        def pair(raw, cast):
            a, b = raw.split(",")
            return (cast(a), cast(b))

        cfg = cls()
        if "figures_per_scene" in values:
            cfg.figures_per_scene = pair(values["figures_per_scene"], int)
        if "limb_length_distortion" in values:
            cfg.limb_length_distortion = float(values["limb_length_distortion"])
        if "stroke_width" in values:
            cfg.stroke_width = pair(values["stroke_width"], float)
        if "occlusion_rate" in values:
            cfg.occlusion_rate = float(values["occlusion_rate"])
        if "seed" in values:
            cfg.seed = int(values["seed"])
        if "raster_size" in values:
            cfg.raster_size = int(values["raster_size"])
        if "domain" in values:
            cfg.domain = values["domain"]
        return cfg


# Generated coordinates snap to multiples of 2^-20 so that every COCO
# conversion (x64 pixel scaling, corner<->center form) is exact dyadic
# float arithmetic: load->save->load is then bit-identical.
_QUANT = float(2 ** 20)


def _quantize(v):
    return np.round(np.asarray(v) * _QUANT) / _QUANT


# canonical proportions in torso-length units
_TORSO = 1.0
_NECK_TO_HEAD = 0.32
_HEAD_R = 0.16
_SHOULDER_HALF = 0.30
_HIP_HALF = 0.18
_UPPER_ARM = 0.44
_FORE_ARM = 0.40
_THIGH = 0.52
_SHIN = 0.48


def _sample_figure_joints(rng: np.random.Generator, distortion: float) -> np.ndarray:
    """Sample one articulated pose; returns (17, 2) joint positions, unit torso."""
    stretch = 1.0 + distortion * rng.uniform(0.7, 1.3)
    arm_stretch = 1.0 + distortion * rng.uniform(0.7, 1.3)
    leg_stretch = 1.0 + distortion * rng.uniform(0.7, 1.3)

    def polar(origin, angle, length):
        return origin + length * np.array([math.sin(angle), -math.cos(angle)])

    pelvis = np.zeros(2)
    torso_angle = rng.normal(0.0, 0.25)
    neck = polar(pelvis, torso_angle, _TORSO * stretch)
    head = polar(neck, torso_angle + rng.normal(0.0, 0.15), _NECK_TO_HEAD * stretch)

    side = np.array([math.cos(torso_angle), math.sin(torso_angle)])
    l_shoulder = neck - side * _SHOULDER_HALF
    r_shoulder = neck + side * _SHOULDER_HALF
    l_hip = pelvis - side * _HIP_HALF
    r_hip = pelvis + side * _HIP_HALF

    joints = np.zeros((NUM_KEYPOINTS, 2))

    def limb(origin, base_angle, spread, upper_len, lower_len, bend_range):
        a1 = base_angle + rng.uniform(-spread, spread)
        mid = polar(origin, a1, upper_len)
        a2 = a1 + rng.uniform(*bend_range)
        end = polar(mid, a2, lower_len)
        return mid, end

    down = math.pi  # polar() angle pointing straight down
    l_elbow, l_wrist = limb(l_shoulder, down + torso_angle, 1.5,
                            _UPPER_ARM * arm_stretch, _FORE_ARM * arm_stretch, (-1.6, 1.6))
    r_elbow, r_wrist = limb(r_shoulder, down + torso_angle, 1.5,
                            _UPPER_ARM * arm_stretch, _FORE_ARM * arm_stretch, (-1.6, 1.6))
    l_knee, l_ankle = limb(l_hip, down + torso_angle * 0.5, 0.55,
                           _THIGH * leg_stretch, _SHIN * leg_stretch, (-0.9, 0.2))
    r_knee, r_ankle = limb(r_hip, down + torso_angle * 0.5, 0.55,
                           _THIGH * leg_stretch, _SHIN * leg_stretch, (-0.9, 0.2))

    face_side = side * _HEAD_R
    joints[0] = head + np.array([0.0, _HEAD_R * 0.4])                      # nose
    joints[1] = head - face_side * 0.5 + np.array([0.0, -_HEAD_R * 0.2])   # left eye
    joints[2] = head + face_side * 0.5 + np.array([0.0, -_HEAD_R * 0.2])   # right eye
    joints[3] = head - face_side                                           # left ear
    joints[4] = head + face_side                                           # right ear
    joints[5], joints[6] = l_shoulder, r_shoulder
    joints[7], joints[8] = l_elbow, r_elbow
    joints[9], joints[10] = l_wrist, r_wrist
    joints[11], joints[12] = l_hip, r_hip
    joints[13], joints[14] = l_knee, r_knee
    joints[15], joints[16] = l_ankle, r_ankle
    return joints


def _draw_segment(raster: np.ndarray, p0: np.ndarray, p1: np.ndarray, thickness: float) -> None:
    """Max-composite an anti-aliased thick segment, coordinates in pixels."""
    h, w = raster.shape
    pad = thickness / 2 + 1.5
    x_lo = max(0, int(math.floor(min(p0[0], p1[0]) - pad)))
    x_hi = min(w, int(math.ceil(max(p0[0], p1[0]) + pad)))
    y_lo = max(0, int(math.floor(min(p0[1], p1[1]) - pad)))
    y_hi = min(h, int(math.ceil(max(p0[1], p1[1]) + pad)))
    if x_lo >= x_hi or y_lo >= y_hi:
        return
    xs, ys = np.meshgrid(np.arange(x_lo, x_hi) + 0.5, np.arange(y_lo, y_hi) + 0.5)
    d = p1 - p0
    len2 = float(d @ d)
    if len2 < 1e-12:
        dist = np.hypot(xs - p0[0], ys - p0[1])
    else:
        t = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / len2, 0.0, 1.0)
        dist = np.hypot(xs - (p0[0] + t * d[0]), ys - (p0[1] + t * d[1]))
    ink = np.clip(thickness / 2 + 0.5 - dist, 0.0, 1.0)
    region = raster[y_lo:y_hi, x_lo:x_hi]
    np.maximum(region, ink, out=region)


def generate_stickworld(cfg: StickWorldConfig, count: int) -> list[SceneRecord]:
    """Render `count` scenes of articulated stick figures, deterministic per seed.

    Every annotated keypoint is an endpoint of a drawn skeleton segment, and
    each figure's box is the tight hull of its annotated keypoints plus a
    stroke margin, so the labels are exact by construction.
    """
    rng = np.random.default_rng(cfg.seed)
    size = cfg.raster_size
    scenes = []
    for i in range(count):
        raster = np.zeros((size, size))
        persons = []
        n_figures = int(rng.integers(cfg.figures_per_scene[0], cfg.figures_per_scene[1] + 1))
        for _ in range(n_figures):
            joints = _sample_figure_joints(rng, cfg.limb_length_distortion)
            lo = joints.min(axis=0)
            hi = joints.max(axis=0)
            extent = float(max(hi - lo))
            target = rng.uniform(0.38, 0.68)
            s = target / extent
            span = (hi - lo) * s
            offset = np.array([
                rng.uniform(0.03, max(0.031, 0.97 - span[0])),
                rng.uniform(0.03, max(0.031, 0.97 - span[1])),
            ])
            joints = _quantize((joints - lo) * s + offset)

            stroke = rng.uniform(*cfg.stroke_width)
            for a, b in SKELETON_EDGES:
                _draw_segment(raster, joints[a] * size, joints[b] * size, stroke)

            kps = []
            for j in range(NUM_KEYPOINTS):
                vis = 1 if rng.random() < cfg.occlusion_rate else 2
                kps.append(Keypoint(float(joints[j, 0]), float(joints[j, 1]), j, vis))
            margin = (stroke / 2 + 1.0) / size
            x0 = float(_quantize(max(0.0, joints[:, 0].min() - margin)))
            y0 = float(_quantize(max(0.0, joints[:, 1].min() - margin)))
            x1 = float(_quantize(min(1.0, joints[:, 0].max() + margin)))
            y1 = float(_quantize(min(1.0, joints[:, 1].max() + margin)))
            persons.append(Person(
                box=Box.from_corners(x0, y0, x1, y1),
                keypoints=kps,
                num_annotated=NUM_KEYPOINTS,
            ))
        scenes.append(SceneRecord(
            id=str(i + 1), raster=raster, persons=persons, domain_tag=cfg.domain))
    return scenes


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def split_dataset(scenes: list[SceneRecord], fractions: tuple[float, float, float],
                  seed: int) -> tuple[list[SceneRecord], list[SceneRecord], list[SceneRecord]]:
    """Disjoint, seed-deterministic train/val/test partition."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"split fractions must be three nonnegatives summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(scenes))
    n_train = round(fractions[0] * len(scenes))
    n_val = round(fractions[1] * len(scenes))
    train = [scenes[i] for i in order[:n_train]]
    val = [scenes[i] for i in order[n_train:n_train + n_val]]
    test = [scenes[i] for i in order[n_train + n_val:]]
    return train, val, test
