"""Boxes, keypoints, GIoU, and the affine augmentation machinery.

Coordinates are normalized to [0,1] everywhere; the canonical box form is
center/size. Horizontal flips are joint-class aware: left/right joints swap
identities so a mirrored pose stays anatomically labeled.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np


class GeometryError(Exception):
    pass


KEYPOINT_NAMES = [
    "nose",
    "left_eye", "right_eye",
    "left_ear", "right_ear",
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
    "left_hip", "right_hip",
    "left_knee", "right_knee",
    "left_ankle", "right_ankle",
]
NUM_KEYPOINTS = 17

# left <-> right involution on joint classes
FLIP_PERM = np.array([0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15])

# canonical 19-edge skeleton (pairs of joint class ids)
SKELETON_EDGES = [
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12),
    (5, 11), (6, 12), (5, 6), (5, 7), (6, 8),
    (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
    (1, 3), (2, 4), (3, 5), (4, 6),
]


@dataclass
class Box:
    """Axis-aligned box in center/size form, normalized coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def validate(self) -> None:
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise GeometryError(f"box center out of range: {self}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise GeometryError(f"box size out of range: {self}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass
class Keypoint:
    """One joint: position, joint class, and COCO-style visibility.

    visibility: 0 = absent, 1 = occluded but annotated, 2 = visible.
    Visibility 0 means the coordinates are meaningless and must be ignored.
    """

    x: float
    y: float
    class_id: int
    visibility: int = 2


@dataclass
class AffineAug:
    """Invertible coordinate transform plus pixel-only corruption.

    Coordinates pass through flip -> scale about image center -> translate.
    Noise and occlusion touch pixels only, so weak/strong label projection
    stays exact. A weak augmentation has noise_sigma == 0 and no occlusions.
    """

    flip: bool = False
    scale: float = 1.0
    translate: tuple[float, float] = (0.0, 0.0)
    noise_sigma: float = 0.0
    occlusion_rects: list[Box] = field(default_factory=list)

    def __post_init__(self):
        if self.scale <= 0:
            raise GeometryError(f"augmentation scale must be positive, got {self.scale}")

    @property
    def is_weak(self) -> bool:
        return self.noise_sigma == 0.0 and not self.occlusion_rects

    def apply_xy(self, x, y):
        if self.flip:
            x = 1.0 - x
        dx, dy = self.translate
        return 0.5 + self.scale * (x - 0.5) + dx, 0.5 + self.scale * (y - 0.5) + dy

    def invert_xy(self, x, y):
        dx, dy = self.translate
        x = (x - dx - 0.5) / self.scale + 0.5
        y = (y - dy - 0.5) / self.scale + 0.5
        if self.flip:
            x = 1.0 - x
        return x, y


@dataclass
class AugRanges:
    """Sampling ranges for one augmentation family; all knobs configurable."""

    flip_prob: float = 0.5
    scale_lo: float = 0.9
    scale_hi: float = 1.1
    translate_max: float = 0.05
    noise_max: float = 0.0
    occlusion_max_count: int = 0
    occlusion_max_frac: float = 0.0


WEAK_RANGES = AugRanges()
STRONG_RANGES = AugRanges(noise_max=0.1, occlusion_max_count=2, occlusion_max_frac=0.2)
FLIP_ONLY_RANGES = AugRanges(flip_prob=0.5, scale_lo=1.0, scale_hi=1.0, translate_max=0.0)


def sample_aug(ranges: AugRanges, rng: np.random.Generator) -> AffineAug:
    rects = []
    if ranges.occlusion_max_count > 0:
        for _ in range(int(rng.integers(0, ranges.occlusion_max_count + 1))):
            w = float(rng.uniform(0.05, np.sqrt(ranges.occlusion_max_frac)))
            h = float(rng.uniform(0.05, min(1.0, ranges.occlusion_max_frac / w)))
            cx = float(rng.uniform(w / 2, 1 - w / 2))
            cy = float(rng.uniform(h / 2, 1 - h / 2))
            rects.append(Box(cx, cy, w, h))
    return AffineAug(
        flip=bool(rng.random() < ranges.flip_prob),
        scale=float(rng.uniform(ranges.scale_lo, ranges.scale_hi)),
        translate=(float(rng.uniform(-ranges.translate_max, ranges.translate_max)),
                   float(rng.uniform(-ranges.translate_max, ranges.translate_max))),
        noise_sigma=float(rng.uniform(0, ranges.noise_max)) if ranges.noise_max > 0 else 0.0,
        occlusion_rects=rects,
    )


# ---------------------------------------------------------------------------
# GIoU
# ---------------------------------------------------------------------------


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    if a.w <= 0 or a.h <= 0 or b.w <= 0 or b.h <= 0:
        raise GeometryError("iou: degenerate box")
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def giou(a: Box, b: Box) -> float:
    """IoU minus the enclosing-box area not covered by the union, in (-1, 1]."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    if a.w <= 0 or a.h <= 0 or b.w <= 0 or b.h <= 0:
        raise GeometryError("giou: degenerate box")
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area + b.area - inter
    cw = max(ax1, bx1) - min(ax0, bx0)
    ch = max(ay1, by1) - min(ay0, by0)
    enclosing = cw * ch
    return inter / union - (enclosing - union) / enclosing


# ---------------------------------------------------------------------------
# Raster warping
# ---------------------------------------------------------------------------


def _bilinear_sample(raster: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample normalized coordinates from a (H, W) grid; outside reads 0."""
    h, w = raster.shape
    px = xs * w - 0.5
    py = ys * h - 0.5
    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    fx = px - x0
    fy = py - y0

    def at(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        out = np.zeros_like(fx)
        out[valid] = raster[yy[valid], xx[valid]]
        return out

    top = at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx
    bot = at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx
    return top * (1 - fy) + bot * fy


def warp_raster(raster: np.ndarray, aug: AffineAug) -> np.ndarray:
    h, w = raster.shape
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    u = (cols + 0.5) / w
    v = (rows + 0.5) / h
    sx, sy = aug.invert_xy(u, v)
    return _bilinear_sample(raster, sx, sy)


# ---------------------------------------------------------------------------
# Scene-level augmentation
# ---------------------------------------------------------------------------


def _transform_person(person, aug: AffineAug):
    x0, y0, x1, y1 = person.box.corners()
    (tx0, ty0) = aug.apply_xy(x0, y0)
    (tx1, ty1) = aug.apply_xy(x1, y1)
    x0, x1 = min(tx0, tx1), max(tx0, tx1)
    y0, y1 = min(ty0, ty1), max(ty0, ty1)
    x0, y0 = max(0.0, x0), max(0.0, y0)
    x1, y1 = min(1.0, x1), min(1.0, y1)
    if x1 - x0 <= 1e-9 or y1 - y0 <= 1e-9:
        return None  # fully outside the frame
    new_box = Box.from_corners(x0, y0, x1, y1)

    new_kps = [Keypoint(0.0, 0.0, c, 0) for c in range(NUM_KEYPOINTS)]
    for kp in person.keypoints:
        nx, ny = aug.apply_xy(kp.x, kp.y)
        new_class = int(FLIP_PERM[kp.class_id]) if aug.flip else kp.class_id
        if kp.visibility > 0 and not (0.0 <= nx <= 1.0 and 0.0 <= ny <= 1.0):
            vis = 0
            nx, ny = min(max(nx, 0.0), 1.0), min(max(ny, 0.0), 1.0)
        else:
            vis = kp.visibility
        new_kps[new_class] = Keypoint(float(nx), float(ny), new_class, vis)
    num_annotated = sum(1 for kp in new_kps if kp.visibility > 0)
    return dataclasses.replace(person, box=new_box, keypoints=new_kps,
                               num_annotated=num_annotated)


def apply_aug(aug: AffineAug, scene, rng: np.random.Generator | None = None):
    """Transform raster and annotations consistently; returns a new scene.

    Keypoints pushed out of frame become visibility 0 instead of being
    clipped: clipping would fabricate geometry that was never observed.
    Pixel noise requires `rng` when noise_sigma > 0.
    """
    raster = warp_raster(scene.raster, aug)
    if aug.noise_sigma > 0:
        if rng is None:
            raise GeometryError("apply_aug: noise_sigma > 0 requires an rng")
        raster = raster + rng.normal(0.0, aug.noise_sigma, size=raster.shape)
    for rect in aug.occlusion_rects:
        h, w = raster.shape
        x0, y0, x1, y1 = rect.corners()
        raster[int(max(0, y0 * h)):int(min(h, np.ceil(y1 * h))),
               int(max(0, x0 * w)):int(min(w, np.ceil(x1 * w)))] = 0.0
    raster = np.clip(raster, 0.0, 1.0)

    persons = []
    for person in scene.persons:
        moved = _transform_person(person, aug)
        if moved is not None:
            persons.append(moved)
    return dataclasses.replace(scene, raster=raster, persons=persons)


# ---------------------------------------------------------------------------
# Weak -> strong label projection
# ---------------------------------------------------------------------------


def project_labels(labels, weak: AffineAug, strong: AffineAug):
    """Map labels from the weak frame into the strong frame.

    Applies strong∘weak⁻¹ to coordinates; the class remap composes the two
    flip states (net flip = XOR). Labels landing outside [0,1] are dropped
    and counted, not an error. Returns (projected, dropped_count).
    """
    net_flip = weak.flip != strong.flip
    out = []
    dropped = 0
    for label in labels:
        if isinstance(label, Box):
            x0, y0, x1, y1 = label.corners()
            p0 = strong.apply_xy(*weak.invert_xy(x0, y0))
            p1 = strong.apply_xy(*weak.invert_xy(x1, y1))
            nx0, nx1 = min(p0[0], p1[0]), max(p0[0], p1[0])
            ny0, ny1 = min(p0[1], p1[1]), max(p0[1], p1[1])
            cx0, cy0 = max(0.0, nx0), max(0.0, ny0)
            cx1, cy1 = min(1.0, nx1), min(1.0, ny1)
            if cx1 - cx0 <= 1e-9 or cy1 - cy0 <= 1e-9:
                dropped += 1
                continue
            out.append(Box.from_corners(cx0, cy0, cx1, cy1))
        elif isinstance(label, Keypoint):
            nx, ny = strong.apply_xy(*weak.invert_xy(label.x, label.y))
            if not (0.0 <= nx <= 1.0 and 0.0 <= ny <= 1.0):
                dropped += 1
                continue
            new_class = int(FLIP_PERM[label.class_id]) if net_flip else label.class_id
            out.append(Keypoint(float(nx), float(ny), new_class, label.visibility))
        else:
            raise GeometryError(f"project_labels: unsupported label type {type(label)!r}")
    return out, dropped


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------


def crop_raster(raster: np.ndarray, box: Box, out_resolution: tuple[int, int]) -> np.ndarray:
    """Resample the box region of a raster into an (h, w) patch."""
    oh, ow = out_resolution
    if oh <= 0 or ow <= 0:
        raise GeometryError(f"crop: bad output resolution {out_resolution}")
    box.validate()
    x0, y0, x1, y1 = box.corners()
    cols, rows = np.meshgrid(np.arange(ow), np.arange(oh))
    u = x0 + (cols + 0.5) / ow * (x1 - x0)
    v = y0 + (rows + 0.5) / oh * (y1 - y0)
    return _bilinear_sample(raster, u, v)


def crop_box(scene, box: Box, out_resolution: tuple[int, int]):
    """Cut the box region into a (h, w) patch with renormalized annotations.

    Keypoints inside the box map to patch coordinates in [0,1]²; keypoints
    outside become visibility 0. Returns a new scene-like record.
    """
    patch = crop_raster(scene.raster, box, out_resolution)
    x0, y0, x1, y1 = box.corners()

    persons = []
    for person in scene.persons:
        new_kps = []
        annotated = 0
        for kp in person.keypoints:
            nx = (kp.x - x0) / (x1 - x0)
            ny = (kp.y - y0) / (y1 - y0)
            if kp.visibility > 0 and 0.0 <= nx <= 1.0 and 0.0 <= ny <= 1.0:
                new_kps.append(Keypoint(float(nx), float(ny), kp.class_id, kp.visibility))
                annotated += 1
            else:
                new_kps.append(Keypoint(0.0, 0.0, kp.class_id, 0))
        bx0, by0, bx1, by1 = person.box.corners()
        nx0 = max(0.0, (bx0 - x0) / (x1 - x0))
        ny0 = max(0.0, (by0 - y0) / (y1 - y0))
        nx1 = min(1.0, (bx1 - x0) / (x1 - x0))
        ny1 = min(1.0, (by1 - y0) / (y1 - y0))
        if nx1 - nx0 <= 1e-9 or ny1 - ny0 <= 1e-9:
            continue
        persons.append(dataclasses.replace(
            person, box=Box.from_corners(nx0, ny0, nx1, ny1),
            keypoints=new_kps, num_annotated=annotated))
    return dataclasses.replace(scene, id=f"{scene.id}#crop", raster=patch, persons=persons)


def patch_to_image_xy(box: Box, x: float, y: float) -> tuple[float, float]:
    """Inverse of the crop transform for a single coordinate."""
    x0, y0, x1, y1 = box.corners()
    return x0 + x * (x1 - x0), y0 + y * (y1 - y0)
