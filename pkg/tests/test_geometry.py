import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artpose import geometry as geo
from artpose.dataio import Person, SceneRecord
from artpose.geometry import AffineAug, Box, Keypoint


def make_box(rng):
    w = rng.uniform(0.05, 0.6)
    h = rng.uniform(0.05, 0.6)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return Box(cx, cy, w, h)


def make_scene(rng, n_persons=1, size=32):
    persons = []
    for _ in range(n_persons):
        box = Box(0.5, 0.5, 0.5, 0.6)
        kps = []
        for j in range(geo.NUM_KEYPOINTS):
            kps.append(Keypoint(float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7)), j, 2))
        persons.append(Person(box=box, keypoints=kps, num_annotated=17))
    raster = rng.uniform(0, 1, size=(size, size))
    return SceneRecord(id="s", raster=raster, persons=persons)


class TestBox:
    def test_corner_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            b = make_box(rng)
            b2 = Box.from_corners(*b.corners())
            for f in ("cx", "cy", "w", "h"):
                assert abs(getattr(b, f) - getattr(b2, f)) < 1e-12

    def test_validate_rejects_bad(self):
        with pytest.raises(geo.GeometryError):
            Box(0.5, 0.5, 0.0, 0.1).validate()
        with pytest.raises(geo.GeometryError):
            Box(1.5, 0.5, 0.1, 0.1).validate()


class TestGiou:
    def test_identical_box(self):
        b = Box(0.4, 0.4, 0.2, 0.3)
        assert geo.giou(b, b) == pytest.approx(1.0)

    def test_disjoint_hand_case(self):
        # corner-form a=(0,0,1,1), b=(2,0,3,1): iou 0, union 2, hull 3
        a = Box.from_corners(0, 0, 1, 1)
        b = Box.from_corners(2, 0, 3, 1)
        assert geo.giou(a, b) == pytest.approx(-1 / 3)

    def test_nested_equals_iou(self):
        outer = Box(0.5, 0.5, 0.8, 0.8)
        inner = Box(0.5, 0.5, 0.2, 0.2)
        assert geo.giou(outer, inner) == pytest.approx(geo.iou(outer, inner))

    def test_degenerate_errors(self):
        with pytest.raises(geo.GeometryError):
            geo.giou(Box(0.5, 0.5, 0.0, 0.1), Box(0.5, 0.5, 0.1, 0.1))

    @given(st.integers(0, 10_000))
    @settings(max_examples=200, deadline=None)
    def test_giou_properties(self, seed):
        rng = np.random.default_rng(seed)
        a, b = make_box(rng), make_box(rng)
        g = geo.giou(a, b)
        assert g <= geo.iou(a, b) + 1e-12
        assert -1.0 < g <= 1.0 + 1e-12
        assert g == pytest.approx(geo.giou(b, a))

    def test_separation_approaches_minus_one(self):
        a = Box(0.01, 0.5, 0.005, 0.005)
        b = Box(0.99, 0.5, 0.005, 0.005)
        assert geo.giou(a, b) < -0.97


class TestFlipPerm:
    def test_involution(self):
        assert np.array_equal(geo.FLIP_PERM[geo.FLIP_PERM], np.arange(17))

    def test_swaps_left_right(self):
        names = geo.KEYPOINT_NAMES
        for i, j in enumerate(geo.FLIP_PERM):
            if names[i].startswith("left_"):
                assert names[j] == names[i].replace("left_", "right_")
            elif names[i].startswith("right_"):
                assert names[j] == names[i].replace("right_", "left_")
            else:
                assert i == j


class TestApplyAug:
    def test_identity(self):
        rng = np.random.default_rng(1)
        scene = make_scene(rng)
        out = geo.apply_aug(AffineAug(), scene)
        np.testing.assert_allclose(out.raster, scene.raster, atol=1e-9)
        for p0, p1 in zip(scene.persons, out.persons):
            for k0, k1 in zip(p0.keypoints, p1.keypoints):
                assert k0.class_id == k1.class_id
                assert abs(k0.x - k1.x) < 1e-12 and abs(k0.y - k1.y) < 1e-12

    def test_flip_twice_restores(self):
        rng = np.random.default_rng(2)
        scene = make_scene(rng)
        flip = AffineAug(flip=True)
        out = geo.apply_aug(flip, geo.apply_aug(flip, scene))
        for p0, p1 in zip(scene.persons, out.persons):
            for k0, k1 in zip(p0.keypoints, p1.keypoints):
                assert k0.class_id == k1.class_id
                assert abs(k0.x - k1.x) < 1e-9 and abs(k0.y - k1.y) < 1e-9

    def test_flip_mirrors_and_swaps(self):
        rng = np.random.default_rng(3)
        scene = make_scene(rng, n_persons=1)
        # left wrist (class 9) at x=0.2
        scene.persons[0].keypoints[9] = Keypoint(0.2, 0.5, 9, 2)
        out = geo.apply_aug(AffineAug(flip=True), scene)
        moved = out.persons[0].keypoints[10]  # now stored in right-wrist slot
        assert moved.class_id == 10
        assert moved.x == pytest.approx(0.8)
        assert moved.y == pytest.approx(0.5)

    def test_out_of_frame_keypoint_gets_vis_zero(self):
        rng = np.random.default_rng(4)
        scene = make_scene(rng)
        scene.persons[0].keypoints[0] = Keypoint(0.98, 0.5, 0, 2)
        out = geo.apply_aug(AffineAug(translate=(0.1, 0.0)), scene)
        assert out.persons[0].keypoints[0].visibility == 0

    def test_bad_scale_rejected(self):
        with pytest.raises(geo.GeometryError):
            AffineAug(scale=0.0)

    def test_weak_aug_invariant(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            aug = geo.sample_aug(geo.WEAK_RANGES, rng)
            assert aug.is_weak
        strongs = [geo.sample_aug(geo.STRONG_RANGES, rng) for _ in range(20)]
        assert any(not a.is_weak for a in strongs)


class TestProjectLabels:
    def test_same_aug_is_identity(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            aug = geo.sample_aug(geo.STRONG_RANGES, rng)
            kps = [Keypoint(float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7)), j, 2)
                   for j in range(5)]
            projected, dropped = geo.project_labels(kps, aug, aug)
            assert dropped == 0
            for a, b in zip(kps, projected):
                assert a.class_id == b.class_id
                assert abs(a.x - b.x) < 1e-9 and abs(a.y - b.y) < 1e-9

    def test_identity_to_flip(self):
        kp = Keypoint(0.2, 0.4, 9, 2)  # left wrist
        projected, dropped = geo.project_labels([kp], AffineAug(), AffineAug(flip=True))
        assert dropped == 0
        assert projected[0].class_id == 10
        assert projected[0].x == pytest.approx(0.8)

    def test_round_trip_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            weak = geo.sample_aug(geo.WEAK_RANGES, rng)
            strong = geo.sample_aug(geo.STRONG_RANGES, rng)
            kps = [Keypoint(float(rng.uniform(0.35, 0.65)), float(rng.uniform(0.35, 0.65)), j % 17, 2)
                   for j in range(8)]
            fwd, d1 = geo.project_labels(kps, weak, strong)
            if d1 or len(fwd) != len(kps):
                continue
            back, d2 = geo.project_labels(fwd, strong, weak)
            assert d2 == 0
            for a, b in zip(kps, back):
                assert a.class_id == b.class_id
                assert abs(a.x - b.x) < 1e-9 and abs(a.y - b.y) < 1e-9

    def test_out_of_frame_dropped_and_counted(self):
        kp = Keypoint(0.95, 0.5, 0, 2)
        projected, dropped = geo.project_labels([kp], AffineAug(), AffineAug(translate=(0.2, 0.0)))
        assert projected == []
        assert dropped == 1

    def test_boxes_project(self):
        box = Box(0.5, 0.5, 0.2, 0.2)
        projected, dropped = geo.project_labels([box], AffineAug(), AffineAug(flip=True))
        assert dropped == 0
        assert projected[0].cx == pytest.approx(0.5)
        assert projected[0].w == pytest.approx(0.2)


class TestCropBox:
    def test_full_image_crop_keeps_keypoints(self):
        rng = np.random.default_rng(8)
        scene = make_scene(rng, size=64)
        crop = geo.crop_box(scene, Box(0.5, 0.5, 1.0, 1.0), (64, 64))
        for k0, k1 in zip(scene.persons[0].keypoints, crop.persons[0].keypoints):
            assert abs(k0.x - k1.x) < 1e-9 and abs(k0.y - k1.y) < 1e-9

    def test_box_center_maps_to_half(self):
        rng = np.random.default_rng(9)
        scene = make_scene(rng)
        box = Box(0.4, 0.6, 0.4, 0.4)
        scene.persons[0].keypoints[0] = Keypoint(0.4, 0.6, 0, 2)
        crop = geo.crop_box(scene, box, (32, 24))
        kp = crop.persons[0].keypoints[0]
        assert kp.x == pytest.approx(0.5) and kp.y == pytest.approx(0.5)

    def test_outside_keypoint_vis_zero(self):
        rng = np.random.default_rng(10)
        scene = make_scene(rng)
        scene.persons[0].keypoints[0] = Keypoint(0.05, 0.05, 0, 2)
        crop = geo.crop_box(scene, Box(0.6, 0.6, 0.3, 0.3), (16, 16))
        assert crop.persons[0].keypoints[0].visibility == 0

    def test_zero_resolution_errors(self):
        rng = np.random.default_rng(11)
        scene = make_scene(rng)
        with pytest.raises(geo.GeometryError):
            geo.crop_box(scene, Box(0.5, 0.5, 0.5, 0.5), (0, 16))

    def test_patch_to_image_inverts_crop(self):
        box = Box(0.4, 0.6, 0.4, 0.2)
        x0, y0, _, _ = box.corners()
        x, y = geo.patch_to_image_xy(box, 0.25, 0.75)
        assert x == pytest.approx(x0 + 0.25 * 0.4)
        assert y == pytest.approx(y0 + 0.75 * 0.2)
