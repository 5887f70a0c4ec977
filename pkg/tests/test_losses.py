import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kplift.errors import BehindCamera, InvalidProbability
from kplift.lifting import N_BINS
from kplift.losses import (
    KeypointPrediction,
    KeypointTarget,
    PoseParams,
    ReprojectionTarget,
    box_corners,
    dim_loss,
    gradient_relative_error,
    is_non_kink,
    keypoint_loss,
    numeric_gradient,
    orientation_loss,
    reprojection_loss,
    smooth_l1,
    total_loss,
)
from kplift.templates import KeypointTemplate

from oracles import dim_loss_scalar, smooth_l1_scalar


class TestSmoothL1:
    @pytest.mark.parametrize("x,expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
    def test_values(self, x, expected):
        assert smooth_l1(x) == expected

    def test_c1_at_one(self):
        eps = 1e-7
        assert smooth_l1(1.0) == 0.5
        assert (smooth_l1(1.0 + eps) - smooth_l1(1.0 - eps)) / (2 * eps) == pytest.approx(1.0, abs=1e-6)

    @given(st.floats(-1e6, 1e6))
    def test_even_and_matches_oracle(self, x):
        assert smooth_l1(x) == smooth_l1(-x)
        assert smooth_l1(x) == pytest.approx(smooth_l1_scalar(x), rel=1e-15)


def _kp_target(vis=True):
    coords = np.linspace(0.1, 0.9, 28).reshape(14, 2)
    return KeypointTarget(coords, np.full(14, vis))


def _probs(vis):
    v = np.asarray(vis, dtype=float)
    return np.column_stack([1 - v, v])


class TestKeypointLoss:
    def test_exact(self):
        gt = _kp_target()
        assert keypoint_loss(gt, KeypointPrediction(gt.coords, _probs(gt.visible))) == (0.0, 0.0, 0.0)

    def test_single_offset(self):
        gt = _kp_target()
        coords = gt.coords.copy()
        coords[3, 0] += 0.5
        l_coord, l_vis, l_kp = keypoint_loss(gt, KeypointPrediction(coords, _probs(gt.visible)))
        assert l_coord == pytest.approx(0.125, abs=1e-15)
        assert l_vis == 0.0 and l_kp == l_coord

    def test_all_invisible_masks_coords(self, rng):
        gt = _kp_target(vis=False)
        pred = KeypointPrediction(rng.uniform(-5, 5, (14, 2)), _probs(gt.visible))
        assert keypoint_loss(gt, pred)[0] == 0.0

    def test_invisible_perturbation_ignored(self, rng):
        vis = np.ones(14, bool)
        vis[[2, 7]] = False
        gt = KeypointTarget(_kp_target().coords, vis)
        coords = gt.coords + 0.1
        base = keypoint_loss(gt, KeypointPrediction(coords, _probs(vis)))[0]
        coords[[2, 7]] += rng.uniform(-3, 3, (2, 2))
        assert keypoint_loss(gt, KeypointPrediction(coords, _probs(vis)))[0] == base

    def test_cross_entropy(self):
        gt = _kp_target()
        probs = _probs(gt.visible) * 0.0 + np.array([0.2, 0.8])
        l_vis = keypoint_loss(gt, KeypointPrediction(gt.coords, probs))[1]
        assert l_vis == pytest.approx(-14 * math.log(0.8), rel=1e-12)

    @pytest.mark.parametrize("bad", [np.array([0.6, 0.6]), np.array([-0.1, 1.1])])
    def test_invalid_probability(self, bad):
        gt = _kp_target()
        probs = _probs(gt.visible)
        probs[0] = bad
        with pytest.raises(InvalidProbability):
            keypoint_loss(gt, KeypointPrediction(gt.coords, probs))


class TestDimLoss:
    MEAN = (1.8, 1.5, 4.2)

    def _tpl(self):
        return KeypointTemplate(0, np.zeros((14, 3)), self.MEAN)

    def test_exact_offsets(self):
        gt = (1.7, 1.6, 3.9)
        offsets = [math.log(g / m) for g, m in zip(gt, self.MEAN)]
        assert dim_loss(gt, offsets, self._tpl()) == pytest.approx(0.0, abs=1e-15)

    def test_half_offset(self):
        assert dim_loss(self.MEAN, (0.5, 0, 0), self._tpl()) == 0.125

    def test_brute_force(self, rng):
        for _ in range(200):
            gt = tuple(rng.uniform(0.3, 8, 3))
            off = tuple(rng.normal(0, 1.5, 3))
            assert dim_loss(gt, off, self._tpl()) == pytest.approx(dim_loss_scalar(gt, off, self.MEAN), rel=1e-12)


class TestOrientationLoss:
    def test_one_hot_correct(self):
        assert orientation_loss(5, np.eye(N_BINS)[5]) == 0.0

    def test_uniform(self):
        assert orientation_loss(17, np.full(N_BINS, 1 / N_BINS)) == pytest.approx(math.log(72), abs=1e-9)

    def test_floor(self):
        assert orientation_loss(4, np.eye(N_BINS)[5]) == pytest.approx(math.log(1e12), rel=1e-12)


def test_total_loss_sums_terms():
    assert total_loss(0.5, 1.25, 2.0) == 3.75


class TestBoxCorners:
    def test_axis_aligned_cube(self):
        c = box_corners((0, 0, 0), 0.0, (2, 2, 2))
        assert sorted(map(tuple, c)) == sorted((x, y, z) for x in (-1, 1) for y in (-1, 1) for z in (-1, 1))

    def test_bit_ordering(self):
        c = box_corners((0, 0, 0), 0.0, (2.0, 4.0, 6.0))
        assert tuple(c[0]) == (-3, -2, -1)
        assert tuple(c[1]) == (3, -2, -1)
        assert tuple(c[2]) == (-3, 2, -1)
        assert tuple(c[4]) == (-3, -2, 1)

    def test_quarter_turn(self):
        a = box_corners((0, 0, 0), 0.0, (2.0, 1.0, 4.0))
        b = box_corners((0, 0, 0), math.pi / 2, (2.0, 1.0, 4.0))
        # R_y(pi/2): x' = z, z' = -x
        assert b[:, 0] == pytest.approx(a[:, 2], abs=1e-15)
        assert b[:, 2] == pytest.approx(-a[:, 0], abs=1e-15)

    def test_centroid(self, rng):
        for _ in range(20):
            c = rng.normal(0, 10, 3)
            corners = box_corners(c, rng.uniform(-4, 4), rng.uniform(0.5, 5, 3))
            assert corners.mean(axis=0) == pytest.approx(c, abs=1e-12)


def _target_for(intr, tpl, params):
    """Noise-free keypoints and tight box for ``params``, computed by hand."""
    from kplift.camera import project_points
    from kplift.synth import instance_keypoints_3d

    kp = project_points(intr, instance_keypoints_3d(tpl, params.c, params.yaw, params.dims))
    uv = project_points(intr, box_corners(params.c, params.yaw, params.dims))
    box = (uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max())
    return ReprojectionTarget(kp, np.ones(14, bool), box)


class TestReprojection:
    @pytest.fixture
    def setup(self, kitti_intr, by_class):
        params = PoseParams((1.5, 0.9, 14.0), 0.7, (1.7, 1.5, 4.3))
        return kitti_intr, by_class[0], params, _target_for(kitti_intr, by_class[0], params)

    def test_zero_at_truth(self, setup):
        intr, tpl, params, target = setup
        lv = reprojection_loss(intr, tpl, params, target)
        assert lv.value < 1e-12
        assert np.linalg.norm(lv.grad) < 1e-6

    def test_oracle_scene_truth(self, kitti_intr, by_class, oracle_instances):
        for s in oracle_instances:
            if s.truncated > 0:
                continue
            params = PoseParams(s.gt.center, s.gt.yaw, s.gt.dims)
            target = ReprojectionTarget(s.gt_keypoints_2d, s.gt_visible, s.det.box2d)
            assert reprojection_loss(kitti_intr, by_class[s.gt.class_id], params, target).value < 1e-12

    def test_translation_increases_loss(self, setup):
        intr, tpl, params, target = setup
        moved = PoseParams((params.c.x + 0.1, params.c.y, params.c.z), params.yaw, params.dims)
        assert reprojection_loss(intr, tpl, moved, target).value > 0

    def test_only_visible_keypoints_count(self, setup):
        intr, tpl, params, target = setup
        kp = target.keypoints.copy()
        kp[5] += 40.0
        vis = np.ones(14, bool)
        vis[5] = False
        masked = ReprojectionTarget(kp, vis, target.box2d)
        assert reprojection_loss(intr, tpl, params, masked).value < 1e-12

    def test_behind_camera(self, setup):
        intr, tpl, params, target = setup
        with pytest.raises(BehindCamera):
            reprojection_loss(intr, tpl, PoseParams((0, 0, 1.0), math.pi / 2, (1.6, 1.5, 4.2)), target)

    def test_gradient_matches_finite_differences(self, setup, rng):
        intr, tpl, params, target = setup
        x0 = params.as_vector()
        checked = 0
        while checked < 20:
            x = x0 + rng.normal(0, [0.3, 0.3, 0.3, 0.15, 0.1, 0.1, 0.1])
            p = PoseParams.from_vector(x)
            if not is_non_kink(intr, tpl, p, target, step=1e-5):
                continue
            a = reprojection_loss(intr, tpl, p, target).grad
            n = numeric_gradient(
                lambda v: reprojection_loss(intr, tpl, PoseParams.from_vector(v), target, with_grad=False).value,
                x, 1e-5)
            assert np.max(gradient_relative_error(a, n)) < 1e-4
            checked += 1

    def test_kink_detected_at_box_edge(self, setup):
        intr, tpl, params, target = setup
        # a residual of exactly 1 px on the box edge sits on the smooth-L1 kink
        x0, y0, x1, y1 = target.box2d
        kinked = ReprojectionTarget(target.keypoints, target.visible, (x0 + 1.0, y0, x1, y1))
        assert not is_non_kink(intr, tpl, params, kinked)


def test_numeric_gradient_quadratic():
    g = numeric_gradient(lambda v: float(v @ v), np.array([1.0, -2.0, 3.0]), 1e-5)
    assert g == pytest.approx([2.0, -4.0, 6.0], abs=1e-8)


def test_relative_error_floor():
    err = gradient_relative_error(np.array([1e-9, 200.0]), np.array([2e-9, 201.0]))
    assert err[0] == pytest.approx(1e-9)
    assert err[1] == pytest.approx(1 / 201)
