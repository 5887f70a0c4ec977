import math
from dataclasses import replace

import numpy as np
import pytest

from kplift.camera import CameraIntrinsics, Pixel, rot_y
from kplift.errors import DegenerateDistribution, DegeneratePair, NoVisiblePair, NonPositiveDepth
from kplift.lifting import (
    BIN_MEDIANS,
    N_BINS,
    Detection2D,
    Pose3D,
    assemble_pose,
    circular_mean,
    decode_dims,
    decode_local_orientation,
    depth_from_span,
    encode_dims,
    global_orientation,
    instance_depth,
    keypoint_to_center,
    lift_all,
    lift_keypoint,
    orientation_bin,
    select_depth_pair,
)
from kplift.synth import SceneConfig, generate_scene
from kplift.templates import DEPTH_PAIRS, KeypointId, KeypointTemplate

from conftest import make_instances

DEG = math.pi / 180.0


def _tpl(dims=(1.8, 1.5, 4.2)):
    return KeypointTemplate(0, np.zeros((14, 3)), dims)


def _det(keypoints=None, visible=None, bins=None, offsets=(0.0, 0.0, 0.0), probs=None, score=0.9):
    if bins is None:
        bins = np.eye(N_BINS)[0]
    if probs is None:
        probs = np.eye(5)[0]
    return Detection2D(
        box2d=(0, 0, 10, 10),
        keypoints=np.zeros((14, 2)) if keypoints is None else keypoints,
        visible=np.ones(14, bool) if visible is None else visible,
        orient_bins=bins,
        dim_offsets=offsets,
        class_probs=probs,
        score=score,
    )


class TestDims:
    def test_zero_offset_is_class_mean(self):
        assert decode_dims(_det(), _tpl()) == (1.8, 1.5, 4.2)

    def test_doubling(self):
        assert decode_dims(_det(offsets=(math.log(2), 0, 0)), _tpl())[0] == pytest.approx(3.6, abs=1e-15)

    def test_encode_decode(self, rng):
        tpl = _tpl()
        for _ in range(50):
            d = tuple(rng.uniform(0.5, 6, 3))
            out = decode_dims(_det(offsets=encode_dims(d, tpl)), tpl)
            assert out == pytest.approx(d, rel=1e-12)


class TestDepth:
    def test_round_numbers(self):
        assert depth_from_span(700, 0.25, 1.6, 28) == pytest.approx(10.0, rel=1e-15)

    @pytest.mark.parametrize("lam", [0.1, 0.5, 2.0, 3.7, 10.0])
    def test_inverse_scaling(self, lam):
        z0 = depth_from_span(700, 0.25, 1.6, 28)
        assert depth_from_span(700, 0.25, 1.6, 28 * lam) == pytest.approx(z0 / lam, rel=1e-12)

    def test_all_invisible(self, templates):
        with pytest.raises(NoVisiblePair):
            instance_depth(TOY, _det(visible=np.zeros(14, bool)), templates[0], 1.5)

    def test_degenerate_span(self, templates):
        with pytest.raises(DegeneratePair):
            instance_depth(TOY, _det(), templates[0], 1.5)

    def test_oracle_plane_depth(self, kitti_intr, by_class, oracle_instances):
        for s in oracle_instances:
            tpl = by_class[s.gt.class_id]
            z, pair = instance_depth(kitti_intr, s.det, tpl, s.gt.dims[1])
            from kplift.synth import instance_keypoints_3d
            kp3d = instance_keypoints_3d(tpl, s.gt.center, s.gt.yaw, s.gt.dims)
            assert z == pytest.approx(kp3d[pair.bottom][2], abs=1e-9)


TOY = CameraIntrinsics(f=100.0, p_x=50.0, p_y=50.0, image_w=100.0, image_h=100.0)


class TestPairSelection:
    def _kp(self, spans):
        kp = np.zeros((14, 2))
        for pair, s in zip(DEPTH_PAIRS, spans):
            kp[pair.bottom, 1] = s
        return kp

    def test_largest_span_wins(self):
        assert select_depth_pair(self._kp([5, 9, 7, 3]), np.ones(14, bool)) == DEPTH_PAIRS[1]

    def test_tie_break_order(self):
        assert select_depth_pair(self._kp([4, 9, 9, 9]), np.ones(14, bool)) == DEPTH_PAIRS[1]
        assert select_depth_pair(self._kp([9, 9, 9, 9]), np.ones(14, bool)) == DEPTH_PAIRS[0]

    def test_half_visible_pair_skipped(self):
        vis = np.ones(14, bool)
        vis[DEPTH_PAIRS[1].top] = False
        assert select_depth_pair(self._kp([5, 9, 7, 3]), vis) == DEPTH_PAIRS[2]


class TestLiftKeypoint:
    def test_centered_pixel(self):
        kp = np.full((14, 2), 50.0)
        pair = DEPTH_PAIRS[0]
        assert lift_keypoint(TOY, _det(keypoints=kp), _tpl(), pair, 10.0) == (0.0, 0.0, 10.0)

    def test_non_positive_depth(self):
        with pytest.raises(NonPositiveDepth):
            lift_keypoint(TOY, _det(), _tpl(), DEPTH_PAIRS[0], 0.0)

    def test_oracle_keypoint(self, kitti_intr, by_class, oracle_instances):
        from kplift.synth import instance_keypoints_3d
        for s in oracle_instances:
            tpl = by_class[s.gt.class_id]
            z, pair = instance_depth(kitti_intr, s.det, tpl, s.gt.dims[1])
            p = lift_keypoint(kitti_intr, s.det, tpl, pair, z)
            truth = instance_keypoints_3d(tpl, s.gt.center, s.gt.yaw, s.gt.dims)[pair.bottom]
            assert np.max(np.abs(np.array(p) - truth)) < 1e-9


class TestLocalOrientation:
    def test_single_bin(self):
        assert decode_local_orientation(np.eye(N_BINS)[0]) == pytest.approx(2.5 * DEG, abs=1e-15)

    def test_wraparound(self):
        bins = np.zeros(N_BINS)
        bins[0] = bins[71] = 0.5
        assert decode_local_orientation(bins) == pytest.approx(0.0, abs=1e-15)

    def test_nearby_bins_close_to_arithmetic_mean(self):
        # circular mean of 0.75/0.25 at 10 and 20 degrees, evaluated independently
        got = circular_mean([10 * DEG, 20 * DEG], [0.75, 0.25])
        assert math.degrees(got) == pytest.approx(12.495231278463402, abs=1e-12)
        assert abs(math.degrees(got) - 12.5) < 0.01

    def test_uniform_is_degenerate(self):
        with pytest.raises(DegenerateDistribution):
            decode_local_orientation(np.full(N_BINS, 1.0 / N_BINS))

    def test_output_range(self):
        for i in range(N_BINS):
            t = decode_local_orientation(np.eye(N_BINS)[i])
            assert -math.pi <= t < math.pi
            assert orientation_bin(t) == i

    def test_medians(self):
        assert BIN_MEDIANS[71] == pytest.approx(357.5 * DEG)


class TestGlobalOrientation:
    def test_on_axis(self):
        assert global_orientation(0.3, (0.0, 1.0, 12.0)) == 0.3

    def test_diagonal_ray(self):
        assert global_orientation(0.0436, (5.0, 0.0, 5.0)) == pytest.approx(0.0436 + math.pi / 4, abs=1e-15)

    def test_wrapped(self):
        assert global_orientation(3.0, (5.0, 0.0, 5.0)) == pytest.approx(3.0 + math.pi / 4 - 2 * math.pi)


class TestCenter:
    def test_any_keypoint_recovers_center(self, by_class, rng):
        from kplift.synth import instance_keypoints_3d
        for _ in range(30):
            tpl = by_class[int(rng.integers(5))]
            c = rng.uniform([-8, 0, 5], [8, 2, 40])
            yaw = rng.uniform(-math.pi, math.pi)
            dims = tuple(rng.uniform(1, 5, 3))
            kp3d = instance_keypoints_3d(tpl, c, yaw, dims)
            for k in KeypointId:
                assert np.max(np.abs(keypoint_to_center(kp3d[k], k, yaw, dims, tpl) - c)) < 1e-9

    def test_rotation_convention(self):
        # forward (+length) at yaw pi/2 points along -z... R_y maps x-axis to (c, 0, -s)
        assert rot_y(math.pi / 2) @ np.array([1.0, 0, 0]) == pytest.approx([0, 0, -1], abs=1e-15)


class TestAssemble:
    def test_round_trip_exact_theta(self, kitti_intr, by_class, oracle_instances):
        for s in oracle_instances:
            pose = assemble_pose(kitti_intr, s.det, by_class[s.det.class_id], theta_loc=s.theta_loc)
            assert np.max(np.abs(np.subtract(pose.center, s.gt.center))) < 1e-9
            assert abs(pose.yaw - s.gt.yaw) < 1e-9
            assert pose.dims == pytest.approx(s.gt.dims, rel=1e-12)
            assert pose.class_id == s.gt.class_id and pose.score == s.det.score

    def test_bin_aligned_yaw_recovered(self, kitti_intr, templates, by_class):
        for s in make_instances(kitti_intr, templates, 40, seed=5, yaw="bin_aligned"):
            pose = assemble_pose(kitti_intr, s.det, by_class[s.det.class_id])
            assert abs(pose.yaw - s.gt.yaw) < 1e-6

    def test_quantisation_bound(self, kitti_intr, by_class, oracle_instances):
        for s in oracle_instances:
            pose = assemble_pose(kitti_intr, s.det, by_class[s.det.class_id])
            err = abs(math.remainder(pose.yaw - s.gt.yaw, 2 * math.pi))
            assert err <= 2.5 * DEG + 1e-9

    def test_fully_occluded(self, kitti_intr, by_class, oracle_instances):
        s = oracle_instances[0]
        det = replace(s.det, visible=np.zeros(14, bool))
        with pytest.raises(NoVisiblePair):
            assemble_pose(kitti_intr, det, by_class[det.class_id])

    def test_truncated_front_still_lifts(self, kitti_intr, templates, by_class):
        # find instances whose front pairs are off-image but a rear pair remains
        found = 0
        for s in make_instances(kitti_intr, templates, 600, seed=11):
            v = s.det.visible
            fronts = [p for p in DEPTH_PAIRS[:2] if v[p.top] and v[p.bottom]]
            rears = [p for p in DEPTH_PAIRS[2:] if v[p.top] and v[p.bottom]]
            if fronts or not rears:
                continue
            found += 1
            pose = assemble_pose(kitti_intr, s.det, by_class[s.det.class_id], theta_loc=s.theta_loc)
            assert np.max(np.abs(np.subtract(pose.center, s.gt.center))) < 1e-9
        assert found > 0

    def test_argmax_invariance(self, kitti_intr, by_class, oracle_instances):
        s = oracle_instances[3]
        probs = np.full(5, 0.1)
        probs[s.gt.class_id] = 0.6
        det = replace(s.det, class_probs=probs)
        scaled = replace(s.det, class_probs=(3.0 * probs) / (3.0 * probs).sum())
        assert det.class_id == scaled.class_id == s.gt.class_id


class TestLiftAll:
    def test_threads_agree_and_failures_in_place(self, kitti_intr, templates, oracle_instances):
        dets = [s.det for s in oracle_instances[:20]]
        dets[4] = replace(dets[4], visible=np.zeros(14, bool))
        a = lift_all(kitti_intr, dets, templates, threads=1)
        b = lift_all(kitti_intr, dets, templates, threads=4)
        assert isinstance(a[4], NoVisiblePair) and isinstance(b[4], NoVisiblePair)
        for x, y in zip(a, b):
            if isinstance(x, Pose3D):
                assert x == y


class TestInvariants:
    def test_detection_rejects_bad_bins(self):
        with pytest.raises(ValueError):
            _det(bins=np.full(N_BINS, 0.5))

    def test_pose_requires_score(self):
        with pytest.raises(ValueError):
            Pose3D((0, 0, 5), 0.0, (1, 1, 1), 0, None)

    def test_pose_yaw_range(self):
        with pytest.raises(ValueError):
            Pose3D((0, 0, 5), math.pi, (1, 1, 1), 0, 0.5)

    def test_pose_behind_camera(self):
        with pytest.raises(ValueError):
            Pose3D((0, 0, -5), 0.0, (1, 1, 1), 0, 0.5)
