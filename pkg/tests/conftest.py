import sys
import numpy as np
import pytest

from kplift.camera import CameraIntrinsics
from kplift.config import KITTI_IMAGE_SIZE, KITTI_P2
from kplift.synth import SceneConfig, frame_seed, generate_scene
from kplift.templates import builtin_templates


@pytest.fixture(scope="session")
def templates():
    return builtin_templates()


@pytest.fixture(scope="session")
def by_class(templates):
    return {t.class_id: t for t in templates}


@pytest.fixture(scope="session")
def kitti_intr():
    return CameraIntrinsics.from_p2(KITTI_P2, *KITTI_IMAGE_SIZE)


@pytest.fixture
def toy_intr():
    return CameraIntrinsics(f=100.0, p_x=50.0, p_y=50.0, image_w=100.0, image_h=100.0)


def make_instances(intr, templates, n, seed=0, per_frame=5, **cfg):
    """``n`` synthetic instances drawn from consecutive frames."""
    out = []
    frame = 0
    while len(out) < n:
        scene = SceneConfig(seed=frame_seed(seed, frame), n_instances=per_frame, **cfg)
        out += generate_scene(scene, intr, templates)
        frame += 1
    return out[:n]


@pytest.fixture(scope="session")
def oracle_instances(kitti_intr, templates):
    return make_instances(kitti_intr, templates, 60)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def scene_frames(intr, templates, n_frames=8, seed=0, lift=None, **cfg):
    """Evaluation frames from synthetic scenes.

    ``lift(instance) -> Pose3D | None`` produces each detection; by default
    the ground-truth pose itself is reported.
    """
    from kplift.evalkit import _Frame
    from kplift.kitti import pose_to_label

    frames = []
    for f in range(n_frames):
        scene = SceneConfig(seed=frame_seed(seed, f), **cfg)
        insts = generate_scene(scene, intr, templates)
        gts = [pose_to_label(s.gt, s.det.box2d, "Car", truncated=round(s.truncated, 6), occluded=s.occluded)
               for s in insts]
        dets = []
        for s in insts:
            pose = s.gt if lift is None else lift(s)
            if pose is not None:
                dets.append(pose_to_label(pose, s.det.box2d, "Car", score=s.det.score))
        frames.append(_Frame(f"{f:06d}", gts, dets))
    return frames


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
