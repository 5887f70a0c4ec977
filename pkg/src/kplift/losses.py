"""Training losses of the multi-head network.

All losses are plain numpy functions. ``reprojection_loss`` additionally
returns its analytic gradient with respect to the 7 pose parameters
``(c_x, c_y, c_z, yaw, w, h, l)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from kplift.camera import CameraIntrinsics, Point3
from kplift.errors import BehindCamera, InvalidProbability
from kplift.geometry3d import box_corners  # noqa: F401  (re-exported)
from kplift.lifting import N_BINS
from kplift.templates import N_KEYPOINTS, KeypointTemplate

PROB_FLOOR = 1e-12
PARAM_NAMES = ("c_x", "c_y", "c_z", "yaw", "w", "h", "l")

# unit-cube corners in model axes (length, height, width), ordered as box_corners
_UNIT_CORNERS = np.array(
    [[0.5 if i & 1 else -0.5, 0.5 if i & 2 else -0.5, 0.5 if i & 4 else -0.5] for i in range(8)]
)


def smooth_l1(x):
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * ax * ax, ax - 0.5)
    return float(out) if np.ndim(out) == 0 else out


def smooth_l1_grad(x):
    return np.clip(x, -1.0, 1.0)


@dataclass(frozen=True, eq=False)
class KeypointTarget:
    coords: np.ndarray  # (14, 2) normalised RoI coordinates
    visible: np.ndarray  # (14,) bool

    def __post_init__(self) -> None:
        c = np.array(self.coords, dtype=float).reshape(N_KEYPOINTS, 2)
        v = np.array(self.visible, dtype=bool).reshape(N_KEYPOINTS)
        if np.any((c[v] < 0) | (c[v] > 1)):
            raise ValueError("visible keypoint coordinates must lie in [0, 1]^2")
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "visible", v)


@dataclass(frozen=True, eq=False)
class KeypointPrediction:
    coords: np.ndarray  # (14, 2)
    vis_probs: np.ndarray  # (14, 2): [p(invisible), p(visible)]


def normalize_keypoints(keypoints: np.ndarray, box2d: Sequence[float]) -> np.ndarray:
    """Pixel keypoints to the [0, 1]^2 frame of a 2D box."""
    x0, y0, x1, y1 = box2d
    kp = np.asarray(keypoints, dtype=float)
    return np.column_stack([(kp[:, 0] - x0) / (x1 - x0), (kp[:, 1] - y0) / (y1 - y0)])


def keypoint_loss(gt: KeypointTarget, pred: KeypointPrediction) -> tuple[float, float, float]:
    """(L_coord, L_vis, L_kp) for one instance."""
    probs = np.asarray(pred.vis_probs, dtype=float).reshape(N_KEYPOINTS, 2)
    if np.any((probs < 0) | (probs > 1)) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise InvalidProbability("visibility probabilities must be pairs summing to 1")
    resid = np.asarray(pred.coords, dtype=float).reshape(N_KEYPOINTS, 2) - gt.coords
    l_coord = float(np.sum(smooth_l1(resid[gt.visible])))
    p_true = probs[np.arange(N_KEYPOINTS), gt.visible.astype(int)]
    l_vis = float(-np.sum(np.log(np.maximum(p_true, PROB_FLOOR))))
    return l_coord, l_vis, l_coord + l_vis


def dim_loss(gt_dims: Sequence[float], pred_offsets: Sequence[float], tpl: KeypointTemplate) -> float:
    t_gt = np.log(np.asarray(gt_dims, dtype=float) / np.asarray(tpl.mean_dims))
    return float(np.sum(smooth_l1(t_gt - np.asarray(pred_offsets, dtype=float))))


def orientation_loss(gt_bin: int, pred_bins) -> float:
    p = np.asarray(pred_bins, dtype=float).reshape(N_BINS)
    return -math.log(max(float(p[int(gt_bin)]), PROB_FLOOR))


def total_loss(*terms: float) -> float:
    """Equal-weight combination of loss heads."""
    return float(sum(terms))


@dataclass(frozen=True)
class PoseParams:
    c: Point3
    yaw: float
    dims: tuple[float, float, float]  # (w, h, l)

    def __post_init__(self) -> None:
        object.__setattr__(self, "c", Point3(*(float(v) for v in self.c)))
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        if not all(d > 0 for d in self.dims):
            raise ValueError("dims must be positive")
        if not self.c.z > 0:
            raise ValueError("center must lie in front of the camera")

    def as_vector(self) -> np.ndarray:
        return np.array([*self.c, self.yaw, *self.dims])

    @classmethod
    def from_vector(cls, v) -> "PoseParams":
        v = [float(x) for x in v]
        return cls(Point3(*v[:3]), v[3], (v[4], v[5], v[6]))


@dataclass(frozen=True, eq=False)
class ReprojectionTarget:
    keypoints: np.ndarray  # (14, 2) pixels
    visible: np.ndarray  # (14,) bool
    box2d: tuple[float, float, float, float]


@dataclass(frozen=True)
class LossValue:
    value: float
    grad: np.ndarray | None = None


def _project_with_jacobian(intr: CameraIntrinsics, unit_pts: np.ndarray, params: PoseParams):
    """Project ``R(yaw) (unit * (l, h, w)) + c``; returns uv (N, 2) and d(uv)/dparams (N, 2, 7)."""
    w, h, l = params.dims
    c, s = math.cos(params.yaw), math.sin(params.yaw)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    drot = np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])
    local = unit_pts * np.array([l, h, w])
    pts = local @ rot.T + np.asarray(params.c)
    q = pts + np.asarray(intr.offset)
    if np.any(pts[:, 2] <= 0) or np.any(q[:, 2] <= 0):
        raise BehindCamera("a projected point lies at or behind the camera plane")
    f = intr.f
    uv = np.column_stack([f * q[:, 0] / q[:, 2] + intr.p_x, f * q[:, 1] / q[:, 2] + intr.p_y])

    n = len(unit_pts)
    # d(point)/d(params): (N, 3, 7)
    dp = np.zeros((n, 3, 7))
    dp[:, :, 0:3] = np.eye(3)
    dp[:, :, 3] = local @ drot.T
    dp[:, :, 4] = np.outer(unit_pts[:, 2], rot[:, 2])
    dp[:, :, 5] = np.outer(unit_pts[:, 1], rot[:, 1])
    dp[:, :, 6] = np.outer(unit_pts[:, 0], rot[:, 0])
    # d(uv)/d(point): (N, 2, 3)
    inv_z = 1.0 / q[:, 2]
    duv = np.zeros((n, 2, 3))
    duv[:, 0, 0] = f * inv_z
    duv[:, 0, 2] = -f * q[:, 0] * inv_z ** 2
    duv[:, 1, 1] = f * inv_z
    duv[:, 1, 2] = -f * q[:, 1] * inv_z ** 2
    return uv, np.einsum("nij,njk->nik", duv, dp)


def _residuals(intr, tpl, params, gt):
    """All smooth-L1 arguments of the loss with their (M, 7) Jacobian, plus hull data."""
    kp_uv, kp_jac = _project_with_jacobian(intr, tpl.keypoints, params)
    vis = np.asarray(gt.visible, dtype=bool)
    kp_res = (kp_uv - np.asarray(gt.keypoints, dtype=float))[vis].reshape(-1)
    kp_res_jac = kp_jac[vis].reshape(-1, 7)

    cu, cj = _project_with_jacobian(intr, _UNIT_CORNERS, params)
    # argmin/argmax return the first index on ties: first corner in order wins
    picks = (np.argmin(cu[:, 0]), np.argmin(cu[:, 1]), np.argmax(cu[:, 0]), np.argmax(cu[:, 1]))
    axes = (0, 1, 0, 1)
    hull = np.array([cu[i, a] for i, a in zip(picks, axes)])
    hull_jac = np.array([cj[i, a] for i, a in zip(picks, axes)])
    box_res = hull - np.asarray(gt.box2d, dtype=float)

    res = np.concatenate([kp_res, box_res])
    jac = np.vstack([kp_res_jac, hull_jac])
    return res, jac, cu, cj


def reprojection_loss(intr: CameraIntrinsics, tpl: KeypointTemplate, params: PoseParams,
                      gt: ReprojectionTarget, with_grad: bool = True) -> LossValue:
    """Keypoint plus box-corner reprojection loss in pixels."""
    res, jac, _, _ = _residuals(intr, tpl, params, gt)
    value = float(np.sum(smooth_l1(res)))
    grad = smooth_l1_grad(res) @ jac if with_grad else None
    return LossValue(value, grad)


def is_non_kink(intr: CameraIntrinsics, tpl: KeypointTemplate, params: PoseParams,
                gt: ReprojectionTarget, margin: float = 1e-3, step: float = 0.0) -> bool:
    """True when no smooth-L1 argument is near +-1 and no hull extreme is near a tie.

    With ``step > 0`` the margin is widened by how far a central-difference
    stencil of that step can move each quantity, so the stencil cannot
    straddle a kink.
    """
    res, jac, cu, cj = _residuals(intr, tpl, params, gt)
    reach = step * np.sum(np.abs(jac), axis=1)
    if np.any(np.abs(np.abs(res) - 1.0) <= margin + reach):
        return False
    for axis in (0, 1):
        vals = cu[:, axis]
        corner_reach = step * np.sum(np.abs(cj[:, axis, :]), axis=1)
        for pick in (np.argmin(vals), np.argmax(vals)):
            # corners differing only in the height bit share (x, z), so their u
            # coordinates are the same function of the parameters: not a kink
            twins = {pick, pick ^ 2} if axis == 0 else {pick}
            others = np.array([i for i in range(8) if i not in twins])
            gap = np.abs(vals[others] - vals[pick])
            if np.any(gap <= margin + corner_reach[others] + corner_reach[pick]):
                return False
    return True


def numeric_gradient(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Per-coordinate central differences of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fn(x + e) - fn(x - e)) / (2.0 * step)
    return g


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Per-coordinate relative error; the denominator is floored at 1."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return np.abs(analytic - numeric) / denom
