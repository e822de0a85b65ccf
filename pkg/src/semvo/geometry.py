"""Rigid poses, the pinhole camera and row-time pose interpolation.

Conventions
-----------
A :class:`Pose` maps world points into the camera frame, ``p_c = R p_w + t``.
The camera frame is x right, y down, z forward. The camera *center* in world
coordinates is ``-R^T t``; anything that talks about "where the camera is"
(distance gates, anchors, alignment) uses the center, not ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import NonPositiveDepth, RowOutOfRange

DEPTH_EPSILON = 1e-6


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_center(cls, R_wc, center) -> Pose:
        """Build a world->camera pose from a camera->world rotation and camera center."""
        R_wc = np.asarray(R_wc, dtype=float)
        R = R_wc.T
        return cls(R, -R @ np.asarray(center, dtype=float))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def inverse(self) -> Pose:
        return invert(self)

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (
            bool(np.all(np.isfinite(R)) and np.all(np.isfinite(self.translation)))
            and np.max(np.abs(R.T @ R - np.eye(3))) <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol
        )

    def __repr__(self):
        return f"Pose(center={np.round(self.center, 4).tolist()})"


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    image_width: int
    image_height: int
    readout_time: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.image_width and 0 <= self.cy < self.image_height):
            raise ValueError("principal point must lie inside the image")
        if self.readout_time < 0:
            raise ValueError("readout_time must be >= 0")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def hat(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def hat_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(phi) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(phi, dtype=float)).as_matrix()


def so3_log(R) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def se3_exp(delta) -> Pose:
    """Exponential map of a twist ordered (rotation, translation)."""
    delta = np.asarray(delta, dtype=float)
    phi, rho = delta[:3], delta[3:]
    theta = np.linalg.norm(phi)
    W = hat(phi)
    if theta < 1e-8:
        V = np.eye(3) + 0.5 * W + W @ W / 6.0
    else:
        V = (
            np.eye(3)
            + (1.0 - np.cos(theta)) / theta**2 * W
            + (theta - np.sin(theta)) / theta**3 * W @ W
        )
    return Pose(so3_exp(phi), V @ rho)


def se3_exp_batch(deltas) -> tuple[np.ndarray, np.ndarray]:
    """``se3_exp`` of many twists at once: (rotations[n, 3, 3], translations[n, 3])."""
    d = np.asarray(deltas, dtype=float).reshape(-1, 6)
    phi, rho = d[:, :3], d[:, 3:]
    theta = np.linalg.norm(phi, axis=1)
    W = hat_batch(phi)
    WW = W @ W
    small = theta < 1e-8
    th = np.where(small, 1.0, theta)
    a = np.where(small, 0.5, (1.0 - np.cos(th)) / th**2)
    b = np.where(small, 1.0 / 6.0, (th - np.sin(th)) / th**3)
    V = np.eye(3) + a[:, None, None] * W + b[:, None, None] * WW
    return Rotation.from_rotvec(phi).as_matrix().reshape(-1, 3, 3), (V @ rho[:, :, None])[:, :, 0]


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def camera_rotation_from_heading(yaw: float) -> np.ndarray:
    """Camera->world rotation of a level forward-looking camera with ENU heading ``yaw``."""
    c, s = np.cos(yaw), np.sin(yaw)
    right = [s, -c, 0.0]
    down = [0.0, 0.0, -1.0]
    forward = [c, s, 0.0]
    return np.column_stack([right, down, forward])


def heading_of(pose: Pose) -> float:
    fwd = pose.rotation[2]  # camera z axis expressed in world
    return float(np.arctan2(fwd[1], fwd[0]))


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(pose: Pose) -> Pose:
    Rt = pose.rotation.T
    return Pose(Rt, -Rt @ pose.translation)


def transform_point(pose: Pose, p_w) -> np.ndarray:
    return pose.rotation @ np.asarray(p_w, dtype=float) + pose.translation


def transform_points(pose: Pose, pts) -> np.ndarray:
    return np.asarray(pts, dtype=float) @ pose.rotation.T + pose.translation


def project(intr: Intrinsics, p_c) -> np.ndarray:
    x, y, z = np.asarray(p_c, dtype=float)
    if not z > DEPTH_EPSILON:
        raise NonPositiveDepth(f"depth {z!r} <= {DEPTH_EPSILON}")
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])


def project_points(intr: Intrinsics, p_c) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection. Returns (pixels, valid) with NaN pixels where depth fails."""
    p_c = np.asarray(p_c, dtype=float)
    z = p_c[..., 2]
    valid = z > DEPTH_EPSILON
    zs = np.where(valid, z, np.nan)
    uv = np.stack([intr.fx * p_c[..., 0] / zs + intr.cx, intr.fy * p_c[..., 1] / zs + intr.cy], axis=-1)
    return uv, valid


def backproject(intr: Intrinsics, pixel, depth: float) -> np.ndarray:
    u, v = pixel
    return np.array([(u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, depth])


def interpolate_pose(t0_pose: Pose, t1_pose: Pose, alpha: float) -> Pose:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 0.0:
        return t0_pose
    if alpha == 1.0:
        return t1_pose
    rel = Rotation.from_matrix(t0_pose.rotation.T @ t1_pose.rotation).as_rotvec()
    R = t0_pose.rotation @ so3_exp(alpha * rel)
    t = (1.0 - alpha) * t0_pose.translation + alpha * t1_pose.translation
    return Pose(R, t)


def interpolate_pose_batch(t0_pose: Pose, t1_pose: Pose, alphas) -> tuple[np.ndarray, np.ndarray]:
    """Same model as :func:`interpolate_pose` for many alphas; returns (R[n,3,3], t[n,3])."""
    alphas = np.asarray(alphas, dtype=float)
    rel = Rotation.from_matrix(t0_pose.rotation.T @ t1_pose.rotation).as_rotvec()
    Rs = t0_pose.rotation @ Rotation.from_rotvec(alphas[:, None] * rel).as_matrix()
    ts = (1.0 - alphas)[:, None] * t0_pose.translation + alphas[:, None] * t1_pose.translation
    return Rs, ts


def row_capture_fraction(intr: Intrinsics, v: float) -> float:
    if not 0 <= v < intr.image_height:
        raise RowOutOfRange(f"row {v} outside [0, {intr.image_height})")
    return min(float(v) / (intr.image_height - 1), 1.0)
