"""Synthetic factor graphs shared by optimizer tests and the acceptance suite."""

import numpy as np

from semvo.geometry import Intrinsics, Pose, camera_rotation_from_heading, so3_exp
from semvo.optimizer import FactorGraph, Keyframe, MapPoint, Observation, RobustKernel, SemanticAnchor

INTR = Intrinsics(1000.0, 1000.0, 960.0, 540.0, 1920, 1080)


def true_scene(rng, n_keyframes=10, n_points=200):
    """Camera driving along +x (ENU) looking forward, points scattered ahead."""
    poses = []
    for k in range(n_keyframes):
        yaw = 0.02 * np.sin(k)
        poses.append(Pose.from_center(camera_rotation_from_heading(yaw), [2.0 * k, 0.3 * np.sin(k), 1.5]))
    pts = np.column_stack(
        [rng.uniform(2.0 * n_keyframes + 5, 2.0 * n_keyframes + 40, n_points),
         rng.uniform(-12, 12, n_points),
         rng.uniform(-1, 6, n_points)]
    )
    return poses, pts


def build_graph(poses, pts, rng=None, pixel_sigma=0.0, anchor_every=3, kernel=None, intr=INTR):
    g = FactorGraph(intr)
    if kernel is not None:
        g.pixel_kernel = kernel
        g.anchor_kernel = kernel
    for i, p in enumerate(pts):
        g.add_map_point(MapPoint(i, p))
    for k, pose in enumerate(poses):
        obs = []
        pc = pts @ pose.rotation.T + pose.translation
        for i, q in enumerate(pc):
            u = intr.fx * q[0] / q[2] + intr.cx
            v = intr.fy * q[1] / q[2] + intr.cy
            if q[2] > 0.5 and 0 <= u < intr.image_width and 0 <= v < intr.image_height:
                if pixel_sigma:
                    u, v = np.array([u, v]) + rng.normal(0, pixel_sigma, 2)
                obs.append(Observation(i, [u, v]))
        anchor = SemanticAnchor(pose.center) if anchor_every and k % anchor_every == 0 else None
        g.add_keyframe(Keyframe(k, pose, obs, anchor, fixed=(k == 0)))
    return g


def perturb(g, rng, trans=0.1, rot_deg=1.0, point=0.1):
    for kf in g.keyframes.values():
        if kf.fixed:
            continue
        dR = so3_exp(rng.normal(size=3) * np.deg2rad(rot_deg) / np.sqrt(3))
        c = kf.pose.center + rng.normal(size=3) * trans / np.sqrt(3)
        kf.pose = Pose.from_center(kf.pose.inverse().rotation @ dR, c)
    for mp in g.map_points.values():
        mp.position = mp.position + rng.normal(size=3) * point / np.sqrt(3)
    return g


__all__ = ["INTR", "true_scene", "build_graph", "perturb", "RobustKernel"]
