"""Deterministic synthetic road worlds, drives and detections.

World frame is ENU (x east, y north, z up). Lateral offsets along the route are
measured to the right of the driving direction. Every random draw comes from a
named sub-stream of the configured seed, so the world, the INS drift and the
detector noise can be re-seeded independently.
"""

from __future__ import annotations

import enum
import hashlib
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import IoError
from .geometry import (
    DEPTH_EPSILON,
    Intrinsics,
    Pose,
    camera_rotation_from_heading,
    rot_z,
)
from .io import pose_from_dict, pose_to_dict, read_jsonl, write_jsonl, write_trajectory_csv
from .semlib import Category, SemanticDetection

ROUTE_STEP_M = 0.5
ROUTE_MARGIN_M = 120.0


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


class Scenario(str, enum.Enum):
    URBAN = "Urban"
    HIGHWAY = "Highway"


@dataclass
class WorldConfig:
    route_length_m: float = 2000.0
    scenario: str = "Highway"
    sign_spacing_m: float = 100.0
    seed: int = 0
    lane_count: int = 3
    lane_width_m: float = 3.75
    arrow_spacing_m: float = 250.0
    dash_length_m: float = 6.0
    dash_gap_m: float = 9.0
    solid_chunk_m: float = 15.0
    barrier_chunk_m: float = 20.0
    barrier_offset_m: float = 1.0
    barrier_height_m: float = 0.8
    sign_width_m: float = 2.5
    sign_height_m: float = 1.8
    sign_elevation_m: float = 2.5
    sign_offset_m: float = 2.5
    arrow_length_m: float = 6.0
    arrow_width_m: float = 1.2
    vertex_spacing_m: float = 1.0
    block_length_m: tuple[float, float] = (120.0, 220.0)
    turn_radius_m: float = 20.0
    curvature_scale: float = 1.0  # highway only; 0 gives a straight road


class Route:
    """Arc-length parameterised centre line sampled every ``ROUTE_STEP_M``."""

    def __init__(self, s, xy, yaw):
        self.s = np.asarray(s, dtype=float)
        self.xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        self.yaw = np.asarray(yaw, dtype=float)

    @classmethod
    def from_curvature(cls, kappa, x0=(0.0, 0.0), yaw0=0.0, step=ROUTE_STEP_M) -> Route:
        kappa = np.asarray(kappa, dtype=float)
        n = len(kappa)
        s = np.arange(n) * step
        yaw = yaw0 + np.concatenate([[0.0], np.cumsum(0.5 * (kappa[1:] + kappa[:-1]) * step)])
        mid = 0.5 * (yaw[1:] + yaw[:-1])
        dx = np.concatenate([[0.0], np.cumsum(np.cos(mid) * step)])
        dy = np.concatenate([[0.0], np.cumsum(np.sin(mid) * step)])
        return cls(s, np.column_stack([x0[0] + dx, x0[1] + dy]), yaw)

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def frame(self, s):
        """Position, heading and right-pointing unit vector at arc length(s)."""
        s = np.asarray(s, dtype=float)
        x = np.interp(s, self.s, self.xy[:, 0])
        y = np.interp(s, self.s, self.xy[:, 1])
        yaw = np.interp(s, self.s, self.yaw)
        right = np.stack([np.sin(yaw), -np.cos(yaw)], axis=-1)
        return np.stack([x, y], axis=-1), yaw, right

    def point(self, s, lateral, height=0.0) -> np.ndarray:
        xy, _, right = self.frame(s)
        lateral = np.asarray(lateral, dtype=float)
        p = xy + right * lateral[..., None]
        h = np.broadcast_to(np.asarray(height, dtype=float), p.shape[:-1])
        return np.concatenate([p, h[..., None]], axis=-1)

    def to_dict(self) -> dict:
        return {"s": self.s.tolist(), "x": self.xy[:, 0].tolist(), "y": self.xy[:, 1].tolist(), "yaw": self.yaw.tolist()}

    @classmethod
    def from_dict(cls, d) -> Route:
        return cls(d["s"], np.column_stack([d["x"], d["y"]]), d["yaw"])


@dataclass(eq=False)
class Element:
    element_id: int
    category: Category
    kind: str  # "polyline" or "box"
    vertices: np.ndarray
    s_start: float
    s_end: float
    anchor: np.ndarray

    @property
    def is_polyline(self) -> bool:
        return self.kind == "polyline"

    def to_dict(self) -> dict:
        return {
            "kind": "element",
            "element_id": self.element_id,
            "category": self.category.value,
            "geometry": self.kind,
            "vertices": self.vertices.tolist(),
            "s_range": [self.s_start, self.s_end],
            "anchor": self.anchor.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> Element:
        return cls(
            int(d["element_id"]), Category(d["category"]), d["geometry"], np.array(d["vertices"], dtype=float),
            float(d["s_range"][0]), float(d["s_range"][1]), np.array(d["anchor"], dtype=float),
        )


@dataclass(eq=False)
class WorldModel:
    elements: list[Element]
    lane_width: float
    seed: int
    route: Route
    config: WorldConfig
    intersections: list[float] = field(default_factory=list)

    def __post_init__(self):
        counts = np.array([len(e.vertices) for e in self.elements], dtype=int)
        self._counts = counts
        self._starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(int) if len(counts) else np.zeros(0, int)
        self._vertices = np.concatenate([e.vertices for e in self.elements]) if self.elements else np.zeros((0, 3))
        self._s0 = np.array([e.s_start for e in self.elements])
        self._s1 = np.array([e.s_end for e in self.elements])
        self._anchors = np.array([e.anchor for e in self.elements]).reshape(-1, 3)

    def element(self, element_id: int) -> Element:
        return self._by_id[element_id]

    @property
    def _by_id(self):
        return {e.element_id: e for e in self.elements}

    def lane_center_offset(self, lane_index: int) -> float:
        n = self.config.lane_count
        return -n * self.lane_width / 2 + (lane_index + 0.5) * self.lane_width


def _sample(a: float, b: float, spacing: float) -> np.ndarray:
    n = max(1, int(math.ceil((b - a) / spacing - 1e-9)))
    return np.linspace(a, b, n + 1)


def _highway_route(cfg: WorldConfig, rng) -> Route:
    total = cfg.route_length_m + ROUTE_MARGIN_M
    n = int(math.ceil(total / ROUTE_STEP_M)) + 1
    s = np.arange(n) * ROUTE_STEP_M
    radius = rng.uniform(1500.0, 3000.0)
    period = rng.uniform(1000.0, 2000.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    # sinusoidal curvature: continuous, linearly varying near its zeros (clothoid-like)
    kappa = cfg.curvature_scale * np.sin(2 * np.pi * s / period + phase) / radius
    return Route.from_curvature(kappa, yaw0=rng.uniform(-np.pi, np.pi))


def _urban_route(cfg: WorldConfig, rng) -> tuple[Route, list[float]]:
    total = cfg.route_length_m + ROUTE_MARGIN_M
    kappa: list[np.ndarray] = []
    length = 0.0
    intersections = []
    arc = 0.5 * np.pi * cfg.turn_radius_m
    while length < total:
        block = rng.uniform(*cfg.block_length_m)
        kappa.append(np.zeros(int(round(block / ROUTE_STEP_M))))
        length += block
        if length >= total:
            break
        intersections.append(length + arc / 2)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        kappa.append(np.full(int(round(arc / ROUTE_STEP_M)), sign / cfg.turn_radius_m))
        length += arc
    k = np.concatenate(kappa + [np.zeros(1)])
    return Route.from_curvature(k, yaw0=rng.uniform(-np.pi, np.pi)), intersections


def generate_world(cfg: WorldConfig) -> WorldModel:
    """Lane boundaries, arrows, signs and barriers along a seeded route.

    Signs sit at arc lengths ``k * sign_spacing_m`` for ``k = 1 .. floor(L / spacing)``,
    i.e. on the half-open interval (0, L]; a 1000 m route with 100 m spacing has 10.
    """
    if not cfg.route_length_m > 0:
        raise ValueError("route_length_m must be positive")
    scenario = Scenario(cfg.scenario)
    rng = substream(cfg.seed, "world")
    if scenario is Scenario.HIGHWAY:
        route, intersections = _highway_route(cfg, rng), []
    else:
        route, intersections = _urban_route(cfg, rng)

    total = min(route.length, cfg.route_length_m + ROUTE_MARGIN_M)
    n = cfg.lane_count
    w = cfg.lane_width_m
    half_road = n * w / 2
    gap_half = cfg.turn_radius_m + 15.0

    def clear(a, b):
        return all(b < c - gap_half or a > c + gap_half for c in intersections)

    specs: list[tuple] = []  # (category, kind, vertices, s0, s1, anchor)

    def line(cat, lateral, a, b, height=0.0):
        ss = _sample(a, b, cfg.vertex_spacing_m)
        v = route.point(ss, np.full_like(ss, lateral), height)
        specs.append((cat, "polyline", v, a, b, v.mean(axis=0)))

    for b_idx in range(n + 1):
        lat = -half_road + b_idx * w
        if b_idx in (0, n):
            for a in np.arange(0.0, total - cfg.solid_chunk_m + 1e-9, cfg.solid_chunk_m):
                if clear(a, a + cfg.solid_chunk_m):
                    line(Category.LANE_BOUNDARY, lat, a, a + cfg.solid_chunk_m)
        else:
            period = cfg.dash_length_m + cfg.dash_gap_m
            for a in np.arange(0.0, total - cfg.dash_length_m + 1e-9, period):
                if clear(a, a + cfg.dash_length_m):
                    line(Category.LANE_BOUNDARY, lat, a, a + cfg.dash_length_m)

    for side in (-1.0, 1.0):
        lat = side * (half_road + cfg.barrier_offset_m)
        for a in np.arange(0.0, total - cfg.barrier_chunk_m + 1e-9, cfg.barrier_chunk_m):
            if clear(a, a + cfg.barrier_chunk_m):
                line(Category.ROADSIDE_BARRIER, lat, a, a + cfg.barrier_chunk_m, cfg.barrier_height_m)

    n_signs = int(math.floor(cfg.route_length_m / cfg.sign_spacing_m + 1e-9))
    for k in range(1, n_signs + 1):
        s_c = k * cfg.sign_spacing_m
        side = 1.0 if k % 2 else -1.0
        lat = side * (half_road + cfg.sign_offset_m)
        zc = cfg.sign_elevation_m + cfg.sign_height_m / 2
        center = route.point(s_c, lat, zc)
        _, _, right = route.frame(s_c)
        r3 = np.array([right[0], right[1], 0.0])
        up = np.array([0.0, 0.0, 1.0])
        hw, hh = cfg.sign_width_m / 2, cfg.sign_height_m / 2
        corners = np.array([center - hw * r3 + hh * up, center + hw * r3 + hh * up,
                            center + hw * r3 - hh * up, center - hw * r3 - hh * up])
        specs.append((Category.SIGN, "box", corners, s_c, s_c, center))

    if scenario is Scenario.HIGHWAY:
        arrow_s = [k * cfg.arrow_spacing_m for k in range(1, int(cfg.route_length_m // cfg.arrow_spacing_m) + 1)]
    else:
        arrow_s = [c - gap_half - 15.0 for c in intersections if c - gap_half - 15.0 < cfg.route_length_m]
    for s_c in arrow_s:
        for lane in range(n):
            lat = -half_road + (lane + 0.5) * w
            a, b = s_c - cfg.arrow_length_m / 2, s_c + cfg.arrow_length_m / 2
            ss = _sample(a, b, cfg.vertex_spacing_m)
            hw = cfg.arrow_width_m / 2
            left_edge = route.point(ss, np.full_like(ss, lat - hw))
            right_edge = route.point(ss, np.full_like(ss, lat + hw))
            v = np.concatenate([left_edge, right_edge[::-1]])
            specs.append((Category.ARROW, "box", v, a, b, route.point(s_c, lat, 0.0)))

    specs.sort(key=lambda sp: (sp[3], sp[4], sp[0].value, float(sp[5][0]), float(sp[5][1])))
    elements = [Element(i, *sp) for i, sp in enumerate(specs)]
    return WorldModel(elements, w, cfg.seed, route, cfg, intersections)


@dataclass
class SensorNoiseConfig:
    ins_bias_rw_sigma: float = 0.05
    ins_heading_rw_sigma: float = 0.002
    pixel_sigma: float = 1.0
    detection_dropout: float = 0.05
    gnss_outage_windows: list = field(default_factory=list)
    outage_velocity_rw_sigma: float = 0.5

    def __post_init__(self):
        for name in ("ins_bias_rw_sigma", "ins_heading_rw_sigma", "pixel_sigma", "outage_velocity_rw_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.detection_dropout <= 1.0:
            raise ValueError("detection_dropout must be a probability")
        self.gnss_outage_windows = [tuple(map(float, w)) for w in self.gnss_outage_windows]
        for a, b in self.gnss_outage_windows:
            if b < a:
                raise ValueError(f"outage window ({a}, {b}) ends before it starts")

    def in_outage(self, t: float) -> bool:
        return any(a <= t < b for a, b in self.gnss_outage_windows)


@dataclass
class CameraConfig:
    fx: float = 2000.0
    fy: float = 2000.0
    cx: float = 1920.0
    cy: float = 1080.0
    image_width: int = 3840
    image_height: int = 2160
    readout_time: float = 0.03
    height_m: float = 1.5

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.image_width, self.image_height, self.readout_time)


@dataclass
class DriveConfig:
    speed_mps: float = 25.0
    frame_rate_hz: float = 30.0
    noise: SensorNoiseConfig = field(default_factory=SensorNoiseConfig)
    seed: int = 0
    duration_s: float | None = None
    start_offset_m: float = 0.0
    lane_index: int = 1
    camera: CameraConfig = field(default_factory=CameraConfig)
    detection_range_m: float = 60.0
    min_box_px: float = 4.0
    strip_track_ids: bool = False
    stream: str = "drive"

    def __post_init__(self):
        if not (self.speed_mps > 0 and self.frame_rate_hz > 0):
            raise ValueError("speed and frame rate must be positive")


@dataclass(eq=False)
class SimFrame:
    frame_id: int
    timestamp: float
    gt_pose: Pose
    ins_pose: Pose
    detections: list[SemanticDetection]

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "timestamp": self.timestamp,
            "gt_pose": pose_to_dict(self.gt_pose),
            "ins_pose": pose_to_dict(self.ins_pose),
            "detections": [d.to_dict() for d in self.detections],
        }

    @classmethod
    def from_dict(cls, d) -> SimFrame:
        return cls(
            int(d["frame_id"]), float(d["timestamp"]), pose_from_dict(d["gt_pose"]), pose_from_dict(d["ins_pose"]),
            [SemanticDetection.from_dict(x) for x in d["detections"]],
        )


def vehicle_pose(world: WorldModel, s: float, lateral: float, cam_height: float) -> Pose:
    (xy, yaw, right) = world.route.frame(s)
    c = np.array([xy[0] + right[0] * lateral, xy[1] + right[1] * lateral, cam_height])
    return Pose.from_center(camera_rotation_from_heading(float(yaw)), c)


def project_rolling_shutter(intr: Intrinsics, pose_top: Pose, pose_bottom: Pose, pts, iterations: int = 50):
    """Pixels of world points under a linear row-time pose model.

    Each point is imaged at the row ``v`` that satisfies
    ``v = project(interpolate(top, bottom, v / (H - 1)), p).v``; solved per point
    by secant iteration starting from the global-shutter projection.
    Returns (uv[n, 2], depth[n]) with NaN pixels for points behind the camera.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    n = len(pts)
    R = np.broadcast_to(pose_top.rotation, (n, 3, 3))
    rel = Rotation.from_matrix(pose_top.rotation.T @ pose_bottom.rotation).as_rotvec()
    return _project_rows(intr, R, np.broadcast_to(pose_top.translation, (n, 3)),
                         np.broadcast_to(pose_bottom.translation, (n, 3)), np.broadcast_to(rel, (n, 3)), pts, iterations)


def _project_rows(intr: Intrinsics, R, t0, t1, rel, pts, iterations: int = 50):
    """``project_rolling_shutter`` with a separate top/bottom pose per point.

    ``R``, ``t0`` are the top pose, ``t1`` the bottom translation and ``rel``
    the top-to-bottom rotation vector (body frame), all per point.
    """
    pc = np.einsum("nij,nj->ni", R, pts) + t0
    uv = _pinhole(intr, pc)
    depth = pc[:, 2].copy()
    if intr.readout_time == 0 or len(pts) == 0:
        return uv, depth
    # geodesic rotation R0 Exp(a * rel) applied by Rodrigues on the points
    theta_all = np.linalg.norm(rel, axis=1)
    axis = rel / np.where(theta_all > 0, theta_all, 1.0)[:, None]
    active = np.flatnonzero(np.isfinite(uv[:, 1]))
    row = uv[active, 1].copy()  # current row guess per active point
    prev_row = prev_g = None
    # Rodrigues is linear in the point, so the rotated terms are fixed per call
    p, k, Ra = pts[active], axis[active], R[active]
    Rp_all = pc[active] - t0[active]
    Rkxp_all = np.einsum("nij,nj->ni", Ra, np.cross(k, p))
    kRk_all = np.sum(p * k, axis=1)[:, None] * np.einsum("nij,nj->ni", Ra, k)
    theta, t0a, t1a = theta_all[active], t0[active], t1[active]
    sel = np.arange(active.size)
    for _ in range(iterations):
        if active.size == 0:
            break
        a = np.clip(row / (intr.image_height - 1), 0.0, 1.0)
        ang = a * theta[sel]
        c, s = np.cos(ang)[:, None], np.sin(ang)[:, None]
        q = (Rp_all[sel] * c + Rkxp_all[sel] * s + kRk_all[sel] * (1.0 - c)
             + (1.0 - a)[:, None] * t0a[sel] + a[:, None] * t1a[sel])
        new = _pinhole(intr, q)
        uv[active] = new
        depth[active] = q[:, 2]
        g = new[:, 1] - row
        ok = np.isfinite(g)
        # secant step on g(row) = projected row - row; plain fixed-point step on the first pass
        nxt = new[:, 1].copy()
        if prev_row is not None:
            den = g - prev_g
            use = ok & (den != 0) & np.isfinite(den)
            nxt[use] = row[use] - g[use] * (row[use] - prev_row[use]) / den[use]
        keep = ok & (np.abs(g) > 1e-10)
        active, sel, prev_row, prev_g, row = active[keep], sel[keep], row[keep], g[keep], nxt[keep]
    return uv, depth


def _pinhole(intr: Intrinsics, pc) -> np.ndarray:
    z = np.where(pc[:, 2] > DEPTH_EPSILON, pc[:, 2], np.nan)
    return np.column_stack([intr.fx * pc[:, 0] / z + intr.cx, intr.fy * pc[:, 1] / z + intr.cy])


def detect(world: WorldModel, intr: Intrinsics, pose_top: Pose, pose_bottom: Pose, s_vehicle: float,
           detection_range_m: float, min_box_px: float = 0.0):
    """Noise-free boxes of all detectable elements: list of (element_id, category, x, y, w, h)."""
    return detect_many(world, intr, [pose_top], [pose_bottom], [s_vehicle], detection_range_m, min_box_px)[0]


def detect_many(world: WorldModel, intr: Intrinsics, tops, bottoms, s_values, detection_range_m: float,
                min_box_px: float = 0.0, chunk: int = 256) -> list[list]:
    """``detect`` for many frames, with the row solve batched over ``chunk`` frames at a time."""
    out = []
    for c0 in range(0, len(tops), chunk):
        out.extend(_detect_chunk(world, intr, tops[c0:c0 + chunk], bottoms[c0:c0 + chunk], s_values[c0:c0 + chunk],
                                 detection_range_m, min_box_px))
    return out


def _detect_chunk(world, intr, tops, bottoms, s_values, detection_range_m, min_box_px):
    groups = []  # (frame index within chunk, element index), in output order
    vids, Rs, t0s, t1s, rels = [], [], [], [], []
    for f, (top, bottom, s_vehicle) in enumerate(zip(tops, bottoms, s_values)):
        sel = (world._s1 >= s_vehicle - 5.0) & (world._s0 <= s_vehicle + detection_range_m + 10.0)
        idx = np.flatnonzero(sel)
        if idx.size == 0:
            continue
        anchors_c = world._anchors[idx] @ top.rotation.T + top.translation
        idx = idx[(anchors_c[:, 2] > DEPTH_EPSILON) & (anchors_c[:, 2] <= detection_range_m)]
        if idx.size == 0:
            continue
        vid = np.concatenate([np.arange(world._starts[i], world._starts[i] + world._counts[i]) for i in idx])
        rel = Rotation.from_matrix(top.rotation.T @ bottom.rotation).as_rotvec() if intr.readout_time > 0 else np.zeros(3)
        groups.extend((f, int(i)) for i in idx)
        vids.append(vid)
        Rs.append(np.broadcast_to(top.rotation, (len(vid), 3, 3)))
        t0s.append(np.broadcast_to(top.translation, (len(vid), 3)))
        t1s.append(np.broadcast_to(bottom.translation, (len(vid), 3)))
        rels.append(np.broadcast_to(rel, (len(vid), 3)))
    out = [[] for _ in tops]
    if not groups:
        return out
    vid = np.concatenate(vids)
    uv, depth = _project_rows(intr, np.concatenate(Rs), np.concatenate(t0s), np.concatenate(t1s), np.concatenate(rels),
                              world._vertices[vid])
    front = np.isfinite(uv[:, 0]) & (depth > DEPTH_EPSILON)
    inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < intr.image_width) & (uv[:, 1] >= 0) & (uv[:, 1] < intr.image_height)
    counts = world._counts[[i for _, i in groups]]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    u = np.where(front, uv[:, 0], np.nan)
    v = np.where(front, uv[:, 1], np.nan)
    big = np.inf
    umin = np.minimum.reduceat(np.where(front, u, big), starts)
    umax = np.maximum.reduceat(np.where(front, u, -big), starts)
    vmin = np.minimum.reduceat(np.where(front, v, big), starts)
    vmax = np.maximum.reduceat(np.where(front, v, -big), starts)
    n_inside = np.add.reduceat(inside.astype(int), starts)
    x0 = np.clip(umin, 0.0, intr.image_width)
    x1 = np.clip(umax, 0.0, intr.image_width)
    y0 = np.clip(vmin, 0.0, intr.image_height)
    y1 = np.clip(vmax, 0.0, intr.image_height)
    keep = (n_inside >= 2) & ~(x1 - x0 < min_box_px) & ~(y1 - y0 < min_box_px)
    for j in np.flatnonzero(keep):
        f, i = groups[j]
        e = world.elements[i]
        out[f].append((e.element_id, e.category, float(x0[j]), float(y0[j]), float(x1[j] - x0[j]), float(y1[j] - y0[j])))
    return out


def simulate_drive(world: WorldModel, cfg: DriveConfig) -> list[SimFrame]:
    """Ground-truth and INS poses plus noisy detections for every frame.

    INS model: the camera-center error is a random walk with
    ``ins_bias_rw_sigma`` (m/sqrt(s)) per axis and the heading error a random walk
    with ``ins_heading_rw_sigma``. Inside GNSS outage windows the dead-reckoned
    position additionally integrates a velocity error random walk and the
    heading error; that extra offset is kept when the outage ends.
    """
    noise = cfg.noise
    intr = cfg.camera.intrinsics()
    ins_rng = substream(cfg.seed, cfg.stream)
    det_rng = substream(cfg.seed, cfg.stream + "-detector")
    lateral = world.lane_center_offset(cfg.lane_index)
    dt = 1.0 / cfg.frame_rate_hz
    duration = cfg.duration_s
    if duration is None:
        duration = (world.config.route_length_m - cfg.start_offset_m) / cfg.speed_mps
    n_frames = int(math.floor(duration * cfg.frame_rate_hz + 1e-9))

    e_pos = np.zeros(3)
    e_yaw = 0.0
    v_err = np.zeros(2)
    times, arc, gts, inss, bottoms = [], [], [], [], []
    for k in range(n_frames):
        t = k * dt
        s = cfg.start_offset_m + cfg.speed_mps * t
        gt = vehicle_pose(world, s, lateral, cfg.camera.height_m)
        if k > 0:
            step = ins_rng.normal(size=6)
            e_pos = e_pos + step[:3] * noise.ins_bias_rw_sigma * math.sqrt(dt)
            e_yaw = e_yaw + step[3] * noise.ins_heading_rw_sigma * math.sqrt(dt)
            if noise.in_outage(t):
                v_err = v_err + step[4:6] * noise.outage_velocity_rw_sigma * math.sqrt(dt)
                fwd = gt.rotation[2, :2]
                c, sn = math.cos(e_yaw), math.sin(e_yaw)
                heading_err = cfg.speed_mps * np.array([c * fwd[0] - sn * fwd[1] - fwd[0], sn * fwd[0] + c * fwd[1] - fwd[1]])
                e_pos[:2] = e_pos[:2] + (v_err + heading_err) * dt
            else:
                v_err = np.zeros(2)
        if e_yaw == 0.0 and not e_pos.any():
            ins = gt
        else:
            ins = Pose.from_center(rot_z(e_yaw) @ gt.rotation.T, gt.center + e_pos)
        if intr.readout_time > 0:
            bottom = vehicle_pose(world, s + cfg.speed_mps * intr.readout_time, lateral, cfg.camera.height_m)
        else:
            bottom = gt
        times.append(t)
        arc.append(s)
        gts.append(gt)
        inss.append(ins)
        bottoms.append(bottom)

    all_boxes = detect_many(world, intr, gts, bottoms, arc, cfg.detection_range_m, cfg.min_box_px)
    frames = []
    for k, boxes in enumerate(all_boxes):
        dets = []
        for eid, cat, x, y, w, h in boxes:
            jitter = det_rng.normal(size=4) * noise.pixel_sigma
            drop = det_rng.random() < noise.detection_dropout
            if drop:
                continue
            if noise.pixel_sigma > 0:
                x, y = max(x + jitter[0], 0.0), max(y + jitter[1], 0.0)
                w, h = max(w + jitter[2], 1.0), max(h + jitter[3], 1.0)
            dets.append(SemanticDetection(cat, x, y, w, h, None if cfg.strip_track_ids else eid))
        frames.append(SimFrame(k, times[k], gts[k], inss[k], dets))
    return frames


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    return d


def world_records(world: WorldModel) -> list[dict]:
    head = {
        "kind": "world",
        "seed": world.seed,
        "lane_width": world.lane_width,
        "config": config_to_dict(world.config),
        "route": world.route.to_dict(),
        "intersections": list(world.intersections),
    }
    return [head] + [e.to_dict() for e in world.elements]


def world_from_records(records) -> WorldModel:
    head = [r for r in records if r.get("kind") == "world"]
    if len(head) != 1:
        raise IoError("world file must contain exactly one world record")
    head = head[0]
    cfgd = dict(head["config"])
    cfgd["block_length_m"] = tuple(cfgd.get("block_length_m", (120.0, 220.0)))
    cfg = WorldConfig(**cfgd)
    elements = [Element.from_dict(r) for r in records if r.get("kind") == "element"]
    return WorldModel(elements, float(head["lane_width"]), int(head["seed"]), Route.from_dict(head["route"]), cfg,
                      list(head.get("intersections", [])))


def export_dataset(frames, world: WorldModel, path) -> dict:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc
    write_jsonl(path / "frames.jsonl", (f.to_dict() for f in frames))
    write_jsonl(path / "world.jsonl", world_records(world))
    write_trajectory_csv(path / "gt_trajectory.csv", ((f.frame_id, f.timestamp, f.gt_pose) for f in frames))
    write_trajectory_csv(path / "ins_trajectory.csv", ((f.frame_id, f.timestamp, f.ins_pose) for f in frames))
    return {name: _sha256(path / name) for name in ("frames.jsonl", "world.jsonl", "gt_trajectory.csv", "ins_trajectory.csv")}


def import_dataset(path) -> tuple[list[SimFrame], WorldModel]:
    path = Path(path)
    frames = [SimFrame.from_dict(r) for r in read_jsonl(path / "frames.jsonl")]
    world = world_from_records(read_jsonl(path / "world.jsonl"))
    return frames, world


def _sha256(p: Path) -> str:
    return hashlib.sha256(p.read_bytes()).hexdigest()
