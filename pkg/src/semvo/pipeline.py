"""End-to-end pipeline: simulate, build the library, localize, evaluate.

Localization runs frame by frame. The pose estimate is propagated with the
INS relative motion, checked against the benchmark library, then either reset
to the matched library pose (large drift) or tied to it through a semantic
anchor. A sliding window of keyframes is bundle-adjusted every
``solve_every`` keyframes, with the oldest window keyframe held fixed.
"""

from __future__ import annotations

import dataclasses
import math
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalkit
from .config import RunConfig
from .errors import DegenerateConfiguration, EmptyInput, InsufficientPoints, IoError
from .evalkit import ReportedElement
from .geoalign import GeoTransform, fit_rigid, nearest_frame_indices
from .geometry import DEPTH_EPSILON, Intrinsics, Pose, compose, invert, rot_z
from .io import read_json, read_jsonl, read_trajectory_csv, write_json, write_jsonl, write_trajectory_csv
from .optimizer import FactorGraph, KernelKind, Keyframe, MapPoint, NoiseModel, Observation, RobustKernel, SemanticAnchor, solve
from .semlib import (
    BenchmarkLibrary,
    Category,
    DriftKind,
    ElementFrame,
    build_library,
    drift_decision,
    load_library,
    match_frame,
    save_library,
)
from .simworld import SimFrame, export_dataset, generate_world, import_dataset, simulate_drive

log = logging.getLogger(__name__)

KP_CENTER, KP_NEAR, KP_FAR = 0, 1, 2


def road_offset(pose: Pose, bias) -> np.ndarray:
    """World vector for a (lateral, longitudinal, altitudinal) offset at ``pose``; right is +lateral."""
    fwd = pose.rotation[2, :2]
    fwd = fwd / np.linalg.norm(fwd)
    lat, lon, alt = (float(v) for v in bias)
    return np.array([lat * fwd[1] + lon * fwd[0], -lat * fwd[0] + lon * fwd[1], alt])


def library_frames(frames, map_bias=(0.0, 0.0, 0.0)) -> list[ElementFrame]:
    """Element frames from a mapping pass: INS pose as the frame pose, truth plus ``map_bias`` as geo label."""
    out = []
    for f in frames:
        if not f.detections:
            continue
        geo = f.gt_pose.center + road_offset(f.gt_pose, map_bias)
        out.append(ElementFrame(f.frame_id, f.timestamp, f.ins_pose, geo, tuple(f.detections)))
    return out


# ---------------------------------------------------------------- tracking


UPRIGHT_CATEGORIES = (Category.SIGN,)


def _iou(a, b) -> np.ndarray:
    x0 = np.maximum(a[:, None, 0], b[None, :, 0])
    y0 = np.maximum(a[:, None, 1], b[None, :, 1])
    x1 = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2])
    y1 = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def _next_ratio(now, before, c):
    """Growth of an image offset from the principal point over the next frame.

    Under steady forward motion a static point's depth falls linearly, so if
    the offset grew by r = (now - c) / (before - c) over the last frame it grows
    by 1 / (2 - r) over the next one.
    """
    d0, d1 = before - c, now - c
    r = np.where(np.abs(d0) > 2.0, d1 / np.where(np.abs(d0) > 2.0, d0, 1.0), 1.0)
    r = np.clip(r, 0.8, 1.6)
    return 1.0 / (2.0 - r)


def _expand(box, r_bottom, r_top, intr: Intrinsics, steps: int) -> np.ndarray:
    """Scale box edges about the principal point: near edge (bottom row, outer column) by
    ``r_bottom`` and far edge by ``r_top`` per step."""
    box = np.atleast_2d(box).astype(float)
    x0, y0, x1, y1 = box[:, 0], box[:, 1], box[:, 0] + box[:, 2], box[:, 1] + box[:, 3]
    left = x1 <= intr.cx  # wholly left of the principal column: the outer edge is x0
    right = x0 >= intr.cx
    r_x0 = np.where(left, r_bottom, np.where(right, r_top, r_bottom))
    r_x1 = np.where(left, r_top, r_bottom)
    for _ in range(steps):
        x0, x1 = intr.cx + (x0 - intr.cx) * r_x0, intr.cx + (x1 - intr.cx) * r_x1
        y0, y1 = intr.cy + (y0 - intr.cy) * r_top, intr.cy + (y1 - intr.cy) * r_bottom
    return np.column_stack([x0, y0, np.maximum(x1 - x0, 1e-6), np.maximum(y1 - y0, 1e-6)])


def predict_boxes(box, prev, intr: Intrinsics, steps: int = 1) -> np.ndarray:
    """Boxes (x, y, w, h) extrapolated ``steps`` frames ahead from the last two sightings."""
    box, prev = np.atleast_2d(box).astype(float), np.atleast_2d(prev).astype(float)
    rb = _next_ratio(box[:, 1] + box[:, 3], prev[:, 1] + prev[:, 3], intr.cy)
    rt = _next_ratio(box[:, 1], prev[:, 1], intr.cy)
    return _expand(box, rb, rt, intr, steps)


def _row_ratio(v, kappa, c):
    """Offset growth of row ``v`` when its inverse offset from ``c`` drops by ``kappa``."""
    off = v - c
    if abs(off) <= 2.0:
        return 1.0
    inv = 1.0 / off - kappa
    if inv * off <= 0 or abs(inv) < 1e-9:
        return 1.0
    return float(np.clip(1.0 / (inv * off), 0.8, 2.0))


def predict_from_inverse_rows(box, kappa: float, intr: Intrinsics, steps: int = 1, upright: bool = False) -> np.ndarray:
    """Prediction for a single sighting from the shared per-frame drop ``kappa`` of 1 / (bottom row - cy).

    For points at a common height h below the camera, (row - cy) = fy h / depth,
    so steady forward motion d lowers 1 / (row - cy) by d / (fy h) for all of them.
    Flat elements apply this to each edge; an upright element sits at one depth,
    so its bottom-row growth scales the whole box.
    """
    box = np.atleast_1d(np.asarray(box, dtype=float))
    out = box.copy()
    for _ in range(steps):
        rb = _row_ratio(out[1] + out[3], kappa, intr.cy)
        rt = rb if upright else _row_ratio(out[1], kappa, intr.cy)
        out = _expand(out, rb, rt, intr, 1)[0]
    return out


def assign_tracks(frames, use_ids: bool = True, iou_min: float = 0.3, intr: Intrinsics | None = None,
                  max_gap: int = 2) -> list[list[int]]:
    """Track id per detection. Uses the detections' own ids when all are present,
    otherwise links frames by greedy same-category IoU against each live track's
    predicted box. With ``intr`` the prediction extrapolates a track's last two
    sightings (``predict_boxes``) or, for a single sighting, applies the
    category's current inverse-row drop (``predict_from_inverse_rows``). A track
    survives up to ``max_gap`` frames without a detection."""
    if use_ids and all(d.track_id is not None for f in frames for d in f.detections):
        return [[int(d.track_id) for d in f.detections] for f in frames]
    next_id = 0
    tracks: list[dict] = []  # id, cat, box, prev (or None), gap
    kappa: dict = {}  # category -> last estimated drop of 1 / (bottom row - cy)
    bottom_limit = None if intr is None else intr.image_height - 1.0
    out = []
    for f in frames:
        boxes = np.array([[d.x, d.y, d.w, d.h] for d in f.detections]).reshape(-1, 4)
        cats = [d.category for d in f.detections]
        ids = [-1] * len(boxes)
        if len(boxes) and tracks:
            pred = np.array([t["box"] for t in tracks])
            if intr is not None:
                for j, t in enumerate(tracks):
                    if t["prev"] is not None:
                        pred[j] = predict_boxes(t["box"], t["prev"], intr, t["gap"] + 1)[0]
                    elif t["cat"] in kappa:
                        pred[j] = predict_from_inverse_rows(
                            t["box"], kappa[t["cat"]], intr, t["gap"] + 1, upright=t["cat"] in UPRIGHT_CATEGORIES
                        )
                # detections are clipped to the image, so compare against clipped predictions
                x0 = np.clip(pred[:, 0], 0.0, intr.image_width)
                y0 = np.clip(pred[:, 1], 0.0, intr.image_height)
                x1 = np.clip(pred[:, 0] + pred[:, 2], 0.0, intr.image_width)
                y1 = np.clip(pred[:, 1] + pred[:, 3], 0.0, intr.image_height)
                pred = np.column_stack([x0, y0, np.maximum(x1 - x0, 1e-6), np.maximum(y1 - y0, 1e-6)])
            iou = _iou(boxes, pred)
            same = np.array([[c == t["cat"] for t in tracks] for c in cats])
            iou[~same] = 0.0
            order = np.argsort(-iou, axis=None, kind="stable")
            used = set()
            for flat in order:
                i, j = divmod(int(flat), len(tracks))
                if iou[i, j] < iou_min:
                    break
                if ids[i] >= 0 or j in used:
                    continue
                ids[i] = j
                used.add(j)
        seen = set()
        drops = defaultdict(list)
        for i, j in enumerate(ids):
            if j >= 0:
                t = tracks[j]
                if intr is not None and t["gap"] == 0:
                    vb0, vb1 = t["box"][1] + t["box"][3] - intr.cy, boxes[i][1] + boxes[i][3] - intr.cy
                    if abs(vb0) > 2.0 and abs(vb1) > 2.0 and vb0 * vb1 > 0 and boxes[i][1] + boxes[i][3] < bottom_limit:
                        drops[t["cat"]].append(1.0 / vb0 - 1.0 / vb1)
                t["prev"], t["box"], t["gap"] = t["box"] if t["gap"] == 0 else None, boxes[i], 0
                ids[i] = t["id"]
                seen.add(j)
        for c, v in drops.items():
            kappa[c] = float(np.median(v))
        for j, t in enumerate(tracks):
            if j not in seen:
                t["gap"] += 1
        tracks = [t for t in tracks if t["gap"] <= max_gap]
        for i in range(len(ids)):
            if ids[i] < 0:
                ids[i] = next_id
                tracks.append({"id": next_id, "cat": cats[i], "box": boxes[i], "prev": None, "gap": 0})
                next_id += 1
        out.append(ids)
    return out


# ---------------------------------------------------------------- keypoints


def keypoints(det, intr: Intrinsics, margin: float = 1.0, min_row_px: float = 10.0) -> list[tuple[int, float, float]]:
    """Image points implied by a box: (kind, u, v).

    Signs give their box centre. Ground-side elements give a near point on the
    bottom row and a far point on the top row. Thin lines (lane boundaries,
    barriers) entirely on one side of the principal column run along the box
    diagonal: the near end is the outer bottom corner and the far end the inner
    top corner. Arrows are wide, so their centre line is the mean of the inner
    and outer edge; both edges are lines through the principal point, so in
    centred coordinates each keeps a constant u / v ratio.
    """
    x0, y0, x1, y1 = det.x, det.y, det.x + det.w, det.y + det.h
    if x0 <= margin or y0 <= margin or x1 >= intr.image_width - margin or y1 >= intr.image_height - margin:
        return []
    if det.category is Category.SIGN:
        return [(KP_CENTER, 0.5 * (x0 + x1), 0.5 * (y0 + y1))]
    v_top, v_bot = y0 - intr.cy, y1 - intr.cy
    if v_top < min_row_px or v_bot - v_top < 2.0:
        return []
    u_lo, u_hi = x0 - intr.cx, x1 - intr.cx
    if u_hi < 0:
        u_out, u_in = u_lo, u_hi
    elif u_lo > 0:
        u_out, u_in = u_hi, u_lo
    elif det.category is Category.ARROW:
        mid = 0.5 * (u_lo + u_hi)
        return [(KP_NEAR, mid + intr.cx, y1), (KP_FAR, mid + intr.cx, y0)]
    else:
        return []
    if det.category is Category.ARROW:
        u_near = 0.5 * (u_in * v_bot / v_top + u_out)
        u_far = 0.5 * (u_in + u_out * v_top / v_bot)
    else:
        u_near, u_far = u_out, u_in
    return [(KP_NEAR, u_near + intr.cx, y1), (KP_FAR, u_far + intr.cx, y0)]


def point_key(track: int, kind: int) -> int:
    return int(track) * 4 + kind  # kinds stay below 4


# ---------------------------------------------------------------- triangulation


def triangulate(Rs, ts, pixels, shifts, intr: Intrinsics, x0=None, iterations: int = 8, gate_px: float | None = 8.0):
    """Point from >= 2 observations: linear solve, then Gauss-Newton on pixel error.

    The observation model is ``pi(R (X - shift) + t)``. Observations off by more
    than ``gate_px`` after the first fit are dropped and the point refitted once.
    Returns None when the point would sit behind any remaining camera.
    """
    return triangulate_many([(Rs, ts, pixels, shifts)], intr, None if x0 is None else [x0], iterations, gate_px)[0]


def triangulate_many(groups, intr: Intrinsics, x0=None, iterations: int = 8, gate_px: float | None = 8.0) -> list:
    """``triangulate`` for many points at once; ``groups`` holds (Rs, ts, pixels, shifts) per point."""
    if not groups:
        return []
    P = len(groups)
    M = max(len(g[0]) for g in groups)
    Rs = np.tile(np.eye(3), (P, M, 1, 1))
    tp = np.zeros((P, M, 3))
    pix = np.zeros((P, M, 2))
    sh = np.zeros((P, M, 3))
    mask = np.zeros((P, M), dtype=bool)
    for i, (R, t, uv, s) in enumerate(groups):
        n = len(R)
        Rs[i, :n], tp[i, :n], pix[i, :n], sh[i, :n] = R, t, uv, s
        mask[i, :n] = True
    X = _triangulate_batch(Rs, tp, pix, sh, mask, intr, None if x0 is None else np.asarray(x0, dtype=float), iterations)
    out = [None if x is None else x for x in X]
    if gate_px is None:
        return out
    refit = []
    for i, x in enumerate(out):
        if x is None:
            continue
        pc = (Rs[i] @ (x - sh[i])[:, :, None])[:, :, 0] + tp[i]
        r = np.hypot(intr.fx * pc[:, 0] / pc[:, 2] + intr.cx - pix[i, :, 0], intr.fy * pc[:, 1] / pc[:, 2] + intr.cy - pix[i, :, 1])
        keep = (r <= gate_px) & mask[i]
        if keep.sum() == mask[i].sum():
            continue
        if keep.sum() < 2:
            out[i] = None
            continue
        refit.append((i, (Rs[i][keep], tp[i][keep], pix[i][keep], sh[i][keep])))
    if refit:
        again = triangulate_many([g for _, g in refit], intr, None, iterations, None)
        for (i, _), x in zip(refit, again):
            out[i] = x
    return out


def _triangulate_batch(Rs, ts, pixels, shifts, mask, intr, x0, iterations):
    """Padded batch solve: arrays are (points, observations, ...) with ``mask`` marking real rows."""
    P = len(Rs)
    w = mask.astype(float)
    tp = ts - (Rs @ shifts[..., None])[..., 0]
    xn = (pixels[..., 0] - intr.cx) / intr.fx
    yn = (pixels[..., 1] - intr.cy) / intr.fy
    R0, R1, R2 = Rs[..., 0, :], Rs[..., 1, :], Rs[..., 2, :]
    if x0 is None:
        A = np.concatenate([xn[..., None] * R2 - R0, yn[..., None] * R2 - R1], axis=1) * np.concatenate([w, w], axis=1)[..., None]
        b = np.concatenate([tp[..., 0] - xn * tp[..., 2], tp[..., 1] - yn * tp[..., 2]], axis=1) * np.concatenate([w, w], axis=1)
        X = (np.linalg.pinv(A) @ b[..., None])[..., 0]
    else:
        X = np.array(x0, dtype=float).reshape(P, 3)
    ok = np.ones(P, dtype=bool)
    active = np.ones(P, dtype=bool)
    for _ in range(iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        pc = (Rs[idx] @ X[idx, None, :, None])[..., 0] + tp[idx]
        z = np.where(mask[idx], pc[..., 2], 1.0)
        behind = np.any(z <= 0.1, axis=1)
        ok[idx[behind]] = False
        active[idx[behind]] = False
        keep = ~behind
        idx, pc, z = idx[keep], pc[keep], z[keep]
        if idx.size == 0:
            break
        wi = w[idx]
        xz, yz = pc[..., 0] / z, pc[..., 1] / z
        r = np.concatenate([(intr.fx * xz + intr.cx - pixels[idx, :, 0]) * wi, (intr.fy * yz + intr.cy - pixels[idx, :, 1]) * wi], axis=1)
        J = np.concatenate([
            (wi * intr.fx / z)[..., None] * (R0[idx] - xz[..., None] * R2[idx]),
            (wi * intr.fy / z)[..., None] * (R1[idx] - yz[..., None] * R2[idx]),
        ], axis=1)
        JT = J.transpose(0, 2, 1)
        H = JT @ J
        tr = np.trace(H, axis1=1, axis2=2)
        H = H + (1e-9 * tr)[:, None, None] * np.eye(3)
        singular = ~(np.abs(np.linalg.det(H)) > 0)
        H[singular] = np.eye(3)
        dx = -np.linalg.solve(H, (JT @ r[..., None]))[..., 0]
        ok[idx[singular]] = False
        active[idx[singular]] = False
        good = ~singular
        X[idx[good]] += dx[good]
        done = np.sum(dx * dx, axis=1) < 1e-18
        active[idx[good & done]] = False
    z = np.where(mask, (Rs @ X[:, None, :, None])[..., 0][..., 2] + tp[..., 2], np.inf)
    ok &= np.all(z > DEPTH_EPSILON, axis=1) & np.all(np.isfinite(X), axis=1)
    return [X[i].copy() if ok[i] else None for i in range(P)]


def gravity_aligned(rotation, inertial_rotation) -> np.ndarray:
    """The rotation ``inertial_rotation @ Rz(psi)`` closest to ``rotation``.

    Keeps the inertial unit's gravity direction (roll and pitch are observable
    from its accelerometers) and takes only the heading from ``rotation``.
    """
    M = np.asarray(rotation).T @ np.asarray(inertial_rotation)
    psi = math.atan2(M[0, 1] - M[1, 0], M[0, 0] + M[1, 1])
    return np.asarray(inertial_rotation) @ rot_z(psi)


# ---------------------------------------------------------------- geo output


def geo_transform_at(lib: BenchmarkLibrary, point, n: int = 8, max_n: int = 128, min_spread: float = 0.05) -> GeoTransform:
    """World -> geographic transform from the library frames nearest ``point``.

    The rigid fit is used once the neighbourhood spreads in two directions
    (second principal spread at least ``min_spread`` of the first); the
    neighbourhood doubles until it does. Along a nearly straight road it never
    does and the fit falls back to the mean offset of the nearest ``n`` frames.
    """
    k = min(n, len(lib))
    # nearest-k lists are prefixes of the longest one (ties broken by frame id)
    ranked = nearest_frame_indices(lib, point, max(max_n, k))
    P_all, D_all = lib.centers[ranked], lib.geos[ranked]
    while True:
        if k >= 3:
            P = P_all[:k]
            sv = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
            if sv[0] > 0 and sv[1] >= min_spread * sv[0]:
                try:
                    return fit_rigid(P, D_all[:k])
                except (DegenerateConfiguration, InsufficientPoints):
                    pass
        if k >= min(max_n, len(lib)):
            break
        k = min(2 * k, max_n, len(lib))
    m = min(n, len(lib))
    P, D = P_all[:m], D_all[:m]
    t = (D - P).mean(axis=0)
    res = D - (P + t)
    return GeoTransform(np.eye(3), t, float(np.sqrt(np.mean(res**2))), m)


# ---------------------------------------------------------------- localization


@dataclass
class LocalizeResult:
    poses: list
    decisions: list
    reported_world: list
    reported_geo: list
    before_world: list
    before_geo: list
    n_anchors: int = 0
    n_reinit: int = 0
    solves: int = 0
    points: dict = field(default_factory=dict)


class Localizer:
    def __init__(self, lib: BenchmarkLibrary | None, intr: Intrinsics, cfg: RunConfig):
        self.lib = lib
        self.intr = intr
        self.cfg = cfg
        lc = cfg.localize
        self.solver_cfg = dataclasses.replace(cfg.optimizer, max_iterations=lc.max_iterations)
        self.pixel_noise = NoiseModel.diagonal((lc.pixel_sigma**2, lc.pixel_sigma**2))
        self.anchor_noise = NoiseModel.diagonal(tuple(s**2 for s in lc.anchor_sigma))
        self._anchor_var = np.array([s**2 for s in lc.anchor_sigma])

    def anchor_noise_at(self, pose: Pose) -> NoiseModel:
        """Anchor covariance given in road axes (lateral, longitudinal, altitudinal), rotated to world."""
        f = pose.rotation[2, :2] / np.linalg.norm(pose.rotation[2, :2])
        A = np.array([[f[1], f[0], 0.0], [-f[0], f[1], 0.0], [0.0, 0.0, 1.0]])
        C = A @ np.diag(self._anchor_var) @ A.T
        return NoiseModel(0.5 * (C + C.T))

    def _observations(self, frames, tracks, ins_centers):
        lc = self.cfg.localize
        intr = self.intr
        times = np.array([f.timestamp for f in frames])
        out = []
        cats: dict[int, Counter] = defaultdict(Counter)
        for k, f in enumerate(frames):
            lo, hi = max(k - 1, 0), min(k + 1, len(frames) - 1)
            vel = (ins_centers[hi] - ins_centers[lo]) / (times[hi] - times[lo]) if hi > lo else np.zeros(3)
            obs = []
            for det, tr in zip(f.detections, tracks[k]):
                cats[tr][det.category] += 1
                for kind, u, v in keypoints(det, intr, lc.border_margin_px):
                    tau = intr.readout_time * min(max(v, 0.0), intr.image_height - 1) / (intr.image_height - 1)
                    shift = vel * tau if (lc.rolling_shutter and intr.readout_time > 0) else np.zeros(3)
                    obs.append((point_key(tr, kind), np.array([u, v]), shift))
            out.append(obs)
        track_cat = {tr: c.most_common(1)[0][0] for tr, c in cats.items()}
        return out, track_cat

    def run(self, frames, report_before: bool = True) -> LocalizeResult:
        """Corrected poses and reported elements; ``report_before`` also maps the elements along the raw INS poses."""
        cfg, lc, mc = self.cfg, self.cfg.localize, self.cfg.matching
        n = len(frames)
        if n == 0:
            return LocalizeResult([], [], [], [], [], [])
        ins = self.ins = [f.ins_pose for f in frames]
        ins_centers = np.array([p.center for p in ins])
        tracks = assign_tracks(frames, lc.use_track_ids, lc.track_iou, self.intr, lc.track_max_gap)
        self.ids_given = lc.use_track_ids and all(d.track_id is not None for f in frames for d in f.detections)
        self.obs, self.track_cat = self._observations(frames, tracks, ins_centers)
        self.est: list[Pose] = []
        self.anchors: list = [None] * n
        self.points: dict[int, np.ndarray] = {}
        decisions = []
        session = self.session = 0
        since_solve = 0
        n_anchor = n_reinit = solves = 0
        last_solved = -1
        pending = None  # (frame index, proposed pose) awaiting confirmation
        for k, f in enumerate(frames):
            if k == 0 or self.est[k - 1] is ins[k - 1]:
                pose = ins[k]  # nothing corrected yet; chaining would only add round-off
            else:
                rel = compose(ins[k], invert(ins[k - 1]))
                pose = compose(rel, self.est[k - 1])
            rec = {"frame_id": f.frame_id, "match": None, "decision": None}
            match = None
            if self.lib is not None and mc.xi > 0 and f.detections:
                match = match_frame(self.lib, pose, f.detections, mc.delta, mc.xi, mc.selection)
            if match is not None:
                dec = drift_decision(pose, match, mc.reinit_threshold)
                rec["match"] = {"frame_id": match.matched_frame_id, "deviation": match.deviation, "distance": match.distance}
                rec["decision"] = {"kind": dec.kind.value, "distance": dec.distance}
                if dec.kind is DriftKind.REINITIALIZE:
                    # a single match can alias onto a periodic pattern (dashes repeat);
                    # jump only when consecutive frames agree on where we are
                    target = dec.correction_pose
                    agreed = pending is not None and k - pending[0] <= lc.reinit_confirm_frames and float(np.linalg.norm(
                        target.center - compose(compose(ins[k], invert(ins[pending[0]])), pending[1]).center
                    )) < mc.reinit_threshold
                    rec["decision"]["applied"] = bool(agreed or lc.reinit_confirm_frames == 0)
                    if rec["decision"]["applied"]:
                        pose = target
                        session = self.session = k
                        since_solve = 0
                        n_reinit += 1
                        pending = None
                    else:
                        pending = (k, target)
                else:
                    self.anchors[k] = SemanticAnchor(match.matched_pose.center.copy(), self.anchor_noise_at(match.matched_pose))
                    n_anchor += 1
            decisions.append(rec)
            self.est.append(pose)
            since_solve += 1
            if since_solve >= lc.solve_every and k > session:
                since_solve = 0
                a = max(session, k - lc.window + 1)
                # without an anchor there is nothing to pull the odometry toward
                if any(self.anchors[j] is not None for j in range(a, k + 1)):
                    self._solve_window(a, k)
                    solves += 1
                    last_solved = k
        a = max(session, n - lc.window)
        if last_solved != n - 1 and n - 1 > session and any(self.anchors[j] is not None for j in range(a, n)):
            self._solve_window(a, n - 1)
            solves += 1

        reported_world = self._report(self.est)
        before_world = self._report(ins) if report_before else []
        result = LocalizeResult(
            list(self.est), decisions, reported_world, self._to_geo(reported_world),
            before_world, self._to_geo(before_world), n_anchor, n_reinit, solves, dict(self.points),
        )
        log.info("localize: %d frames, %d anchors, %d reinitializations, %d solves", n, n_anchor, n_reinit, solves)
        return result

    def _triangulate(self, groups: dict, poses) -> dict:
        """{point id: position} for every group of (frame, pixel, shift) items that triangulates."""
        ids, batch = [], []
        for pid, items in groups.items():
            centers = np.array([poses[k].center for k, _, _ in items])
            if np.linalg.norm(centers.max(axis=0) - centers.min(axis=0)) < self.cfg.localize.min_baseline_m:
                continue
            ids.append(pid)
            batch.append((
                np.array([poses[k].rotation for k, _, _ in items]),
                np.array([poses[k].translation for k, _, _ in items]),
                np.array([p for _, p, _ in items]),
                np.array([s for _, _, s in items]),
            ))
        return {pid: X for pid, X in zip(ids, triangulate_many(batch, self.intr)) if X is not None}

    def _solve_window(self, a: int, b: int) -> None:
        by_point = defaultdict(list)
        for k in range(a, b + 1):
            for pid, pix, shift in self.obs[k]:
                by_point[pid].append((k, pix, shift))
        lc = self.cfg.localize
        graph = FactorGraph(
            self.intr, pixel_noise=self.pixel_noise, anchor_noise=self.anchor_noise,
            pixel_kernel=RobustKernel.huber(lc.pixel_huber),
            anchor_kernel=RobustKernel.huber(lc.anchor_huber) if lc.anchor_huber > 0 else RobustKernel(KernelKind.NONE),
        )
        # solve in coordinates centred on the oldest keyframe for conditioning
        o = self.est[a].center.copy()
        if a != self.session:
            self._shift_to_anchors(a, b, by_point)
        # well-spread anchors fix the gauge themselves (roll about the track
        # axis excepted, which the gravity alignment below restores)
        floating = lc.gravity_from_ins and self._anchors_pin_heading(a, b)
        used = set()
        fresh = {}
        for pid in sorted(by_point):
            items = by_point[pid]
            if len(items) < 2:
                continue
            X = self.points.get(pid)
            if X is None or not self._in_front(X, items):
                fresh[pid] = items
        made = self._triangulate(fresh, self.est)
        for pid in sorted(by_point):
            if len(by_point[pid]) < 2:
                continue
            X = made.get(pid) if pid in fresh else self.points[pid]
            if X is None:
                continue
            graph.add_map_point(MapPoint(pid, X - o))
            used.add(pid)
        for k in range(a, b + 1):
            obs = [Observation(pid, pix, shift) for pid, pix, shift in self.obs[k] if pid in used]
            anc = self.anchors[k]
            if anc is not None:
                anc = SemanticAnchor(anc.translation - o, anc.noise)
            p = self.est[k]
            local = Pose(p.rotation, p.translation + p.rotation @ o)
            graph.add_keyframe(Keyframe(k, local, obs, anc, fixed=(k == a and not floating)))
        res = solve(graph, self.solver_cfg)
        for k, pose in res.poses.items():
            R = pose.rotation
            if lc.gravity_from_ins:
                R = gravity_aligned(R, self.ins[k].rotation)
            c = o - pose.rotation.T @ pose.translation
            self.est[k] = Pose(R, -R @ c)
        for pid, X in res.points.items():
            self.points[pid] = X + o

    def _shift_to_anchors(self, a: int, b: int, by_point) -> None:
        """Translate the window (poses and its points) by the information-weighted mean anchor residual.

        A window solved with its oldest keyframe fixed keeps whatever offset
        that keyframe carries from earlier windows, so it is removed here first.
        """
        W = np.zeros((3, 3))
        g = np.zeros(3)
        for k in range(a, b + 1):
            anc = self.anchors[k]
            if anc is None:
                continue
            info = anc.noise.sqrt_information.T @ anc.noise.sqrt_information
            W += info
            g += info @ (anc.translation - self.est[k].center)
        if not W.any():
            return
        d = np.linalg.solve(W, g)
        for k in range(a, b + 1):
            p = self.est[k]
            self.est[k] = Pose(p.rotation, p.translation - p.rotation @ d)
        for pid in by_point:
            if pid in self.points:
                self.points[pid] = self.points[pid] + d

    def _anchors_pin_heading(self, a: int, b: int) -> bool:
        """Whether the window's anchors spread far enough along the track to fix position and heading."""
        C = [self.anchors[k].translation for k in range(a, b + 1) if self.anchors[k] is not None]
        if len(C) < 3:
            return False
        C = np.array(C)
        return float(np.linalg.norm(C[:, :2].max(axis=0) - C[:, :2].min(axis=0))) >= self.cfg.localize.float_min_spread_m

    def _in_front(self, X, items) -> bool:
        for k, _, s in items:
            p = self.est[k]
            if (p.rotation @ (X - s) + p.translation)[2] <= DEPTH_EPSILON:
                return False
        return True

    def _report(self, poses) -> list[ReportedElement]:
        """Elements triangulated from every observation with ``poses`` held fixed."""
        by_point = defaultdict(list)
        for k, obs in enumerate(self.obs):
            for pid, pix, shift in obs:
                by_point[pid].append((k, pix, shift))
        pts = self._triangulate({pid: items for pid, items in sorted(by_point.items()) if len(items) >= 2}, poses)
        step = self.cfg.localize.polyline_step_m
        seen = None
        if not self.ids_given:
            # inferred tracks: short ones are mostly mis-associations, so drop them
            frames_of = defaultdict(set)
            for pid, items in by_point.items():
                frames_of[pid // 4].update(k for k, _, _ in items)
            seen = {tr: len(ks) for tr, ks in frames_of.items()}
        out = []
        for tr in sorted(self.track_cat):
            cat = self.track_cat[tr]
            if seen is not None and seen.get(tr, 0) < self.cfg.localize.min_track_frames:
                continue
            if cat is Category.SIGN:
                X = pts.get(point_key(tr, KP_CENTER))
                if X is not None:
                    out.append(ReportedElement(cat, X, tr))
                continue
            a, b = pts.get(point_key(tr, KP_NEAR)), pts.get(point_key(tr, KP_FAR))
            if a is None or b is None:
                continue
            if cat is Category.ARROW:
                out.append(ReportedElement(cat, 0.5 * (a + b), tr))
            else:
                m = max(1, int(np.ceil(np.linalg.norm(b - a) / step - 1e-9)))
                out.append(ReportedElement(cat, a + np.linspace(0.0, 1.0, m + 1)[:, None] * (b - a), tr))
        if seen is not None:
            out = merge_fragments(out, seen)
        return out

    def _to_geo(self, elements) -> list[ReportedElement]:
        if self.lib is None:
            return list(elements)
        lc = self.cfg.localize
        out = []
        for e in elements:
            tf = geo_transform_at(self.lib, e.vertices.mean(axis=0), lc.geo_n_frames, lc.geo_max_frames, lc.geo_min_spread)
            geo = e.vertices @ tf.rotation.T + tf.translation
            out.append(ReportedElement(e.category, geo if e.position.ndim == 2 else geo[0], e.element_id))
        return out


def _same_element(a: ReportedElement, b: ReportedElement, point_gap: float, line_offset: float) -> bool:
    if a.category is not b.category:
        return False
    if a.position.ndim == 1:
        return float(np.linalg.norm(a.position - b.position)) <= point_gap
    p0, p1 = a.vertices[0], a.vertices[-1]
    q0, q1 = b.vertices[0], b.vertices[-1]
    u = p1 - p0
    length = float(np.linalg.norm(u))
    if length < 1e-9:
        return False
    u = u / length
    for q in (q0, q1):
        off = (q - p0) - np.dot(q - p0, u) * u
        if np.linalg.norm(off) > line_offset:
            return False
    s = sorted((float(np.dot(q0 - p0, u)), float(np.dot(q1 - p0, u))))
    overlap = min(length, s[1]) - max(0.0, s[0])
    return overlap >= 0.5 * min(length, s[1] - s[0])


def merge_fragments(elements: list, observations: dict, point_gap: float = 1.0, line_offset: float = 0.5) -> list:
    """Collapse elements that are pieces of one physical element split across tracks.

    The piece seen most often survives; ties go to the lower track id.
    """
    order = sorted(range(len(elements)), key=lambda i: (-observations.get(elements[i].element_id, 0), elements[i].element_id))
    kept = []
    for i in order:
        e = elements[i]
        if not any(_same_element(k, e, point_gap, line_offset) or _same_element(e, k, point_gap, line_offset) for k in kept):
            kept.append(e)
    return sorted(kept, key=lambda e: e.element_id)


# ---------------------------------------------------------------- commands


def _seeded(cfg: RunConfig):
    world_cfg = dataclasses.replace(cfg.world, seed=cfg.seed)
    mapping = dataclasses.replace(cfg.mapping, seed=cfg.seed)
    drive = dataclasses.replace(cfg.drive, seed=cfg.seed)
    return world_cfg, mapping, drive


def simulate(cfg: RunConfig):
    """(world, mapping frames, drive frames) for the configured seed."""
    world_cfg, mapping, drive = _seeded(cfg)
    world = generate_world(world_cfg)
    return world, simulate_drive(world, mapping), simulate_drive(world, drive)


def cmd_simulate(cfg: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    world, mapping, drive = simulate(cfg)
    files = {}
    for name, frames in (("mapping", mapping), ("drive", drive)):
        for fname, digest in export_dataset(frames, world, out / name).items():
            files[f"{name}/{fname}"] = digest
    manifest = {
        "seed": cfg.seed,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "frames": {"mapping": len(mapping), "drive": len(drive)},
        "files": files,
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def _pass_dir(dataset_dir, name: str) -> Path:
    d = Path(dataset_dir)
    if (d / name / "frames.jsonl").exists():
        return d / name
    if (d / "frames.jsonl").exists():
        return d
    raise IoError(f"no {name} dataset under {d}")


def cmd_build_library(dataset_dir, out_path, cfg: RunConfig) -> BenchmarkLibrary:
    frames, _ = import_dataset(_pass_dir(dataset_dir, "mapping"))
    lib_frames = library_frames(frames, cfg.map_bias)
    if not lib_frames:
        raise EmptyInput("mapping pass has no frame with detections")
    lib = build_library(lib_frames, cfg.matching.grid_cell)
    save_library(lib, out_path)
    return lib


def _intrinsics(cfg: RunConfig, dataset_dir) -> Intrinsics:
    d = Path(dataset_dir)
    manifest = d / "manifest.json"
    if manifest.exists():
        cam = read_json(manifest)["config"]["drive"]["camera"]
        from .simworld import CameraConfig

        return CameraConfig(**cam).intrinsics()
    return cfg.drive.camera.intrinsics()


def cmd_localize(dataset_dir, library_path, cfg: RunConfig, out_dir) -> LocalizeResult:
    drive_dir = _pass_dir(dataset_dir, "drive")
    frames = [SimFrame.from_dict(r) for r in read_jsonl(drive_dir / "frames.jsonl")]
    lib = load_library(library_path, cfg.matching.grid_cell) if library_path is not None else None
    intr = _intrinsics(cfg, dataset_dir)
    res = Localizer(lib, intr, cfg).run(frames)
    out = Path(out_dir)
    write_trajectory_csv(out / "corrected_trajectory.csv", ((f.frame_id, f.timestamp, p) for f, p in zip(frames, res.poses)))
    write_jsonl(out / "reported_elements.jsonl", (e.to_dict() for e in res.reported_geo))
    write_jsonl(out / "reported_elements_before.jsonl", (e.to_dict() for e in res.before_geo))
    write_jsonl(out / "decisions.jsonl", res.decisions)
    return res


def evaluate_dataset(reported, world, frames, cfg: RunConfig, label: str = ""):
    intr = cfg.drive.camera.intrinsics()
    gt_poses = [f.gt_pose for f in frames]
    truth = evalkit.ground_truth_elements(world, gt_poses, intr, cfg.evaluation.detection_range_m)
    ev = cfg.evaluation
    return evalkit.evaluate(reported, truth, gt_poses, ev.match_radius_m, ev.pair_radius_m, ev.polyline_cap_m, label)


def cmd_evaluate(reported_path, dataset_dir, cfg: RunConfig, out_dir, before_path=None, trajectory_path=None) -> dict:
    drive_dir = _pass_dir(dataset_dir, "drive")
    frames, world = import_dataset(drive_dir)
    reports = []
    if before_path is not None:
        before = [ReportedElement.from_dict(r) for r in read_jsonl(before_path)]
        reports.append(evaluate_dataset(before, world, frames, cfg, "before"))
    reported = [ReportedElement.from_dict(r) for r in read_jsonl(reported_path)]
    reports.append(evaluate_dataset(reported, world, frames, cfg, "after" if before_path is not None else "semvo"))
    summary = {"reports": [r.to_dict() for r in reports]}
    if trajectory_path is not None:
        est = [p for _, _, p in read_trajectory_csv(trajectory_path)]
        gt = [f.gt_pose for f in frames]
        summary["trajectory"] = {
            "corrected": evalkit.trajectory_ate(est, gt),
            "ins": evalkit.trajectory_ate([f.ins_pose for f in frames], gt),
        }
    out = Path(out_dir)
    write_json(out / "metrics.json", summary)
    try:
        (out / "metrics.txt").write_text(evalkit.format_table(reports), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {out / 'metrics.txt'}: {exc}") from exc
    return summary


def cmd_report(cfg: RunConfig, out_dir, before_after: bool = False) -> dict:
    out = Path(out_dir)
    cmd_simulate(cfg, out / "dataset")
    cmd_build_library(out / "dataset", out / "library.jsonl", cfg)
    cmd_localize(out / "dataset", out / "library.jsonl", cfg, out / "localize")
    return cmd_evaluate(
        out / "localize" / "reported_elements.jsonl", out / "dataset", cfg, out / "evaluation",
        out / "localize" / "reported_elements_before.jsonl" if before_after else None,
        out / "localize" / "corrected_trajectory.csv",
    )
