"""Semantic-element benchmark library and two-stage frame matching.

A library frame is accepted as the match for the current frame when its camera
center lies strictly within ``delta`` meters of the current camera center and
the mean pixel-box deviation between associated detections is strictly below
``xi`` pixels.
"""

from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DuplicateFrameId, EmptyInput
from .geometry import Pose
from .io import pose_from_dict, pose_to_dict, read_jsonl, write_jsonl

DEFAULT_DELTA = 15.0
DEFAULT_XI = 40.0
DEFAULT_REINIT_THRESHOLD = 2.0


class Category(str, enum.Enum):
    LANE_BOUNDARY = "LaneBoundary"
    ARROW = "Arrow"
    SIGN = "Sign"
    ROADSIDE_BARRIER = "RoadsideBarrier"


CATEGORY_CODES = {c: i for i, c in enumerate(Category)}


@dataclass(frozen=True)
class SemanticDetection:
    category: Category
    x: float
    y: float
    w: float
    h: float
    track_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))
        if not (self.w > 0 and self.h > 0):
            raise ValueError("box width and height must be positive")
        if self.x < 0 or self.y < 0:
            raise ValueError("box corner must be non-negative")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + 0.5 * self.w, self.y + 0.5 * self.h)

    def to_dict(self) -> dict:
        return {
            "category": self.category.value,
            "x": float(self.x),
            "y": float(self.y),
            "w": float(self.w),
            "h": float(self.h),
            "track_id": None if self.track_id is None else int(self.track_id),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SemanticDetection:
        tid = d.get("track_id")
        return cls(Category(d["category"]), d["x"], d["y"], d["w"], d["h"], None if tid is None else int(tid))


@dataclass(frozen=True, eq=False)
class ElementFrame:
    frame_id: int
    timestamp: float
    pose: Pose
    geo: np.ndarray
    detections: tuple[SemanticDetection, ...]

    def __post_init__(self):
        object.__setattr__(self, "geo", np.asarray(self.geo, dtype=float).reshape(3))
        object.__setattr__(self, "detections", tuple(self.detections))

    def to_dict(self) -> dict:
        return {
            "frame_id": int(self.frame_id),
            "timestamp": float(self.timestamp),
            "pose": pose_to_dict(self.pose),
            "geo": self.geo.tolist(),
            "detections": [d.to_dict() for d in self.detections],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ElementFrame:
        return cls(
            int(d["frame_id"]),
            float(d["timestamp"]),
            pose_from_dict(d["pose"]),
            np.array(d["geo"], dtype=float),
            tuple(SemanticDetection.from_dict(x) for x in d["detections"]),
        )


def detection_arrays(detections: Sequence[SemanticDetection]) -> tuple[np.ndarray, np.ndarray]:
    """(category codes[n], boxes[n, 4] as x, y, w, h)."""
    if not detections:
        return np.zeros(0, dtype=int), np.zeros((0, 4))
    cats = np.array([CATEGORY_CODES[d.category] for d in detections], dtype=int)
    boxes = np.array([[d.x, d.y, d.w, d.h] for d in detections], dtype=float)
    return cats, boxes


class BenchmarkLibrary:
    """Immutable collection of element frames with a uniform 3-D grid over camera centers."""

    def __init__(self, frames: Sequence[ElementFrame], grid_cell: float):
        self._frames = {f.frame_id: f for f in frames}
        self.ids = np.array([f.frame_id for f in frames], dtype=np.int64)
        self.centers = np.array([f.pose.center for f in frames], dtype=float).reshape(-1, 3)
        self.geos = np.array([f.geo for f in frames], dtype=float).reshape(-1, 3)
        self.grid_cell = float(grid_cell)
        self._cells: dict[tuple[int, int, int], list[int]] = defaultdict(list)
        for idx, c in enumerate(self.centers):
            self._cells[self._cell_of(c)].append(idx)
        self._arrays = [detection_arrays(f.detections) for f in frames]
        self._index = {int(fid): i for i, fid in enumerate(self.ids)}

    def _cell_of(self, p) -> tuple[int, int, int]:
        return tuple(int(math.floor(v / self.grid_cell)) for v in p)

    def __len__(self):
        return len(self._frames)

    @property
    def frames(self) -> list[ElementFrame]:
        return list(self._frames.values())

    def frame(self, frame_id: int) -> ElementFrame:
        return self._frames[frame_id]

    def arrays(self, frame_id: int):
        return self._arrays[self._index[frame_id]]

    def radius_query(self, point, radius: float) -> list[tuple[float, int]]:
        """(distance, frame_id) for all frames strictly closer than ``radius``, sorted."""
        point = np.asarray(point, dtype=float)
        reach = int(math.ceil(radius / self.grid_cell))
        n_cells = (2 * reach + 1) ** 3
        if n_cells >= len(self.ids):
            idx = np.arange(len(self.ids))
        else:
            c0 = self._cell_of(point)
            cand: list[int] = []
            for dx in range(-reach, reach + 1):
                for dy in range(-reach, reach + 1):
                    for dz in range(-reach, reach + 1):
                        cell = self._cells.get((c0[0] + dx, c0[1] + dy, c0[2] + dz))
                        if cell:
                            cand.extend(cell)
            idx = np.array(cand, dtype=int)
        if idx.size == 0:
            return []
        d = np.linalg.norm(self.centers[idx] - point, axis=1)
        keep = d < radius
        out = sorted(zip(d[keep].tolist(), self.ids[idx[keep]].tolist()))
        return [(float(dist), int(fid)) for dist, fid in out]


@dataclass(frozen=True, eq=False)
class MatchResult:
    matched_frame_id: int
    matched_pose: Pose
    matched_geo: np.ndarray
    deviation: float
    distance: float


class DriftKind(str, enum.Enum):
    REINITIALIZE = "Reinitialize"
    MICRO_CORRECT = "MicroCorrect"


@dataclass(frozen=True, eq=False)
class DriftDecision:
    kind: DriftKind
    correction_pose: Pose | None = None
    distance: float = field(default=0.0)


def build_library(frames: Iterable[ElementFrame], grid_cell: float = DEFAULT_DELTA) -> BenchmarkLibrary:
    frames = list(frames)
    if not frames:
        raise EmptyInput("no frames to build a library from")
    if not grid_cell > 0:
        raise ValueError("grid_cell must be positive")
    seen = set()
    for f in frames:
        if f.frame_id in seen:
            raise DuplicateFrameId(f"frame_id {f.frame_id} appears twice")
        seen.add(f.frame_id)
        if not f.detections:
            raise EmptyInput(f"frame {f.frame_id} has no detections")
    return BenchmarkLibrary(frames, grid_cell)


def candidates_by_distance(lib: BenchmarkLibrary, t_query, delta: float) -> list[int]:
    if not delta > 0:
        raise ValueError("delta must be positive")
    return [fid for _, fid in lib.radius_query(t_query, delta)]


def _box_deviation_arrays(cats_a, boxes_a, cats_b, boxes_b) -> float | None:
    if len(cats_a) == 0 or len(cats_b) == 0:
        return None
    ca = boxes_a[:, :2] + 0.5 * boxes_a[:, 2:]
    cb = boxes_b[:, :2] + 0.5 * boxes_b[:, 2:]
    dist = np.hypot(ca[:, 0, None] - cb[None, :, 0], ca[:, 1, None] - cb[None, :, 1])
    dist[cats_a[:, None] != cats_b[None, :]] = np.inf
    rows = np.arange(len(cats_a))
    total = 0.0
    pairs = 0
    # Greedy pairing in (distance, i, j) order equals repeatedly taking every
    # mutual best pair; argmin returns the first minimum, which breaks ties the same way.
    while True:
        jb = np.argmin(dist, axis=1)
        ib = np.argmin(dist, axis=0)
        take = (ib[jb] == rows) & np.isfinite(dist[rows, jb])
        if not take.any():
            break
        i, j = rows[take], jb[take]
        total += float(np.sum(np.sqrt(np.sum((boxes_a[i] - boxes_b[j]) ** 2, axis=1))))
        pairs += len(i)
        dist[i, :] = np.inf
        dist[:, j] = np.inf
    if pairs == 0:
        return None
    return total / pairs


def _box_deviation_batch(cats_a, boxes_a, others) -> list:
    """``_box_deviation_arrays`` of one detection set against many, padded into one tensor."""
    k = len(others)
    if k == 0:
        return []
    nb = max(len(c) for c, _ in others)
    na = len(cats_a)
    if na == 0 or nb == 0:
        return [None] * k
    cb = np.full((k, nb), -1, dtype=int)
    bb = np.zeros((k, nb, 4))
    for m, (c, b) in enumerate(others):
        cb[m, : len(c)] = c
        bb[m, : len(c)] = b
    ca = boxes_a[:, :2] + 0.5 * boxes_a[:, 2:]
    cen_b = bb[:, :, :2] + 0.5 * bb[:, :, 2:]
    dist = np.hypot(ca[None, :, 0, None] - cen_b[:, None, :, 0], ca[None, :, 1, None] - cen_b[:, None, :, 1])
    dist[cats_a[None, :, None] != cb[:, None, :]] = np.inf
    total = np.zeros(k)
    pairs = np.zeros(k, dtype=int)
    rows = np.arange(na)
    while True:
        jb = np.argmin(dist, axis=2)  # (k, na)
        ib = np.argmin(dist, axis=1)  # (k, nb)
        take = (np.take_along_axis(ib, jb, axis=1) == rows) & np.isfinite(np.take_along_axis(dist, jb[:, :, None], 2)[:, :, 0])
        if not take.any():
            break
        m, i = np.nonzero(take)
        j = jb[m, i]
        diff = boxes_a[i] - bb[m, j]
        np.add.at(total, m, np.sqrt(np.sum(diff**2, axis=1)))
        np.add.at(pairs, m, 1)
        dist[m, i, :] = np.inf
        dist[m, :, j] = np.inf
    return [None if pairs[m] == 0 else float(total[m] / pairs[m]) for m in range(k)]


def box_deviation(current: Sequence[SemanticDetection], stored: Sequence[SemanticDetection]) -> float | None:
    """Mean 4-D box difference over category-associated pairs; ``None`` when incomparable.

    Detections of the same category are paired greedily by ascending box-center
    distance; unpaired extras are ignored.
    """
    return _box_deviation_arrays(*detection_arrays(current), *detection_arrays(stored))


def match_frame(
    lib: BenchmarkLibrary,
    current_pose: Pose,
    current_detections: Sequence[SemanticDetection],
    delta: float = DEFAULT_DELTA,
    xi: float = DEFAULT_XI,
    selection: str = "distance",
) -> MatchResult | None:
    """Distance gate, then box-deviation gate, then pick one survivor.

    ``selection="distance"`` returns the survivor nearest to the current camera
    center; ``selection="deviation"`` returns the survivor whose detections agree
    best with the current ones (ties then fall back to distance, then frame id).
    """
    if not (delta > 0 and xi > 0):
        raise ValueError("delta and xi must be positive")
    if selection not in ("distance", "deviation"):
        raise ValueError(f"unknown selection rule {selection!r}")
    if lib is None or len(lib) == 0:
        return None
    cats, boxes = detection_arrays(current_detections)
    near = lib.radius_query(current_pose.center, delta)
    devs = _box_deviation_batch(cats, boxes, [lib.arrays(fid) for _, fid in near])
    best = None
    best_key = None
    for (dist, fid), dev in zip(near, devs):
        if dev is None or not dev < xi:
            continue
        key = (dist, fid) if selection == "distance" else (dev, dist, fid)
        if best_key is None or key < best_key:
            best_key = key
            best = (fid, dev, dist)
    if best is None:
        return None
    fid, dev, dist = best
    frame = lib.frame(fid)
    assert dist < delta and dev < xi
    return MatchResult(fid, frame.pose, frame.geo.copy(), dev, dist)


def drift_decision(current_pose: Pose, match: MatchResult, reinit_threshold: float = DEFAULT_REINIT_THRESHOLD) -> DriftDecision:
    if not reinit_threshold > 0:
        raise ValueError("reinit_threshold must be positive")
    d = float(np.linalg.norm(current_pose.center - match.matched_pose.center))
    if d >= reinit_threshold:
        return DriftDecision(DriftKind.REINITIALIZE, match.matched_pose, d)
    return DriftDecision(DriftKind.MICRO_CORRECT, None, d)


def save_library(lib: BenchmarkLibrary, path) -> None:
    write_jsonl(path, (f.to_dict() for f in lib.frames))


def load_library(path, grid_cell: float = DEFAULT_DELTA) -> BenchmarkLibrary:
    return build_library([ElementFrame.from_dict(r) for r in read_jsonl(path)], grid_cell)
