"""Element-level evaluation: existence precision/recall and signed per-axis MAE / MRE.

Axis convention: longitudinal is the component along the reference heading,
lateral the component along the heading turned to the right (so errors to the
left are negative) and altitudinal the z component (below is negative). The
reference heading comes from the ground-truth trajectory sample nearest to the
element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import LengthMismatch
from .geometry import DEPTH_EPSILON, Intrinsics, Pose
from .semlib import Category

POINT_CATEGORIES = (Category.SIGN, Category.ARROW)
POLYLINE_CATEGORIES = (Category.LANE_BOUNDARY, Category.ROADSIDE_BARRIER)
DEFAULT_RADII = {Category.SIGN: 2.0, Category.ARROW: 2.0, Category.LANE_BOUNDARY: 1.0, Category.ROADSIDE_BARRIER: 1.0}
DEFAULT_POLYLINE_CAP = 3.0
DEFAULT_PAIR_RADIUS = 50.0


@dataclass(frozen=True, eq=False)
class ReportedElement:
    category: Category
    position: np.ndarray  # (3,) for point elements, (n, 3) polyline vertices
    element_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))
        pos = np.asarray(self.position, dtype=float)
        if pos.ndim == 2 and len(pos) == 1:
            pos = pos[0]
        if not np.all(np.isfinite(pos)):
            raise ValueError("element position must be finite")
        object.__setattr__(self, "position", pos)

    @property
    def vertices(self) -> np.ndarray:
        return self.position.reshape(-1, 3)

    def to_dict(self) -> dict:
        return {"element_id": self.element_id, "category": self.category.value, "position": self.position.tolist()}

    @classmethod
    def from_dict(cls, d) -> ReportedElement:
        eid = d.get("element_id")
        return cls(Category(d["category"]), np.array(d["position"], dtype=float), None if eid is None else int(eid))


@dataclass(frozen=True)
class AxisError:
    lateral: float
    longitudinal: float
    altitudinal: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lateral, self.longitudinal, self.altitudinal)

    def to_dict(self) -> dict:
        return {"lateral": self.lateral, "longitudinal": self.longitudinal, "altitudinal": self.altitudinal}


@dataclass(frozen=True, eq=False)
class MatchedPair:
    reported_index: int
    gt_index: int
    distance: float
    error: np.ndarray  # mean (reported - truth) over paired vertices
    anchor: np.ndarray  # truth reference position


@dataclass
class CategoryMetrics:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    recall: float | None = None
    precision: float | None = None
    mae: AxisError | None = None
    mre: AxisError | None = None
    pair_count: int = 0

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "recall": self.recall, "precision": self.precision,
            "mae": None if self.mae is None else self.mae.to_dict(),
            "mre": None if self.mre is None else self.mre.to_dict(),
            "pair_count": self.pair_count,
        }


@dataclass
class MetricReport:
    categories: dict = field(default_factory=dict)  # Category -> CategoryMetrics
    label: str = ""

    def to_dict(self) -> dict:
        return {"label": self.label, "categories": {c.value: m.to_dict() for c, m in self.categories.items()}}


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else 100.0 * num / den


def resample_polyline(vertices, n: int) -> np.ndarray:
    """``n`` points at equal arc-length fractions along a polyline."""
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    if len(v) == 1 or n == 1:
        return np.repeat(v.mean(axis=0, keepdims=True), n, axis=0) if n == 1 else np.repeat(v[:1], n, axis=0)
    seg = np.linalg.norm(np.diff(v, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] == 0:
        return np.repeat(v[:1], n, axis=0)
    f = np.linspace(0.0, cum[-1], n)
    return np.column_stack([np.interp(f, cum, v[:, k]) for k in range(3)])


def element_error(reported: ReportedElement, truth: ReportedElement) -> np.ndarray:
    """Mean error vector of a reported element against its truth.

    Polylines are compared vertex by vertex after resampling the reported line
    to the truth's vertex count at equal arc-length fractions; both are ordered
    along the direction of travel.
    """
    tv = truth.vertices
    if len(tv) == 1:
        return reported.vertices.mean(axis=0) - tv[0]
    rv = resample_polyline(reported.vertices, len(tv))
    return (rv - tv).mean(axis=0)


def axis_decompose(error_vec, reference_heading) -> AxisError:
    e = np.asarray(error_vec, dtype=float)
    h = np.asarray(reference_heading, dtype=float)[:2]
    lon = e[0] * h[0] + e[1] * h[1]
    lat = e[0] * h[1] - e[1] * h[0]
    return AxisError(float(lat), float(lon), float(e[2]))


def _trajectory_arrays(trajectory) -> tuple[np.ndarray, np.ndarray]:
    """(positions[n, 3], unit headings[n, 2]) from poses or an (n, 3) array."""
    if len(trajectory) and isinstance(trajectory[0], Pose):
        pos = np.array([p.center for p in trajectory])
        fwd = np.array([p.rotation[2, :2] for p in trajectory])
    else:
        pos = np.asarray(trajectory, dtype=float).reshape(-1, 3)
        if len(pos) < 2:
            raise ValueError("need at least two trajectory samples for a heading")
        fwd = np.gradient(pos[:, :2], axis=0)
    norm = np.linalg.norm(fwd, axis=1)
    if np.any(norm == 0):
        raise ValueError("trajectory heading undefined")
    return pos, fwd / norm[:, None]


def reference_heading(traj_arrays, point) -> np.ndarray:
    pos, head = traj_arrays
    d = np.hypot(pos[:, 0] - point[0], pos[:, 1] - point[1])
    return head[int(np.argmin(d))]


def match_elements(reported: Sequence[ReportedElement], ground_truth: Sequence[ReportedElement], match_radius_m=None,
                   polyline_cap_m: float = DEFAULT_POLYLINE_CAP, trajectory=None):
    """Greedy same-category matching by ascending distance (then gt index, reported index).

    Taking the globally closest free pair first is the same as repeatedly
    accepting mutual nearest neighbours. Point elements gate on Euclidean
    distance; polylines gate on the lateral part of their mean error (needs a
    trajectory for the heading) and on ``polyline_cap_m`` overall.
    Returns (pairs, false-positive indices, false-negative indices).
    """
    radii = dict(DEFAULT_RADII)
    if isinstance(match_radius_m, (int, float)):
        radii = {c: float(match_radius_m) for c in Category}
    elif match_radius_m:
        radii.update({Category(k): float(v) for k, v in match_radius_m.items()})
    if any(not r > 0 for r in radii.values()):
        raise ValueError("match radii must be positive")
    traj = _trajectory_arrays(trajectory) if trajectory is not None else None

    cand = []
    gt_cat = np.array([CAT_INDEX[g.category] for g in ground_truth], dtype=int)
    gt_anchor = np.array([g.vertices.mean(axis=0) for g in ground_truth]).reshape(-1, 3)
    gt_extent = np.array([_extent(g) for g in ground_truth])
    for ri, r in enumerate(reported):
        rc = r.vertices.mean(axis=0)
        rad = radii[r.category]
        point_like = r.category in POINT_CATEGORIES or traj is None
        reach = rad if point_like else max(polyline_cap_m, rad)
        # cheap reject on anchor distance before the vertex-wise error
        d_anchor = np.linalg.norm(gt_anchor - rc, axis=1) if len(gt_anchor) else np.zeros(0)
        near = np.flatnonzero((gt_cat == CAT_INDEX[r.category]) & (d_anchor <= reach + gt_extent + _extent(r)))
        for gi in near:
            g = ground_truth[gi]
            err = element_error(r, g)
            dist = float(np.linalg.norm(err))
            if point_like:
                ok = dist <= rad
            else:
                head = reference_heading(traj, gt_anchor[gi])
                ok = abs(axis_decompose(err, head).lateral) <= rad and dist <= polyline_cap_m
            if ok:
                cand.append((dist, int(gi), ri, err))
    cand.sort(key=lambda c: (c[0], c[1], c[2]))
    used_r, used_g = set(), set()
    pairs = []
    for dist, gi, ri, err in cand:
        if ri in used_r or gi in used_g:
            continue
        used_r.add(ri)
        used_g.add(gi)
        pairs.append(MatchedPair(ri, gi, dist, err, gt_anchor[gi].copy()))
    fp = [i for i in range(len(reported)) if i not in used_r]
    fn = [i for i in range(len(ground_truth)) if i not in used_g]
    return pairs, fp, fn


CAT_INDEX = {c: i for i, c in enumerate(Category)}


def _extent(g: ReportedElement) -> float:
    v = g.vertices
    return float(np.max(np.linalg.norm(v - v.mean(axis=0), axis=1))) if len(v) > 1 else 0.0


def mae(pairs: Sequence[MatchedPair], trajectory, reported=None) -> AxisError | None:
    """Signed mean of axis-decomposed errors; heading taken at the pair's midpoint."""
    if not pairs:
        return None
    traj = _trajectory_arrays(trajectory)
    out = np.zeros(3)
    for p in pairs:
        mid = p.anchor + 0.5 * p.error
        out += axis_decompose(p.error, reference_heading(traj, mid)).as_tuple()
    out /= len(pairs)
    return AxisError(*map(float, out))


def mre(pairs: Sequence[MatchedPair], trajectory, pair_radius_m: float = DEFAULT_PAIR_RADIUS, gt_ids=None):
    """Signed mean relative error over unordered pairs whose truths lie within ``pair_radius_m``.

    Each pair (a, b) is oriented so that ``a`` has the smaller ground-truth id
    (index when ``gt_ids`` is not given); the relative error is
    (reported_a - reported_b) - (truth_a - truth_b) = error_a - error_b, decomposed
    with the heading nearest the midpoint of the two truths.
    Returns (AxisError or None, pair count).
    """
    if not pair_radius_m > 0:
        raise ValueError("pair_radius_m must be positive")
    if len(pairs) < 2:
        return None, 0
    traj = _trajectory_arrays(trajectory)
    key = [p.gt_index if gt_ids is None else gt_ids[p.gt_index] for p in pairs]
    ordered = [pairs[i] for i in np.argsort(key, kind="stable")]
    anchors = np.array([p.anchor for p in ordered])
    errors = np.array([p.error for p in ordered])
    total = np.zeros(3)
    count = 0
    for a in range(len(ordered)):
        d = np.linalg.norm(anchors[a + 1:] - anchors[a], axis=1)
        for off in np.flatnonzero(d <= pair_radius_m):
            b = a + 1 + int(off)
            mid = 0.5 * (anchors[a] + anchors[b])
            total += axis_decompose(errors[a] - errors[b], reference_heading(traj, mid)).as_tuple()
            count += 1
    if count == 0:
        return None, 0
    return AxisError(*map(float, total / count)), count


def trajectory_ate(estimate, ground_truth) -> dict:
    if len(estimate) != len(ground_truth):
        raise LengthMismatch(f"trajectory lengths differ: {len(estimate)} vs {len(ground_truth)}")
    a = _positions(estimate)
    b = _positions(ground_truth)
    if len(a) == 0:
        return {"rmse_m": 0.0, "max_m": 0.0}
    d = np.linalg.norm(a - b, axis=1)
    return {"rmse_m": float(np.sqrt(np.mean(d**2))), "max_m": float(np.max(d))}


def _positions(traj) -> np.ndarray:
    if len(traj) and isinstance(traj[0], Pose):
        return np.array([p.center for p in traj])
    return np.asarray(traj, dtype=float).reshape(-1, 3)


def evaluate(reported: Sequence[ReportedElement], ground_truth: Sequence[ReportedElement], trajectory,
             match_radius_m=None, pair_radius_m: float = DEFAULT_PAIR_RADIUS,
             polyline_cap_m: float = DEFAULT_POLYLINE_CAP, label: str = "") -> MetricReport:
    pairs, fp, fn = match_elements(reported, ground_truth, match_radius_m, polyline_cap_m, trajectory)
    gt_ids = [g.element_id if g.element_id is not None else i for i, g in enumerate(ground_truth)]
    report = MetricReport(label=label)
    for cat in Category:
        cp = [p for p in pairs if ground_truth[p.gt_index].category is cat]
        n_fp = sum(1 for i in fp if reported[i].category is cat)
        n_fn = sum(1 for i in fn if ground_truth[i].category is cat)
        if not cp and not n_fp and not n_fn:
            continue
        m = CategoryMetrics(tp=len(cp), fp=n_fp, fn=n_fn)
        m.recall = _ratio(m.tp, m.tp + m.fn)
        m.precision = _ratio(m.tp, m.tp + m.fp)
        m.mae = mae(cp, trajectory)
        m.mre, m.pair_count = mre(cp, trajectory, pair_radius_m, gt_ids)
        report.categories[cat] = m
    return report


def ground_truth_elements(world, poses: Sequence[Pose], intr: Intrinsics, detection_range_m: float = 60.0):
    """World elements whose reference point is in view within range from at least one pose."""
    if not world.elements:
        return []
    anchors = np.array([e.anchor for e in world.elements])
    seen = np.zeros(len(anchors), dtype=bool)
    for pose in poses:
        pc = anchors @ pose.rotation.T + pose.translation
        z = pc[:, 2]
        ok = (z > DEPTH_EPSILON) & (z <= detection_range_m)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = intr.fx * pc[:, 0] / z + intr.cx
            v = intr.fy * pc[:, 1] / z + intr.cy
        ok &= (u >= 0) & (u < intr.image_width) & (v >= 0) & (v < intr.image_height)
        seen |= ok
    out = []
    for e, s in zip(world.elements, seen):
        if s:
            pos = e.vertices if e.is_polyline else e.anchor
            out.append(ReportedElement(e.category, pos, e.element_id))
    return out


def _fmt(x, digits=2) -> str:
    return "-" if x is None else f"{x:.{digits}f}"


def format_table(reports: Sequence[MetricReport]) -> str:
    """Plain-text table: method x element x (recall, precision, MAE xyz, MRE xyz)."""
    head = ["Method", "Semantic element", "Recall(%)", "Precision(%)",
            "MAE lat", "MAE lon", "MAE alt", "MRE lat", "MRE lon", "MRE alt"]
    rows = []
    for rep in reports:
        for cat, m in rep.categories.items():
            mae_v = m.mae.as_tuple() if m.mae else (None,) * 3
            mre_v = m.mre.as_tuple() if m.mre else (None,) * 3
            rows.append([rep.label or "-", cat.value, _fmt(m.recall), _fmt(m.precision)]
                        + [_fmt(v, 3) for v in mae_v] + [_fmt(v, 3) for v in mre_v])
    widths = [max(len(str(r[i])) for r in [head] + rows) for i in range(len(head))]
    line = lambda r: "  ".join(str(v).ljust(w) if i < 2 else str(v).rjust(w) for i, (v, w) in enumerate(zip(r, widths)))
    sep = "-" * (sum(widths) + 2 * (len(widths) - 1))
    return "\n".join([line(head), sep] + [line(r) for r in rows]) + "\n"


def isclose_axis(a: AxisError | None, b: AxisError | None, tol: float = 1e-9) -> bool:
    if a is None or b is None:
        return a is b
    return all(math.isclose(x, y, abs_tol=tol) for x, y in zip(a.as_tuple(), b.as_tuple()))
