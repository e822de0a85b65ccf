"""Joint robust optimization of keyframe poses and map points.

The objective is

    sum_obs  rho  (r_p^T Sigma^-1     r_p)      r_p = z - project(R (P - s) + t)
  + sum_kf   rho_s(r_s^T Sigma_sem^-1 r_s)      r_s = anchor - camera_center

where ``s`` is an optional per-observation point shift (used for rolling-shutter
motion compensation, zero otherwise). It is minimised with Levenberg-Marquardt
and IRLS weights from the robust kernels. Poses are updated on the right,
``T <- T * Exp(delta)`` with delta ordered (rotation, translation).

Linear solve: free map points are eliminated with a Schur complement (their
blocks are 3x3 diagonal), and the reduced camera system is factorised with a
dense Cholesky. All reductions run in factor order (observations in keyframe
order, then anchors) so results are bitwise reproducible.
"""

from __future__ import annotations

import copy
import enum
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import ConfigError, GaugeUnconstrained, IoError, NonPositiveDepth, NumericalFailure, UnknownKeyframe
from .geometry import DEPTH_EPSILON, Intrinsics, Pose, hat, hat_batch, project, se3_exp, se3_exp_batch, transform_point
from .io import pose_from_dict, pose_to_dict, read_jsonl, write_jsonl

log = logging.getLogger(__name__)


class NoiseModel:
    """Gaussian noise with whitening ``r -> L^-1 r`` where ``Sigma = L L^T``."""

    def __init__(self, covariance):
        cov = np.array(covariance, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("covariance must be square")
        if np.max(np.abs(cov - cov.T)) > 1e-12:
            raise ValueError("covariance must be symmetric")
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        self.covariance = cov
        self.sqrt_information = scipy.linalg.solve_triangular(L, np.eye(len(cov)), lower=True)

    @classmethod
    def diagonal(cls, variances) -> NoiseModel:
        return cls(np.diag(np.asarray(variances, dtype=float)))

    @property
    def dim(self) -> int:
        return len(self.covariance)

    def squared_norm(self, r) -> float:
        w = self.sqrt_information @ np.asarray(r, dtype=float)
        return float(w @ w)


class KernelKind(str, enum.Enum):
    NONE = "none"
    HUBER = "huber"


@dataclass(frozen=True)
class RobustKernel:
    kind: KernelKind = KernelKind.NONE
    parameter: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if self.kind is KernelKind.HUBER and not self.parameter > 0:
            raise ValueError("Huber parameter must be positive")

    @classmethod
    def huber(cls, k: float) -> RobustKernel:
        return cls(KernelKind.HUBER, k)


def robust_cost(kernel: RobustKernel, squared_whitened_norm):
    """(cost, IRLS weight) for a squared whitened residual norm; works elementwise on arrays."""
    s = np.asarray(squared_whitened_norm, dtype=float)
    if np.any(s < 0):
        raise ValueError("squared norm must be non-negative")
    if kernel.kind is KernelKind.NONE:
        cost, weight = s, np.ones_like(s)
    else:
        k = kernel.parameter
        outlier = s > k * k
        root = np.sqrt(np.where(outlier, s, 1.0))
        cost = np.where(outlier, 2.0 * k * root - k * k, s)
        weight = np.where(outlier, k / root, 1.0)
    if cost.ndim == 0:
        return float(cost), float(weight)
    return cost, weight


def reprojection_residual(kf_pose: Pose, point, obs, intr: Intrinsics) -> np.ndarray:
    """``z - project(R P + t)``; raises NonPositiveDepth for points at or behind the camera."""
    return np.asarray(obs, dtype=float) - project(intr, transform_point(kf_pose, point))


def reprojection_jacobians(kf_pose: Pose, point, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of the reprojection residual w.r.t. the pose twist (2x6) and the point (2x3)."""
    X = np.asarray(point, dtype=float)
    R = kf_pose.rotation
    pc = R @ X + kf_pose.translation
    if not pc[2] > DEPTH_EPSILON:
        raise NonPositiveDepth(f"depth {pc[2]!r}")
    x, y, z = pc
    Jpi = np.array([[intr.fx / z, 0.0, -intr.fx * x / z**2], [0.0, intr.fy / z, -intr.fy * y / z**2]])
    J_pose = -Jpi @ np.hstack([-R @ hat(X), R])
    J_point = -Jpi @ R
    return J_pose, J_point


def semantic_residual(kf_translation, anchor) -> np.ndarray:
    """Anchor minus keyframe position (both camera centers in world coordinates)."""
    return np.asarray(anchor, dtype=float) - np.asarray(kf_translation, dtype=float)


def semantic_jacobian(kf_pose: Pose) -> np.ndarray:
    """Jacobian (3x6) of ``anchor - center(T Exp(delta))`` at delta = 0."""
    c = kf_pose.center
    return np.hstack([-hat(c), np.eye(3)])


def pose_update(pose: Pose, delta) -> Pose:
    delta = np.asarray(delta, dtype=float)
    if not np.all(np.isfinite(delta)):
        raise ValueError("non-finite pose increment")
    if not np.any(delta):
        return pose
    inc = se3_exp(delta)
    return Pose(pose.rotation @ inc.rotation, pose.rotation @ inc.translation + pose.translation)


@dataclass
class Observation:
    point_id: int
    pixel: np.ndarray
    shift: np.ndarray | None = None

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)
        if self.shift is not None:
            self.shift = np.asarray(self.shift, dtype=float).reshape(3)


@dataclass
class SemanticAnchor:
    translation: np.ndarray
    noise: NoiseModel | None = None  # falls back to the graph's anchor noise

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)


@dataclass
class Keyframe:
    id: int
    pose: Pose
    observations: list[Observation] = field(default_factory=list)
    semantic_anchor: SemanticAnchor | None = None
    fixed: bool = False


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    fixed: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)


DEFAULT_PIXEL_NOISE = (1.0, 1.0)
DEFAULT_ANCHOR_NOISE = (0.25, 0.25, 1.0)


@dataclass
class FactorGraph:
    intrinsics: Intrinsics
    keyframes: dict[int, Keyframe] = field(default_factory=dict)
    map_points: dict[int, MapPoint] = field(default_factory=dict)
    pixel_noise: NoiseModel = field(default_factory=lambda: NoiseModel.diagonal(DEFAULT_PIXEL_NOISE))
    anchor_noise: NoiseModel = field(default_factory=lambda: NoiseModel.diagonal(DEFAULT_ANCHOR_NOISE))
    pixel_kernel: RobustKernel = field(default_factory=lambda: RobustKernel.huber(2.0))
    anchor_kernel: RobustKernel = field(default_factory=lambda: RobustKernel.huber(1.0))

    def add_keyframe(self, kf: Keyframe) -> Keyframe:
        self.keyframes[kf.id] = kf
        return kf

    def add_map_point(self, mp: MapPoint) -> MapPoint:
        self.map_points[mp.id] = mp
        return mp

    def copy(self) -> FactorGraph:
        return copy.deepcopy(self)

    @property
    def n_reprojection_factors(self) -> int:
        return sum(len(kf.observations) for kf in self.keyframes.values())

    @property
    def n_anchor_factors(self) -> int:
        return sum(kf.semantic_anchor is not None for kf in self.keyframes.values())

    def check(self) -> None:
        for kf in self.keyframes.values():
            for ob in kf.observations:
                if ob.point_id not in self.map_points:
                    raise KeyError(f"keyframe {kf.id} observes unknown map point {ob.point_id}")
        if not self.gauge_constrained():
            raise GaugeUnconstrained("fix a keyframe or add a semantic anchor before solving")

    def gauge_constrained(self) -> bool:
        return any(kf.fixed or kf.semantic_anchor is not None for kf in self.keyframes.values())


class Termination(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    DIVERGED = "Diverged"


@dataclass
class SolverConfig:
    max_iterations: int = 50
    initial_damping: float = 1e-4
    damping_up_factor: float = 10.0
    damping_down_factor: float = 10.0
    relative_decrease_tol: float = 1e-10
    parameter_tol: float = 1e-12
    max_damping: float = 1e12
    max_damping_retries: int = 20


@dataclass
class OptResult:
    objective: float
    history: list[float]
    iterations: int
    termination: Termination
    poses: dict[int, Pose]
    points: dict[int, np.ndarray]
    depth_failures: int = 0


class _Problem:
    """Flattened view of a factor graph used by the solver."""

    def __init__(self, graph: FactorGraph):
        self.graph = graph
        self.intr = graph.intrinsics
        self.kf_ids = list(graph.keyframes)
        self.pt_ids = list(graph.map_points)
        kf_index = {k: i for i, k in enumerate(self.kf_ids)}
        pt_index = {p: i for i, p in enumerate(self.pt_ids)}

        obs_kf, obs_pt, obs_uv, obs_shift = [], [], [], []
        anc_kf, anc_t, anc_S = [], [], []
        for k in self.kf_ids:
            kf = graph.keyframes[k]
            for ob in kf.observations:
                obs_kf.append(kf_index[k])
                obs_pt.append(pt_index[ob.point_id])
                obs_uv.append(ob.pixel)
                obs_shift.append(np.zeros(3) if ob.shift is None else ob.shift)
            if kf.semantic_anchor is not None:
                noise = kf.semantic_anchor.noise or graph.anchor_noise
                anc_kf.append(kf_index[k])
                anc_t.append(kf.semantic_anchor.translation)
                anc_S.append(noise.sqrt_information)
        self.obs_kf = np.array(obs_kf, dtype=int)
        self.obs_pt = np.array(obs_pt, dtype=int)
        self.obs_uv = np.array(obs_uv, dtype=float).reshape(-1, 2)
        self.obs_shift = np.array(obs_shift, dtype=float).reshape(-1, 3)
        self.anc_kf = np.array(anc_kf, dtype=int)
        self.anc_t = np.array(anc_t, dtype=float).reshape(-1, 3)
        self.anc_S = np.array(anc_S, dtype=float).reshape(-1, 3, 3)
        self.S_pix = graph.pixel_noise.sqrt_information

        kf_free = np.array([not graph.keyframes[k].fixed for k in self.kf_ids], dtype=bool)
        pt_free = np.array([not graph.map_points[p].fixed for p in self.pt_ids], dtype=bool)
        self.kf_var = np.full(len(self.kf_ids), -1, dtype=int)
        self.kf_var[kf_free] = np.arange(int(kf_free.sum()))
        self.pt_var = np.full(len(self.pt_ids), -1, dtype=int)
        self.pt_var[pt_free] = np.arange(int(pt_free.sum()))
        self.n_pose_vars = int(kf_free.sum())
        self.n_point_vars = int(pt_free.sum())

    def state(self):
        g = self.graph
        Rs = np.array([g.keyframes[k].pose.rotation for k in self.kf_ids]).reshape(-1, 3, 3)
        ts = np.array([g.keyframes[k].pose.translation for k in self.kf_ids]).reshape(-1, 3)
        X = np.array([g.map_points[p].position for p in self.pt_ids]).reshape(-1, 3)
        return Rs, ts, X

    def residuals(self, Rs, ts, X):
        """Whitened residuals, robust costs and weights for every factor."""
        intr = self.intr
        Xs = X[self.obs_pt] - self.obs_shift
        pc = (Rs[self.obs_kf] @ (Xs)[:, :, None])[:, :, 0] + ts[self.obs_kf]
        valid = pc[:, 2] > DEPTH_EPSILON
        z = np.where(valid, pc[:, 2], 1.0)
        pred = np.column_stack([intr.fx * pc[:, 0] / z + intr.cx, intr.fy * pc[:, 1] / z + intr.cy])
        r = self.obs_uv - pred
        rw = r @ self.S_pix.T
        s = np.where(valid, np.sum(rw * rw, axis=1), 0.0)
        cost, weight = robust_cost(self.graph.pixel_kernel, s)
        cost = np.where(valid, cost, 0.0)

        centers = -(Rs[self.anc_kf].transpose(0, 2, 1) @ (ts[self.anc_kf])[:, :, None])[:, :, 0]
        ra = self.anc_t - centers
        raw = (self.anc_S @ (ra)[:, :, None])[:, :, 0]
        sa = np.sum(raw * raw, axis=1)
        cost_a, weight_a = robust_cost(self.graph.anchor_kernel, sa)
        return dict(
            pc=pc, Xs=Xs, valid=valid, rw=rw, cost=np.atleast_1d(cost), weight=np.atleast_1d(weight),
            centers=centers, raw=raw, cost_a=np.atleast_1d(cost_a), weight_a=np.atleast_1d(weight_a),
        )

    @staticmethod
    def total(ev) -> float:
        return float(np.sum(ev["cost"]) + np.sum(ev["cost_a"]))

    def normal_equations(self, Rs, ev):
        intr = self.intr
        nP, nX = self.n_pose_vars, self.n_point_vars
        valid = ev["valid"]
        pc, Xs = ev["pc"][valid], ev["Xs"][valid]
        kf, pt = self.obs_kf[valid], self.obs_pt[valid]
        sw = np.sqrt(ev["weight"][valid])
        R = Rs[kf]
        x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
        Jpi = np.zeros((len(pc), 2, 3))
        Jpi[:, 0, 0] = intr.fx / z
        Jpi[:, 0, 2] = -intr.fx * x / z**2
        Jpi[:, 1, 1] = intr.fy / z
        Jpi[:, 1, 2] = -intr.fy * y / z**2
        SJ = -(self.S_pix @ Jpi) * sw[:, None, None]
        Jx = SJ @ R
        Jphi = -(Jx @ hat_batch(Xs))
        Jp = np.concatenate([Jphi, Jx], axis=2)
        r = ev["rw"][valid] * sw[:, None]

        pv = self.kf_var[kf]
        xv = self.pt_var[pt]
        mp = pv >= 0
        mx = xv >= 0
        JpT, JxT = Jp.transpose(0, 2, 1), Jx.transpose(0, 2, 1)
        Hpp = _block_sum((nP, 6, nP, 6), pv[mp], pv[mp], JpT[mp] @ Jp[mp])
        gp = _row_sum((nP, 6), pv[mp], (JpT[mp] @ r[mp][:, :, None])[:, :, 0])
        Hxx = _block_sum((nX, 3, 1, 3), xv[mx], np.zeros(int(mx.sum()), dtype=int), JxT[mx] @ Jx[mx]).reshape(nX, 3, 3)
        gx = _row_sum((nX, 3), xv[mx], (JxT[mx] @ r[mx][:, :, None])[:, :, 0])
        both = mp & mx
        Hpx = _block_sum((nP, 6, nX, 3), pv[both], xv[both], JpT[both] @ Jx[both])

        if len(self.anc_kf):
            av = self.kf_var[self.anc_kf]
            ma = av >= 0
            swa = np.sqrt(ev["weight_a"])[ma]
            Ja = np.concatenate([-hat_batch(ev["centers"][ma]), np.broadcast_to(np.eye(3), (int(ma.sum()), 3, 3))], axis=2)
            Ja = (self.anc_S[ma] @ Ja) * swa[:, None, None]
            ra = ev["raw"][ma] * swa[:, None]
            JaT = Ja.transpose(0, 2, 1)
            Hpp += _block_sum((nP, 6, nP, 6), av[ma], av[ma], JaT @ Ja)
            gp += _row_sum((nP, 6), av[ma], (JaT @ ra[:, :, None])[:, :, 0])
        return Hpp.reshape(6 * nP, 6 * nP), gp.reshape(-1), Hxx, gx, Hpx.reshape(6 * nP, 3 * nX)

    def solve_step(self, system, lam: float):
        Hpp, gp, Hxx, gx, Hpx = system
        nP, nX = self.n_pose_vars, self.n_point_vars
        dp = np.diag(Hpp)
        A = Hpp + lam * np.diag(np.clip(dp, 1e-6, 1e32))
        dX = np.clip(np.diagonal(Hxx, axis1=1, axis2=2), 1e-6, 1e32)
        B = Hxx + lam * dX[:, :, None] * np.eye(3)
        if nX:
            Binv = np.linalg.inv(B)
            Binv_gx = (Binv @ (gx)[:, :, None])[:, :, 0].reshape(-1)
            Hpx_b = Hpx.reshape(6 * nP, nX, 3)
            W = (Hpx_b.transpose(1, 0, 2) @ Binv).transpose(1, 0, 2).reshape(6 * nP, 3 * nX)
            Sred = A - W @ Hpx.T
            rhs = -gp + Hpx @ Binv_gx
        else:
            Sred, rhs = A, -gp
        if nP:
            Sred = 0.5 * (Sred + Sred.T)
            c = scipy.linalg.cho_factor(Sred, lower=True, check_finite=True)
            delta_p = scipy.linalg.cho_solve(c, rhs)
        else:
            delta_p = np.zeros(0)
        if nX:
            tmp = (-gx.reshape(-1) - Hpx.T @ delta_p).reshape(nX, 3)
            delta_x = (Binv @ (tmp)[:, :, None])[:, :, 0]
        else:
            delta_x = np.zeros((0, 3))
        return delta_p.reshape(nP, 6), delta_x

    def apply(self, Rs, ts, X, delta_p, delta_x):
        if not (np.all(np.isfinite(delta_p)) and np.all(np.isfinite(delta_x))):
            raise ValueError("non-finite increment")
        Rs2, ts2, X2 = Rs.copy(), ts.copy(), X.copy()
        free = np.flatnonzero(self.kf_var >= 0)
        if free.size:
            dR, dt = se3_exp_batch(delta_p[self.kf_var[free]])
            # right perturbation: T Exp(delta)
            Rs2[free] = Rs[free] @ dR
            ts2[free] = (Rs[free] @ dt[:, :, None])[:, :, 0] + ts[free]
        m = self.pt_var >= 0
        X2[m] = X[m] + delta_x[self.pt_var[m]]
        return Rs2, ts2, X2


def _block_sum(shape, rows, cols, vals) -> np.ndarray:
    """Sum of (n, a, b) blocks into an (nA, a, nB, b) array at block (rows[i], cols[i]).

    bincount of an empty input is integer-typed even with weights, hence the cast.
    """
    nA, a, nB, b = shape
    flat = ((rows[:, None, None] * a + np.arange(a)[:, None]) * nB + cols[:, None, None]) * b + np.arange(b)
    return np.bincount(flat.ravel(), weights=vals.ravel(), minlength=nA * a * nB * b).astype(float).reshape(shape)


def _row_sum(shape, rows, vals) -> np.ndarray:
    n, a = shape
    flat = rows[:, None] * a + np.arange(a)
    return np.bincount(flat.ravel(), weights=vals.ravel(), minlength=n * a).astype(float).reshape(shape)


def objective_details(graph: FactorGraph) -> tuple[float, int]:
    """(objective value, number of reprojection factors skipped for non-positive depth)."""
    if not graph.gauge_constrained():
        raise GaugeUnconstrained("fix a keyframe or add a semantic anchor")
    prob = _Problem(graph)
    ev = prob.residuals(*prob.state())
    return prob.total(ev), int(np.sum(~ev["valid"]))


def objective(graph: FactorGraph) -> float:
    return objective_details(graph)[0]


def solve(graph: FactorGraph, cfg: SolverConfig | None = None) -> OptResult:
    """Levenberg-Marquardt with IRLS weights. ``graph`` is updated in place with the result."""
    cfg = cfg or SolverConfig()
    graph.check()
    prob = _Problem(graph)
    Rs, ts, X = prob.state()
    ev = prob.residuals(Rs, ts, X)
    f = prob.total(ev)
    history = [f]
    if not np.isfinite(f):
        return _finish(graph, prob, Rs, ts, X, f, history, 0, Termination.DIVERGED, ev)
    lam = cfg.initial_damping
    termination = Termination.MAX_ITERATIONS
    it = 0
    if f == 0.0 or (prob.n_pose_vars == 0 and prob.n_point_vars == 0):
        return _finish(graph, prob, Rs, ts, X, f, history, 0, Termination.CONVERGED, ev)
    while it < cfg.max_iterations:
        it += 1
        system = prob.normal_equations(Rs, ev)
        accepted = False
        for _ in range(cfg.max_damping_retries):
            try:
                dp, dx = prob.solve_step(system, lam)
            except (np.linalg.LinAlgError, ValueError):
                lam *= cfg.damping_up_factor
                if lam > cfg.max_damping:
                    raise NumericalFailure("normal equations not factorisable at maximum damping")
                continue
            step_norm = float(np.sqrt(np.sum(dp**2) + np.sum(dx**2)))
            Rs2, ts2, X2 = prob.apply(Rs, ts, X, dp, dx)
            ev2 = prob.residuals(Rs2, ts2, X2)
            f2 = prob.total(ev2)
            if np.isfinite(f2) and f2 < f:
                accepted = True
                rel = (f - f2) / f
                Rs, ts, X, ev, f = Rs2, ts2, X2, ev2, f2
                history.append(f)
                lam = max(lam / cfg.damping_down_factor, 1e-15)
                break
            if step_norm < cfg.parameter_tol:
                break
            lam *= cfg.damping_up_factor
            if lam > cfg.max_damping:
                break
        if not accepted:
            termination = Termination.CONVERGED
            break
        if f == 0.0 or rel < cfg.relative_decrease_tol or step_norm < cfg.parameter_tol:
            termination = Termination.CONVERGED
            break
    log.debug("solve: %d iterations, objective %.6g -> %.6g (%s)", it, history[0], f, termination.value)
    return _finish(graph, prob, Rs, ts, X, f, history, it, termination, ev)


def _finish(graph, prob, Rs, ts, X, f, history, it, termination, ev) -> OptResult:
    poses = {}
    for i, k in enumerate(prob.kf_ids):
        pose = Pose(Rs[i], ts[i])
        graph.keyframes[k].pose = pose
        poses[k] = pose
    points = {}
    for i, p in enumerate(prob.pt_ids):
        graph.map_points[p].position = X[i].copy()
        points[p] = X[i].copy()
    return OptResult(f, history, it, termination, poses, points, int(np.sum(~ev["valid"])))


def reprojection_rmse(graph: FactorGraph) -> float:
    """RMS of the raw (unwhitened) reprojection error over in-front observations, per axis."""
    prob = _Problem(graph)
    ev = prob.residuals(*prob.state())
    r = np.linalg.solve(prob.S_pix, ev["rw"][ev["valid"]].T).T
    if len(r) == 0:
        return 0.0
    return float(np.sqrt(np.mean(r**2)))


def apply_reinitialization(graph: FactorGraph, kf_id: int, anchor_pose: Pose) -> FactorGraph:
    """Return a copy with ``kf_id`` moved to ``anchor_pose`` and fixed, and all earlier keyframes dropped."""
    if kf_id not in graph.keyframes:
        raise UnknownKeyframe(kf_id)
    out = graph.copy()
    out.keyframes = {k: kf for k, kf in out.keyframes.items() if k >= kf_id}
    kf = out.keyframes[kf_id]
    kf.pose = anchor_pose
    kf.fixed = True
    used = {ob.point_id for kf in out.keyframes.values() for ob in kf.observations}
    out.map_points = {p: mp for p, mp in out.map_points.items() if p in used}
    return out


def save_graph(graph: FactorGraph, path) -> None:
    intr = graph.intrinsics
    recs = [
        {
            "kind": "camera",
            "intrinsics": {f.name: getattr(intr, f.name) for f in fields(intr)},
            "pixel_covariance": graph.pixel_noise.covariance.tolist(),
            "anchor_covariance": graph.anchor_noise.covariance.tolist(),
            "pixel_kernel": [graph.pixel_kernel.kind.value, graph.pixel_kernel.parameter],
            "anchor_kernel": [graph.anchor_kernel.kind.value, graph.anchor_kernel.parameter],
        }
    ]
    for mp in graph.map_points.values():
        recs.append({"kind": "map_point", "id": mp.id, "position": mp.position.tolist(), "fixed": mp.fixed})
    for kf in graph.keyframes.values():
        recs.append(
            {
                "kind": "keyframe",
                "id": kf.id,
                "pose": pose_to_dict(kf.pose),
                "fixed": kf.fixed,
                "observations": [
                    [ob.point_id, ob.pixel.tolist(), None if ob.shift is None else ob.shift.tolist()]
                    for ob in kf.observations
                ],
            }
        )
        if kf.semantic_anchor is not None:
            a = kf.semantic_anchor
            recs.append(
                {
                    "kind": "anchor",
                    "keyframe_id": kf.id,
                    "translation": a.translation.tolist(),
                    "covariance": None if a.noise is None else a.noise.covariance.tolist(),
                }
            )
    write_jsonl(path, recs)


def load_graph(path) -> FactorGraph:
    recs = read_jsonl(path)
    cams = [r for r in recs if r["kind"] == "camera"]
    if len(cams) != 1:
        raise IoError(f"{path}: expected exactly one camera record")
    cam = cams[0]
    g = FactorGraph(
        Intrinsics(**cam["intrinsics"]),
        pixel_noise=NoiseModel(cam["pixel_covariance"]),
        anchor_noise=NoiseModel(cam["anchor_covariance"]),
        pixel_kernel=RobustKernel(*cam["pixel_kernel"]),
        anchor_kernel=RobustKernel(*cam["anchor_kernel"]),
    )
    for r in recs:
        if r["kind"] == "map_point":
            g.add_map_point(MapPoint(r["id"], r["position"], r["fixed"]))
        elif r["kind"] == "keyframe":
            obs = [Observation(pid, uv, shift) for pid, uv, shift in r["observations"]]
            g.add_keyframe(Keyframe(r["id"], pose_from_dict(r["pose"]), obs, None, r["fixed"]))
    for r in recs:
        if r["kind"] == "anchor":
            noise = None if r["covariance"] is None else NoiseModel(r["covariance"])
            g.keyframes[r["keyframe_id"]].semantic_anchor = SemanticAnchor(r["translation"], noise)
        elif r["kind"] not in ("camera", "map_point", "keyframe"):
            raise IoError(f"{path}: unknown record kind {r['kind']!r}")
    return g


def load_solver_config(path) -> SolverConfig:
    """Read a flat ``key = value`` file; unknown keys are rejected."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read solver config {path}: {exc}") from exc
    types = {f.name: f.type for f in fields(SolverConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = int(val) if types[key] in ("int", int) else float(val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {val!r}") from exc
    return SolverConfig(**values)


def dump_solver_config(cfg: SolverConfig, path) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)!r}" for f in fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
