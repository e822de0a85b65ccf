"""World -> geographic rigid alignment from library frames near the vehicle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateConfiguration, InsufficientPoints
from .semlib import BenchmarkLibrary

DEFAULT_N_FRAMES = 8


@dataclass(frozen=True)
class Correspondence:
    p: np.ndarray  # world
    d: np.ndarray  # geographic (ENU)


@dataclass(frozen=True, eq=False)
class GeoTransform:
    rotation: np.ndarray
    translation: np.ndarray
    rms_residual: float
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "rotation": np.asarray(self.rotation).reshape(-1).tolist(),
            "translation": np.asarray(self.translation).tolist(),
            "rms": float(self.rms_residual),
            "n": int(self.n),
        }

    def is_suspicious(self, noise_expectation: float) -> bool:
        """True when the fit residual exceeds 3x the expected correspondence noise."""
        return self.rms_residual > 3.0 * noise_expectation


def _as_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    P = np.array([np.asarray(c.p, dtype=float) for c in pairs]).reshape(-1, 3)
    D = np.array([np.asarray(c.d, dtype=float) for c in pairs]).reshape(-1, 3)
    return P, D


def solve_rigid_alignment(pairs: Sequence[Correspondence]) -> GeoTransform:
    """Least-squares R, t with d ~ R p + t (no scale), via SVD of the cross-covariance."""
    return fit_rigid(*_as_arrays(pairs))


def fit_rigid(P, D) -> GeoTransform:
    """``solve_rigid_alignment`` on (n, 3) arrays of world and geographic points."""
    P, D = np.asarray(P, dtype=float), np.asarray(D, dtype=float)
    if len(P) < 3:
        raise InsufficientPoints(f"need at least 3 correspondences, got {len(P)}")
    mu_p = P.mean(axis=0)
    mu_d = D.mean(axis=0)
    Pc = P - mu_p
    Dc = D - mu_d
    sv = np.linalg.svd(Pc.T @ Pc, compute_uv=False)
    # two vanishing directions = collinear or coincident points
    if sv[0] == 0.0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("world points are collinear or coincident")
    H = Pc.T @ Dc
    U, _, Vt = np.linalg.svd(H)
    s = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, s if s != 0 else 1.0]) @ U.T
    t = mu_d - R @ mu_p
    res = D - (P @ R.T + t)
    # per coordinate, so it compares directly with a per-axis noise sigma
    rms = float(np.sqrt(np.mean(res**2)))
    return GeoTransform(R, t, rms, len(P))


def alignment_cost(tf_rotation, tf_translation, pairs) -> float:
    P, D = _as_arrays(pairs)
    res = D - (P @ np.asarray(tf_rotation).T + np.asarray(tf_translation))
    return 0.5 * float(np.sum(res**2))


def to_geographic(tf: GeoTransform, o_w) -> np.ndarray:
    return tf.rotation @ np.asarray(o_w, dtype=float) + tf.translation


def select_nearest_frames(lib: BenchmarkLibrary, o_w, n: int = DEFAULT_N_FRAMES) -> list[Correspondence]:
    if n < 3:
        raise ValueError("n must be at least 3")
    if len(lib) < n:
        raise InsufficientPoints(f"library has {len(lib)} frames, {n} requested")
    return [Correspondence(lib.centers[i].copy(), lib.geos[i].copy()) for i in nearest_frame_indices(lib, o_w, n)]


def nearest_frame_indices(lib: BenchmarkLibrary, o_w, n: int) -> np.ndarray:
    """Row indices of the ``n`` library frames nearest ``o_w``, ties broken by frame id."""
    d = np.linalg.norm(lib.centers - np.asarray(o_w, dtype=float), axis=1)
    n = min(n, len(d))
    if n == 0:
        return np.zeros(0, dtype=int)
    # only frames no farther than the n-th distance can make the cut
    cut = np.partition(d, n - 1)[n - 1]
    sub = np.flatnonzero(d <= cut)
    return sub[np.lexsort((lib.ids[sub], d[sub]))][:n]
