"""JSON-Lines and CSV helpers with bit-exact float round trips.

Floats are always written with 17 significant digits, independent of locale.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import IoError
from .geometry import Pose


def fmt_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialise non-finite float {x!r}")
    return format(x, ".17g")


def dumps(obj) -> str:
    """Compact, key-sorted JSON with 17-significant-digit floats."""
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    if isinstance(obj, dict):
        items = sorted(obj.items(), key=lambda kv: str(kv[0]))
        return "{" + ",".join(json.dumps(str(k)) + ":" + dumps(v) for k, v in items) + "}"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def pose_to_dict(pose: Pose) -> dict:
    return {"rotation": pose.rotation.reshape(-1).tolist(), "translation": pose.translation.tolist()}


def pose_from_dict(d: dict) -> Pose:
    return Pose(np.array(d["rotation"], dtype=float).reshape(3, 3), np.array(d["translation"], dtype=float))


def write_jsonl(path, records) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                fh.write(dumps(rec))
                fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoError(f"malformed JSON in {path}: {exc}") from exc


def write_json(path, obj) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(obj) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoError(f"malformed JSON in {path}: {exc}") from exc


TRAJECTORY_HEADER = ["frame_id", "timestamp", "tx", "ty", "tz"] + [f"r{i}{j}" for i in range(3) for j in range(3)]


def write_trajectory_csv(path, rows) -> None:
    """``rows``: iterable of (frame_id, timestamp, Pose). Stores the pose's own (R, t)."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_HEADER)
            for frame_id, ts, pose in rows:
                w.writerow(
                    [str(int(frame_id)), fmt_float(ts)]
                    + [fmt_float(v) for v in pose.translation]
                    + [fmt_float(v) for v in pose.rotation.reshape(-1)]
                )
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_trajectory_csv(path) -> list[tuple[int, float, Pose]]:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != TRAJECTORY_HEADER:
                raise IoError(f"unexpected trajectory header in {path}")
            out = []
            for row in reader:
                vals = [float(v) for v in row[1:]]
                out.append((int(row[0]), vals[0], Pose(np.array(vals[4:13]).reshape(3, 3), np.array(vals[1:4]))))
            return out
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
