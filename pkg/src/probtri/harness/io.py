"""On-disk formats: scene and result JSON, raw float32 heatmap stacks."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import DimensionMismatch
from ..geometry import CameraPose, CameraRig, Intrinsics, normalize_rig
from .scene import IMAGE_SIZE, SceneTruth

HEATMAP_DTYPE = np.dtype("<f4")


def rig_to_json(rig: CameraRig) -> list:
    return [
        {"quat": pose.rotation.tolist(), "t": pose.translation.tolist(),
         "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy}
        for pose, intr in zip(rig.poses, rig.intrinsics)
    ]


def rig_from_json(cameras: list) -> CameraRig:
    try:
        poses = [CameraPose(np.array(c["quat"], dtype=float), np.array(c["t"], dtype=float)) for c in cameras]
        intr = [Intrinsics(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"])) for c in cameras]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed camera entry: {exc}") from exc
    return CameraRig(poses, intr)


def dump_json(obj, path) -> None:
    """Write ``obj`` as indented JSON with a trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def scene_to_json(scene: SceneTruth) -> dict:
    return {
        "cameras": rig_to_json(scene.rig),
        "joints": scene.joints.tolist(),
        "scale": scene.scene_scale,
        "width": scene.width,
        "height": scene.height,
    }


def scene_from_json(data: dict) -> SceneTruth:
    rig = rig_from_json(data["cameras"])
    joints = np.array(data["joints"], dtype=np.float64)
    if joints.ndim != 3 or joints.shape[2] != 3:
        raise DimensionMismatch(f"joints must be frames x joints x 3, got shape {joints.shape}")
    _, gauge = normalize_rig(rig)
    return SceneTruth(rig, gauge, joints, float(data.get("scale", 1.0)),
                      int(data.get("width", IMAGE_SIZE)), int(data.get("height", IMAGE_SIZE)))


def save_scene(scene: SceneTruth, path) -> None:
    dump_json(scene_to_json(scene), path)


def load_scene(path) -> SceneTruth:
    return scene_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def result_to_json(rig: CameraRig, points, metrics=None, residual_history=(), config_echo=None) -> dict:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return {
        "map_rig": rig_to_json(rig),
        "points": [[None if not np.isfinite(v) else float(v) for v in p] for p in pts],
        "metrics": None if metrics is None else metrics.as_dict(),
        "residual_history": [float(r) for r in residual_history],
        "config_echo": config_echo or {},
    }


def load_result(path):
    """``(rig, points)`` from a result file; missing coordinates come back as NaN."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    pts = np.array([[np.nan if v is None else v for v in p] for p in data["points"]], dtype=np.float64)
    return rig_from_json(data["map_rig"]), pts.reshape(-1, 3)


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_heatmaps(heatmaps, path) -> None:
    """Raw little-endian float32 stack ``(views, joints, height, width)`` plus a JSON sidecar."""
    hm = np.asarray(heatmaps)
    if hm.ndim != 4:
        raise DimensionMismatch(f"heatmaps must be 4-D, got shape {hm.shape}")
    views, joints, height, width = hm.shape
    Path(path).write_bytes(np.ascontiguousarray(hm, dtype=HEATMAP_DTYPE).tobytes())
    dump_json({"views": views, "joints": joints, "width": width, "height": height}, _sidecar(path))


def read_heatmaps(path) -> np.ndarray:
    meta = json.loads(_sidecar(path).read_text(encoding="utf-8"))
    shape = (int(meta["views"]), int(meta["joints"]), int(meta["height"]), int(meta["width"]))
    raw = np.frombuffer(Path(path).read_bytes(), dtype=HEATMAP_DTYPE)
    if raw.size != np.prod(shape):
        raise DimensionMismatch(f"heatmap file holds {raw.size} values, sidecar promises {shape}")
    return raw.reshape(shape).astype(np.float64)
