"""Calibration and reconstruction error metrics, computed in the normalized gauge."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import DimensionMismatch
from ..geometry import CameraRig, project_rig, quat_distance
from .scene import SceneTruth


@dataclass(frozen=True)
class MetricsReport:
    e3d: float
    e2d: float
    er: float
    et: float

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def failed(cls) -> "MetricsReport":
        """Report for a method that produced no estimate."""
        inf = float("inf")
        return cls(inf, inf, inf, inf)


def rotation_error(est: CameraRig, gt: CameraRig) -> float:
    return float(np.mean(quat_distance(est.rotations, gt.rotations)))


def translation_error(est: CameraRig, gt: CameraRig) -> float:
    return float(np.mean(np.linalg.norm(est.translations - gt.translations, axis=1)))


def evaluate(est_rig: CameraRig, est_points, scene: SceneTruth) -> MetricsReport:
    """Errors of an estimate expressed in the normalized frame of ``scene``.

    ``est_points`` holds one 3-vector per landmark, frames flattened, in the
    same order as ``scene.joints.reshape(-1, 3)``. The 2D error reprojects the
    estimated landmarks through the ground-truth rig.
    """
    gt_rig = scene.normalized_rig()
    gt_pts = scene.normalized_points()
    pts = np.asarray(est_points, dtype=np.float64)
    if len(est_rig) != len(gt_rig):
        raise DimensionMismatch(f"estimate has {len(est_rig)} cameras, scene has {len(gt_rig)}")
    if pts.size != gt_pts.size:
        raise DimensionMismatch(f"estimate has {pts.size // 3} landmarks, scene has {len(gt_pts)}")
    pts = pts.reshape(gt_pts.shape)
    uv_est, _ = project_rig(gt_rig, pts)
    uv_gt, _ = project_rig(gt_rig, gt_pts)
    return MetricsReport(
        e3d=float(np.mean(np.linalg.norm(pts - gt_pts, axis=1))),
        e2d=float(np.mean(np.linalg.norm(uv_est - uv_gt, axis=-1))),
        er=rotation_error(est_rig, gt_rig),
        et=translation_error(est_rig, gt_rig),
    )
