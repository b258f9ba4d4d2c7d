"""Classical calibration baselines: eight-point RANSAC and bundle adjustment.

Both return ``(rig, points)`` in the normalized gauge, with ``points`` one
3-vector per keypoint column.
"""

from __future__ import annotations

import numpy as np

from ..geometry import CameraPose, CameraRig, quat_from_rotvec
from ..inference import estimate_init_rig
from ..multiview import LmParams, RansacParams, bundle_adjust_lm, triangulate_points

NAIVE_ROT_SIGMA = 0.1
NAIVE_TRANS_SIGMA = 0.1
NAIVE_DEPTH = 1.0


def ransac8pt(keypoints, intrinsics, params: RansacParams = RansacParams()):
    """Pairwise eight-point RANSAC against view 0, then DLT over all views."""
    kp = np.asarray(keypoints, dtype=np.float64)
    rig = estimate_init_rig(kp, intrinsics, params)
    return rig, triangulate_points(rig, kp)


def naive_rig(num_cams: int, intrinsics, rng: np.random.Generator) -> CameraRig:
    """Nearly identical cameras: small random rotations, unit baseline along -x."""
    poses = [CameraPose.identity()]
    for k in range(1, num_cams):
        q = quat_from_rotvec(rng.normal(0.0, NAIVE_ROT_SIGMA, 3))
        t = np.array([-float(k), 0.0, 0.0]) + rng.normal(0.0, NAIVE_TRANS_SIGMA, 3)
        if k == 1:
            t /= np.linalg.norm(t)
        poses.append(CameraPose(q, t))
    return CameraRig(poses, tuple(intrinsics))


def _depth_points(rig: CameraRig, kp, depth: float) -> np.ndarray:
    """Back-project view-0 keypoints to a fixed depth."""
    n = rig.intrinsics[0].to_normalized(kp[0])
    return np.column_stack([n * depth, np.full(len(n), depth)])


def bundle_adjust(keypoints, intrinsics, *, init: str = "naive", seed: int = 0,
                  lm: LmParams = LmParams(max_iterations=50), ransac: RansacParams | None = None):
    """Plain least-squares bundle adjustment over every keypoint.

    ``init="naive"`` starts from :func:`naive_rig` with landmarks at a fixed
    depth in view 0; ``init="ransac"`` starts from :func:`ransac8pt`.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    if init == "naive":
        rig = naive_rig(len(kp), intrinsics, np.random.default_rng(seed))
        pts = _depth_points(rig, kp, NAIVE_DEPTH)
    elif init == "ransac":
        rig, pts = ransac8pt(kp, intrinsics, ransac or RansacParams(seed=seed))
        bad = ~np.all(np.isfinite(pts), axis=1)
        pts[bad] = _depth_points(rig, kp, NAIVE_DEPTH)[bad]
    else:
        raise ValueError(f"unknown initialization {init!r}")
    rig, pts, _ = bundle_adjust_lm(rig, kp, pts, lm)
    return rig, pts
