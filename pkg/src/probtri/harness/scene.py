"""Synthetic multi-camera scenes and simulated 2D observations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import (
    CameraPose,
    CameraRig,
    Intrinsics,
    SimilarityTransform,
    normalize_rig,
    project_rig,
    quat_from_rotvec,
    quat_multiply,
    rotmat_to_quat,
)
from ..heatmap import render_heatmaps

IMAGE_SIZE = 64
DEFAULT_INTRINSICS = Intrinsics(70.0, 70.0, 32.0, 32.0)
CAMERA_RADIUS = 3.0
SUBJECT_CUBE = 1.0


@dataclass(frozen=True, eq=False)
class SceneTruth:
    rig: CameraRig
    gauge: SimilarityTransform
    joints: np.ndarray  # (F, N, 3), original world frame
    scene_scale: float = SUBJECT_CUBE
    width: int = IMAGE_SIZE
    height: int = IMAGE_SIZE

    @property
    def num_frames(self) -> int:
        return self.joints.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joints.shape[1]

    def normalized_rig(self) -> CameraRig:
        return normalize_rig(self.rig)[0]

    def normalized_points(self) -> np.ndarray:
        """Landmarks in the normalized gauge, flattened to ``(F*N, 3)``."""
        return self.gauge.apply(self.joints.reshape(-1, 3))

    def transformed(self, g: SimilarityTransform) -> "SceneTruth":
        """The same scene expressed in a world frame moved by ``g``."""
        from ..geometry import transform_rig
        rig = transform_rig(self.rig, g)
        return SceneTruth(rig, normalize_rig(rig)[1], g.apply(self.joints), self.scene_scale * g.scale,
                          self.width, self.height)


@dataclass(frozen=True)
class NoiseModel:
    pixel_sigma: float = 0.0
    outlier_rate: float = 0.0
    heatmap_sigma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.pixel_sigma < 0 or not 0 <= self.outlier_rate <= 1 or self.heatmap_sigma <= 0:
            raise ValueError("invalid noise model")


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Pose of a camera at ``center`` whose optical axis points at ``target``."""
    c = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - c
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return CameraPose(rotmat_to_quat(R), -R @ c)


def gen_scene(num_cams: int = 4, num_joints: int = 17, num_frames: int = 20, seed: int = 0,
              intrinsics: Intrinsics = DEFAULT_INTRINSICS, width: int = IMAGE_SIZE,
              height: int = IMAGE_SIZE, margin: float = 2.0) -> SceneTruth:
    """Cameras on a circle of radius 3 looking at a subject moving inside a unit cube.

    Camera placements and joint trajectories are redrawn until every landmark
    projects at least ``margin`` pixels inside every image.
    """
    if num_cams < 2:
        raise ValueError("need at least two cameras")
    rng = np.random.default_rng(seed)
    half = 0.5 * SUBJECT_CUBE
    while True:
        phase = rng.uniform(0, 2 * np.pi)
        poses = []
        for k in range(num_cams):
            ang = phase + 2 * np.pi * k / num_cams + rng.uniform(-0.15, 0.15) * 2 * np.pi / num_cams
            center = np.array([CAMERA_RADIUS * np.cos(ang), CAMERA_RADIUS * np.sin(ang), rng.uniform(-0.5, 1.0)])
            base = look_at(center, rng.uniform(-0.1, 0.1, 3))
            jitter = quat_from_rotvec(rng.normal(0.0, np.deg2rad(2.0), 3))
            q = quat_multiply(jitter, base.rotation)
            poses.append(CameraPose(q, CameraPose(q).R @ -center))
        rig = CameraRig(poses, [intrinsics] * num_cams)
        base = rng.uniform(-0.85 * half, 0.85 * half, (num_joints, 3))
        steps = rng.normal(0.0, 0.02, (num_frames, 1, 3))
        steps[0] = 0.0
        drift = np.cumsum(steps, axis=0)
        wobble = rng.normal(0.0, 0.01, (num_frames, num_joints, 3))
        joints = np.clip(base[None] + drift + wobble, -half, half)
        uv, z = project_rig(rig, joints.reshape(-1, 3))
        if (np.all(z > 0.5) and np.all(uv >= margin) and np.all(uv[..., 0] <= width - 1 - margin)
                and np.all(uv[..., 1] <= height - 1 - margin)):
            break
    _, gauge = normalize_rig(rig)
    return SceneTruth(rig, gauge, joints, SUBJECT_CUBE, width, height)


def render_observations(scene: SceneTruth, noise: NoiseModel = NoiseModel(), intrinsics=None,
                        with_heatmaps: bool = True):
    """Noisy keypoints ``(K, F*N, 2)`` and, optionally, heatmaps ``(K, F*N, H, W)``.

    Each keypoint is the exact projection plus isotropic Gaussian noise; with
    probability ``outlier_rate`` it is replaced by a uniform point in the image.
    """
    rig = scene.rig
    if intrinsics is not None:
        rig = CameraRig(rig.poses, intrinsics)
    rng = np.random.default_rng(noise.seed)
    uv, _ = project_rig(rig, scene.joints.reshape(-1, 3))
    kp = uv + rng.normal(0.0, 1.0, uv.shape) * noise.pixel_sigma
    outlier = rng.random(uv.shape[:2]) < noise.outlier_rate
    junk = rng.uniform([0.0, 0.0], [scene.width - 1, scene.height - 1], uv.shape)
    kp = np.where(outlier[..., None], junk, kp)
    if not with_heatmaps:
        return kp, None
    return kp, render_heatmaps(kp, noise.heatmap_sigma, scene.width, scene.height)
