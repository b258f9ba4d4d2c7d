"""Quaternion algebra, pinhole projection and gauge normalization of camera rigs.

Conventions used throughout the package:

* quaternions are ``[w, x, y, z]`` numpy arrays of unit norm;
* a pose maps world points into the camera frame as ``x_cam = R(q) @ p + t``;
* pixels are ``(u, v)`` with ``u`` along image columns and ``v`` along rows,
  pixel centers sit at integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DegenerateRig, NotARotation

DEPTH_EPS = 1e-6


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------

def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("zero-norm quaternion")
    return q / n


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (broadcasts over leading axes)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_rotvec(v) -> np.ndarray:
    """Unit quaternion of a rotation vector (axis times angle in radians)."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x)/x series for tiny angles
    k = np.where(theta > 1e-8, np.sin(half) / np.where(theta > 1e-8, theta, 1.0), 0.5 - theta**2 / 48.0)
    return np.concatenate([np.cos(half), k * v], axis=-1)


def rotvec_from_quat(q) -> np.ndarray:
    q = normalize_quat(q)
    q = np.where(q[..., :1] < 0, -q, q)
    s = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., :1])
    k = np.where(s > 1e-12, angle / np.where(s > 1e-12, s, 1.0), 2.0)
    return k * q[..., 1:]


def random_quaternion(rng: np.random.Generator, size=None) -> np.ndarray:
    """Uniformly distributed unit quaternions (normalized 4D Gaussians)."""
    shape = (4,) if size is None else (*np.atleast_1d(size), 4)
    return normalize_quat(rng.standard_normal(shape))


def quat_to_rotmat(q) -> np.ndarray:
    q = normalize_quat(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R) -> np.ndarray:
    """Convert a rotation matrix to a quaternion with ``w >= 0``.

    Raises :class:`NotARotation` if ``R`` is not orthonormal with det +1
    (tolerance 1e-6).
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise NotARotation(f"expected 3x3 matrix, got {R.shape}")
    if (np.abs(R.T @ R - np.eye(3)).max() > 1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
        raise NotARotation("matrix is not a proper rotation")
    tr = np.trace(R)
    # Shepperd: pivot on the largest of (w, x, y, z)
    i = int(np.argmax([tr, R[0, 0], R[1, 1], R[2, 2]]))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = normalize_quat(q)
    return -q if q[0] < 0 else q


def quat_distance(a, b):
    """Sign-invariant quaternion distance ``min(|a - b|, |a + b|)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.minimum(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))


def rotation_angle_between(a, b):
    """Geodesic angle in radians between the rotations of two quaternions."""
    d = np.abs(np.sum(normalize_quat(a) * normalize_quat(b), axis=-1))
    return 2.0 * np.arccos(np.clip(d, -1.0, 1.0))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_normalized(self, pixels) -> np.ndarray:
        """Pixel coordinates to normalized image-plane coordinates."""
        px = np.asarray(pixels, dtype=np.float64)
        return np.stack([(px[..., 0] - self.cx) / self.fx, (px[..., 1] - self.cy) / self.fy], axis=-1)


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(normalize_quat(self.rotation), (4,)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R, t) -> "CameraPose":
        return cls(rotmat_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation


@dataclass(frozen=True, eq=False)
class CameraRig:
    poses: tuple
    intrinsics: tuple

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "intrinsics", tuple(self.intrinsics))
        if len(self.poses) < 2:
            raise ValueError("a rig needs at least two cameras")
        if len(self.poses) != len(self.intrinsics):
            raise ValueError("poses and intrinsics differ in length")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def rotations(self) -> np.ndarray:
        return np.stack([p.rotation for p in self.poses])

    @property
    def translations(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])

    @property
    def rotmats(self) -> np.ndarray:
        return quat_to_rotmat(self.rotations)

    def is_normalized(self, tol: float = 1e-9) -> bool:
        p0, p1 = self.poses[0], self.poses[1]
        return bool(
            quat_distance(p0.rotation, [1.0, 0.0, 0.0, 0.0]) < tol
            and np.abs(p0.translation).max() < tol
            and abs(np.linalg.norm(p1.translation) - 1.0) < tol
        )

    def with_poses(self, poses) -> "CameraRig":
        return CameraRig(tuple(poses), self.intrinsics)


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """``p' = scale * R(rotation) @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", _frozen(normalize_quat(self.rotation), (4,)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), 1.0)

    @classmethod
    def random(cls, rng: np.random.Generator, max_shift: float = 5.0,
               log_scale_range: float = 1.0) -> "SimilarityTransform":
        return cls(
            random_quaternion(rng),
            rng.uniform(-max_shift, max_shift, 3),
            float(np.exp(rng.uniform(-log_scale_range, log_scale_range))),
        )

    def inverse(self) -> "SimilarityTransform":
        Rt = quat_to_rotmat(self.rotation).T
        return SimilarityTransform(quat_conjugate(self.rotation), -Rt @ self.translation / self.scale, 1.0 / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Transform equivalent to applying ``other`` first, then ``self``."""
        R = quat_to_rotmat(self.rotation)
        return SimilarityTransform(
            quat_multiply(self.rotation, other.rotation),
            self.scale * R @ other.translation + self.translation,
            self.scale * other.scale,
        )

    def apply(self, points) -> np.ndarray:
        return apply_similarity(self, points)


def apply_similarity(t: SimilarityTransform, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return t.scale * pts @ quat_to_rotmat(t.rotation).T + t.translation


def transform_rig(rig: CameraRig, g: SimilarityTransform) -> CameraRig:
    """Express ``rig`` in the world frame obtained by applying ``g``.

    Projections of ``g.apply(p)`` through the result equal projections of
    ``p`` through ``rig``.
    """
    Rg = quat_to_rotmat(g.rotation)
    poses = []
    for pose in rig.poses:
        Rk = pose.R @ Rg.T
        poses.append(CameraPose(rotmat_to_quat(Rk), g.scale * pose.translation - Rk @ g.translation))
    return rig.with_poses(poses)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project(pose: CameraPose, intr: Intrinsics, p) -> np.ndarray:
    X, Y, Z = pose.to_camera(p)
    if Z <= DEPTH_EPS:
        raise BehindCamera(f"point has depth {Z:.3g}")
    return np.array([intr.fx * X / Z + intr.cx, intr.fy * Y / Z + intr.cy])


def project_points(R, t, intr: Intrinsics, points):
    """Vectorized projection; returns ``(pixels, depth)`` without raising."""
    cam = np.asarray(points, dtype=np.float64) @ np.asarray(R).T + t
    z = cam[..., 2]
    safe = np.where(np.abs(z) > 1e-300, z, 1e-300)
    uv = np.stack([intr.fx * cam[..., 0] / safe + intr.cx, intr.fy * cam[..., 1] / safe + intr.cy], axis=-1)
    return uv, z


def project_rig(rig: CameraRig, points):
    """Project points through all cameras: ``(K, ..., 2)`` pixels and ``(K, ...)`` depths."""
    uvs, zs = [], []
    for pose, intr in zip(rig.poses, rig.intrinsics):
        uv, z = project_points(pose.R, pose.translation, intr, points)
        uvs.append(uv)
        zs.append(z)
    return np.stack(uvs), np.stack(zs)


def backproject(pose: CameraPose, intr: Intrinsics, pixel, depth: float) -> np.ndarray:
    """World point at camera depth ``depth`` along the ray through ``pixel``."""
    u, v = pixel
    cam = np.array([(u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, depth])
    return pose.R.T @ (cam - pose.translation)


# ---------------------------------------------------------------------------
# Gauge
# ---------------------------------------------------------------------------

def normalize_rig(rig: CameraRig):
    """Fix the similarity gauge of a rig.

    Camera 0 becomes the identity pose and camera 1's translation gets unit
    norm. Returns the normalized rig and the transform mapping original world
    coordinates into the normalized frame.
    """
    R0 = rig.poses[0].R
    t0 = rig.poses[0].translation
    R1 = rig.poses[1].R
    rel_t1 = rig.poses[1].translation - R1 @ R0.T @ t0
    baseline = np.linalg.norm(rel_t1)
    if baseline <= 1e-9:
        raise DegenerateRig("cameras 0 and 1 are co-located")
    s = 1.0 / baseline
    gauge = SimilarityTransform(rig.poses[0].rotation, s * t0, s)
    poses = [CameraPose.identity()]
    for pose in rig.poses[1:]:
        Rk = pose.R @ R0.T
        poses.append(CameraPose(quat_multiply(pose.rotation, quat_conjugate(rig.poses[0].rotation)),
                                s * (pose.translation - Rk @ t0)))
    return rig.with_poses(poses), gauge
