"""2D heatmaps, the explicit voxel volume built from them, and its residual.

Heatmap stacks are arrays of shape ``(K, S, H, W)``: ``K`` views, ``S``
landmark channels (joints, possibly flattened over frames), images of
``H`` rows by ``W`` columns. ``hm[k, s, v, u]`` is the value at pixel ``(u, v)``.

The volume value at a voxel center ``c`` is the mean over views of the heatmap
sampled at the projection of ``c``; views where ``c`` is behind the camera or
off-image contribute zero and the divisor stays ``K``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import batch_residuals, batch_volumes
from .errors import ZeroMassVolume
from .geometry import DEPTH_EPS, CameraPose, CameraRig, Intrinsics, project_points


def render_gaussian_heatmap(keypoint, sigma: float, width: int, height: int) -> np.ndarray:
    """Unnormalized isotropic Gaussian (peak 1) centered on ``keypoint``; shape ``(H, W)``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    kx, ky = keypoint
    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    gx = np.exp(-((u - kx) ** 2) / (2.0 * sigma**2))
    gy = np.exp(-((v - ky) ** 2) / (2.0 * sigma**2))
    return gy[:, None] * gx[None, :]


def render_heatmaps(keypoints, sigma: float, width: int, height: int) -> np.ndarray:
    """Render a ``(K, S, H, W)`` stack from ``(K, S, 2)`` keypoints."""
    kp = np.asarray(keypoints, dtype=np.float64)
    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    gx = np.exp(-((u - kp[..., 0:1]) ** 2) / (2.0 * sigma**2))
    gy = np.exp(-((v - kp[..., 1:2]) ** 2) / (2.0 * sigma**2))
    return gy[..., :, None] * gx[..., None, :]


def _bilinear_setup(uv, valid, width: int, height: int):
    """Corner indices and weights for bilinear lookups; invalid queries get zero weight."""
    u, v = uv[..., 0], uv[..., 1]
    inside = valid & (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    x0 = np.minimum(np.floor(uc).astype(np.int64), width - 2)
    y0 = np.minimum(np.floor(vc).astype(np.int64), height - 2)
    ax = uc - x0
    ay = vc - y0
    idx = np.stack([y0 * width + x0, y0 * width + x0 + 1, (y0 + 1) * width + x0, (y0 + 1) * width + x0 + 1], axis=-1)
    w = np.stack([(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay], axis=-1)
    w = np.where(inside[..., None], w, 0.0)
    return idx, w


def sample_bilinear(hm, px):
    """Bilinear lookup into an ``(H, W)`` or ``(..., H, W)`` heatmap; zero outside the image."""
    hm = np.asarray(hm, dtype=np.float64)
    px = np.asarray(px, dtype=np.float64)
    H, W = hm.shape[-2:]
    idx, w = _bilinear_setup(px, np.ones(px.shape[:-1], dtype=bool), W, H)
    flat = hm.reshape(hm.shape[:-2] + (H * W,))
    vals = flat[..., idx]
    return np.sum(vals * w, axis=-1)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    origin: np.ndarray
    voxel_size: float
    dims: tuple

    def __post_init__(self):
        o = np.array(self.origin, dtype=np.float64).reshape(3)
        o.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.voxel_size <= 0 or len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("invalid voxel grid")

    @classmethod
    def cube(cls, center, side: float, n: int) -> "VoxelGrid":
        center = np.asarray(center, dtype=np.float64)
        return cls(center - 0.5 * side, side / n, (n, n, n))

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def centers(self) -> np.ndarray:
        """Voxel centers, ``(L1, L2, L3, 3)``."""
        axes = [self.origin[i] + (np.arange(self.dims[i]) + 0.5) * self.voxel_size for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def flat_centers(self) -> np.ndarray:
        return self.centers().reshape(-1, 3)

    def center_of(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=np.float64) + 0.5) * self.voxel_size

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        hi = self.origin + np.array(self.dims) * self.voxel_size
        return np.all((p >= self.origin) & (p <= hi), axis=-1)


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    grid: VoxelGrid
    values: np.ndarray  # (S, L1, L2, L3)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 3:
            v = v[None]
        if v.shape[1:] != self.grid.dims:
            raise ValueError("values do not match grid dims")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]


def _rig_arrays(rig: CameraRig):
    Rs = rig.rotmats
    ts = rig.translations
    intr = np.array([[i.fx, i.fy, i.cx, i.cy] for i in rig.intrinsics])
    return Rs, ts, intr


def sample_views(heatmaps, rig: CameraRig, points) -> np.ndarray:
    """Heatmap values at the projections of ``points`` (``(Z, 3)``) in every view: ``(K, S, Z)``."""
    hm = np.asarray(heatmaps, dtype=np.float64)
    K, S, H, W = hm.shape
    out = np.empty((K, S, len(points)))
    for k, (pose, intr) in enumerate(zip(rig.poses, rig.intrinsics)):
        uv, z = project_points(pose.R, pose.translation, intr, points)
        idx, w = _bilinear_setup(uv, z > DEPTH_EPS, W, H)
        flat = hm[k].reshape(S, H * W)
        out[k] = np.sum(flat[:, idx] * w, axis=-1)
    return out


def build_volume(heatmaps, rig: CameraRig, grid: VoxelGrid) -> VoxelVolume:
    """Explicit 3D heatmap: per-voxel mean over views of the sampled 2D heatmaps."""
    hm = np.asarray(heatmaps, dtype=np.float64)
    if hm.shape[0] != len(rig):
        raise ValueError("one heatmap stack per camera required")
    x = sample_views(hm, rig, grid.flat_centers())
    vals = x.sum(axis=0) / hm.shape[0]
    return VoxelVolume(grid, vals.reshape((hm.shape[1],) + grid.dims))


def reproject_max(vol: VoxelVolume, pose: CameraPose, intr: Intrinsics, width: int, height: int) -> np.ndarray:
    """Max-projection of a volume into one view: ``(S, H, W)``.

    Each voxel center is rasterized to its nearest pixel; pixels reached by no
    voxel stay 0.
    """
    uv, z = project_points(pose.R, pose.translation, intr, vol.grid.flat_centers())
    ui = np.rint(uv[:, 0]).astype(np.int64)
    vi = np.rint(uv[:, 1]).astype(np.int64)
    ok = (z > DEPTH_EPS) & (ui >= 0) & (ui < width) & (vi >= 0) & (vi < height)
    pix = vi[ok] * width + ui[ok]
    S = vol.channels
    out = np.zeros((S, height * width))
    vals = vol.values.reshape(S, -1)[:, ok]
    for s in range(S):
        np.maximum.at(out[s], pix, vals[s])
    return out.reshape(S, height, width)


def residual_f(vol: VoxelVolume, heatmaps, rig: CameraRig) -> np.ndarray:
    """Per-view, per-channel residual ``f[k, s]``.

    ``f[k, s] = sum_z (x3d(z) * x2d_k(z))**2 * (x2d_k(z) - x3d(z))`` where
    ``x2d_k(z)`` is view ``k``'s heatmap sampled at the projection of voxel ``z``.
    """
    x = sample_views(heatmaps, rig, vol.grid.flat_centers())
    x3 = vol.values.reshape(vol.channels, -1)[None]
    return np.sum((x3 * x) ** 2 * (x - x3), axis=-1)


def residual_energy(vol: VoxelVolume, heatmaps, rig: CameraRig) -> np.ndarray:
    """Normalizer for :func:`residual_f`: ``sum_z (x3d * x2d_k)**2 * (x2d_k + x3d)``."""
    x = sample_views(heatmaps, rig, vol.grid.flat_centers())
    x3 = vol.values.reshape(vol.channels, -1)[None]
    return np.sum((x3 * x) ** 2 * (x + x3), axis=-1)


def normalize_residual(f, energy) -> np.ndarray:
    """``f / energy``, a weighted mean of ``(x2d - x3d) / (x2d + x3d)`` and so in ``[-1, 1]``.

    Channels with no overlap at all (zero energy) score 1, the worst value.
    Unlike the raw residual this does not reward rays that leave the grid or
    miss each other, because the overlap weight cancels.
    """
    f = np.asarray(f, dtype=np.float64)
    e = np.asarray(energy, dtype=np.float64)
    safe = e > 1e-300
    return np.where(safe, f / np.where(safe, e, 1.0), 1.0)


def total_residual(f) -> float:
    return float(np.sum(np.abs(f)))


def _channel_last(heatmaps) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(np.asarray(heatmaps, dtype=np.float64), 1, -1))


def residuals_for_rigs(heatmaps, rigs, grid: VoxelGrid, *, normalized: bool = False) -> np.ndarray:
    """``f[m, k, s]`` for many rigs at once (compiled path, same math as
    :func:`build_volume` followed by :func:`residual_f`). With ``normalized``
    the values are passed through :func:`normalize_residual`."""
    return _residual_batch(_channel_last(heatmaps), rigs, grid, normalized)


def _residual_batch(hm_last, rigs, grid: VoxelGrid, normalized: bool) -> np.ndarray:
    Rs = np.stack([r.rotmats for r in rigs])
    ts = np.stack([r.translations for r in rigs])
    intr = _rig_arrays(rigs[0])[2]
    fe = batch_residuals(hm_last, np.ascontiguousarray(grid.flat_centers()), Rs, ts, intr)
    return normalize_residual(fe[0], fe[1]) if normalized else fe[0]


def volumes_for_rigs(heatmaps, rigs, weights, grid: VoxelGrid) -> VoxelVolume:
    """Weighted sum of :func:`build_volume` over rigs (compiled path)."""
    hm = _channel_last(heatmaps)
    Rs = np.stack([r.rotmats for r in rigs])
    ts = np.stack([r.translations for r in rigs])
    intr = _rig_arrays(rigs[0])[2]
    vals = batch_volumes(hm, np.ascontiguousarray(grid.flat_centers()), Rs, ts, intr,
                         np.asarray(weights, dtype=np.float64))
    return VoxelVolume(grid, vals.reshape((hm.shape[-1],) + grid.dims))


# ---------------------------------------------------------------------------
# Readout
# ---------------------------------------------------------------------------

def _softmax(values, temperature):
    a = values / temperature
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def softargmax(vol: VoxelVolume, temperature: float = 1.0) -> np.ndarray:
    """Expected voxel center under ``softmax(values / temperature)``, one point per channel."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    p = _softmax(vol.values.reshape(vol.channels, -1), temperature)
    return p @ vol.grid.flat_centers()


def softargmax_grad(vol: VoxelVolume, temperature: float = 1.0):
    """Points and their Jacobian w.r.t. the volume values: ``(S, 3)`` and ``(S, 3, Z)``."""
    p = _softmax(vol.values.reshape(vol.channels, -1), temperature)
    c = vol.grid.flat_centers()
    pts = p @ c
    jac = p[:, None, :] * (c.T[None] - pts[:, :, None]) / temperature
    return pts, jac


def _trilinear(grid: VoxelGrid, p):
    """Corner flat indices and weights for interpolation between voxel centers."""
    g = (np.asarray(p, dtype=np.float64) - grid.origin) / grid.voxel_size - 0.5
    dims = np.array(grid.dims)
    g = np.clip(g, 0.0, dims - 1)
    i0 = np.minimum(np.floor(g).astype(np.int64), np.maximum(dims - 2, 0))
    a = g - i0
    idx, w = [], []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ii = np.minimum(i0 + [dx, dy, dz], dims - 1)
                idx.append(np.ravel_multi_index(tuple(ii), grid.dims))
                w.append((a[0] if dx else 1 - a[0]) * (a[1] if dy else 1 - a[1]) * (a[2] if dz else 1 - a[2]))
    return np.array(idx), np.array(w)


def volume_prob_at(vol: VoxelVolume, p, channel: int = 0) -> float:
    """Trilinear sample of the mass-normalized volume at ``p``; 0 outside the grid."""
    vals = vol.values[channel].reshape(-1)
    mass = vals.sum()
    if mass < 1e-12:
        raise ZeroMassVolume("volume has no mass")
    if not vol.grid.contains(p):
        return 0.0
    idx, w = _trilinear(vol.grid, p)
    return float(np.dot(vals[idx], w) / mass)
