"""Training objectives as plain numeric functions.

``camera_loss`` compares the ground-truth rig against the sampled posterior,
``pose3d_loss`` scores a fused volume against ground-truth landmarks and comes
with an analytic gradient with respect to the volume values.
``finite_diff_check`` validates analytic gradients by central differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import AllZeroWeights, ZeroMassVolume
from .heatmap import VoxelGrid, VoxelVolume, _trilinear, softargmax_grad
from .inference import WeightedSamples, log_likelihood

LOG_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda_cam: float = 1.0
    lambda_3d: float = 0.1
    beta: float = 0.01

    def __post_init__(self):
        if min(self.lambda_cam, self.lambda_3d, self.beta) < 0:
            raise ValueError("loss coefficients must be nonnegative")


def log_evidence(samples: WeightedSamples) -> float:
    """Monte Carlo estimate of ``log E[p(X | y)]`` under a flat prior.

    With proposal densities available the samples are importance-weighted by
    ``1 / q`` (self-normalized), otherwise they count equally. Either way a
    constant likelihood of 1 gives exactly 0.
    """
    ll = np.asarray(samples.log_likelihoods, dtype=np.float64)
    ll = np.where(np.isnan(ll), -np.inf, ll)
    if len(ll) == 0 or not np.any(np.isfinite(ll)):
        raise AllZeroWeights("every sample has zero likelihood")
    if samples.log_proposal is None:
        return float(logsumexp(ll) - np.log(len(ll)))
    logw = -np.asarray(samples.log_proposal, dtype=np.float64)
    logw = np.where(np.isfinite(logw), logw, -np.inf)
    if not np.any(np.isfinite(logw)):
        raise AllZeroWeights("every sample has zero importance weight")
    return float(logsumexp(ll + logw) - logsumexp(logw))


def camera_loss(gt_rig, samples: WeightedSamples, heatmaps, grid: VoxelGrid, residual: str = "raw") -> float:
    """``-0.5 * r(y_gt) + log E[p(X | y)]`` with ``r`` the summed absolute residual.

    The sign follows the objective as it is usually written; note that the
    first term decreases as the ground-truth residual grows. ``samples`` must
    carry log-likelihoods computed with the same ``residual`` mode.
    """
    r_gt = -log_likelihood(gt_rig, heatmaps, grid, residual=residual)
    return -0.5 * r_gt + log_evidence(samples)


def _prob_and_grad(vol: VoxelVolume, p, channel: int):
    """Mass-normalized trilinear value at ``p`` and its gradient over the flat channel values."""
    vals = vol.values[channel].reshape(-1)
    mass = vals.sum()
    if mass < 1e-12:
        raise ZeroMassVolume("volume has no mass")
    grad = np.zeros_like(vals)
    if not vol.grid.contains(p):
        return 0.0, grad
    idx, w = _trilinear(vol.grid, p)
    prob = float(np.dot(vals[idx], w) / mass)
    np.add.at(grad, idx, w / mass)
    grad -= prob / mass
    return prob, grad


def pose3d_loss(vol: VoxelVolume, gt_points, cfg: LossConfig = LossConfig(), temperature: float = 1.0) -> float:
    return pose3d_loss_and_grad(vol, gt_points, cfg, temperature)[0]


def pose3d_loss_and_grad(vol: VoxelVolume, gt_points, cfg: LossConfig = LossConfig(), temperature: float = 1.0):
    """``sum_s |softargmax_s - gt_s|_1 - beta * sum_s log(P_s(gt_s) + eps)`` and its
    gradient with respect to ``vol.values``.

    ``P_s`` is the mass-normalized trilinear density of channel ``s``.
    """
    gt = np.asarray(gt_points, dtype=np.float64).reshape(vol.channels, 3)
    pts, jac = softargmax_grad(vol, temperature)
    diff = pts - gt
    loss = float(np.abs(diff).sum())
    grad = np.einsum("sc,scz->sz", np.sign(diff), jac)
    for s in range(vol.channels):
        prob, g = _prob_and_grad(vol, gt[s], s)
        loss -= cfg.beta * np.log(prob + LOG_EPS)
        grad[s] -= cfg.beta * g / (prob + LOG_EPS)
    return loss, grad.reshape(vol.values.shape)


def total_loss(cam: float, p3d: float, cfg: LossConfig = LossConfig()) -> float:
    return cfg.lambda_cam * cam + cfg.lambda_3d * p3d


def central_difference(f, x, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(x.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(x.shape)


def finite_diff_check(f, x, h: float = 1e-5, grad=None) -> float:
    """Largest relative disagreement between an analytic and a central-difference gradient.

    ``f(x)`` returns a scalar, or ``(value, gradient)`` when ``grad`` is None.
    Entries are compared relative to ``max(|analytic|, |numeric|)``, floored at
    ``1e-6`` times the largest numeric entry so that near-zero components do
    not dominate.
    """
    x = np.asarray(x, dtype=np.float64)
    if grad is None:
        analytic = np.asarray(f(x)[1], dtype=np.float64)
        numeric = central_difference(lambda z: f(z)[0], x, h)
    else:
        analytic = np.asarray(grad(x), dtype=np.float64)
        numeric = central_difference(f, x, h)
    floor = max(1e-6 * np.abs(numeric).max(initial=0.0), 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
