"""Compiled inner loops for evaluating many rig hypotheses against one heatmap stack.

Heatmaps arrive channel-last, ``(K, H, W, S)``, so every bilinear corner fetch
reads ``S`` contiguous values. Each rig is processed sequentially in a fixed
order; callers may run disjoint rig ranges on separate threads (the GIL is
released) without changing any result.
"""

import numba
import numpy as np

_DEPTH_EPS = 1e-6


@numba.njit(cache=True, nogil=True)
def _projections(R, t, intr):
    """Per-view 3x4 matrices ``K [R | t]``."""
    K = R.shape[0]
    P = np.empty((K, 3, 4))
    for k in range(K):
        fx, fy, cx, cy = intr[k, 0], intr[k, 1], intr[k, 2], intr[k, 3]
        for j in range(3):
            P[k, 0, j] = fx * R[k, 0, j] + cx * R[k, 2, j]
            P[k, 1, j] = fy * R[k, 1, j] + cy * R[k, 2, j]
            P[k, 2, j] = R[k, 2, j]
        P[k, 0, 3] = fx * t[k, 0] + cx * t[k, 2]
        P[k, 1, 3] = fy * t[k, 1] + cy * t[k, 2]
        P[k, 2, 3] = t[k, 2]
    return P


@numba.njit(cache=True, nogil=True)
def _setup(P, c, W, H, S, base, wts):
    """Bilinear corner offsets/weights of voxel ``c`` in every view; returns False if all views miss."""
    K = P.shape[0]
    any_hit = False
    for k in range(K):
        X = P[k, 0, 0] * c[0] + P[k, 0, 1] * c[1] + P[k, 0, 2] * c[2] + P[k, 0, 3]
        Y = P[k, 1, 0] * c[0] + P[k, 1, 1] * c[1] + P[k, 1, 2] * c[2] + P[k, 1, 3]
        Z = P[k, 2, 0] * c[0] + P[k, 2, 1] * c[1] + P[k, 2, 2] * c[2] + P[k, 2, 3]
        base[k] = -1
        if Z <= _DEPTH_EPS:
            continue
        u = X / Z
        v = Y / Z
        if not (u >= 0.0 and u <= W - 1 and v >= 0.0 and v <= H - 1):
            continue
        x0 = min(int(u), W - 2)
        y0 = min(int(v), H - 2)
        ax = u - x0
        ay = v - y0
        base[k] = (y0 * W + x0) * S
        wts[k, 0] = (1.0 - ax) * (1.0 - ay)
        wts[k, 1] = ax * (1.0 - ay)
        wts[k, 2] = (1.0 - ax) * ay
        wts[k, 3] = ax * ay
        any_hit = True
    return any_hit


@numba.njit(cache=True, nogil=True)
def _gather(hm, base, wts, W, S, xs):
    K = hm.shape[0]
    row = W * S
    for k in range(K):
        b = base[k]
        if b < 0:
            for s in range(S):
                xs[k, s] = 0.0
            continue
        w0, w1, w2, w3 = wts[k, 0], wts[k, 1], wts[k, 2], wts[k, 3]
        h = hm[k]
        for s in range(S):
            xs[k, s] = (w0 * h[b + s] + w1 * h[b + S + s]
                        + w2 * h[b + row + s] + w3 * h[b + row + S + s])


@numba.njit(cache=True, nogil=True)
def batch_residuals(hm, centers, Rs, ts, intr):
    """``f[m, k, s]`` and its normalizer ``e[m, k, s]`` for every rig ``m``, stacked as ``(2, M, K, S)``."""
    K, H, W, S = hm.shape
    flat = hm.reshape(K, H * W * S)
    M = Rs.shape[0]
    Z = centers.shape[0]
    out = np.zeros((2, M, K, S))
    xs = np.empty((K, S))
    base = np.empty(K, dtype=np.int64)
    wts = np.empty((K, 4))
    x3 = np.empty(S)
    for m in range(M):
        P = _projections(Rs[m], ts[m], intr)
        for z in range(Z):
            if not _setup(P, centers[z], W, H, S, base, wts):
                continue
            _gather(flat, base, wts, W, S, xs)
            for s in range(S):
                acc = 0.0
                for k in range(K):
                    acc += xs[k, s]
                x3[s] = acc / K
            for k in range(K):
                for s in range(S):
                    a = x3[s] * xs[k, s]
                    a = a * a
                    out[0, m, k, s] += a * (xs[k, s] - x3[s])
                    out[1, m, k, s] += a * (xs[k, s] + x3[s])
    return out


@numba.njit(cache=True, nogil=True)
def batch_volumes(hm, centers, Rs, ts, intr, weights):
    """``sum_m weights[m] * volume(rig m)``, channel-major ``(S, Z)``."""
    K, H, W, S = hm.shape
    flat = hm.reshape(K, H * W * S)
    M = Rs.shape[0]
    Z = centers.shape[0]
    out = np.zeros((Z, S))
    xs = np.empty((K, S))
    base = np.empty(K, dtype=np.int64)
    wts = np.empty((K, 4))
    for m in range(M):
        wm = weights[m] / K
        if wm == 0.0:
            continue
        P = _projections(Rs[m], ts[m], intr)
        for z in range(Z):
            if not _setup(P, centers[z], W, H, S, base, wts):
                continue
            _gather(flat, base, wts, W, S, xs)
            for k in range(K):
                for s in range(S):
                    out[z, s] += wm * xs[k, s]
    return out.T.copy()
