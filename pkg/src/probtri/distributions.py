"""Angular central Gaussian and multivariate-t distributions.

The ACG on the sphere S^{d-1} is the law of ``z / |z|`` for ``z ~ N(0, Lambda)``;
its density is even in ``x`` which makes it a natural model for quaternions
(``q`` and ``-q`` are the same rotation). The multivariate t models camera
translations. Both come with weighted fitting routines used to adapt the
proposal distribution from importance weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import DegenerateSamples

RIDGE = 1e-6


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    s = w.sum()
    if s <= 0:
        return 0.0
    w = w / s
    return float(1.0 / np.sum(w * w))


def _prepare_weighted(samples, weights, min_ess):
    x = np.asarray(samples, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(w):
        raise ValueError("samples must be (n, d) with one weight per sample")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    keep = w > 0
    x, w = x[keep], w[keep]
    if len(w) == 0:
        raise DegenerateSamples("all weights are zero")
    w = w / w.sum()
    ess = effective_sample_size(w)
    if ess < min_ess:
        raise DegenerateSamples(f"effective sample size {ess:.2f} < {min_ess}")
    return x, w


# ---------------------------------------------------------------------------
# Angular central Gaussian
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AcgParams:
    """ACG shape matrix, trace-normalized to ``dim`` on construction."""

    Lambda: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)
    _inv: np.ndarray = field(init=False, repr=False, compare=False)
    _logdet: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        L = np.asarray(self.Lambda, dtype=np.float64)
        d = L.shape[0]
        if L.shape != (d, d) or d not in (3, 4):
            raise ValueError("Lambda must be 3x3 or 4x4")
        if np.abs(L - L.T).max() > 1e-9 * max(1.0, np.abs(L).max()):
            raise ValueError("Lambda must be symmetric")
        L = 0.5 * (L + L.T)
        if not np.linalg.eigvalsh(L)[0] > 0:
            raise ValueError("Lambda must be positive definite")
        L = L * (d / np.trace(L))
        chol = np.linalg.cholesky(L)
        object.__setattr__(self, "Lambda", _frozen(L))
        object.__setattr__(self, "_chol", _frozen(chol))
        object.__setattr__(self, "_inv", _frozen(np.linalg.inv(L)))
        object.__setattr__(self, "_logdet", float(2.0 * np.log(np.diag(chol)).sum()))

    @property
    def dim(self) -> int:
        return self.Lambda.shape[0]

    @classmethod
    def isotropic(cls, dim: int) -> "AcgParams":
        return cls(np.eye(dim))

    @classmethod
    def concentrated(cls, mode, kappa: float) -> "AcgParams":
        """ACG whose principal axis is ``mode`` with eigenvalue ratio ``kappa``."""
        m = np.asarray(mode, dtype=np.float64)
        m = m / np.linalg.norm(m)
        return cls(np.eye(len(m)) + (kappa - 1.0) * np.outer(m, m))

    def principal_axis(self) -> np.ndarray:
        _, vecs = np.linalg.eigh(self.Lambda)
        return vecs[:, -1]

    def eigenvalue_ratio(self) -> float:
        vals = np.linalg.eigvalsh(self.Lambda)
        return float(vals[-1] / vals[0])

    def inflate(self, factor: float) -> "AcgParams":
        """Widen the distribution: minor eigenvalues scaled by ``factor`` (capped at the major one)."""
        vals, vecs = np.linalg.eigh(self.Lambda)
        vals = np.minimum(vals * factor, vals[-1])
        return AcgParams((vecs * vals) @ vecs.T)


def acg_sample(p: AcgParams, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw unit vectors from the ACG. ``size=None`` returns a single vector."""
    n = 1 if size is None else int(size)
    z = rng.standard_normal((n, p.dim)) @ p._chol.T
    x = z / np.linalg.norm(z, axis=1, keepdims=True)
    return x[0] if size is None else x


def acg_logpdf(p: AcgParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d = p.dim
    quad = np.einsum("...i,ij,...j->...", x, p._inv, x)
    log_norm = gammaln(d / 2.0) - np.log(2.0) - (d / 2.0) * np.log(np.pi)
    return log_norm - 0.5 * p._logdet - (d / 2.0) * np.log(quad)


def acg_fit_weighted(samples, weights, *, max_iter: int = 100, rtol: float = 1e-8,
                     ridge: float = RIDGE, min_ess: float | None = None) -> AcgParams:
    """Weighted Tyler fixed-point estimate of the ACG shape matrix.

    ``Lambda <- d * sum_j w_j x_j x_j^T / (x_j^T Lambda^-1 x_j) / sum_j w_j / (x_j^T Lambda^-1 x_j)``
    with a ridge ``ridge * I`` after each trace normalization so rank-deficient
    samples still give an SPD estimate.
    """
    x = np.asarray(samples, dtype=np.float64)
    d = x.shape[1]
    x, w = _prepare_weighted(x, weights, d + 1 if min_ess is None else min_ess)
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    L = np.eye(d)
    for _ in range(max_iter):
        inv = np.linalg.inv(L)
        quad = np.einsum("ni,ij,nj->n", x, inv, x)
        c = w / quad
        new = d * (x.T * c) @ x / c.sum()
        new = new * (d / np.trace(new)) + ridge * np.eye(d)
        new = new * (d / np.trace(new))
        new = 0.5 * (new + new.T)
        change = np.linalg.norm(new - L) / np.linalg.norm(L)
        L = new
        if change < rtol:
            break
    return AcgParams(L)


# ---------------------------------------------------------------------------
# Multivariate t
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MvtParams:
    mu: np.ndarray
    Scale: np.ndarray
    nu: float = 5.0
    _chol: np.ndarray = field(init=False, repr=False, compare=False)
    _inv: np.ndarray = field(init=False, repr=False, compare=False)
    _logdet: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.nu > 2:
            raise ValueError("degrees of freedom must exceed 2")
        S = np.asarray(self.Scale, dtype=np.float64)
        if S.shape != (3, 3):
            raise ValueError("Scale must be 3x3")
        if np.abs(S - S.T).max() > 1e-9 * max(1.0, np.abs(S).max()):
            raise ValueError("Scale must be symmetric")
        S = 0.5 * (S + S.T)
        chol = np.linalg.cholesky(S)
        object.__setattr__(self, "mu", _frozen(np.reshape(self.mu, 3)))
        object.__setattr__(self, "Scale", _frozen(S))
        object.__setattr__(self, "nu", float(self.nu))
        object.__setattr__(self, "_chol", _frozen(chol))
        object.__setattr__(self, "_inv", _frozen(np.linalg.inv(S)))
        object.__setattr__(self, "_logdet", float(2.0 * np.log(np.diag(chol)).sum()))

    @property
    def covariance(self) -> np.ndarray:
        return self.Scale * self.nu / (self.nu - 2.0)

    def inflate(self, factor: float) -> "MvtParams":
        return MvtParams(self.mu, self.Scale * factor, self.nu)


def mvt_sample(p: MvtParams, rng: np.random.Generator, size=None) -> np.ndarray:
    n = 1 if size is None else int(size)
    z = rng.standard_normal((n, 3)) @ p._chol.T
    g = rng.chisquare(p.nu, size=n)
    x = p.mu + z * np.sqrt(p.nu / g)[:, None]
    return x[0] if size is None else x


def mvt_logpdf(p: MvtParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d = 3
    r = x - p.mu
    delta = np.einsum("...i,ij,...j->...", r, p._inv, r)
    return (gammaln((p.nu + d) / 2.0) - gammaln(p.nu / 2.0)
            - 0.5 * d * np.log(p.nu * np.pi) - 0.5 * p._logdet
            - 0.5 * (p.nu + d) * np.log1p(delta / p.nu))


def _weighted_median(values, weights) -> float:
    order = np.argsort(values, kind="stable")
    c = np.cumsum(weights[order])
    return float(values[order][np.searchsorted(c, 0.5 * c[-1])])


def mvt_fit_weighted(samples, weights, nu: float = 5.0, *, ridge: float = RIDGE,
                     min_ess: float = 4.0, method: str = "moments", max_iter: int = 100,
                     rtol: float = 1e-8) -> MvtParams:
    """Weighted fit of a t distribution with ``nu`` held fixed.

    ``method="moments"``: weighted mean and ``(nu - 2) / nu`` times the weighted
    covariance. ``method="em"``: weighted maximum likelihood by the usual EM
    reweighting ``u_j = (nu + 3) / (nu + delta_j)``, started from the weighted
    coordinatewise median with an isotropic scale from the weighted median
    squared distance.
    The EM fit discounts far samples the way Tyler's estimator does for the
    ACG, so a tight cluster inside a diffuse cloud keeps its tight scale.
    """
    if method not in ("moments", "em"):
        raise ValueError("method must be 'moments' or 'em'")
    x, w = _prepare_weighted(samples, weights, min_ess)
    mu = w @ x
    r = x - mu
    cov = (r.T * w) @ r
    S = (nu - 2.0) / nu * cov + ridge * np.eye(3)
    if method == "em":
        mu = np.array([_weighted_median(x[:, i], w) for i in range(3)])
        d2 = np.sum((x - mu) ** 2, axis=1)
        S = (max(_weighted_median(d2, w), 0.0) / 3.0 + ridge) * np.eye(3)
        for _ in range(max_iter):
            r = x - mu
            delta = np.einsum("ni,ij,nj->n", r, np.linalg.inv(S), r)
            u = w * (nu + 3.0) / (nu + delta)
            new_mu = u @ x / u.sum()
            r = x - new_mu
            new_S = (r.T * u) @ r + ridge * np.eye(3)
            new_S = 0.5 * (new_S + new_S.T)
            change = np.linalg.norm(new_S - S) / np.linalg.norm(S) + np.linalg.norm(new_mu - mu) / (1.0 + np.linalg.norm(mu))
            mu, S = new_mu, new_S
            if change < rtol:
                break
    return MvtParams(mu, S, nu)
