"""Monte Carlo posterior inference over camera rigs.

The unknown is a gauge-normalized rig: camera 0 is the identity, camera 1 has a
unit-norm translation (a direction on S^2) and cameras 2.. have free
translations. A proposal ``q(y)`` made of one ACG per rotation, one ACG for the
camera-1 direction and one multivariate t per remaining translation is
iteratively refit to importance-weighted samples. Each sample is scored by
building the explicit voxel volume from the heatmaps and evaluating the
per-view residual; the final weighted samples are fused into one volume.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .distributions import (
    AcgParams,
    effective_sample_size,
    MvtParams,
    acg_fit_weighted,
    acg_logpdf,
    acg_sample,
    mvt_fit_weighted,
    mvt_logpdf,
    mvt_sample,
)
from .errors import AllZeroWeights, DegenerateSamples, FlatHeatmap, InitFailed, ProbTriError, ZeroMassVolume
from .geometry import (
    CameraPose,
    CameraRig,
    normalize_quat,
    quat_from_rotvec,
    quat_multiply,
    random_quaternion,
)
from .heatmap import (
    VoxelGrid,
    VoxelVolume,
    _channel_last,
    _residual_batch,
    softargmax,
    volumes_for_rigs,
)
from .multiview import RansacParams, assemble_rig, ransac_eight_point, triangulate_points

log = logging.getLogger(__name__)

HYPOTHESIS_SEED_STRIDE = 1000

RESIDUAL_MODES = ("normalized", "raw")
WEIGHT_MODES = ("importance", "likelihood")
FUSION_MODES = ("posterior", "proposal")


@dataclass(frozen=True)
class PtConfig:
    """Settings of the sampling loop.

    ``residual`` picks the per-sample score: ``"raw"`` is the plain sum of
    absolute per-view residuals, ``"normalized"`` divides every residual by
    its overlap energy first (see :func:`probtri.heatmap.normalize_residual`).
    ``weighting="likelihood"`` drops the ``1/q`` importance correction.
    ``max_likelihood_channels`` caps how many heatmap channels are scored per
    sample (an evenly spaced subset); fusion always uses all of them.
    ``init_hypotheses > 1`` reruns the eight-point initialization with
    different RANSAC seeds and starts from the hypothesis the heatmaps score
    best.
    """

    iterations: int = 4
    samples: int = 256
    init_local_fraction: float = 0.5
    local_rot_sigma: float = float(np.deg2rad(0.5))
    local_trans_sigma: float = 0.005
    global_trans_scale: float = 1.0
    temperature: float = 0.01
    nu: float = 5.0
    seed: int = 0
    grid_dims: int = 32
    grid_scale: float = 2.0
    max_likelihood_channels: int | None = 8
    residual: str = "normalized"
    weighting: str = "likelihood"
    fusion_weights: str = "posterior"
    fusion_min_weight: float = 1e-4
    fusion_max_samples: int | None = 8
    use_init: bool = True
    init_hypotheses: int = 1
    ransac_threshold: float = 2.0
    weighted_init: bool = True
    min_ess_fraction: float = 0.1
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 0 or self.samples < 1:
            raise ValueError("iterations must be >= 0 and samples >= 1")
        if not 0.0 <= self.init_local_fraction <= 1.0:
            raise ValueError("init_local_fraction must lie in [0, 1]")
        if self.temperature <= 0 or self.local_rot_sigma < 0 or self.local_trans_sigma < 0:
            raise ValueError("temperature must be positive and sigmas nonnegative")
        if self.nu <= 2:
            raise ValueError("nu must exceed 2")
        if self.residual not in RESIDUAL_MODES:
            raise ValueError(f"residual must be one of {RESIDUAL_MODES}")
        if self.weighting not in WEIGHT_MODES:
            raise ValueError(f"weighting must be one of {WEIGHT_MODES}")
        if self.fusion_weights not in FUSION_MODES:
            raise ValueError(f"fusion_weights must be one of {FUSION_MODES}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.init_hypotheses < 1 or self.ransac_threshold <= 0:
            raise ValueError("init_hypotheses must be >= 1 and ransac_threshold positive")


@dataclass(frozen=True, eq=False)
class RigPoseDistribution:
    """Proposal over normalized rigs.

    ``rotations[k-1]`` is the ACG of camera ``k``'s quaternion, ``direction``
    the ACG of camera 1's unit translation and ``translations[k-2]`` the t
    distribution of camera ``k``'s translation for ``k >= 2``.

    The ACG cannot tell a direction from its opposite, but for translations
    the sign matters. When ``direction_ref`` is set, sampled directions are
    flipped into its hemisphere.
    """

    rotations: tuple
    direction: AcgParams
    translations: tuple
    intrinsics: tuple
    direction_ref: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "rotations", tuple(self.rotations))
        object.__setattr__(self, "translations", tuple(self.translations))
        object.__setattr__(self, "intrinsics", tuple(self.intrinsics))
        if len(self.intrinsics) != len(self.rotations) + 1 or len(self.translations) != len(self.rotations) - 1:
            raise ValueError("component counts do not describe one rig")
        if self.direction.dim != 3 or any(r.dim != 4 for r in self.rotations):
            raise ValueError("rotations need 4-d ACGs and the direction a 3-d ACG")
        if self.direction_ref is not None:
            ref = np.asarray(self.direction_ref, dtype=np.float64)
            object.__setattr__(self, "direction_ref", ref / np.linalg.norm(ref))

    @property
    def num_cams(self) -> int:
        return len(self.intrinsics)


@dataclass(frozen=True, eq=False)
class WeightedSamples:
    rigs: tuple
    log_likelihoods: np.ndarray
    weights: np.ndarray
    log_proposal: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rigs)


@dataclass(frozen=True, eq=False)
class PtResult:
    fused_volume: VoxelVolume
    map_rig: CameraRig
    mean_residual_history: tuple
    final_distribution: RigPoseDistribution | None
    samples: WeightedSamples | None
    init_rig: CameraRig | None
    grid: VoxelGrid
    init_mode: str


# ---------------------------------------------------------------------------
# Keypoints and initialization
# ---------------------------------------------------------------------------

def _peak_offset(lo, mid, hi):
    """Vertex of the parabola through three samples; uses logs when all are positive
    (exact for Gaussian peaks)."""
    if lo > 0 and mid > 0 and hi > 0:
        lo, mid, hi = np.log(lo), np.log(mid), np.log(hi)
    den = lo - 2.0 * mid + hi
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (lo - hi) / den, -0.5, 0.5))


def keypoints_from_heatmaps(heatmaps) -> np.ndarray:
    """Sub-pixel peak of every heatmap in a ``(K, S, H, W)`` stack, as ``(K, S, 2)`` pixels."""
    hm = np.asarray(heatmaps, dtype=np.float64)
    K, S, H, W = hm.shape
    flat = hm.reshape(K, S, -1)
    if np.any(flat.max(axis=-1) - flat.min(axis=-1) < 1e-9):
        raise FlatHeatmap("a heatmap has no distinct peak")
    idx = flat.argmax(axis=-1)
    out = np.empty((K, S, 2))
    for k in range(K):
        for s in range(S):
            v, u = divmod(int(idx[k, s]), W)
            img = hm[k, s]
            du = _peak_offset(img[v, u - 1], img[v, u], img[v, u + 1]) if 0 < u < W - 1 else 0.0
            dv = _peak_offset(img[v - 1, u], img[v, u], img[v + 1, u]) if 0 < v < H - 1 else 0.0
            out[k, s] = (u + du, v + dv)
    return out


def estimate_init_rig(keypoints, intrinsics, ransac: RansacParams = RansacParams()) -> CameraRig:
    """Eight-point initialization: RANSAC relative pose of every view against view 0,
    scales reconciled through landmarks triangulated from views 0 and 1.

    ``keypoints`` is ``(K, P, 2)`` with all frames flattened into ``P``.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    K, P = kp.shape[:2]
    if K < 2 or len(intrinsics) != K:
        raise ValueError("need >= 2 views with one intrinsics each")
    if P < 8:
        raise InitFailed(f"{P} correspondences per pair, the eight-point method needs 8")
    params = replace(ransac, min_inliers=min(ransac.min_inliers, max(8, P // 2)))
    rel, masks = [], []
    try:
        for k in range(1, K):
            pose, mask = ransac_eight_point(kp[0], kp[k], intrinsics[0], intrinsics[k],
                                            replace(params, seed=params.seed + k))
            rel.append(pose)
            masks.append(mask)
        return assemble_rig(rel, masks, kp, list(intrinsics))
    except ProbTriError as exc:
        raise InitFailed(f"eight-point initialization failed: {exc}") from exc


def _perturb_rotation(q, sigma, rng, n):
    axis = rng.standard_normal((n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.normal(0.0, sigma, n) if sigma > 0 else np.zeros(n)
    return normalize_quat(quat_multiply(quat_from_rotvec(axis * angle[:, None]), q))


def _uniform_direction(rng, n):
    d = rng.standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _fit(quats, dirs, trans, weights, intrinsics, nu, direction_ref, min_ess=None):
    """Fit every proposal component to sample coordinates; raises DegenerateSamples."""
    rotations = [acg_fit_weighted(quats[:, k], weights, min_ess=min_ess) for k in range(quats.shape[1])]
    direction = acg_fit_weighted(dirs, weights, min_ess=min_ess)
    translations = [mvt_fit_weighted(trans[:, k], weights, nu, method="em",
                                     **({} if min_ess is None else {"min_ess": min_ess}))
                    for k in range(trans.shape[1])]
    return RigPoseDistribution(rotations, direction, translations, intrinsics, direction_ref)


def _orient(axis, dirs, weights):
    """Sign of ``axis`` chosen to agree with the weighted mean direction."""
    return axis if np.dot(weights @ dirs, axis) >= 0 else -axis


def seed_rigs(init_rig: CameraRig | None, config: PtConfig, rng: np.random.Generator,
              intrinsics=None) -> list:
    """``config.samples`` seed rigs for the initial proposal.

    A fraction ``init_local_fraction`` of the draws perturbs ``init_rig``; the
    rest are global: uniform rotations and directions, translations from a t
    distribution of scale ``global_trans_scale`` around the origin. Without an
    ``init_rig`` every draw is global and ``intrinsics`` must be given.
    """
    if init_rig is None:
        if intrinsics is None:
            raise ValueError("intrinsics are required without an initial rig")
        frac = 0.0
    else:
        intrinsics = init_rig.intrinsics
        frac = config.init_local_fraction
    K = len(intrinsics)
    M = config.samples
    n_loc = int(round(frac * M))
    n_glob = M - n_loc
    quats = np.empty((M, K - 1, 4))
    dirs = np.empty((M, 3))
    trans = np.empty((M, K - 2, 3))
    if n_loc:
        rq = init_rig.rotations
        rt = init_rig.translations
        for k in range(1, K):
            quats[:n_loc, k - 1] = _perturb_rotation(rq[k], config.local_rot_sigma, rng, n_loc)
        d = rt[1] + rng.normal(0.0, config.local_trans_sigma, (n_loc, 3))
        dirs[:n_loc] = d / np.linalg.norm(d, axis=1, keepdims=True)
        for k in range(2, K):
            trans[:n_loc, k - 2] = rt[k] + rng.normal(0.0, config.local_trans_sigma, (n_loc, 3))
    if n_glob:
        quats[n_loc:] = random_quaternion(rng, (n_glob, K - 1))
        dirs[n_loc:] = _uniform_direction(rng, n_glob)
        prior = MvtParams(np.zeros(3), config.global_trans_scale**2 * np.eye(3), config.nu)
        for k in range(2, K):
            trans[n_loc:, k - 2] = mvt_sample(prior, rng, n_glob)
    return _to_rigs(quats, dirs, trans, tuple(intrinsics))


def fit_distribution(rigs, weights, nu: float = 5.0, direction_ref=None, min_ess=None) -> RigPoseDistribution:
    """Fit every proposal component to weighted rigs (raises DegenerateSamples).

    Without ``direction_ref`` the camera-1 hemisphere is taken from the
    weighted mean direction. ``min_ess`` overrides the per-component
    effective-sample-size guards.
    """
    w = np.asarray(weights, dtype=np.float64)
    quats, dirs, trans = _coords(rigs)
    dist = _fit(quats, dirs, trans, w, rigs[0].intrinsics, nu, direction_ref, min_ess)
    if direction_ref is None:
        dist = replace(dist, direction_ref=_orient(dist.direction.principal_axis(), dirs, w / w.sum()))
    return dist


def init_distribution(init_rig: CameraRig | None, config: PtConfig, rng: np.random.Generator,
                      intrinsics=None) -> RigPoseDistribution:
    """Initial proposal fit to :func:`seed_rigs` draws with uniform weights.

    With an ``init_rig`` camera 1's hemisphere follows it; in uniform mode both
    hemispheres stay possible.
    """
    rigs = seed_rigs(init_rig, config, rng, intrinsics)
    w = np.full(len(rigs), 1.0 / len(rigs))
    quats, dirs, trans = _coords(rigs)
    ref = None if init_rig is None else init_rig.translations[1]
    return _fit(quats, dirs, trans, w, rigs[0].intrinsics, config.nu, ref)


# ---------------------------------------------------------------------------
# Sampling and weighting
# ---------------------------------------------------------------------------

def _draw(dist: RigPoseDistribution, M: int, rng: np.random.Generator):
    quats = np.stack([acg_sample(p, rng, M) for p in dist.rotations], axis=1)
    dirs = acg_sample(dist.direction, rng, M)
    if dist.direction_ref is not None:
        dirs = np.where((dirs @ dist.direction_ref)[:, None] < 0, -dirs, dirs)
    if dist.translations:
        trans = np.stack([mvt_sample(p, rng, M) for p in dist.translations], axis=1)
    else:
        trans = np.empty((M, 0, 3))
    return quats, dirs, trans


def _to_rigs(quats, dirs, trans, intrinsics):
    rigs = []
    for j in range(len(quats)):
        poses = [CameraPose.identity(), CameraPose(quats[j, 0], dirs[j])]
        poses += [CameraPose(quats[j, k], trans[j, k - 1]) for k in range(1, quats.shape[1])]
        rigs.append(CameraRig(poses, intrinsics))
    return rigs


def _coords(rigs):
    q = np.stack([r.rotations[1:] for r in rigs])
    t = np.stack([r.translations for r in rigs])
    return q, t[:, 1], t[:, 2:]


def sample_rigs(dist: RigPoseDistribution, M: int, rng: np.random.Generator) -> list:
    """``M`` normalized rigs drawn from the proposal."""
    return _to_rigs(*_draw(dist, M, rng), dist.intrinsics)


def proposal_logpdf(dist: RigPoseDistribution, rigs) -> np.ndarray:
    """``log q(y)`` for each rig: the sum of its component log densities."""
    quats, dirs, trans = _coords(rigs)
    out = sum(acg_logpdf(p, quats[:, k]) for k, p in enumerate(dist.rotations))
    out = out + acg_logpdf(dist.direction, dirs)
    for k, p in enumerate(dist.translations):
        out = out + mvt_logpdf(p, trans[:, k])
    return np.asarray(out, dtype=np.float64)


def _channel_subset(num_channels: int, cap: int | None) -> np.ndarray:
    if cap is None or cap >= num_channels:
        return np.arange(num_channels)
    return np.unique(np.linspace(0, num_channels - 1, cap).round().astype(np.int64))


def _evidence(heatmaps) -> np.ndarray:
    """``(K, S)`` mask of channels that carry any signal."""
    hm = np.asarray(heatmaps)
    return hm.reshape(hm.shape[0], hm.shape[1], -1).max(axis=-1) > 0


def _score(hm_last, evidence, rigs, grid, normalized, threads):
    """Per-rig total residual, chunked over threads in index order."""
    if threads <= 1 or len(rigs) < 2 * threads:
        chunks = [rigs]
    else:
        bounds = np.linspace(0, len(rigs), threads + 1).round().astype(int)
        chunks = [rigs[a:b] for a, b in zip(bounds[:-1], bounds[1:])]

    def work(chunk):
        f = _residual_batch(hm_last, chunk, grid, normalized)
        if normalized:
            f = np.where(evidence[None], f, 0.0)
        return np.abs(f).sum(axis=(1, 2))

    if len(chunks) == 1:
        return work(chunks[0])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.concatenate(list(pool.map(work, chunks)))


def log_likelihoods(rigs, heatmaps, grid: VoxelGrid, *, residual: str = "raw", threads: int = 1) -> np.ndarray:
    """``-sum_{k,s} |f[k, s]|`` for every rig (batched :func:`log_likelihood`)."""
    if residual not in RESIDUAL_MODES:
        raise ValueError(f"residual must be one of {RESIDUAL_MODES}")
    rigs = list(rigs)
    if not rigs:
        return np.empty(0)
    return -_score(_channel_last(heatmaps), _evidence(heatmaps), rigs, grid, residual == "normalized", threads)


def log_likelihood(rig: CameraRig, heatmaps, grid: VoxelGrid, *, residual: str = "raw") -> float:
    """Log-likelihood of one rig: minus the summed absolute per-view residuals."""
    return float(log_likelihoods([rig], heatmaps, grid, residual=residual)[0])


def normalized_log_weights(log_likelihoods, log_proposal=None, temperature: float = 1.0) -> np.ndarray:
    """Self-normalized log weights ``ll / T - log q``, shifted so they log-sum-exp to 0."""
    ll = np.asarray(log_likelihoods, dtype=np.float64)
    a = ll / temperature
    if log_proposal is not None:
        a = a - np.asarray(log_proposal, dtype=np.float64)
    a = np.where(np.isnan(a), -np.inf, a)
    if len(a) == 0 or not np.any(np.isfinite(a)):
        raise AllZeroWeights("every sample has zero weight")
    return a - logsumexp(a)


def posterior_weights(samples: WeightedSamples, dist: RigPoseDistribution | None = None,
                      temperature: float = 1.0, mode: str = "importance") -> np.ndarray:
    """Posterior weights under a uniform prior.

    ``mode="importance"`` divides tempered likelihoods by the proposal density
    of each draw, taken from ``samples.log_proposal`` when present and from
    ``dist`` otherwise; ``mode="likelihood"`` (or neither source) uses
    tempered likelihoods alone.
    """
    if mode not in WEIGHT_MODES:
        raise ValueError(f"mode must be one of {WEIGHT_MODES}")
    logq = None
    if mode == "importance":
        if samples.log_proposal is not None:
            logq = samples.log_proposal
        elif dist is not None:
            logq = proposal_logpdf(dist, samples.rigs)
    lw = normalized_log_weights(samples.log_likelihoods, logq, temperature)
    w = np.exp(lw)
    return w / w.sum()


def update_distribution(dist: RigPoseDistribution, rigs, weights, min_ess=None) -> RigPoseDistribution:
    """Refit every component to the weighted sample coordinates (raises DegenerateSamples).

    ``min_ess`` overrides the effective-sample-size guards, e.g. ``1.0`` to
    allow a point-mass fit.
    """
    nu = dist.translations[0].nu if dist.translations else 5.0
    return fit_distribution(rigs, weights, nu, min_ess=min_ess)


def tempered_weights(log_likelihoods, log_proposal=None, temperature: float = 1.0,
                     min_ess: float = 0.0):
    """Weights at the smallest temperature ``temperature * 2**i`` (``i < 40``) whose
    effective sample size reaches ``min_ess``; if none does, the one with the
    largest ESS. Returns ``(weights, temperature_used)``."""
    best = None
    for i in range(40):
        T = temperature * 2.0**i
        w = np.exp(normalized_log_weights(log_likelihoods, log_proposal, T))
        w = w / w.sum()
        ess = effective_sample_size(w)
        if ess >= min_ess:
            return w, T
        if best is None or ess > best[0]:
            best = (ess, w, T)
    return best[1], best[2]


def inflate_distribution(dist: RigPoseDistribution, factor: float = 2.0) -> RigPoseDistribution:
    return replace(dist,
                   rotations=tuple(p.inflate(factor) for p in dist.rotations),
                   direction=dist.direction.inflate(factor),
                   translations=tuple(p.inflate(factor) for p in dist.translations))


def fuse_volumes(rigs, weights, heatmaps, grid: VoxelGrid) -> VoxelVolume:
    """Weighted sum of the per-rig volumes."""
    return volumes_for_rigs(heatmaps, list(rigs), weights, grid)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def landmark_grid(points, dims: int = 32, scale: float = 2.0, min_side: float = 1e-3) -> VoxelGrid:
    """Cube of ``dims**3`` voxels centered on the median landmark, side ``scale`` times
    the robust (5-95 percentile) landmark extent."""
    p = np.asarray(points, dtype=np.float64)
    p = p[np.all(np.isfinite(p), axis=1)]
    if len(p) == 0:
        raise InitFailed("no landmark could be triangulated")
    lo, hi = np.percentile(p, [5, 95], axis=0)
    side = max(scale * float(np.max(hi - lo)), min_side)
    return VoxelGrid.cube(np.median(p, axis=0), side, dims)


def _front_points(rig, keypoints):
    X = triangulate_points(rig, keypoints)
    ok = np.all(np.isfinite(X), axis=1)
    for pose in rig.poses:
        with np.errstate(invalid="ignore"):
            ok &= (X @ pose.R[2] + pose.translation[2]) > 0
    return X[ok]


def _select_init(keypoints, intrinsics, hm_last, evidence, config: PtConfig):
    """Eight-point rig and its landmark grid; with several hypotheses the best-scoring one wins."""
    hypotheses, error = [], None
    for h in range(config.init_hypotheses):
        params = RansacParams(inlier_threshold=config.ransac_threshold, seed=config.seed + HYPOTHESIS_SEED_STRIDE * h)
        try:
            rig = estimate_init_rig(keypoints, intrinsics, params)
        except InitFailed as exc:
            error = exc
            continue
        pts = _front_points(rig, keypoints)
        grid = landmark_grid(pts, config.grid_dims, config.grid_scale) if len(pts) else None
        hypotheses.append((rig, grid))
    if not hypotheses:
        raise error
    if len(hypotheses) == 1:
        return hypotheses[0]
    normalized = config.residual == "normalized"
    scores = [-np.inf if g is None else -_score(hm_last, evidence, [r], g, normalized, 1)[0]
              for r, g in hypotheses]
    return hypotheses[int(np.argmax(scores))]


def run(heatmaps, intrinsics, config: PtConfig = PtConfig(), callback=None) -> PtResult:
    """Full estimator: keypoints, eight-point init (uniform fallback), sampling rounds, fusion.

    ``heatmaps`` is ``(K, S, H, W)``; ``callback(iteration, samples)`` is
    called after each round.
    """
    hm = np.asarray(heatmaps, dtype=np.float64)
    K, S = hm.shape[:2]
    intrinsics = tuple(intrinsics)
    if K < 2 or len(intrinsics) != K or S < 1:
        raise ValueError("need >= 2 views, one intrinsics per view and >= 1 channel")
    rng = np.random.default_rng(config.seed)
    keypoints = keypoints_from_heatmaps(hm)
    chans = _channel_subset(S, config.max_likelihood_channels)
    hm_sub = hm[:, chans]
    hm_last = _channel_last(hm_sub)
    evidence = _evidence(hm_sub)
    normalized = config.residual == "normalized"

    init_rig, grid, mode = None, None, "uniform"
    if config.use_init:
        try:
            init_rig, grid = _select_init(keypoints, intrinsics, hm_last, evidence, config)
            mode = "eight-point"
        except InitFailed as exc:
            if config.iterations == 0:
                raise
            log.warning("%s; falling back to uniform initialization", exc)
    if init_rig is None and config.iterations == 0:
        raise InitFailed("zero iterations need an eight-point initialization")
    if grid is None:
        grid = VoxelGrid.cube([0.0, 0.0, 1.0], 2.0, config.grid_dims)
    side = grid.voxel_size * config.grid_dims

    if config.iterations == 0:
        vol = fuse_volumes([init_rig], [1.0], hm, grid)
        return PtResult(vol, init_rig, (), None, None, init_rig, grid, mode)

    min_ess = config.min_ess_fraction * config.samples

    def score(rigs):
        return -_score(hm_last, evidence, rigs, grid, normalized, config.threads)

    if config.weighted_init:
        seeds = seed_rigs(init_rig, config, rng, intrinsics)
        w0, _ = tempered_weights(score(seeds), None, config.temperature, min_ess)
        try:
            dist = fit_distribution(seeds, w0, config.nu)
        except DegenerateSamples:
            dist = fit_distribution(seeds, w0, config.nu, min_ess=1.0)
    else:
        dist = init_distribution(init_rig, config, rng, intrinsics=intrinsics)

    history = []
    for it in range(config.iterations):
        rigs = sample_rigs(dist, config.samples, rng)
        ll = score(rigs)
        logq = proposal_logpdf(dist, rigs) if config.weighting == "importance" else None
        w, _ = tempered_weights(ll, logq, config.temperature, min_ess)
        samples = WeightedSamples(tuple(rigs), ll, w, logq)
        history.append(float(w @ -ll))
        if callback is not None:
            callback(it, samples)
        map_rig = rigs[int(np.argmax(ll))]
        if it == config.iterations - 1:
            break
        try:
            dist = update_distribution(dist, rigs, w)
        except DegenerateSamples as exc:
            log.info("iteration %d: %s; inflating the previous proposal", it, exc)
            dist = inflate_distribution(dist, 2.0)
        pts = _front_points(map_rig, keypoints)
        if len(pts):
            grid = VoxelGrid.cube(np.median(pts, axis=0), side, config.grid_dims)

    if config.fusion_weights == "proposal":
        fw = np.exp(proposal_logpdf(dist, samples.rigs))
        fw = fw / fw.sum()
    else:
        fw = samples.weights
    keep = fw >= config.fusion_min_weight * fw.max()
    if config.fusion_max_samples is not None and keep.sum() > config.fusion_max_samples:
        order = np.argsort(-fw, kind="stable")
        keep = np.zeros_like(keep)
        keep[order[:config.fusion_max_samples]] = True
    fw = np.where(keep, fw, 0.0)
    fw = fw / fw.sum()
    idx = np.flatnonzero(keep)
    fused = fuse_volumes([samples.rigs[i] for i in idx], fw[idx], hm, grid)
    return PtResult(fused, map_rig, tuple(history), dist, samples, init_rig, grid, mode)


def extract_pose(result: PtResult, temperature: float = 0.02) -> np.ndarray:
    """Landmark positions (normalized frame) as the soft-argmax of the fused volume.

    Raises ZeroMassVolume if some channel received no evidence at all.
    """
    vol = result.fused_volume
    mass = vol.values.reshape(vol.channels, -1).sum(axis=1)
    if np.any(mass < 1e-12):
        raise ZeroMassVolume(f"{int(np.sum(mass < 1e-12))} channel(s) of the fused volume have no mass")
    return softargmax(vol, temperature)
