import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from probtri.errors import (
    CheiralityAmbiguous,
    DegenerateConfiguration,
    InsufficientInliers,
    ParallelRays,
)
from probtri.geometry import (
    CameraPose,
    CameraRig,
    Intrinsics,
    project_rig,
    quat_distance,
    quat_from_rotvec,
    quat_multiply,
    random_quaternion,
)
from probtri.harness.scene import gen_scene, render_observations
from probtri.multiview import (
    LmParams,
    RansacParams,
    bundle_adjust_lm,
    decompose_essential,
    eight_point_fundamental,
    essential_from_fundamental,
    ransac_eight_point,
    symmetric_epipolar_distance,
    triangulate_dlt,
    triangulate_points,
)

from oracles import pinhole, rotmat, skew

INTR = Intrinsics(100.0, 100.0, 50.0, 50.0)
seeds = st.integers(0, 2**32 - 1)


def two_view(rng, n=20, behind=False):
    """Camera a at the identity, camera b rotated up to ~30 degrees with a unit baseline."""
    q = quat_from_rotvec(rng.normal(0, 0.3, 3))
    R = rotmat(q)
    c_b = rng.normal(0, 1, 3)
    c_b[2] = 0.0
    c_b /= np.linalg.norm(c_b)
    t = -R @ c_b
    X = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(3, 6, n)])
    if behind:
        X = -X
    pa = np.array([pinhole(np.eye(3), np.zeros(3), 100, 100, 50, 50, x) for x in X])
    pb = np.array([pinhole(R, t, 100, 100, 50, 50, x) for x in X])
    return q, t, X, pa, pb


def _normalized(p):
    return np.column_stack([(p - 50.0) / 100.0, np.ones(len(p))])


@given(seeds)
def test_eight_point_epipolar_residual(seed):
    _, _, _, pa, pb = two_view(np.random.default_rng(seed))
    F = eight_point_fundamental(pa, pb)
    E = essential_from_fundamental(F, INTR, INTR)
    E /= np.linalg.norm(E)
    r = np.einsum("ni,ij,nj->n", _normalized(pb), E, _normalized(pa))
    assert np.abs(r).max() < 1e-8
    s = np.linalg.svd(F, compute_uv=False)
    assert s[2] < 1e-12 * s[0]


def test_eight_point_degenerate_pure_rotation_plane():
    rng = np.random.default_rng(0)
    R = rotmat(quat_from_rotvec([0.1, -0.2, 0.05]))
    X = np.column_stack([rng.uniform(-1, 1, 20), rng.uniform(-1, 1, 20), np.full(20, 4.0)])
    pa = np.array([pinhole(np.eye(3), np.zeros(3), 100, 100, 50, 50, x) for x in X])
    pb = np.array([pinhole(R, np.zeros(3), 100, 100, 50, 50, x) for x in X])
    with pytest.raises(DegenerateConfiguration):
        eight_point_fundamental(pa, pb)
    with pytest.raises(DegenerateConfiguration):
        eight_point_fundamental(pa[:7], pb[:7])


@given(seeds)
def test_essential_matches_cross_product_form(seed):
    q, t, _, pa, pb = two_view(np.random.default_rng(seed))
    E = essential_from_fundamental(eight_point_fundamental(pa, pb), INTR, INTR)
    truth = skew(t) @ rotmat(q)
    E, truth = E / np.linalg.norm(E), truth / np.linalg.norm(truth)
    assert min(np.linalg.norm(E - truth), np.linalg.norm(E + truth)) < 1e-6
    s = np.linalg.svd(E, compute_uv=False)
    assert s[0] == pytest.approx(s[1], abs=1e-9)
    assert s[2] < 1e-12


def test_essential_with_identity_intrinsics_is_projected_f():
    _, _, _, pa, pb = two_view(np.random.default_rng(1))
    F = eight_point_fundamental(pa, pb)
    eye = Intrinsics(1.0, 1.0, 0.0, 0.0)
    E = essential_from_fundamental(F, eye, eye)
    U, s, Vt = np.linalg.svd(F)
    m = 0.5 * (s[0] + s[1])
    np.testing.assert_allclose(E, U @ np.diag([m, m, 0]) @ Vt, atol=1e-12)


@given(seeds)
def test_decompose_recovers_pose(seed):
    q, t, _, pa, pb = two_view(np.random.default_rng(seed))
    E = essential_from_fundamental(eight_point_fundamental(pa, pb), INTR, INTR)
    pose = decompose_essential(E, pa, pb, INTR, INTR)
    assert quat_distance(pose.rotation, q) < 1e-6
    np.testing.assert_allclose(pose.translation, t, atol=1e-6)
    assert np.linalg.norm(pose.translation) == pytest.approx(1.0, abs=1e-12)


def test_decompose_mirrored_half_is_ambiguous():
    rng = np.random.default_rng(2)
    q, t, _, pa, pb = two_view(rng, 10)
    _, _, _, qa, qb = two_view(np.random.default_rng(2), 10, behind=True)
    E = skew(t) @ rotmat(q)
    with pytest.raises(CheiralityAmbiguous):
        decompose_essential(E, np.vstack([pa, qa]), np.vstack([pb, qb]), INTR, INTR)


def _planted(seed, n=50, frac=0.2):
    """Uniform outliers, redrawn until they break the true epipolar geometry by
    more than the inlier threshold (otherwise they are inliers by definition)."""
    rng = np.random.default_rng(seed)
    q, t, _, pa, pb = two_view(rng, n)
    K = INTR.K
    F = np.linalg.inv(K).T @ skew(t) @ rotmat(q) @ np.linalg.inv(K)
    out = rng.choice(n, int(frac * n), replace=False)
    pb = pb.copy()
    for i in out:
        pb[i] = rng.uniform(0, 100, 2)
        while symmetric_epipolar_distance(F, pa[i:i + 1], pb[i:i + 1])[0] < 2 * RansacParams().inlier_threshold:
            pb[i] = rng.uniform(0, 100, 2)
    truth = np.ones(n, dtype=bool)
    truth[out] = False
    return q, t, pa, pb, truth


@pytest.mark.parametrize("seed", range(10))
def test_ransac_recovers_planted_inliers(seed):
    _, _, pa, pb, truth = _planted(seed)
    _, mask = ransac_eight_point(pa, pb, INTR, INTR, RansacParams(seed=seed))
    assert np.all(mask[truth])


@pytest.mark.xfail(strict=True, reason="count-based selection can keep a model bent toward one outlier")
def test_ransac_pose_tolerance_with_planted_outliers():
    errors = []
    for seed in range(10):
        q, _, pa, pb, _ = _planted(seed)
        pose, _ = ransac_eight_point(pa, pb, INTR, INTR, RansacParams(seed=seed))
        errors.append(quat_distance(pose.rotation, q))
    assert max(errors) < 1e-4


def test_ransac_all_outliers():
    rng = np.random.default_rng(3)
    with pytest.raises(InsufficientInliers):
        ransac_eight_point(rng.uniform(0, 100, (50, 2)), rng.uniform(0, 100, (50, 2)), INTR, INTR)


def test_ransac_without_outliers_matches_direct_path():
    _, _, _, pa, pb = two_view(np.random.default_rng(4), 40)
    pose, mask = ransac_eight_point(pa, pb, INTR, INTR)
    assert mask.all()
    E = essential_from_fundamental(eight_point_fundamental(pa, pb), INTR, INTR)
    direct = decompose_essential(E, pa, pb, INTR, INTR)
    assert quat_distance(pose.rotation, direct.rotation) < 1e-9
    np.testing.assert_allclose(pose.translation, direct.translation, atol=1e-9)


def _inlier_count(pa, pb, threshold):
    """RANSAC inlier count; draws whose winning model has no cheirality majority are discarded."""
    try:
        _, mask = ransac_eight_point(pa, pb, INTR, INTR, RansacParams(seed=5, inlier_threshold=threshold, min_inliers=1))
    except CheiralityAmbiguous:
        assume(False)
    return int(mask.sum())


@settings(max_examples=20)
@given(seeds)
def test_ransac_deterministic_and_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    _, _, _, pa, pb = two_view(rng, 60)
    pb = pb + rng.normal(0, 1.0, pb.shape)
    counts = [_inlier_count(pa, pb, th) for th in (1.0, 2.0, 4.0, 8.0)]
    assert counts == sorted(counts)
    a = ransac_eight_point(pa, pb, INTR, INTR, RansacParams(seed=5, min_inliers=8))
    b = ransac_eight_point(pa, pb, INTR, INTR, RansacParams(seed=5, min_inliers=8))
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[0].rotation, b[0].rotation)


def _views(rng, K):
    poses = []
    for _ in range(K):
        q = random_quaternion(rng)
        poses.append(CameraPose(q, rotmat(q) @ -rng.normal(0, 1, 3) + [0, 0, 0]))
    return poses


def test_triangulate_dlt_four_views():
    p = np.array([0.3, -0.2, 1.5])
    rng = np.random.default_rng(6)
    poses = []
    for _ in range(5):
        q = quat_from_rotvec(rng.normal(0, 0.2, 3))
        poses.append(CameraPose(q, rotmat(q) @ -(p + rng.normal(0, 1, 3) - [0, 0, 4])))
    px = [pinhole(pp.R, pp.translation, 100, 100, 50, 50, p) for pp in poses]
    X4 = triangulate_dlt(poses[:4], [INTR] * 4, px[:4])
    X5 = triangulate_dlt(poses, [INTR] * 5, px)
    assert np.linalg.norm(X4 - p) < 1e-8
    assert np.linalg.norm(X5 - p) <= np.linalg.norm(X4 - p) + 1e-12


def test_triangulate_dlt_identical_poses():
    pose = CameraPose.identity()
    px = pinhole(np.eye(3), np.zeros(3), 100, 100, 50, 50, [0.1, 0.1, 2.0])
    with pytest.raises(ParallelRays):
        triangulate_dlt([pose, pose], [INTR, INTR], [px, px])


def test_triangulate_points_batch_matches_single():
    scene = gen_scene(3, 5, 2, seed=3)
    rig = scene.normalized_rig()
    pts = scene.normalized_points()
    kp, _ = project_rig(rig, pts)
    X = triangulate_points(rig, kp)
    np.testing.assert_allclose(X, pts, atol=1e-8)
    mask = np.ones(kp.shape[:2], dtype=bool)
    mask[1:, 0] = False
    assert np.isnan(triangulate_points(rig, kp, mask)[0]).all()


def _ba_problem(seed=0):
    scene = gen_scene(4, 8, 3, seed=seed)
    rig = scene.normalized_rig()
    pts = scene.normalized_points()
    kp, _ = project_rig(rig, pts)
    return rig, pts, kp


def test_ba_at_ground_truth():
    rig, pts, kp = _ba_problem()
    out, X, cost = bundle_adjust_lm(rig, kp, pts)
    assert cost < 1e-18
    np.testing.assert_allclose(X, pts, atol=1e-9)


def test_ba_noise_floor_at_ground_truth():
    rig, pts, kp = _ba_problem(1)
    rng = np.random.default_rng(0)
    noise = rng.normal(0, 0.5, kp.shape)
    calls = []
    _, _, cost = bundle_adjust_lm(rig, kp + noise, pts, callback=lambda it, c: calls.append(c))
    assert cost <= np.sum(noise**2)
    assert np.all(np.diff(calls) <= 0)


def test_ba_recovers_from_one_degree():
    rig, pts, kp = _ba_problem(2)
    rng = np.random.default_rng(1)
    poses = [rig.poses[0]] + [CameraPose(quat_multiply(quat_from_rotvec(rng.normal(0, np.deg2rad(1) / np.sqrt(3), 3)),
                                                       p.rotation), p.translation) for p in rig.poses[1:]]
    costs = []
    out, X, cost = bundle_adjust_lm(rig.with_poses(poses), kp, pts, callback=lambda it, c: costs.append(c))
    assert np.max(quat_distance(out.rotations, rig.rotations)) < 1e-5
    assert np.all(np.diff(costs) <= 0)
    assert out.is_normalized(1e-9)


def test_ba_far_start_gets_stuck():
    rig, pts, kp = _ba_problem(3)
    rng = np.random.default_rng(2)
    poses = [CameraPose.identity()]
    for k in range(1, len(rig)):
        t = np.array([-1.0, 0, 0]) if k == 1 else rng.normal(0, 0.1, 3) - [k, 0, 0]
        poses.append(CameraPose(quat_from_rotvec(rng.normal(0, 0.05, 3)), t))
    far = CameraRig(poses, rig.intrinsics)
    init = np.column_stack([(kp[0] - 32) / 70, np.ones(len(pts))])
    _, _, cost = bundle_adjust_lm(far, kp, init, LmParams(max_iterations=50))
    _, _, gt_cost = bundle_adjust_lm(rig, kp, pts)
    assert cost > gt_cost + 1.0


def test_ba_rejects_unnormalized_rig():
    rig, pts, kp = _ba_problem()
    moved = rig.with_poses([CameraPose(rig.poses[0].rotation, [1.0, 0, 0])] + list(rig.poses[1:]))
    with pytest.raises(ValueError):
        bundle_adjust_lm(moved, kp, pts)


@settings(max_examples=25)
@given(seeds)
def test_noiseless_pipeline_reproduces_geometry(seed):
    from probtri.inference import estimate_init_rig

    scene = gen_scene(4, 17, 2, seed=seed % 100_000)
    kp, _ = render_observations(scene, with_heatmaps=False)
    rig = estimate_init_rig(kp, scene.rig.intrinsics)
    gt = scene.normalized_rig()
    assert np.max(quat_distance(rig.rotations, gt.rotations)) < 1e-6
    np.testing.assert_allclose(rig.translations, gt.translations, atol=1e-6)
    np.testing.assert_allclose(triangulate_points(rig, kp), scene.normalized_points(), atol=1e-6)
