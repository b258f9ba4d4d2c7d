import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from probtri.errors import FlatHeatmap, InitFailed, ZeroMassVolume
from probtri.geometry import quat_distance
from probtri.harness.scene import NoiseModel, gen_scene, render_observations
from probtri.heatmap import VoxelGrid, VoxelVolume, build_volume, render_gaussian_heatmap
from probtri.inference import (
    PtConfig,
    PtResult,
    WeightedSamples,
    estimate_init_rig,
    extract_pose,
    fuse_volumes,
    init_distribution,
    landmark_grid,
    log_likelihood,
    log_likelihoods,
    keypoints_from_heatmaps,
    posterior_weights,
    proposal_logpdf,
    run,
    sample_rigs,
    update_distribution,
)

seeds = st.integers(0, 2**32 - 1)
SMALL = PtConfig(iterations=2, samples=48, grid_dims=12, max_likelihood_channels=4)


def noiseless(seed=0, cams=4, joints=17, frames=2):
    scene = gen_scene(cams, joints, frames, seed=seed)
    kp, hm = render_observations(scene)
    return scene, kp, hm


def test_keypoints_subpixel_gaussian():
    hm = render_gaussian_heatmap((20.5, 31.25), 2.0, 64, 64)[None, None]
    np.testing.assert_allclose(keypoints_from_heatmaps(hm)[0, 0], [20.5, 31.25], atol=0.1)


def test_keypoints_one_hot_and_flat():
    hm = np.zeros((1, 1, 16, 16))
    hm[0, 0, 5, 9] = 1.0
    np.testing.assert_array_equal(keypoints_from_heatmaps(hm)[0, 0], [9, 5])
    with pytest.raises(FlatHeatmap):
        keypoints_from_heatmaps(np.full((2, 1, 16, 16), 0.3))


def test_estimate_init_rig_noiseless():
    scene, kp, _ = noiseless(1)
    rig = estimate_init_rig(kp, scene.rig.intrinsics)
    gt = scene.normalized_rig()
    assert np.max(quat_distance(rig.rotations, gt.rotations)) < 1e-3
    assert rig.is_normalized(1e-9)


def test_estimate_init_rig_two_views_and_too_few():
    scene, kp, _ = noiseless(2, cams=2)
    rig = estimate_init_rig(kp, scene.rig.intrinsics)
    assert len(rig) == 2
    assert np.linalg.norm(rig.translations[1]) == pytest.approx(1.0, abs=1e-12)
    scene, kp, _ = noiseless(3, joints=5, frames=1)
    with pytest.raises(InitFailed):
        estimate_init_rig(kp, scene.rig.intrinsics)


def test_init_distribution_uniform_limit():
    scene, _, _ = noiseless(4)
    cfg = PtConfig(samples=4096, init_local_fraction=0.0)
    dist = init_distribution(scene.normalized_rig(), cfg, np.random.default_rng(0))
    assert all(p.eigenvalue_ratio() < 1.5 for p in dist.rotations)


def test_init_distribution_concentrated_and_deterministic():
    gt = noiseless(5)[0].normalized_rig()
    cfg = PtConfig(samples=512, init_local_fraction=1.0, local_rot_sigma=1e-4, local_trans_sigma=1e-4)
    dist = init_distribution(gt, cfg, np.random.default_rng(1))
    for k, p in enumerate(dist.rotations, start=1):
        assert quat_distance(p.principal_axis(), gt.rotations[k]) < 1e-2
    again = init_distribution(gt, cfg, np.random.default_rng(1))
    np.testing.assert_array_equal(again.rotations[0].Lambda, dist.rotations[0].Lambda)
    np.testing.assert_array_equal(again.translations[0].Scale, dist.translations[0].Scale)


def test_init_distribution_requires_intrinsics_without_rig():
    with pytest.raises(ValueError):
        init_distribution(None, SMALL, np.random.default_rng(0))


def test_sample_rigs_concentration_and_reproducibility():
    gt = noiseless(6)[0].normalized_rig()
    cfg = PtConfig(samples=1024, init_local_fraction=1.0)
    dist = init_distribution(gt, cfg, np.random.default_rng(2))
    rigs = sample_rigs(dist, 500, np.random.default_rng(3))
    assert all(r.is_normalized(1e-9) for r in rigs)
    for k in range(1, len(gt)):
        d = quat_distance(np.stack([r.rotations[k] for r in rigs]), gt.rotations[k])
        assert d.mean() < 3 * cfg.local_rot_sigma
    again = sample_rigs(dist, 500, np.random.default_rng(3))
    np.testing.assert_array_equal(again[7].translations, rigs[7].translations)


@pytest.mark.parametrize("residual", ["raw", "normalized"])
def test_log_likelihood_zero_heatmaps(residual):
    scene, _, _ = noiseless(7)
    grid = VoxelGrid.cube(np.zeros(3), 2.0, 8)
    rigs = sample_rigs(init_distribution(None, SMALL, np.random.default_rng(0), scene.rig.intrinsics),
                       5, np.random.default_rng(1))
    zero = np.zeros((4, 3, 64, 64))
    np.testing.assert_array_equal(log_likelihoods(rigs, zero, grid, residual=residual), 0.0)


@pytest.mark.parametrize("residual", ["raw", "normalized"])
def test_log_likelihood_joint_permutation(residual):
    scene, kp, hm = noiseless(8, joints=6, frames=1)
    rig = scene.normalized_rig()
    grid = landmark_grid(scene.normalized_points(), 12)
    perm = np.random.default_rng(0).permutation(6)
    a = log_likelihood(rig, hm, grid, residual=residual)
    b = log_likelihood(rig, hm[:, perm], grid, residual=residual)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-300)


def _samples(ll, logq=None):
    ll = np.asarray(ll, dtype=np.float64)
    return WeightedSamples(tuple([None] * len(ll)), ll, np.zeros(len(ll)), logq)


def test_posterior_weights_examples():
    w = posterior_weights(_samples(np.full(10, -3.0), np.full(10, 2.0)))
    np.testing.assert_allclose(w, 0.1)
    T = 0.01
    ll = np.zeros(10)
    ll[4] = 100 * T
    w = posterior_weights(_samples(ll, np.zeros(10)), temperature=T)
    assert w[4] > 0.99


@given(seeds)
def test_posterior_weights_normalized(seed):
    rng = np.random.default_rng(seed)
    ll = rng.normal(0, 50, 30)
    logq = rng.normal(0, 5, 30)
    for mode in ("importance", "likelihood"):
        w = posterior_weights(_samples(ll, logq), temperature=0.5, mode=mode)
        assert np.all(w >= 0)
        assert w.sum() == pytest.approx(1.0, abs=1e-9)
    wi = posterior_weights(_samples(ll, logq), mode="importance")
    wl = posterior_weights(_samples(ll - logq), mode="likelihood")
    np.testing.assert_allclose(wi, wl, atol=1e-12)


def test_update_distribution_point_mass():
    gt = noiseless(9)[0].normalized_rig()
    dist = init_distribution(gt, PtConfig(samples=256), np.random.default_rng(0))
    rigs = sample_rigs(dist, 256, np.random.default_rng(1))
    w = np.zeros(256)
    w[17] = 1.0
    new = update_distribution(dist, rigs, w, min_ess=1.0)
    assert all(p.eigenvalue_ratio() > 100 for p in new.rotations)
    for k, p in enumerate(new.rotations, start=1):
        assert quat_distance(p.principal_axis(), rigs[17].rotations[k]) < 1e-6


def test_update_distribution_fixed_point():
    gt = noiseless(10)[0].normalized_rig()
    dist = init_distribution(gt, PtConfig(samples=4096, init_local_fraction=1.0, local_rot_sigma=0.05,
                                          local_trans_sigma=0.05), np.random.default_rng(2))
    rigs = sample_rigs(dist, 4096, np.random.default_rng(3))
    new = update_distribution(dist, rigs, np.full(4096, 1 / 4096))
    for a, b in zip(dist.rotations, new.rotations):
        assert np.linalg.norm(a.Lambda - b.Lambda) < 0.05 * np.linalg.norm(a.Lambda)
    for a, b in zip(dist.translations, new.translations):
        assert np.linalg.norm(a.Scale - b.Scale) < 0.05 * np.linalg.norm(a.Scale)
    assert np.linalg.norm(dist.direction.Lambda - new.direction.Lambda) < 0.05 * np.linalg.norm(dist.direction.Lambda)
    again = update_distribution(dist, rigs, np.full(4096, 1 / 4096))
    np.testing.assert_array_equal(again.rotations[1].Lambda, new.rotations[1].Lambda)


def test_proposal_logpdf_finite_on_own_draws():
    gt = noiseless(11)[0].normalized_rig()
    dist = init_distribution(gt, PtConfig(samples=256), np.random.default_rng(4))
    rigs = sample_rigs(dist, 10, np.random.default_rng(5))
    assert np.all(np.isfinite(proposal_logpdf(dist, rigs)))


def test_fuse_volumes_examples():
    scene, _, hm = noiseless(12, joints=5, frames=2)
    grid = landmark_grid(scene.normalized_points(), 10)
    rig = scene.normalized_rig()
    single = build_volume(hm, rig, grid).values
    np.testing.assert_allclose(fuse_volumes([rig], [1.0], hm, grid).values, single, atol=1e-12)
    np.testing.assert_allclose(fuse_volumes([rig, rig], [0.5, 0.5], hm, grid).values, single, atol=1e-12)
    rigs = sample_rigs(init_distribution(rig, PtConfig(samples=64), np.random.default_rng(0)), 5,
                       np.random.default_rng(1))
    w = np.random.default_rng(2).dirichlet(np.ones(5))
    per = np.stack([build_volume(hm, r, grid).values for r in rigs])
    fused = fuse_volumes(rigs, w, hm, grid).values
    assert np.all(fused >= per.min(axis=0) - 1e-12)
    assert np.all(fused <= per.max(axis=0) + 1e-12)


def test_run_zero_iterations_is_init_path():
    scene, kp, hm = noiseless(13)
    cfg = PtConfig(iterations=0, grid_dims=12)
    res = run(hm, scene.rig.intrinsics, cfg)
    init = estimate_init_rig(keypoints_from_heatmaps(hm), scene.rig.intrinsics)
    assert res.init_mode == "eight-point"
    assert res.map_rig is res.init_rig
    np.testing.assert_allclose(res.map_rig.rotations, init.rotations, atol=1e-12)
    np.testing.assert_allclose(res.fused_volume.values, build_volume(hm, res.map_rig, res.grid).values, atol=1e-12)
    assert res.mean_residual_history == ()


def test_run_deterministic():
    scene, _, hm = noiseless(14)
    a = run(hm, scene.rig.intrinsics, SMALL)
    b = run(hm, scene.rig.intrinsics, SMALL)
    np.testing.assert_array_equal(a.samples.weights, b.samples.weights)
    np.testing.assert_array_equal(a.map_rig.rotations, b.map_rig.rotations)
    np.testing.assert_array_equal(a.map_rig.translations, b.map_rig.translations)
    assert a.samples.weights.sum() == pytest.approx(1.0, abs=1e-9)
    assert len(a.mean_residual_history) == SMALL.iterations


def test_run_threads_do_not_change_result():
    scene, _, hm = noiseless(15)
    from dataclasses import replace

    a = run(hm, scene.rig.intrinsics, SMALL)
    b = run(hm, scene.rig.intrinsics, replace(SMALL, threads=3))
    np.testing.assert_array_equal(a.samples.weights, b.samples.weights)


def test_run_uniform_mode_and_callback():
    scene, _, hm = noiseless(16)
    from dataclasses import replace

    seen = []
    res = run(hm, scene.rig.intrinsics, replace(SMALL, use_init=False), callback=lambda it, s: seen.append(it))
    assert res.init_mode == "uniform" and res.init_rig is None
    assert seen == [0, 1]
    with pytest.raises(InitFailed):
        run(hm, scene.rig.intrinsics, replace(SMALL, use_init=False, iterations=0))


def test_run_init_hypotheses_keep_best_score():
    scene = gen_scene(4, 17, 2, seed=17)
    _, hm = render_observations(scene, NoiseModel(pixel_sigma=1.0, outlier_rate=0.1, seed=1))
    from dataclasses import replace

    cfg = replace(SMALL, iterations=0, max_likelihood_channels=None)
    one = run(hm, scene.rig.intrinsics, cfg)
    many = run(hm, scene.rig.intrinsics, replace(cfg, init_hypotheses=4))
    ll_one = log_likelihood(one.init_rig, hm, one.grid, residual="normalized")
    ll_many = log_likelihood(many.init_rig, hm, many.grid, residual="normalized")
    assert ll_many >= ll_one - 1e-12


@pytest.mark.parametrize("bad", [dict(iterations=-1), dict(temperature=0.0), dict(nu=2.0), dict(residual="x"),
                                 dict(init_hypotheses=0), dict(threads=0), dict(init_local_fraction=1.5)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        PtConfig(**bad)


def _result_with(vol):
    return PtResult(vol, None, (), None, None, None, vol.grid, "eight-point")


def test_extract_pose_one_hot_and_permutation():
    grid = VoxelGrid.cube(np.zeros(3), 1.0, 6)
    vals = np.zeros((3,) + grid.dims)
    cells = [(1, 2, 3), (5, 0, 4), (2, 2, 2)]
    for s, c in enumerate(cells):
        vals[(s,) + c] = 1.0
    pts = extract_pose(_result_with(VoxelVolume(grid, vals)), temperature=1e-3)
    for s, c in enumerate(cells):
        np.testing.assert_allclose(pts[s], grid.center_of(c), atol=1e-12)
    perm = [2, 0, 1]
    permuted = extract_pose(_result_with(VoxelVolume(grid, vals[perm])), temperature=1e-3)
    np.testing.assert_array_equal(permuted, pts[perm])
    vals[1] = 0.0
    with pytest.raises(ZeroMassVolume):
        extract_pose(_result_with(VoxelVolume(grid, vals)))


def test_extract_pose_noiseless_within_one_voxel():
    scene, _, hm = noiseless(18)
    res = run(hm, scene.rig.intrinsics, PtConfig(iterations=0))
    pts = extract_pose(res)
    err = np.linalg.norm(pts - scene.normalized_points(), axis=1)
    assert np.median(err) < res.grid.voxel_size
