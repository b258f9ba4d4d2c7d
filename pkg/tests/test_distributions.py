import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from probtri.distributions import (
    AcgParams,
    MvtParams,
    acg_fit_weighted,
    acg_logpdf,
    acg_sample,
    effective_sample_size,
    mvt_fit_weighted,
    mvt_logpdf,
    mvt_sample,
)
from probtri.errors import DegenerateSamples

seeds = st.integers(0, 2**32 - 1)


def random_spd(rng, d=3, scale=1.0):
    A = rng.normal(0, 1, (d, d))
    return scale * (A @ A.T + d * np.eye(d))


# ---------------------------------------------------------------------------
# ACG
# ---------------------------------------------------------------------------

def test_acg_isotropic_moments():
    x = acg_sample(AcgParams.isotropic(4), np.random.default_rng(0), 100_000)
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-12)
    se = np.sqrt(0.25 / len(x))
    assert np.all(np.abs(x.mean(axis=0)) < 3 * se)
    np.testing.assert_allclose(x.T @ x / len(x), np.eye(4) / 4, atol=0.01)


def test_acg_anisotropic_concentration():
    p = AcgParams(np.diag([100.0, 1e-4, 1e-4, 1e-4]))
    x = acg_sample(p, np.random.default_rng(1), 10_000)
    assert np.mean(np.abs(x[:, 0]) > 0.9) > 0.99


def test_acg_sampling_deterministic():
    p = AcgParams(random_spd(np.random.default_rng(2), 4))
    a = acg_sample(p, np.random.default_rng(7), 50)
    b = acg_sample(p, np.random.default_rng(7), 50)
    np.testing.assert_array_equal(a, b)


@given(seeds)
def test_acg_logpdf_antipodal(seed):
    rng = np.random.default_rng(seed)
    p = AcgParams(random_spd(rng, 4))
    x = rng.normal(0, 1, 4)
    x /= np.linalg.norm(x)
    assert acg_logpdf(p, x) == acg_logpdf(p, -x)


def test_acg_logpdf_uniform_s3():
    x = acg_sample(AcgParams.isotropic(4), np.random.default_rng(3), 20)
    np.testing.assert_allclose(acg_logpdf(AcgParams.isotropic(4), x), np.log(1 / (2 * np.pi**2)), atol=1e-12)


def test_acg_logpdf_integrates_to_one_on_s2():
    p = AcgParams(np.diag([5.0, 1.0, 0.3]) + 0.2)
    n_t, n_p = 800, 1600
    theta = (np.arange(n_t) + 0.5) * np.pi / n_t
    phi = (np.arange(n_p) + 0.5) * 2 * np.pi / n_p
    T, P = np.meshgrid(theta, phi, indexing="ij")
    x = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1)
    dA = np.sin(T) * (np.pi / n_t) * (2 * np.pi / n_p)
    assert np.sum(np.exp(acg_logpdf(p, x)) * dA) == pytest.approx(1.0, abs=1e-3)


def test_acg_fit_recovers_identity():
    x = acg_sample(AcgParams.isotropic(4), np.random.default_rng(4), 10_000)
    fit = acg_fit_weighted(x, np.full(len(x), 1 / len(x)))
    assert np.linalg.norm(fit.Lambda - np.eye(4)) < 0.1


def test_acg_fit_point_mass_on_e1():
    rng = np.random.default_rng(5)
    x = acg_sample(AcgParams.isotropic(3), rng, 30)
    x[:10] = [1.0, 0, 0]
    x[10:20] = [-1.0, 0, 0]
    w = np.r_[np.full(20, 1 / 20), np.zeros(10)]
    fit = acg_fit_weighted(x, w, min_ess=1.0)
    axis = fit.principal_axis()
    assert min(np.linalg.norm(axis - [1, 0, 0]), np.linalg.norm(axis + [1, 0, 0])) < 1e-6
    assert np.all(np.linalg.eigvalsh(fit.Lambda) > 0)


@given(seeds)
def test_acg_fit_sign_flip_invariant(seed):
    rng = np.random.default_rng(seed)
    x = acg_sample(AcgParams(random_spd(rng, 4)), rng, 200)
    w = rng.random(200)
    w /= w.sum()
    flips = np.where(rng.random(200) < 0.5, -1.0, 1.0)[:, None]
    a = acg_fit_weighted(x, w)
    b = acg_fit_weighted(x * flips, w)
    np.testing.assert_allclose(a.Lambda, b.Lambda, atol=1e-10)
    assert np.trace(a.Lambda) == pytest.approx(4.0, abs=1e-9)
    assert np.all(np.linalg.eigvalsh(a.Lambda) > 0)


def test_acg_fit_requires_effective_samples():
    x = acg_sample(AcgParams.isotropic(4), np.random.default_rng(6), 10)
    w = np.zeros(10)
    w[:3] = 1 / 3
    with pytest.raises(DegenerateSamples):
        acg_fit_weighted(x, w)


def test_acg_sample_fit_stability():
    rng = np.random.default_rng(8)
    p = AcgParams(np.diag([6.0, 2.0, 1.0, 0.5]))
    u = np.full(10_000, 1e-4)
    first = acg_fit_weighted(acg_sample(p, rng, 10_000), u)
    second = acg_fit_weighted(acg_sample(first, rng, 10_000), u)
    assert np.linalg.norm(second.Lambda - first.Lambda) < 0.05 * 4


def test_acg_sign_symmetry_of_samples():
    x = acg_sample(AcgParams(np.diag([3.0, 1.0, 1.0, 0.5])), np.random.default_rng(9), 100_000)
    pos = int(np.sum(x[:, 0] > 0))
    assert stats.binomtest(pos, len(x), 0.5).pvalue > 1e-3


# ---------------------------------------------------------------------------
# Multivariate t
# ---------------------------------------------------------------------------

def test_mvt_sample_median_and_covariance():
    rng = np.random.default_rng(10)
    S = random_spd(rng, 3, 0.1)
    p = MvtParams(np.array([1.0, -2.0, 0.5]), S, 10.0)
    x = mvt_sample(p, rng, 100_000)
    sd = np.sqrt(np.diag(p.covariance))
    se_median = 1.2533 * sd / np.sqrt(len(x))
    assert np.all(np.abs(np.median(x, axis=0) - p.mu) < 3 * se_median)
    cov = np.cov(x.T)
    assert np.linalg.norm(cov - S * 10 / 8) < 0.05 * np.linalg.norm(S * 10 / 8)


def test_mvt_sampling_deterministic():
    p = MvtParams(np.zeros(3), np.eye(3), 5.0)
    np.testing.assert_array_equal(mvt_sample(p, np.random.default_rng(3), 20), mvt_sample(p, np.random.default_rng(3), 20))


@given(seeds)
def test_mvt_logpdf_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    p = MvtParams(rng.normal(0, 1, 3), random_spd(rng), float(rng.uniform(2.5, 30)))
    x = rng.normal(0, 2, (5, 3))
    ref = stats.multivariate_t(loc=p.mu, shape=p.Scale, df=p.nu).logpdf(x)
    np.testing.assert_allclose(mvt_logpdf(p, x), ref, rtol=1e-10)


@given(seeds)
def test_mvt_logpdf_mode_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    p = MvtParams(rng.normal(0, 1, 3), random_spd(rng), 5.0)
    v = rng.normal(0, 1, 3)
    assert mvt_logpdf(p, p.mu) > mvt_logpdf(p, p.mu + v)
    assert mvt_logpdf(p, p.mu + v) == pytest.approx(mvt_logpdf(p, p.mu - v), abs=1e-12)


def test_mvt_logpdf_integrates_to_one():
    p = MvtParams(np.zeros(3), np.eye(3), 10.0)
    n, half = 161, 16.0
    ax = np.linspace(-half, half, n)
    X = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
    h = ax[1] - ax[0]
    assert np.exp(mvt_logpdf(p, X)).sum() * h**3 == pytest.approx(1.0, abs=1e-2)


def test_mvt_fit_point_mass():
    rng = np.random.default_rng(11)
    x = rng.normal(0, 1, (20, 3))
    w = np.zeros(20)
    w[4] = 1.0
    fit = mvt_fit_weighted(x, w, min_ess=1.0)
    np.testing.assert_allclose(fit.mu, x[4])
    np.testing.assert_allclose(fit.Scale, 1e-6 * np.eye(3), atol=1e-15)


def test_mvt_fit_moment_recovery():
    rng = np.random.default_rng(12)
    S = np.array([[0.5, 0.1, 0.0], [0.1, 0.3, -0.05], [0.0, -0.05, 0.2]])
    truth = MvtParams(np.array([0.3, -0.1, 2.0]), S, 10.0)
    x = mvt_sample(truth, rng, 10_000)
    fit = mvt_fit_weighted(x, np.full(len(x), 1e-4), nu=10.0)
    assert np.linalg.norm(fit.mu - truth.mu) < 0.05
    assert np.linalg.norm(fit.Scale - S) < 0.1 * np.linalg.norm(S)
    em = mvt_fit_weighted(x, np.full(len(x), 1e-4), nu=10.0, method="em")
    assert np.linalg.norm(em.mu - truth.mu) < 0.05
    assert np.linalg.norm(em.Scale - S) < 0.1 * np.linalg.norm(S)


def test_mvt_em_ignores_diffuse_background():
    rng = np.random.default_rng(13)
    tight = rng.normal(1.0, 0.01, (200, 3))
    broad = rng.normal(0.0, 1.0, (200, 3))
    x = np.vstack([tight, broad])
    w = np.full(400, 1 / 400)
    em = mvt_fit_weighted(x, w, method="em")
    mom = mvt_fit_weighted(x, w)
    assert np.trace(em.Scale) < np.trace(mom.Scale)


@given(seeds)
def test_mvt_fit_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1, (50, 3))
    w = rng.random(50)
    w /= w.sum()
    perm = rng.permutation(50)
    a, b = mvt_fit_weighted(x, w), mvt_fit_weighted(x[perm], w[perm])
    np.testing.assert_allclose(a.mu, b.mu, atol=1e-12)
    np.testing.assert_allclose(a.Scale, b.Scale, atol=1e-12)


def test_mvt_fit_requires_effective_samples():
    with pytest.raises(DegenerateSamples):
        mvt_fit_weighted(np.zeros((3, 3)), np.full(3, 1 / 3))


def test_params_validation():
    with pytest.raises(ValueError):
        MvtParams(np.zeros(3), np.eye(3), 2.0)
    for bad in (-np.eye(3), np.diag([1.0, -0.5, 1.0])):
        with pytest.raises(ValueError):
            AcgParams(bad)
    assert np.trace(AcgParams(7 * np.eye(4)).Lambda) == pytest.approx(4.0)


def test_effective_sample_size():
    assert effective_sample_size(np.ones(10)) == pytest.approx(10)
    assert effective_sample_size([1.0, 0, 0]) == pytest.approx(1)
