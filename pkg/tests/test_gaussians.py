import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volsplat.errors import InvalidParameterError, SingularMatrixError
from volsplat.gaussians import (GaussianCloud, condition_number, covariance_from_rs,
                                ellipsoid_volume, gaussian_density, quat_to_rotmat,
                                quat_to_rotmat_vjp, split_eigenvalues, split_log_scales)

LOG_S = np.log([0.1, 0.2, 0.3])
IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])

quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 0.1).map(lambda q: np.array(q) / np.linalg.norm(q))
log_scales = st.lists(st.floats(-5, 2), min_size=3, max_size=3).map(np.array)


def det3(m):
    """Cofactor expansion, independent of any library determinant."""
    return (m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
            - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
            + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0]))


def test_covariance_identity():
    np.testing.assert_array_equal(covariance_from_rs(IDENTITY_Q, np.zeros(3)), np.eye(3))


def test_covariance_diagonal():
    np.testing.assert_allclose(covariance_from_rs(IDENTITY_Q, LOG_S),
                               np.diag([0.01, 0.04, 0.09]), rtol=1e-12)


def test_covariance_eigenvalues_random_rotation():
    rng = np.random.default_rng(3)
    q = rng.normal(size=4)
    cov = covariance_from_rs(q / np.linalg.norm(q), LOG_S)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), [0.01, 0.04, 0.09], rtol=1e-9)


def test_covariance_rejects_nonfinite():
    with pytest.raises(InvalidParameterError):
        covariance_from_rs(IDENTITY_Q, [0.0, np.nan, 0.0])


@settings(max_examples=200, deadline=None)
@given(quats, log_scales)
def test_covariance_symmetric_psd(q, ls):
    cov = covariance_from_rs(q, ls)
    assert np.array_equal(cov, cov.T)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(np.exp(2 * ls)),
                               rtol=1e-9, atol=1e-9 * np.exp(2 * ls).max())


def test_rotation_matrix_orthonormal():
    rng = np.random.default_rng(0)
    R = quat_to_rotmat(rng.normal(size=(50, 4)))
    np.testing.assert_allclose(R @ np.swapaxes(R, 1, 2), np.broadcast_to(np.eye(3), R.shape),
                               atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_rotation_vjp_matches_finite_differences():
    rng = np.random.default_rng(1)
    q = rng.normal(size=4)
    g = rng.normal(size=(3, 3))
    f = lambda qq: np.sum(quat_to_rotmat(qq) * g)
    h = 1e-6
    fd = np.array([(f(q + h * e) - f(q - h * e)) / (2 * h) for e in np.eye(4)])
    np.testing.assert_allclose(quat_to_rotmat_vjp(q, g), fd, rtol=1e-6, atol=1e-9)


def test_density_at_mean_is_one():
    cov = covariance_from_rs(np.array([0.9, 0.1, -0.3, 0.2]) / np.linalg.norm([0.9, 0.1, -0.3, 0.2]),
                             LOG_S)
    assert gaussian_density([1.0, 2.0, 3.0], cov, [1.0, 2.0, 3.0]) == 1.0


def test_density_unit_mahalanobis():
    assert gaussian_density(np.zeros(3), np.eye(3), [1.0, 0.0, 0.0]) == pytest.approx(
        math.exp(-0.5), rel=1e-15)
    assert gaussian_density(np.zeros(3), np.eye(3), [1.0, 0.0, 0.0]) == pytest.approx(0.606531, abs=1e-6)


def test_density_matches_explicit_inverse():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = rng.normal(size=(3, 3))
        cov = a @ a.T + 0.1 * np.eye(3)
        mu, x = rng.normal(size=3), rng.normal(size=3)
        d = x - mu
        expected = math.exp(-0.5 * d @ np.linalg.inv(cov) @ d)
        assert gaussian_density(mu, cov, x) == pytest.approx(expected, rel=1e-10)


def test_density_singular():
    with pytest.raises(SingularMatrixError):
        gaussian_density(np.zeros(3), np.diag([1.0, 1.0, 0.0]), np.ones(3))


@settings(max_examples=100, deadline=None)
@given(quats, log_scales, st.floats(0.05, 3.0))
def test_density_reparameterization_and_monotone(q, ls, t):
    cov = covariance_from_rs(q, ls)
    # flipping the quaternion sign is a different (R, S) pair with the same covariance
    cov2 = covariance_from_rs(-q, ls)
    direction = np.array([0.3, -0.5, 0.8])
    x = t * direction * np.exp(ls.max())
    assert gaussian_density(np.zeros(3), cov, x) == pytest.approx(
        gaussian_density(np.zeros(3), cov2, x), rel=1e-9)
    assert gaussian_density(np.zeros(3), cov, 1.5 * x) <= gaussian_density(np.zeros(3), cov, x)


def test_density_axis_permutation_reparameterization():
    # R Q with Q a permutation-rotation and permuted scales leaves the covariance unchanged
    ls = np.log([0.2, 0.5, 1.0])
    base = covariance_from_rs(IDENTITY_Q, ls)
    q90z = np.array([math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)])
    swapped = covariance_from_rs(q90z, ls[[1, 0, 2]])
    np.testing.assert_allclose(base, swapped, atol=1e-12)


def test_volume_unit_sphere():
    assert ellipsoid_volume(np.zeros(3)) == pytest.approx(4 * math.pi / 3, rel=1e-15)
    assert ellipsoid_volume(np.zeros(3)) == pytest.approx(4.18879, abs=1e-5)


def test_volume_generic_determinant():
    cov = covariance_from_rs(IDENTITY_Q, LOG_S)
    oracle = 4.0 / 3.0 * math.pi * math.sqrt(det3(cov))
    assert ellipsoid_volume(LOG_S) == pytest.approx(oracle, rel=1e-12)
    assert ellipsoid_volume(LOG_S) == pytest.approx(0.0251327, abs=1e-7)


# a float64 determinant of Sigma loses ~eps * cond(Sigma) digits, so keep cond <= e^10
moderate_log_scales = log_scales.filter(lambda ls: ls.max() - ls.min() <= 5.0)


@settings(max_examples=200, deadline=None)
@given(quats, moderate_log_scales)
def test_volume_rotation_invariant(q, ls):
    oracle = 4.0 / 3.0 * math.pi * math.sqrt(det3(covariance_from_rs(q, ls)))
    assert ellipsoid_volume(ls) == pytest.approx(oracle, rel=1e-9)


def test_volume_threshold_comparison():
    assert ellipsoid_volume(LOG_S) < 0.03


def test_condition_number_examples():
    assert condition_number(np.log([0.3, 0.3, 0.3])) == 1.0
    assert condition_number(np.log([2.0, 1.0, 1.0])) == pytest.approx(4.0, rel=1e-15)


@settings(max_examples=100, deadline=None)
@given(quats, log_scales, st.floats(-3, 3))
def test_condition_number_invariances(q, ls, shift):
    eig = np.linalg.eigvalsh(covariance_from_rs(q, ls))
    assert condition_number(ls) == pytest.approx(eig[-1] / eig[0], rel=1e-6)
    # uniform scaling by c = exp(shift)
    assert condition_number(ls + shift) == pytest.approx(condition_number(ls), rel=1e-12)


def test_split_eigenvalues_examples():
    np.testing.assert_allclose(split_eigenvalues([4.0, 1.0, 1.0], 4.0), [1.0, 0.25, 0.25])
    np.testing.assert_array_equal(split_eigenvalues([0.2, 0.2, 0.2], 1.0), [0.2, 0.2, 0.2])
    child = split_eigenvalues([0.09, 0.04, 0.01], 9.0)
    np.testing.assert_allclose(child, [0.01, 0.04 / 9, 0.01 / 9], rtol=1e-12)
    parent_vol = 4 / 3 * math.pi * math.sqrt(0.09 * 0.04 * 0.01)
    child_vol = 4 / 3 * math.pi * math.sqrt(np.prod(child))
    assert child_vol == pytest.approx(parent_vol * 9 ** -1.5, rel=1e-12)


def test_split_eigenvalues_rejects_small_kappa():
    with pytest.raises(InvalidParameterError):
        split_eigenvalues([1.0, 1.0, 1.0], 0.5)


@settings(max_examples=200, deadline=None)
@given(log_scales)
def test_split_log_scales_matches_eigen_rule(ls):
    kappa = condition_number(ls)
    child = split_log_scales(ls)
    np.testing.assert_allclose(np.exp(2 * child), split_eigenvalues(np.exp(2 * ls), kappa),
                               rtol=1e-9)
    assert condition_number(child) == pytest.approx(kappa, rel=1e-9)
    assert ellipsoid_volume(child) == pytest.approx(ellipsoid_volume(ls) * kappa ** -1.5, rel=1e-9)


def test_split_log_scales_floor():
    child = split_log_scales(np.log([10.0, 1e-3, 1e-3]), floor=math.log(1e-5))
    assert np.all(child >= math.log(1e-5))


def test_cloud_append_select_keep_lockstep():
    rng = np.random.default_rng(0)
    n = 5
    cloud = GaussianCloud(rng.normal(size=(n, 3)), np.tile(IDENTITY_Q, (n, 1)),
                          rng.normal(size=(n, 3)), rng.normal(size=n), np.zeros((n, 4, 3)))
    cloud.exp_avg["positions"][:] = 1.0
    cloud.append(**{k: v[:2] for k, v in cloud.params().items()})
    assert len(cloud) == 7
    assert np.all(cloud.exp_avg["positions"][5:] == 0)
    for arr in (cloud.grad_accum, cloud.grad_count, *cloud.exp_avg.values(),
                *cloud.exp_avg_sq.values()):
        assert len(arr) == 7
    cloud.keep(np.array([True, False] * 3 + [True]))
    assert len(cloud) == 4 and len(cloud.exp_avg_sq["sh"]) == 4
    cloud.validate()


def test_cloud_rejects_mismatched_lengths():
    with pytest.raises(InvalidParameterError):
        GaussianCloud(np.zeros((2, 3)), np.tile(IDENTITY_Q, (3, 1)), np.zeros((2, 3)),
                      np.zeros(2), np.zeros((2, 1, 3)))
