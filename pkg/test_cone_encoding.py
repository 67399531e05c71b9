"""
Tests for frustum Gaussians, the scene contraction and the integrated encoding
"""

import os
import sys

import numpy as np
import pytest

# Add repo root to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from app.cone_encoding import (
    FrustumMoments,
    GaussianRegion,
    contract_gaussian,
    contract_jacobian,
    contract_point,
    cylinder_moments,
    frustum_moments,
    integrated_encoding,
    lift_to_world,
    pixel_base_radius,
    uncontract_point,
)
from app.errors import InvalidInputError


def test_zero_length_frustum():
    m = frustum_moments(1.0, 1.0, 0.1)
    assert m.mu_t == pytest.approx(1.0)
    assert m.sigma_t2 == pytest.approx(0.0, abs=1e-15)
    assert m.sigma_r2 == pytest.approx(0.0025)


def test_literal_radial_variance_vanishes_for_zero_length():
    m = frustum_moments(1.0, 1.0, 0.1, literal_radial_variance=True)
    assert m.sigma_r2 == pytest.approx(0.0, abs=1e-15)


def test_frustum_mean_offset():
    m = frustum_moments(0.9, 1.1, 0.1)
    assert m.mu_t == pytest.approx(1.0 + 2.0 * 0.01 / 3.01, rel=1e-12)
    assert m.mu_t == pytest.approx(1.0066445, abs=1e-7)


def test_frustum_moments_match_monte_carlo():
    t0, t1, r = 0.9, 1.1, 0.1
    rng = np.random.default_rng(0)
    n = 1_000_000
    # density proportional to t^2 on [t0, t1]
    t = np.cbrt(rng.uniform(t0**3, t1**3, n))
    rho = r * t * np.sqrt(rng.uniform(0.0, 1.0, n))
    x = rho * np.cos(rng.uniform(0.0, 2 * np.pi, n))
    m = frustum_moments(t0, t1, r)
    assert m.mu_t == pytest.approx(t.mean(), rel=1e-2)
    assert m.sigma_t2 == pytest.approx(t.var(), rel=1e-2)
    assert m.sigma_r2 == pytest.approx(np.mean(x**2), rel=1e-2)


def test_degenerate_cone_has_no_radial_spread():
    m = frustum_moments(np.array([0.5, 1.0]), np.array([0.7, 3.0]), 0.0)
    assert np.all(m.sigma_r2 == 0.0)


def test_frustum_rejects_bad_intervals():
    with pytest.raises(InvalidInputError):
        frustum_moments(0.0, 1.0, 0.1)
    with pytest.raises(InvalidInputError):
        frustum_moments(2.0, 1.0, 0.1)
    with pytest.raises(InvalidInputError):
        frustum_moments(1.0, 2.0, -0.1)


def test_cylinder_moments():
    m = cylinder_moments(1.0, 2.0, 0.2)
    assert m.mu_t == pytest.approx(1.5)
    assert m.sigma_t2 == pytest.approx(1.0 / 12.0)
    assert m.sigma_r2 == pytest.approx(0.01)


def test_pixel_base_radius():
    assert pixel_base_radius(60.0, 60.0) == pytest.approx(2.0 / (np.sqrt(12.0) * 60.0))


def test_lift_along_z():
    m = FrustumMoments(np.array(1.0), np.array(0.01), np.array(0.0025))
    g = lift_to_world(np.zeros(3), np.array([0.0, 0.0, 1.0]), m)
    assert np.allclose(g.mean, [0.0, 0.0, 1.0])
    assert np.allclose(g.cov, np.diag([0.0025, 0.0025, 0.01]))


def test_lift_isotropic():
    d = np.array([1.0, 2.0, -2.0]) / 3.0
    m = FrustumMoments(np.array(2.0), np.array(0.3), np.array(0.3))
    g = lift_to_world(np.array([1.0, 0.0, 0.0]), d, m)
    assert np.allclose(g.cov, 0.3 * np.eye(3))
    assert np.allclose(g.mean, [1.0, 0.0, 0.0] + 2.0 * d)


def test_lift_eigenvalues_are_the_frustum_variances():
    rng = np.random.default_rng(2)
    for _ in range(20):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        sigma_t2, sigma_r2 = rng.uniform(1e-4, 0.5, size=2)
        m = FrustumMoments(np.array(1.5), np.array(sigma_t2), np.array(sigma_r2))
        g = lift_to_world(rng.normal(size=3), d, m)
        eig = np.sort(np.linalg.eigvalsh(g.cov))
        assert np.allclose(eig, np.sort([sigma_t2, sigma_r2, sigma_r2]), atol=1e-12)
        assert np.allclose(g.cov @ d, sigma_t2 * d, atol=1e-12)


def test_lift_rejects_non_unit_direction():
    m = FrustumMoments(np.array(1.0), np.array(0.0), np.array(0.0))
    with pytest.raises(InvalidInputError):
        lift_to_world(np.zeros(3), np.array([0.0, 0.0, 2.0]), m)


def test_contract_point_examples():
    assert np.allclose(contract_point([0.5, 0.0, 0.0]), [0.5, 0.0, 0.0])
    assert np.allclose(contract_point([2.0, 0.0, 0.0]), [1.5, 0.0, 0.0])
    assert np.allclose(contract_point([100.0, 0.0, 0.0]), [1.99, 0.0, 0.0])


def test_contraction_is_continuous_at_the_unit_sphere():
    rng = np.random.default_rng(3)
    u = rng.normal(size=(50, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    inside = contract_point((1.0 - 1e-12) * u)
    outside = contract_point((1.0 + 1e-12) * u)
    assert np.allclose(inside, outside, atol=1e-10)
    assert np.allclose(contract_point(u), u)


def test_contraction_radius_is_monotone():
    radii = np.linspace(0.0, 50.0, 2001)
    direction = np.array([0.6, -0.48, 0.64])
    contracted = np.linalg.norm(contract_point(radii[:, None] * direction), axis=1)
    assert np.all(np.diff(contracted) > 0)
    assert contracted[-1] < 2.0


def test_contraction_is_bounded_and_invertible():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(500, 3)) * np.exp(rng.uniform(-2, 4, size=(500, 1)))
    y = contract_point(x)
    assert np.all(np.linalg.norm(y, axis=1) < 2.0)
    assert np.allclose(uncontract_point(y), x, rtol=1e-8)


def test_uncontract_rejects_outer_boundary():
    with pytest.raises(InvalidInputError):
        uncontract_point([2.0, 0.0, 0.0])


def test_contract_jacobian_examples():
    assert np.allclose(contract_jacobian([0.2, -0.1, 0.3]), np.eye(3))
    assert np.allclose(contract_jacobian([2.0, 0.0, 0.0]), np.diag([0.25, 0.75, 0.75]))


def test_contract_jacobian_finite_differences():
    rng = np.random.default_rng(2)
    h = 1e-5
    for _ in range(20):
        x = rng.normal(size=3) * 3.0
        if np.linalg.norm(x) < 1.1:
            continue
        fd = np.stack([
            (contract_point(x + h * e) - contract_point(x - h * e)) / (2 * h) for e in np.eye(3)
        ], axis=1)
        J = contract_jacobian(x)
        assert np.max(np.abs(J - fd)) < 1e-6 * max(1.0, np.max(np.abs(J)))


def test_contract_gaussian_inside_unchanged():
    g = GaussianRegion(np.array([0.1, 0.2, 0.3]), 0.01 * np.eye(3))
    out = contract_gaussian(g)
    assert np.allclose(out.region.mean, g.mean)
    assert np.allclose(out.region.cov, g.cov)


def test_contract_gaussian_example():
    out = contract_gaussian(GaussianRegion(np.array([2.0, 0.0, 0.0]), 0.01 * np.eye(3)))
    assert np.allclose(out.region.mean, [1.5, 0.0, 0.0])
    assert np.allclose(out.region.cov, np.diag([6.25e-4, 5.625e-3, 5.625e-3]))


def test_contract_gaussian_matches_monte_carlo():
    mean = np.array([5.0, 0.0, 0.0])
    cov = 1e-4 * np.eye(3)
    samples = np.random.default_rng(3).multivariate_normal(mean, cov, size=1_000_000)
    empirical = np.cov(contract_point(samples).T)
    linear = contract_gaussian(GaussianRegion(mean, cov)).region.cov
    diag = np.diag(linear)
    assert np.all(np.abs(np.diag(empirical) - diag) < 5e-2 * diag)


def test_encoding_zero_covariance_is_positional_encoding():
    mean = np.array([0.3, -1.2, 0.7])
    feats = integrated_encoding(GaussianRegion(mean, np.zeros((3, 3))), n_bands=3)
    scaled = np.concatenate([2.0**j * mean for j in range(3)])
    assert feats.shape == (18,)
    assert np.allclose(feats, np.concatenate([np.sin(scaled), np.cos(scaled)]))


def test_encoding_large_variance_attenuates():
    cov = np.diag([1e6, 0.0, 0.0])
    feats = integrated_encoding(GaussianRegion(np.array([0.3, 0.4, 0.5]), cov), n_bands=2)
    x_axis = [0, 3, 6, 9]
    assert np.allclose(feats[x_axis], 0.0)
    assert not np.allclose(feats[[1, 2]], 0.0)


def test_encoding_matches_monte_carlo():
    mean = np.array([0.3, 0.0, 0.0])
    cov = np.diag([0.1, 0.0, 0.0])
    feats = integrated_encoding(GaussianRegion(mean, cov), n_bands=2)
    rng = np.random.default_rng(4)
    x = mean[0] + np.sqrt(0.1) * rng.standard_normal(4_000_000)
    for j in range(2):
        assert feats[3 * j] == pytest.approx(np.mean(np.sin(2.0**j * x)), abs=1e-3)
        assert feats[6 + 3 * j] == pytest.approx(np.mean(np.cos(2.0**j * x)), abs=1e-3)


def test_encoding_rejects_zero_bands():
    with pytest.raises(InvalidInputError):
        integrated_encoding(GaussianRegion(np.zeros(3), np.zeros((3, 3))), n_bands=0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
