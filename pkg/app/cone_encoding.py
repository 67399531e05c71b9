"""
Conical-frustum Gaussians and the unbounded-scene contraction
All functions broadcast over leading batch dimensions.
"""
from dataclasses import dataclass

import numpy as np

from app.errors import InvalidInputError

UNIT_SPHERE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class FrustumMoments:
    """Mean distance, along-ray variance and perpendicular variance of a frustum"""
    mu_t: np.ndarray
    sigma_t2: np.ndarray
    sigma_r2: np.ndarray


@dataclass(frozen=True)
class GaussianRegion:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class ContractionResult:
    region: GaussianRegion
    jacobian: np.ndarray


def frustum_moments(t0, t1, r, literal_radial_variance: bool = False) -> FrustumMoments:
    """Moments of a uniform-density conical frustum between t0 and t1

    With literal_radial_variance the first radial term is t_delta^2/4 instead of
    t_mu^2/4; that form vanishes for a zero-length frustum and is kept only for
    comparison.
    """
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(t0 <= 0):
        raise InvalidInputError("t0 must be positive")
    if np.any(t1 < t0):
        raise InvalidInputError("t1 must be >= t0")
    if np.any(r < 0):
        raise InvalidInputError("base radius must be non-negative")

    t_mu = (t0 + t1) / 2.0
    t_delta = np.abs(t1 - t0) / 2.0
    denom = 3.0 * t_mu**2 + t_delta**2

    mu_t = t_mu + 2.0 * t_mu * t_delta**2 / denom
    sigma_t2 = t_delta**2 / 3.0 - (4.0 / 15.0) * t_delta**4 * (12.0 * t_mu**2 - t_delta**2) / denom**2
    first = t_delta**2 / 4.0 if literal_radial_variance else t_mu**2 / 4.0
    sigma_r2 = r**2 * (first + 5.0 * t_delta**2 / 12.0 - 4.0 * t_delta**4 / (15.0 * denom))
    return FrustumMoments(mu_t, np.maximum(sigma_t2, 0.0), np.maximum(sigma_r2, 0.0))


def cylinder_moments(t0, t1, r) -> FrustumMoments:
    """Moments of a cylinder of radius r between t0 and t1"""
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    if np.any(t0 <= 0) or np.any(t1 < t0):
        raise InvalidInputError("need 0 < t0 <= t1")
    r = np.asarray(r, dtype=np.float64)
    return FrustumMoments((t0 + t1) / 2.0, (t1 - t0) ** 2 / 12.0, np.broadcast_to(r**2 / 4.0, t0.shape).copy())


def pixel_base_radius(fx: float, fy: float) -> float:
    """Cone radius per unit distance for one pixel footprint"""
    return 2.0 / (np.sqrt(12.0) * np.sqrt(fx * fy))


def lift_to_world(origin, direction, m: FrustumMoments) -> GaussianRegion:
    """World-frame Gaussian: mean o + mu_t d, cov sigma_t2 dd^T + sigma_r2 (I - dd^T)"""
    origin = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(d, axis=-1) - 1.0) > 1e-9):
        raise InvalidInputError("direction must be unit length")
    mu_t = np.asarray(m.mu_t)[..., None]
    mean = origin + mu_t * d
    dd = d[..., :, None] * d[..., None, :]
    sigma_t2 = np.asarray(m.sigma_t2)[..., None, None]
    sigma_r2 = np.asarray(m.sigma_r2)[..., None, None]
    cov = sigma_t2 * dd + sigma_r2 * (np.eye(3) - dd)
    return GaussianRegion(mean, cov)


def contract_point(x) -> np.ndarray:
    """Identity on the unit ball, (2 - 1/|x|) x/|x| outside"""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.maximum(n, 1.0)
    return np.where(n <= 1.0, x, (2.0 - 1.0 / safe) * x / safe)


def uncontract_point(y) -> np.ndarray:
    """Inverse of contract_point for |y| < 2"""
    y = np.asarray(y, dtype=np.float64)
    m = np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(m >= 2.0):
        raise InvalidInputError("contracted points must satisfy |y| < 2")
    safe = np.maximum(m, 1.0)
    return np.where(m <= 1.0, y, y / safe / (2.0 - safe))


def contract_jacobian(x) -> np.ndarray:
    """Analytic Jacobian of contract_point; the unit sphere takes the outer branch"""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1)[..., None, None]
    inner = n < 1.0 - UNIT_SPHERE_TOLERANCE
    safe = np.where(inner, 1.0, n)
    g = 2.0 / safe - 1.0 / safe**2
    outer = g * np.eye(3) + (2.0 / safe**4 - 2.0 / safe**3) * (x[..., :, None] * x[..., None, :])
    return np.where(inner, np.broadcast_to(np.eye(3), outer.shape), outer)


def contract_gaussian(g: GaussianRegion) -> ContractionResult:
    """Push a Gaussian through the contraction by first-order linearisation"""
    J = contract_jacobian(g.mean)
    cov = J @ g.cov @ np.swapaxes(J, -1, -2)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return ContractionResult(GaussianRegion(contract_point(g.mean), cov), J)


def integrated_encoding(g: GaussianRegion, n_bands: int = 8) -> np.ndarray:
    """Expected sin/cos features under a Gaussian, diagonal attenuation

    Layout: [sin(2^j mean_k) * exp(-4^j var_k / 2)] for j, k then the matching
    cos block, length 6 * n_bands.
    """
    if n_bands < 1:
        raise InvalidInputError("n_bands must be >= 1")
    mean = np.asarray(g.mean, dtype=np.float64)
    var = np.diagonal(np.asarray(g.cov, dtype=np.float64), axis1=-2, axis2=-1)
    scales = 2.0 ** np.arange(n_bands)
    shape = mean.shape[:-1] + (3 * n_bands,)
    scaled_mean = (scales[:, None] * mean[..., None, :]).reshape(shape)
    scaled_var = ((scales**2)[:, None] * var[..., None, :]).reshape(shape)
    damp = np.exp(-0.5 * scaled_var)
    return np.concatenate([np.sin(scaled_mean) * damp, np.cos(scaled_mean) * damp], axis=-1)
