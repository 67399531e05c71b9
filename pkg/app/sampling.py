"""
Per-ray sample placement
Stratified samples spaced uniformly in inverse depth, plus importance
resampling from rendered weights. Boundaries may carry leading batch dims.
"""
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from app.errors import InvalidInputError

Spacing = Literal["inverse_depth", "linear"]

PASS_STRATIFIED = 0
PASS_IMPORTANCE = 1


@dataclass(frozen=True)
class RaySamples:
    """Interval boundaries along rays; N+1 boundaries define N intervals"""
    origin: np.ndarray
    direction: np.ndarray
    boundaries: np.ndarray
    near: float
    far: float
    spacing: Spacing = "inverse_depth"
    base_radius: float = 0.0

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.boundaries[..., 1:] + self.boundaries[..., :-1])

    @property
    def widths(self) -> np.ndarray:
        return self.boundaries[..., 1:] - self.boundaries[..., :-1]

    @property
    def s_boundaries(self) -> np.ndarray:
        """Boundaries mapped back to the normalised [0, 1] coordinate"""
        return unwarp(self.boundaries, self.near, self.far, self.spacing)

    @property
    def n_intervals(self) -> int:
        return self.boundaries.shape[-1] - 1


def _check_range(n: float, f: float) -> None:
    if not 0 < n < f:
        raise InvalidInputError(f"need 0 < near < far, got near={n}, far={f}")


def inverse_depth_warp(s, n: float, f: float) -> np.ndarray:
    """s' = 1 / (s/f + (1-s)/n); endpoints map exactly to n and f"""
    _check_range(n, f)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0) or np.any(s > 1):
        raise InvalidInputError("s must lie in [0, 1]")
    t = 1.0 / (s / f + (1.0 - s) / n)
    return np.where(s == 0.0, n, np.where(s == 1.0, f, t))


def warp(s, n: float, f: float, spacing: Spacing = "inverse_depth") -> np.ndarray:
    if spacing == "inverse_depth":
        return inverse_depth_warp(s, n, f)
    _check_range(n, f)
    s = np.asarray(s, dtype=np.float64)
    return np.where(s == 1.0, f, n + s * (f - n))


def unwarp(t, n: float, f: float, spacing: Spacing = "inverse_depth") -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if spacing == "inverse_depth":
        s = (1.0 / t - 1.0 / n) / (1.0 / f - 1.0 / n)
    else:
        s = (t - n) / (f - n)
    return np.clip(s, 0.0, 1.0)


def ray_rng(seed: int, ray_id: int, pass_id: int) -> np.random.Generator:
    """Generator keyed by (seed, ray, pass) so results do not depend on evaluation order"""
    return np.random.default_rng([seed, ray_id, pass_id])


def _jittered_partition(rng: np.random.Generator, count: int) -> np.ndarray:
    """count+1 increasing boundaries in [0, 1]: midpoints of one draw per stratum"""
    points = (np.arange(count) + rng.uniform(size=count)) / count
    return np.concatenate([[0.0], 0.5 * (points[1:] + points[:-1]), [1.0]])


def stratified_samples(
    n: float,
    f: float,
    n_strat: int = 20,
    seed: int = 0,
    origin: Sequence[float] = (0.0, 0.0, 0.0),
    direction: Sequence[float] = (0.0, 0.0, 1.0),
    spacing: Spacing = "inverse_depth",
    ray_id: int = 0,
    base_radius: float = 0.0,
) -> RaySamples:
    """Jittered partition of [0, 1] warped to [n, f]"""
    _check_range(n, f)
    if n_strat < 1:
        raise InvalidInputError("n_strat must be >= 1")
    s = _jittered_partition(ray_rng(seed, ray_id, PASS_STRATIFIED), n_strat)
    return RaySamples(
        origin=np.asarray(origin, dtype=np.float64),
        direction=np.asarray(direction, dtype=np.float64),
        boundaries=warp(s, n, f, spacing),
        near=n,
        far=f,
        spacing=spacing,
        base_radius=base_radius,
    )


def uniform_samples(
    n: float,
    f: float,
    n_strat: int = 20,
    seed: int = 0,
    origin: Sequence[float] = (0.0, 0.0, 0.0),
    direction: Sequence[float] = (0.0, 0.0, 1.0),
    ray_id: int = 0,
    base_radius: float = 0.0,
) -> RaySamples:
    """Stratified samples spaced linearly in distance"""
    return stratified_samples(n, f, n_strat, seed, origin, direction, "linear", ray_id, base_radius)


def sample_ray_batch(
    origins: np.ndarray,
    directions: np.ndarray,
    n: float,
    f: float,
    n_strat: int,
    seed: int,
    ray_ids: np.ndarray,
    spacing: Spacing = "inverse_depth",
    base_radius: float = 0.0,
) -> RaySamples:
    """Stratified samples for a (B,) batch of rays, one generator per ray id"""
    _check_range(n, f)
    s = np.stack([_jittered_partition(ray_rng(seed, int(r), PASS_STRATIFIED), n_strat) for r in ray_ids])
    return RaySamples(origins, directions, warp(s, n, f, spacing), n, f, spacing, base_radius)


def _inverse_cdf(s_bounds: np.ndarray, weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse CDF of the piecewise-constant histogram (B, N) at u (B, K)"""
    pdf = weights / weights.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros_like(pdf[:, :1]), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    rows = np.arange(cdf.shape[0])[:, None] * 2.0
    idx = np.searchsorted((cdf + rows).ravel(), (u + rows).ravel(), side="right").reshape(u.shape)
    idx -= rows.astype(int) // 2 * cdf.shape[1]
    idx = np.clip(idx, 1, cdf.shape[1] - 1)
    lo = np.take_along_axis(cdf, idx - 1, axis=-1)
    hi = np.take_along_axis(cdf, idx, axis=-1)
    s_lo = np.take_along_axis(s_bounds, idx - 1, axis=-1)
    s_hi = np.take_along_axis(s_bounds, idx, axis=-1)
    frac = np.where(hi > lo, (u - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0)
    return s_lo + np.clip(frac, 0.0, 1.0) * (s_hi - s_lo)


def importance_resample(
    samples: RaySamples,
    weights: np.ndarray,
    n_imp: int = 40,
    seed: int = 0,
    ray_ids: np.ndarray = None,
) -> RaySamples:
    """Draw n_imp extra boundaries from the weight histogram and merge them in

    Rays whose weights are all zero fall back to a stratified partition.
    """
    boundaries = np.atleast_2d(samples.boundaries)
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if weights.shape[-1] != boundaries.shape[-1] - 1:
        raise InvalidInputError("need one weight per interval")
    if np.any(weights < 0):
        raise InvalidInputError("weights must be non-negative")
    if n_imp <= 0:
        return samples
    if ray_ids is None:
        ray_ids = np.arange(boundaries.shape[0])

    rngs = [ray_rng(seed, int(r), PASS_IMPORTANCE) for r in np.atleast_1d(ray_ids)]
    u = np.stack([rng.uniform(size=n_imp) for rng in rngs])
    s_bounds = unwarp(boundaries, samples.near, samples.far, samples.spacing)

    empty = weights.sum(axis=-1) <= 0
    safe_weights = np.where(empty[:, None], 1.0, weights)
    s_new = _inverse_cdf(s_bounds, safe_weights, u)
    if empty.any():
        fallback = (np.arange(n_imp) + u[empty]) / n_imp
        s_new[empty] = fallback

    t_new = warp(s_new, samples.near, samples.far, samples.spacing)
    merged = np.sort(np.concatenate([boundaries, t_new], axis=-1), axis=-1)
    if samples.boundaries.ndim == 1:
        merged = merged[0]
    return RaySamples(
        samples.origin, samples.direction, merged,
        samples.near, samples.far, samples.spacing, samples.base_radius,
    )
