"""
Tests for ray sample placement
"""

import os
import sys

import numpy as np
import pytest
from scipy import stats

# Add repo root to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from app.errors import InvalidInputError
from app.sampling import (
    RaySamples,
    importance_resample,
    inverse_depth_warp,
    sample_ray_batch,
    stratified_samples,
    uniform_samples,
    unwarp,
)


def _equal_intervals(count: int, n: float = 1.0, f: float = 2.0) -> RaySamples:
    bounds = n + np.linspace(0.0, 1.0, count + 1) * (f - n)
    return RaySamples(np.zeros(3), np.array([0.0, 0.0, 1.0]), bounds, n, f, "linear")


def _inserted(samples: RaySamples, resampled: RaySamples) -> np.ndarray:
    return np.setdiff1d(resampled.boundaries, samples.boundaries)


def test_warp_endpoints_and_harmonic_mean():
    assert inverse_depth_warp(0.0, 2.0, 6.0) == 2.0
    assert inverse_depth_warp(1.0, 2.0, 6.0) == 6.0
    assert inverse_depth_warp(0.5, 2.0, 6.0) == pytest.approx(3.0)


def test_warp_round_trip():
    s = np.linspace(0.0, 1.0, 17)
    assert np.allclose(unwarp(inverse_depth_warp(s, 0.2, 6.0), 0.2, 6.0), s)


def test_warp_rejects_bad_range():
    with pytest.raises(InvalidInputError):
        inverse_depth_warp(0.5, 0.0, 1.0)
    with pytest.raises(InvalidInputError):
        inverse_depth_warp(0.5, 3.0, 1.0)
    with pytest.raises(InvalidInputError):
        inverse_depth_warp(1.5, 1.0, 3.0)


def test_stratified_is_deterministic():
    a = stratified_samples(0.2, 6.0, 20, seed=11)
    b = stratified_samples(0.2, 6.0, 20, seed=11)
    assert np.array_equal(a.boundaries, b.boundaries)
    assert a.n_intervals == 20
    assert np.all(np.diff(a.boundaries) > 0)
    assert a.boundaries[0] == 0.2 and a.boundaries[-1] == 6.0


def test_single_stratum_spans_range():
    s = stratified_samples(0.5, 4.0, 1, seed=0)
    assert np.array_equal(s.boundaries, [0.5, 4.0])


def test_inverse_depth_spacing_is_denser_near_camera():
    s = stratified_samples(0.2, 6.0, 20, seed=1)
    u = uniform_samples(0.2, 6.0, 20, seed=1)
    assert s.widths[0] < s.widths[-1]
    assert np.allclose(unwarp(u.boundaries, 0.2, 6.0, "linear"), s.s_boundaries)


def test_midpoints_centred_in_normalised_space():
    ids = np.arange(5000)
    batch = sample_ray_batch(
        np.zeros((5000, 3)), np.tile([0.0, 0.0, 1.0], (5000, 1)), 0.2, 6.0, 20, seed=3, ray_ids=ids,
    )
    s = batch.s_boundaries
    mids = 0.5 * (s[:, 1:] + s[:, :-1])
    assert mids.size == 100_000
    assert abs(mids.mean() - 0.5) < 0.01


def test_batch_independent_of_ray_order():
    origins = np.zeros((2, 3))
    dirs = np.tile([0.0, 0.0, 1.0], (2, 1))
    a = sample_ray_batch(origins, dirs, 0.2, 6.0, 8, seed=5, ray_ids=np.array([3, 7]))
    b = sample_ray_batch(origins, dirs, 0.2, 6.0, 8, seed=5, ray_ids=np.array([7, 3]))
    assert np.array_equal(a.boundaries, b.boundaries[::-1])
    single = stratified_samples(0.2, 6.0, 8, seed=5, ray_id=7)
    assert np.array_equal(single.boundaries, a.boundaries[1])


def test_importance_concentrates_on_heavy_interval():
    samples = stratified_samples(0.2, 6.0, 20, seed=2)
    weights = np.zeros(20)
    weights[7] = 1.0
    out = importance_resample(samples, weights, n_imp=40, seed=2)
    new = _inserted(samples, out)
    lo, hi = samples.boundaries[7], samples.boundaries[8]
    assert out.n_intervals == 60
    assert np.all((new >= lo - 1e-12) & (new <= hi + 1e-12))


def test_importance_uniform_weights_ks():
    samples = _equal_intervals(10)
    out = importance_resample(samples, np.ones(10), n_imp=100_000, seed=0)
    s_new = unwarp(_inserted(samples, out), 1.0, 2.0, "linear")
    assert stats.kstest(s_new, "uniform").statistic < 0.02


def test_importance_proportions():
    samples = _equal_intervals(2)
    out = importance_resample(samples, np.array([1.0, 3.0]), n_imp=100_000, seed=1)
    t_new = _inserted(samples, out)
    assert np.mean(t_new > 1.5) == pytest.approx(0.75, abs=0.01)


def test_importance_zero_weights_falls_back_to_strata():
    samples = _equal_intervals(4)
    out = importance_resample(samples, np.zeros(4), n_imp=8, seed=4)
    s_new = np.sort(unwarp(_inserted(samples, out), 1.0, 2.0, "linear"))
    assert len(s_new) == 8
    assert np.all(np.floor(s_new * 8) == np.arange(8))


def test_importance_rejects_bad_weights():
    samples = _equal_intervals(4)
    with pytest.raises(InvalidInputError):
        importance_resample(samples, np.ones(3))
    with pytest.raises(InvalidInputError):
        importance_resample(samples, np.array([1.0, -1.0, 1.0, 1.0]))


def test_importance_keeps_original_boundaries_sorted():
    samples = stratified_samples(0.2, 6.0, 20, seed=6)
    out = importance_resample(samples, np.random.default_rng(6).uniform(size=20), n_imp=40, seed=6)
    assert np.all(np.diff(out.boundaries) >= 0)
    assert np.all(np.isin(samples.boundaries, out.boundaries))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
