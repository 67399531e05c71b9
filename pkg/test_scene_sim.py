"""
Tests for the analytic scene simulator
Scenes, renders, trajectories, depth priors and correspondences
"""

import os
import sys

import numpy as np
import pytest

# Add repo root to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from app.errors import InvalidInputError
from app.geometry import Pose
from app.models import CameraIntrinsics, DepthPriorSpec
from app.scene_sim import (
    AnalyticScene,
    Primitive,
    align_depth_prior,
    corrupt_depth,
    gen_correspondences,
    gen_trajectory,
    landmark_visibility,
    primitive_sdfs,
    render_ground_truth,
    sample_landmarks,
    scene_sdf,
    single_sphere_scene,
    sphere_trace,
    two_primitive_room,
)

UNIT_SPHERE = AnalyticScene((Primitive("sphere", radius=1.0),))
CENTERED = CameraIntrinsics(fx=50.0, fy=50.0, cx=32.0, cy=24.0, width=65, height=49)


def test_sphere_sdf():
    assert scene_sdf(UNIT_SPHERE, np.array([0.0, 0.0, 2.0])) == pytest.approx(1.0)
    assert scene_sdf(UNIT_SPHERE, np.zeros(3)) == pytest.approx(-1.0)


def test_box_sdf_corner_distance():
    box = AnalyticScene((Primitive("box", half_extents=(1.0, 1.0, 1.0)),))
    assert scene_sdf(box, np.array([2.0, 2.0, 0.0])) == pytest.approx(np.sqrt(2.0))


MIXED = AnalyticScene((
    Primitive("plane", normal=(0.0, 0.3, 1.0), offset=-0.5),
    Primitive("sphere", center=(0.2, 0.0, 0.1), radius=0.4),
    Primitive("box", center=(-0.5, 0.4, 0.0), half_extents=(0.3, 0.2, 0.5)),
))


def test_union_is_below_every_primitive():
    x = np.random.default_rng(0).uniform(-1.5, 1.5, size=(500, 3))
    union = scene_sdf(MIXED, x)
    parts = primitive_sdfs(MIXED, x)
    assert parts.shape == (500, 3)
    assert np.all(union[:, None] <= parts)
    assert np.allclose(union, parts.min(axis=1))


def test_union_sdf_is_one_lipschitz():
    rng = np.random.default_rng(1)
    a = rng.uniform(-1.5, 1.5, size=(1000, 3))
    b = a + rng.normal(scale=0.3, size=(1000, 3))
    gap = np.abs(scene_sdf(MIXED, a) - scene_sdf(MIXED, b))
    assert np.all(gap <= np.linalg.norm(a - b, axis=1) + 1e-9)


def test_empty_scene_sdf_raises():
    with pytest.raises(InvalidInputError):
        scene_sdf(AnalyticScene(), np.zeros(3))


def test_primitive_validation():
    with pytest.raises(InvalidInputError):
        Primitive("sphere", radius=-1.0)
    with pytest.raises(InvalidInputError):
        Primitive("box", half_extents=(1.0, 0.0, 1.0))
    with pytest.raises(InvalidInputError):
        Primitive("sphere", albedo=(1.5, 0.0, 0.0))


def test_center_pixel_depth_on_axis():
    pose = Pose.look_at(np.array([3.0, 0.0, 0.0]), np.zeros(3))
    rgb, depth = render_ground_truth(UNIT_SPHERE, pose, CENTERED)
    assert depth[24, 32] == pytest.approx(2.0, abs=1e-3)
    assert rgb.shape == (49, 65, 3)
    assert np.all((rgb >= 0.0) & (rgb <= 1.0))


def test_empty_scene_renders_background():
    rgb, depth = render_ground_truth(AnalyticScene(), Pose.identity(), CENTERED)
    assert np.all(rgb == 0.0)
    assert np.all(np.isinf(depth))


def test_sphere_trace_matches_closed_form_intersection():
    rng = np.random.default_rng(3)
    origins = np.tile([0.0, 0.0, -4.0], (100, 1))
    targets = rng.uniform(-0.6, 0.6, size=(100, 3)) * np.array([1.0, 1.0, 0.0])
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t, hit = sphere_trace(UNIT_SPHERE, origins, dirs)
    assert hit.all()
    # |o + t d|^2 = 1, nearest root
    b = np.sum(origins * dirs, axis=1)
    c = np.sum(origins**2, axis=1) - 1.0
    expected = -b - np.sqrt(b**2 - c)
    assert np.max(np.abs(t - expected)) < 1e-3


def test_render_is_deterministic():
    scene = two_primitive_room()
    pose = Pose.look_at(np.array([2.5, 0.0, 0.6]), np.zeros(3))
    a = render_ground_truth(scene, pose, CameraIntrinsics())
    b = render_ground_truth(scene, pose, CameraIntrinsics())
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])


def test_orbit_spacing():
    poses = gen_trajectory("orbit", 4, radius=3.0)
    centers = np.array([p.translation for p in poses])
    assert np.allclose(np.linalg.norm(centers, axis=1), 3.0)
    assert np.allclose(centers, [[3, 0, 0], [0, 3, 0], [-3, 0, 0], [0, -3, 0]], atol=1e-12)


def test_loop_closes():
    poses = gen_trajectory("loop", 10, radius=2.0, height=0.5)
    assert poses[9].allclose(poses[0], atol=1e-6)


def test_lawnmower_step_bound():
    poses = gen_trajectory("lawnmower", 6, radius=1.0, height=1.5, step=0.25)
    centers = np.array([p.translation for p in poses])
    assert np.all(np.linalg.norm(np.diff(centers, axis=0), axis=1) <= 0.25 + 1e-12)


def test_trajectory_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        gen_trajectory("orbit", 1)
    with pytest.raises(InvalidInputError):
        gen_trajectory("spiral", 5)


def test_corrupt_depth_affine():
    depth = np.full((4, 4), 1.0)
    assert np.array_equal(corrupt_depth(depth, DepthPriorSpec()), depth)
    prior = corrupt_depth(depth, DepthPriorSpec(scale=2.0, offset=0.1))
    assert np.allclose(prior, 2.1)


def test_align_depth_prior_undoes_affine_corruption():
    depth = np.linspace(0.5, 3.0, 48).reshape(6, 8)
    depth[0, 0] = np.inf
    prior = corrupt_depth(depth, DepthPriorSpec(scale=1.3, offset=-0.2))
    scale, shift, aligned = align_depth_prior(prior, depth)
    assert scale == pytest.approx(1.0 / 1.3)
    assert shift == pytest.approx(0.2 / 1.3)
    assert np.isinf(aligned[0, 0])
    assert np.allclose(aligned[1:], depth[1:])
    with pytest.raises(InvalidInputError):
        align_depth_prior(prior, np.full_like(depth, np.inf))


def test_corrupt_depth_noise_statistics():
    depth = np.full((100, 100), 2.0)
    prior = corrupt_depth(depth, DepthPriorSpec(noise_sigma=0.05, seed=7))
    assert 0.045 <= np.std(prior - depth) <= 0.055


def test_corrupt_depth_keeps_background():
    depth = np.array([[1.0, np.inf]])
    prior = corrupt_depth(depth, DepthPriorSpec(scale=1.5, noise_sigma=0.1))
    assert np.isfinite(prior[0, 0]) and prior[0, 0] > 0
    assert np.isinf(prior[0, 1])


def test_corrupt_depth_scale_drift():
    depth = np.ones((2, 2))
    prior = corrupt_depth(depth, DepthPriorSpec(scale_drift=0.1), frame_index=2)
    assert np.allclose(prior, 1.21)


def test_identity_correspondences():
    scene = two_primitive_room()
    pose = Pose.look_at(np.array([2.5, 0.0, 0.6]), np.zeros(3))
    intr = CameraIntrinsics()
    _, depth = render_ground_truth(scene, pose, intr)
    corr = gen_correspondences(pose, pose, depth, intr, 0.0, seed=1)
    assert len(corr) > 0
    assert np.allclose(corr.pixel_j, corr.pixel_i, atol=1e-9)
    assert np.all(corr.confidence == 1.0)


def test_forward_motion_flow_is_radial():
    plane = AnalyticScene((Primitive("plane", normal=(0.0, 0.0, 1.0), offset=0.0),))
    intr = CameraIntrinsics()
    pose_i = Pose.look_at(np.array([0.0, 0.0, 3.0]), np.zeros(3))
    pose_j = Pose.look_at(np.array([0.0, 0.0, 2.0]), np.zeros(3))
    _, depth = render_ground_truth(plane, pose_i, intr)
    corr = gen_correspondences(pose_i, pose_j, depth, intr, 0.0, seed=2)
    c = np.array([intr.cx, intr.cy])
    assert len(corr) > 10
    assert np.allclose(corr.pixel_j - c, 1.5 * (corr.pixel_i - c), atol=1e-2)


def test_correspondences_match_matrix_chain():
    scene = two_primitive_room()
    intr = CameraIntrinsics()
    pose_i = Pose.look_at(np.array([2.5, 0.0, 0.6]), np.zeros(3))
    pose_j = Pose.look_at(np.array([2.4, 0.3, 0.65]), np.zeros(3))
    _, depth = render_ground_truth(scene, pose_i, intr)
    corr = gen_correspondences(pose_i, pose_j, depth, intr, 0.0, seed=4)
    take = slice(0, 100)

    K = intr.matrix()
    Kinv = np.linalg.inv(K)
    Ti, Tj_inv = pose_i.matrix(), np.linalg.inv(pose_j.matrix())
    for p_i, p_j in zip(corr.pixel_i[take], corr.pixel_j[take]):
        ray = Kinv @ np.array([p_i[0], p_i[1], 1.0])
        r = depth[int(round(p_i[1])), int(round(p_i[0]))]
        x_cam = r * ray / np.linalg.norm(ray)
        x_j = (Tj_inv @ Ti @ np.append(x_cam, 1.0))[:3]
        uvw = K @ x_j
        assert np.max(np.abs(uvw[:2] / uvw[2] - p_j)) < 1e-9


def test_noisy_confidence_in_unit_interval():
    scene = single_sphere_scene()
    intr = CameraIntrinsics()
    pose = Pose.look_at(np.array([2.0, 0.0, 0.3]), np.zeros(3))
    _, depth = render_ground_truth(scene, pose, intr)
    corr = gen_correspondences(pose, pose, depth, intr, 0.5, seed=5)
    assert np.all((corr.confidence > 0) & (corr.confidence <= 1))


def test_landmarks_lie_on_surface_and_are_visible():
    scene = two_primitive_room()
    landmarks = sample_landmarks(scene, 200, seed=0)
    assert landmarks.shape == (200, 3)
    assert np.max(np.abs(scene_sdf(scene, landmarks))) < 1e-6

    intr = CameraIntrinsics()
    pose = Pose.look_at(np.array([2.5, 0.0, 0.6]), np.zeros(3))
    _, depth = render_ground_truth(scene, pose, intr)
    vis = landmark_visibility(landmarks, [pose], [depth], intr)
    assert vis.shape == (1, 200)
    assert vis.any()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
