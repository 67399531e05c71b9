"""
Tests for marching-cubes mesh extraction
"""

import os
import sys

import numpy as np
import pytest
import torch

# Add repo root to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from app.field_renderer import FieldParams
from app.mesh_export import Mesh, export_mesh, sample_sdf_volume


def test_sphere_grid_gives_sphere_mesh():
    params = FieldParams.create(resolution=33, feature_dim=2, hidden_dim=4, n_bands=1, init_radius=0.5)
    mesh = export_mesh(params)
    assert not mesh.is_empty
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.all(np.abs(radii - 0.5) < 0.02)
    assert mesh.faces.max() < len(mesh.vertices)


def test_sphere_mesh_is_watertight():
    params = FieldParams.create(resolution=33, feature_dim=2, hidden_dim=4, n_bands=1, init_radius=0.55)
    mesh = export_mesh(params)
    edges = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)
    # closed genus-0 surface
    assert len(mesh.vertices) - len(counts) + len(mesh.faces) == 2


def test_outer_shell_maps_back_to_world():
    params = FieldParams.create(resolution=33, feature_dim=2, hidden_dim=4, n_bands=1, init_radius=1.5)
    mesh = export_mesh(params)
    # contracted radius 1.5 is world radius 1 / (2 - 1.5) = 2
    assert np.median(np.linalg.norm(mesh.vertices, axis=1)) == pytest.approx(2.0, rel=0.05)


def test_no_level_set_gives_empty_mesh():
    params = FieldParams.create(resolution=9, feature_dim=2, hidden_dim=4, n_bands=1)
    params.set_sdf(lambda x: torch.ones(x.shape[:-1], dtype=x.dtype))
    mesh = export_mesh(params)
    assert mesh.is_empty
    assert mesh.vertices.shape == (0, 3)


def test_resampled_volume_matches_stored_grid_at_same_nodes():
    params = FieldParams.create(resolution=9, feature_dim=2, hidden_dim=4, n_bands=1, init_radius=0.7)
    stored = sample_sdf_volume(params)
    resampled = sample_sdf_volume(params, resolution=17)
    assert resampled.shape == (17, 17, 17)
    assert np.allclose(resampled[::2, ::2, ::2], stored, atol=1e-12)


def test_empty_mesh():
    assert Mesh.empty().is_empty


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
