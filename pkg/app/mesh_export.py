"""
Mesh extraction from the SDF grid
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from skimage import measure

from app.cone_encoding import uncontract_point
from app.field_renderer import DTYPE, GRID_EXTENT, FieldParams
from app.storage import echo

CONTRACTED_LIMIT = 2.0 - 1e-6


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0


def sample_sdf_volume(params: FieldParams, resolution: Optional[int] = None) -> np.ndarray:
    """SDF on a regular lattice over [-2, 2]^3 (the stored grid when resolution matches)"""
    if resolution is None or resolution == params.resolution:
        return params.sdf_grid.detach().numpy().copy()
    nodes = torch.linspace(-GRID_EXTENT, GRID_EXTENT, resolution, dtype=DTYPE)
    X, Y, Z = torch.meshgrid(nodes, nodes, nodes, indexing="ij")
    with torch.no_grad():
        return params.sdf(torch.stack([X, Y, Z], dim=-1)).numpy()


def export_mesh(params: FieldParams, level: float = 0.0, resolution: Optional[int] = None) -> Mesh:
    """Marching cubes at `level`; vertices are mapped back from contracted to world space"""
    volume = sample_sdf_volume(params, resolution)
    if not (volume.min() < level < volume.max()):
        echo(f"⚠️  SDF has no {level} level set; exporting an empty mesh")
        return Mesh.empty()

    spacing = 2.0 * GRID_EXTENT / (volume.shape[0] - 1)
    verts, faces, _, _ = measure.marching_cubes(volume, level=level, spacing=(spacing,) * 3)
    contracted = verts - GRID_EXTENT
    norms = np.linalg.norm(contracted, axis=1, keepdims=True)
    contracted = np.where(norms >= CONTRACTED_LIMIT, contracted * CONTRACTED_LIMIT / np.maximum(norms, 1e-12), contracted)
    return Mesh(uncontract_point(contracted), faces.astype(np.int64))
