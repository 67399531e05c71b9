"""
Scene field, volume rendering and the mapping losses
The field is a dense SDF grid plus a feature grid decoded to RGB by a small
MLP, all over the contracted cube [-2, 2]^3. Everything runs in float64 torch so
reverse-mode gradients reach every grid value.
"""
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from app.cone_encoding import GaussianRegion, integrated_encoding
from app.errors import InvalidInputError
from app.models import LossWeights

DTYPE = torch.float64
GRID_EXTENT = 2.0

TensorLike = Union[torch.Tensor, np.ndarray, float, list]


def as_tensor(x: TensorLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


class FieldParams(nn.Module):
    """SDF grid, colour feature grid, RGB decoder and occupancy sharpness"""

    def __init__(self, resolution: int = 64, feature_dim: int = 8, hidden_dim: int = 32, n_bands: int = 8, beta: float = 0.1):
        super().__init__()
        self.resolution = resolution
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.n_bands = n_bands
        self.sdf_grid = nn.Parameter(torch.zeros(resolution, resolution, resolution, dtype=DTYPE))
        self.color_grid = nn.Parameter(torch.zeros(feature_dim, resolution, resolution, resolution, dtype=DTYPE))
        self.hidden = nn.Linear(feature_dim + 6 * n_bands, hidden_dim).to(DTYPE)
        self.output = nn.Linear(hidden_dim, 3).to(DTYPE)
        self.log_beta = nn.Parameter(torch.tensor(float(np.log(beta)), dtype=DTYPE))

    @classmethod
    def create(
        cls,
        resolution: int = 64,
        feature_dim: int = 8,
        hidden_dim: int = 32,
        n_bands: int = 8,
        beta: float = 0.1,
        init_radius: float = 0.5,
        seed: int = 0,
    ) -> "FieldParams":
        """Sphere-initialised SDF and small random features/decoder weights"""
        params = cls(resolution, feature_dim, hidden_dim, n_bands, beta)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            nodes = params.node_coords()
            X, Y, Z = torch.meshgrid(nodes, nodes, nodes, indexing="ij")
            params.sdf_grid.copy_(torch.sqrt(X**2 + Y**2 + Z**2) - init_radius)
            params.color_grid.copy_(0.01 * torch.randn(params.color_grid.shape, generator=gen, dtype=DTYPE))
            for layer in (params.hidden, params.output):
                fan_out, fan_in = layer.weight.shape
                std = float(np.sqrt(2.0 / (fan_in + fan_out)))
                layer.weight.copy_(std * torch.randn(layer.weight.shape, generator=gen, dtype=DTYPE))
                layer.bias.zero_()
        return params

    @property
    def beta(self) -> torch.Tensor:
        return torch.exp(self.log_beta)

    @property
    def voxel_size(self) -> float:
        return 2.0 * GRID_EXTENT / (self.resolution - 1)

    def node_coords(self) -> torch.Tensor:
        return torch.linspace(-GRID_EXTENT, GRID_EXTENT, self.resolution, dtype=DTYPE)

    def set_sdf(self, fn) -> None:
        """Fill the SDF grid from a function of (..., 3) node positions"""
        nodes = self.node_coords()
        X, Y, Z = torch.meshgrid(nodes, nodes, nodes, indexing="ij")
        with torch.no_grad():
            self.sdf_grid.copy_(as_tensor(fn(torch.stack([X, Y, Z], dim=-1))))

    def sdf(self, points: torch.Tensor) -> torch.Tensor:
        return trilinear(self.sdf_grid[None], points)[..., 0]

    def decode(self, features: torch.Tensor, encoding: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.hidden(torch.cat([features, encoding], dim=-1)))
        return torch.sigmoid(self.output(h))

    def forward(self, means: torch.Tensor, encoding: torch.Tensor):
        """(sdf, rgb) at contracted means with precomputed integrated encodings"""
        sdf = self.sdf(means)
        rgb = self.decode(trilinear(self.color_grid, means), encoding)
        return sdf, rgb


def trilinear(grid: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Interpolate a (C, R, R, R) grid indexed [x, y, z] at (..., 3) points

    Nodes sit at linspace(-2, 2, R); points outside are clamped to the border.
    """
    points = as_tensor(points)
    shape = points.shape[:-1]
    flat = points.reshape(1, -1, 1, 1, 3) / GRID_EXTENT
    # grid_sample reads the last coordinate as the first spatial axis
    out = F.grid_sample(grid[None], flat.flip(-1), mode="bilinear", padding_mode="border", align_corners=True)
    return out[0, :, :, 0, 0].T.reshape(*shape, grid.shape[0])


def query_field(params: FieldParams, g: GaussianRegion):
    """SDF and colour of a contracted-space Gaussian region"""
    mean = np.asarray(g.mean, dtype=np.float64)
    if np.any(np.abs(mean) > GRID_EXTENT):
        raise InvalidInputError("query mean lies outside the contracted cube [-2, 2]^3")
    encoding = integrated_encoding(g, params.n_bands)
    return params(as_tensor(mean), as_tensor(encoding))


def sdf_to_occupancy(sdf: TensorLike, beta: TensorLike) -> torch.Tensor:
    """Logistic in -sdf/beta: 1 inside, 0 outside, 0.5 on the surface"""
    beta = as_tensor(beta)
    if torch.any(beta <= 0):
        raise InvalidInputError("beta must be positive")
    return torch.sigmoid(-as_tensor(sdf) / beta)


@dataclass
class RenderOutput:
    color: torch.Tensor
    depth: torch.Tensor
    weights: torch.Tensor
    occupancies: torch.Tensor


def render_ray(occupancies: TensorLike, colors: TensorLike, depths: TensorLike) -> RenderOutput:
    """w_i = o_i prod_{j<i}(1 - o_j); colour and depth are w-weighted sums"""
    o = as_tensor(occupancies)
    c = as_tensor(colors)
    d = as_tensor(depths)
    if o.shape != d.shape or c.shape[:-1] != o.shape:
        raise InvalidInputError("occupancies, colors and depths must align")
    survive = torch.cumprod(1.0 - o, dim=-1)
    transmittance = torch.cat([torch.ones_like(o[..., :1]), survive[..., :-1]], dim=-1)
    w = o * transmittance
    return RenderOutput(
        color=(w[..., None] * c).sum(dim=-2),
        depth=(w * d).sum(dim=-1),
        weights=w,
        occupancies=o,
    )


def loss_rgb(pred: TensorLike, true: TensorLike) -> torch.Tensor:
    """Channel-summed L1, averaged over pixels"""
    pred, true = as_tensor(pred), as_tensor(true)
    if pred.numel() == 0:
        raise InvalidInputError("empty colour batch")
    return (pred - true).abs().sum(dim=-1).mean()


def all_ordered_pairs(m: int) -> torch.Tensor:
    idx = torch.arange(m)
    a, b = torch.meshgrid(idx, idx, indexing="ij")
    keep = a != b
    return torch.stack([a[keep], b[keep]], dim=-1)


def loss_depth_correspondence(
    prior: TensorLike,
    rendered: TensorLike,
    pairs: Optional[torch.Tensor] = None,
    tau: float = 0.05,
) -> torch.Tensor:
    """Ranking hinge: for pairs with D_m <= D_n, mean of max(D^_m - D^_n + tau, 0)"""
    D, Dh = as_tensor(prior), as_tensor(rendered)
    if pairs is None:
        pairs = all_ordered_pairs(D.shape[0])
    pairs = torch.as_tensor(pairs, dtype=torch.long)
    if pairs.numel() == 0:
        return Dh.sum() * 0.0
    m, n = pairs[:, 0], pairs[:, 1]
    qualifying = D[m] <= D[n]
    if not torch.any(qualifying):
        return Dh.sum() * 0.0
    return torch.relu(Dh[m[qualifying]] - Dh[n[qualifying]] + tau).mean()


NEIGHBOUR_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


def continuity_from_patches(
    prior_patches: TensorLike,
    rendered_patches: TensorLike,
    tau_prime: float = 0.05,
    literal_margin: bool = False,
    min_neighbours: int = 4,
) -> torch.Tensor:
    """Continuity loss over (K, 3, 3) patches centred on the sampled pixels"""
    D = as_tensor(prior_patches).reshape(-1, 9)
    Dh = as_tensor(rendered_patches).reshape(-1, 9)
    centre = 4
    neighbours = torch.tensor([centre + 3 * dy + dx for dy, dx in NEIGHBOUR_OFFSETS])
    similar = (D[:, centre, None] - D[:, neighbours]).abs() < tau_prime
    qualifying = similar & (similar.sum(dim=1, keepdim=True) >= min_neighbours)
    if not torch.any(qualifying):
        return Dh.sum() * 0.0
    gap = (Dh[:, centre, None] - Dh[:, neighbours]).abs()
    term = gap + tau_prime if literal_margin else torch.relu(gap - tau_prime)
    return term[qualifying].mean()


def loss_depth_continuity(
    prior: TensorLike,
    rendered: TensorLike,
    centers: np.ndarray,
    tau_prime: float = 0.05,
    literal_margin: bool = False,
) -> torch.Tensor:
    """Continuity loss on (H, W) depth images at (row, col) centres"""
    D, Dh = as_tensor(prior), as_tensor(rendered)
    centers = np.asarray(centers, dtype=int).reshape(-1, 2)
    h, w = D.shape
    if np.any(centers < 1) or np.any(centers[:, 0] >= h - 1) or np.any(centers[:, 1] >= w - 1):
        raise InvalidInputError("every centre needs a full 3x3 neighbourhood")
    rows = torch.as_tensor(centers[:, 0, None, None] + np.arange(-1, 2)[None, :, None])
    cols = torch.as_tensor(centers[:, 1, None, None] + np.arange(-1, 2)[None, None, :])
    return continuity_from_patches(D[rows, cols], Dh[rows, cols], tau_prime, literal_margin)


def loss_distortion(weights: TensorLike, midpoints: TensorLike, widths: TensorLike) -> torch.Tensor:
    """sum_ij w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 width_i, averaged over rays"""
    w, m, dw = as_tensor(weights), as_tensor(midpoints), as_tensor(widths)
    cross = (w[..., :, None] * w[..., None, :] * (m[..., :, None] - m[..., None, :]).abs()).sum(dim=(-1, -2))
    intra = (w**2 * dw).sum(dim=-1) / 3.0
    return (cross + intra).mean()


def sdf_gradient(params: FieldParams, points: TensorLike) -> torch.Tensor:
    """Central differences of the interpolated SDF, one voxel step"""
    p = as_tensor(points)
    h = params.voxel_size
    p = p.clamp(-GRID_EXTENT + h, GRID_EXTENT - h)
    grads = []
    for k in range(3):
        step = torch.zeros(3, dtype=DTYPE)
        step[k] = h
        grads.append((params.sdf(p + step) - params.sdf(p - step)) / (2.0 * h))
    return torch.stack(grads, dim=-1)


def loss_eikonal(params: FieldParams, probes: TensorLike) -> torch.Tensor:
    grad = sdf_gradient(params, probes)
    norm = torch.sqrt((grad**2).sum(dim=-1) + 1e-18)
    return ((1.0 - norm) ** 2).mean()


def loss_sdf(
    sdf_values: TensorLike,
    sample_depths: TensorLike,
    prior_depth: TensorLike,
    zeta: float = 0.1,
    alpha: float = 5.0,
) -> torch.Tensor:
    """Near-surface fit and far-sample bound on (M, N) per-sample SDF values

    b = D - d_i. Near samples (|b| <= zeta) add |phi - b|; far samples
    (b > zeta) add max(0, exp(-alpha phi), phi - b). Normalised by M * N.
    """
    phi = as_tensor(sdf_values)
    t = as_tensor(sample_depths)
    D = as_tensor(prior_depth)
    b = D[..., None] - t
    near = b.abs() <= zeta
    far = b > zeta
    b_safe = torch.where(torch.isfinite(b), b, torch.zeros_like(b))
    near_term = torch.where(near, (phi - b_safe).abs(), torch.zeros_like(phi))
    bound = torch.where(torch.isfinite(b), phi - b_safe, torch.full_like(phi, -np.inf))
    far_term = torch.where(far, torch.clamp(torch.maximum(torch.exp(-alpha * phi), bound), min=0.0), torch.zeros_like(phi))
    return (near_term + far_term).sum() / phi.numel()


@dataclass
class LossTerms:
    rgb: torch.Tensor
    cor: torch.Tensor
    con: torch.Tensor
    dist: torch.Tensor
    eik: torch.Tensor
    sdf: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {f"loss_{k}": v.item() for k, v in self.__dict__.items()}


def total_loss(terms: LossTerms, weights: LossWeights) -> torch.Tensor:
    return (
        weights.lambda_c * as_tensor(terms.rgb)
        + weights.lambda_dep * (as_tensor(terms.cor) + weights.lambda_con * as_tensor(terms.con))
        + weights.lambda_dist * as_tensor(terms.dist)
        + weights.lambda_eik * as_tensor(terms.eik)
        + weights.lambda_sdf * as_tensor(terms.sdf)
    )
