"""
Map optimisation
Draws 3x3 pixel patches from the keyframes, places samples along their rays,
renders them through the field and descends the total mapping loss.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from app.cone_encoding import (
    GaussianRegion,
    contract_gaussian,
    cylinder_moments,
    frustum_moments,
    integrated_encoding,
    lift_to_world,
    pixel_base_radius,
)
from app.errors import InvalidInputError, NonFiniteLossError
from app.field_renderer import (
    GRID_EXTENT,
    FieldParams,
    LossTerms,
    RenderOutput,
    as_tensor,
    continuity_from_patches,
    loss_depth_correspondence,
    loss_distortion,
    loss_eikonal,
    loss_rgb,
    loss_sdf,
    render_ray,
    sdf_to_occupancy,
    total_loss,
)
from app.geometry import Pose
from app.models import CameraIntrinsics, LossWeights, MappingParams, SamplingParams
from app.sampling import RaySamples, importance_resample, sample_ray_batch
from app.scene_sim import ray_directions
from app.tracking_ba import Keyframe

PATCH_OFFSETS = np.stack(np.meshgrid(np.arange(-1, 2), np.arange(-1, 2), indexing="xy"), axis=-1)
RAYS_PER_STEP = 1_000_000


@dataclass
class RayBatch:
    """Rays of K 3x3 patches, flattened patch-major (B = 9K)"""
    origins: np.ndarray
    directions: np.ndarray
    rgb: np.ndarray
    prior: np.ndarray
    ray_ids: np.ndarray
    base_radius: float

    @property
    def n_patches(self) -> int:
        return len(self.prior) // 9


def sample_patch_batch(keyframes: Sequence[Keyframe], n_patches: int, rng: np.random.Generator, step: int = 0) -> RayBatch:
    if not keyframes:
        raise InvalidInputError("mapping needs at least one keyframe")
    intr = keyframes[0].intrinsics
    h, w = intr.height, intr.width
    if h < 3 or w < 3:
        raise InvalidInputError("images must be at least 3x3 for patch sampling")

    which = rng.integers(0, len(keyframes), size=n_patches)
    cu = rng.integers(1, w - 1, size=n_patches)
    cv = rng.integers(1, h - 1, size=n_patches)
    # (K, 3, 3, 2) pixel coordinates (u, v)
    pixels = np.stack([cu, cv], axis=-1)[:, None, None, :] + PATCH_OFFSETS[None]

    origins, directions, rgb, prior = [], [], [], []
    for k, kf_index in enumerate(which):
        kf = keyframes[kf_index]
        pix = pixels[k].reshape(-1, 2)
        d = ray_directions(kf.intrinsics, pix) @ kf.pose.R.T
        directions.append(d)
        origins.append(np.broadcast_to(kf.pose.translation, d.shape))
        rgb.append(kf.rgb[pix[:, 1], pix[:, 0]])
        prior.append(kf.prior_depth[pix[:, 1], pix[:, 0]])

    n_rays = 9 * n_patches
    return RayBatch(
        origins=np.concatenate(origins),
        directions=np.concatenate(directions),
        rgb=np.concatenate(rgb),
        prior=np.concatenate(prior),
        ray_ids=step * RAYS_PER_STEP + np.arange(n_rays),
        base_radius=pixel_base_radius(intr.fx, intr.fy),
    )


def encode_samples(samples: RaySamples, sampling: SamplingParams, mapping: MappingParams) -> Tuple[np.ndarray, np.ndarray]:
    """Contracted means (B, N, 3) and integrated encodings (B, N, 6L) of every interval"""
    t0 = samples.boundaries[..., :-1]
    t1 = samples.boundaries[..., 1:]
    if sampling.ray_shape == "cone":
        moments = frustum_moments(t0, t1, samples.base_radius)
    else:
        moments = cylinder_moments(t0, t1, samples.base_radius)
    region = lift_to_world(samples.origin[..., None, :], samples.direction[..., None, :], moments)
    if mapping.use_contraction:
        region = contract_gaussian(region).region
    else:
        region = GaussianRegion(np.clip(region.mean, -GRID_EXTENT, GRID_EXTENT), region.cov)
    if not mapping.use_gaussian_encoding:
        region = GaussianRegion(region.mean, np.zeros_like(region.cov))
    return region.mean, integrated_encoding(region, mapping.n_bands)


def render_samples(
    params: FieldParams,
    samples: RaySamples,
    sampling: SamplingParams,
    mapping: MappingParams,
) -> Tuple[RenderOutput, torch.Tensor, np.ndarray]:
    """Render a batch; also returns per-sample SDF values and contracted means"""
    means, encoding = encode_samples(samples, sampling, mapping)
    sdf, rgb = params(as_tensor(means), as_tensor(encoding))
    occupancy = sdf_to_occupancy(sdf, params.beta)
    return render_ray(occupancy, rgb, as_tensor(samples.midpoints)), sdf, means


def place_samples(
    params: FieldParams,
    origins: np.ndarray,
    directions: np.ndarray,
    ray_ids: np.ndarray,
    base_radius: float,
    sampling: SamplingParams,
    mapping: MappingParams,
    seed: int,
) -> RaySamples:
    """Stratified pass, then importance resampling from a gradient-free coarse render"""
    samples = sample_ray_batch(
        origins, directions, sampling.near, sampling.far, sampling.n_strat, seed, ray_ids,
        spacing=sampling.spacing, base_radius=base_radius,
    )
    if sampling.use_importance and sampling.n_imp > 0:
        with torch.no_grad():
            coarse, _, _ = render_samples(params, samples, sampling, mapping)
        samples = importance_resample(samples, coarse.weights.numpy(), sampling.n_imp, seed, ray_ids)
    return samples


def batch_loss(
    params: FieldParams,
    batch: RayBatch,
    weights: LossWeights,
    sampling: SamplingParams,
    mapping: MappingParams,
    rng: np.random.Generator,
    seed: int = 0,
) -> Tuple[torch.Tensor, LossTerms]:
    """Total mapping loss of one ray batch and its components"""
    samples = place_samples(
        params, batch.origins, batch.directions, batch.ray_ids, batch.base_radius, sampling, mapping, seed,
    )
    out, sdf, means = render_samples(params, samples, sampling, mapping)
    prior = as_tensor(batch.prior)

    valid = np.flatnonzero(np.isfinite(batch.prior))
    if len(valid) >= 2:
        pairs = rng.integers(0, len(valid), size=(mapping.correspondence_pairs, 2))
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        cor = loss_depth_correspondence(prior[valid], out.depth[valid], torch.as_tensor(pairs), weights.tau)
    else:
        cor = out.depth.sum() * 0.0

    con = continuity_from_patches(
        prior.reshape(-1, 3, 3), out.depth.reshape(-1, 3, 3), weights.tau_prime, weights.literal_margin,
    )

    s = samples.s_boundaries
    dist = loss_distortion(out.weights, 0.5 * (s[..., 1:] + s[..., :-1]), s[..., 1:] - s[..., :-1])

    n_probe = mapping.eikonal_probes
    flat_means = means.reshape(-1, 3)
    probes = np.concatenate([
        rng.uniform(-GRID_EXTENT, GRID_EXTENT, size=(n_probe - n_probe // 2, 3)),
        flat_means[rng.integers(0, len(flat_means), size=n_probe // 2)],
    ])
    eik = loss_eikonal(params, probes)

    sdf_term = loss_sdf(sdf, samples.midpoints, prior, weights.zeta, weights.alpha)

    terms = LossTerms(rgb=loss_rgb(out.color, batch.rgb), cor=cor, con=con, dist=dist, eik=eik, sdf=sdf_term)
    return total_loss(terms, weights), terms


def make_optimizer(params: FieldParams, mapping: MappingParams, learning_rate: float) -> torch.optim.Optimizer:
    if mapping.optimizer == "momentum":
        return torch.optim.SGD(params.parameters(), lr=learning_rate, momentum=mapping.momentum)
    return torch.optim.Adam(params.parameters(), lr=learning_rate)


def optimize_map(
    params: FieldParams,
    keyframes: Sequence[Keyframe],
    weights: LossWeights,
    n_steps: int,
    learning_rate: float,
    sampling: Optional[SamplingParams] = None,
    mapping: Optional[MappingParams] = None,
    seed: int = 0,
    progress: bool = False,
) -> Tuple[FieldParams, List[Dict[str, float]]]:
    """Gradient descent on the total loss; updates params in place

    Returns the params and a per-step trace of every loss term.

    Raises:
        NonFiniteLossError: a step produced a NaN or infinite loss
    """
    if n_steps < 1:
        raise InvalidInputError("n_steps must be >= 1")
    if not keyframes:
        raise InvalidInputError("mapping needs at least one keyframe")
    sampling = sampling or SamplingParams()
    mapping = mapping or MappingParams()
    optimizer = make_optimizer(params, mapping, learning_rate)

    trace: List[Dict[str, float]] = []
    steps = tqdm(range(n_steps), desc="mapping", disable=not progress)
    for step in steps:
        rng = np.random.default_rng([seed, step])
        batch = sample_patch_batch(keyframes, mapping.patches_per_step, rng, step)
        optimizer.zero_grad()
        total, terms = batch_loss(params, batch, weights, sampling, mapping, rng, seed)
        if not torch.isfinite(total):
            raise NonFiniteLossError(step, terms.as_floats())
        total.backward()
        optimizer.step()
        loss = total.item()
        trace.append({"step": step, "loss_total": loss, **terms.as_floats()})
        if progress:
            steps.set_postfix(loss=f"{loss:.4f}")
    return params, trace


def render_image(
    params: FieldParams,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    sampling: Optional[SamplingParams] = None,
    mapping: Optional[MappingParams] = None,
    seed: int = 0,
    chunk: int = 2048,
) -> Tuple[np.ndarray, np.ndarray]:
    """Full-frame (H, W, 3) colour and (H, W) depth from the field"""
    sampling = sampling or SamplingParams()
    mapping = mapping or MappingParams()
    h, w = intrinsics.height, intrinsics.width
    dirs = ray_directions(intrinsics, intrinsics.pixel_grid()).reshape(-1, 3) @ pose.R.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    radius = pixel_base_radius(intrinsics.fx, intrinsics.fy)

    colors, depths = [], []
    with torch.no_grad():
        for start in range(0, len(dirs), chunk):
            ids = np.arange(start, min(start + chunk, len(dirs)))
            samples = place_samples(params, origins[ids], dirs[ids], ids, radius, sampling, mapping, seed)
            out, _, _ = render_samples(params, samples, sampling, mapping)
            colors.append(out.color.numpy())
            depths.append(out.depth.numpy())
    return np.concatenate(colors).reshape(h, w, 3), np.concatenate(depths).reshape(h, w)
