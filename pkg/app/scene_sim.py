"""
Analytic scene simulator
Ground-truth scenes, trajectories, renders, correspondences and corrupted
depth priors. Every random draw comes from an explicit seed.
"""
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np

from app.errors import InvalidInputError
from app.geometry import Pose
from app.models import CameraIntrinsics, DepthPriorSpec

MAX_STEPS = 256
HIT_TOLERANCE = 1e-4
MAX_RANGE = 100.0
AMBIENT = 0.25
LIGHT_DIRECTION = np.array([-0.3, -0.5, -1.0]) / np.linalg.norm([-0.3, -0.5, -1.0])
BACKGROUND = np.zeros(3)

ShapeKind = Literal["sphere", "box", "plane"]


@dataclass(frozen=True)
class Primitive:
    """One analytic shape with a flat albedo

    sphere: center, radius; box: center, half_extents; plane: normal, offset
    (points x with normal . x = offset lie on the plane).
    """
    kind: ShapeKind
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0
    half_extents: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    normal: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    offset: float = 0.0
    albedo: Tuple[float, float, float] = (0.8, 0.8, 0.8)

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "plane"):
            raise InvalidInputError(f"unknown primitive kind: {self.kind}")
        if self.kind == "sphere" and not self.radius > 0:
            raise InvalidInputError(f"sphere radius must be positive, got {self.radius}")
        if self.kind == "box" and not min(self.half_extents) > 0:
            raise InvalidInputError(f"box half-extents must be positive, got {self.half_extents}")
        if self.kind == "plane" and not np.linalg.norm(self.normal) > 0:
            raise InvalidInputError("plane normal must be non-zero")
        if not all(0.0 <= a <= 1.0 for a in self.albedo):
            raise InvalidInputError(f"albedo must lie in [0,1]^3, got {self.albedo}")

    def sdf(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "sphere":
            return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius
        if self.kind == "box":
            q = np.abs(x - np.asarray(self.center)) - np.asarray(self.half_extents)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        return x @ (n / norm) - self.offset / norm


@dataclass(frozen=True)
class AnalyticScene:
    """Union (pointwise minimum) of primitives"""
    primitives: Tuple[Primitive, ...] = field(default_factory=tuple)

    @property
    def is_empty(self) -> bool:
        return len(self.primitives) == 0

    def albedos(self) -> np.ndarray:
        return np.array([p.albedo for p in self.primitives], dtype=np.float64)


def single_sphere_scene(radius: float = 0.5, scale: float = 1.0) -> AnalyticScene:
    return AnalyticScene((Primitive("sphere", radius=radius * scale, albedo=(0.85, 0.35, 0.2)),))


def two_primitive_room(scale: float = 1.0) -> AnalyticScene:
    """Floor plane with a sphere resting above it"""
    return AnalyticScene((
        Primitive("plane", normal=(0.0, 0.0, 1.0), offset=-0.5 * scale, albedo=(0.75, 0.7, 0.55)),
        Primitive("sphere", center=(0.0, 0.0, -0.1 * scale), radius=0.4 * scale, albedo=(0.2, 0.45, 0.85)),
    ))


def primitive_sdfs(scene: AnalyticScene, x: np.ndarray) -> np.ndarray:
    """(..., P) signed distances to each primitive"""
    if scene.is_empty:
        raise InvalidInputError("scene has no primitives")
    x = np.asarray(x, dtype=np.float64)
    return np.stack([p.sdf(x) for p in scene.primitives], axis=-1)


def scene_sdf(scene: AnalyticScene, x: np.ndarray) -> np.ndarray:
    """Signed distance of the union; negative inside"""
    return primitive_sdfs(scene, x).min(axis=-1)


def scene_normals(scene: AnalyticScene, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for k in range(3):
        step = np.zeros(3)
        step[k] = eps
        grad[..., k] = (scene_sdf(scene, x + step) - scene_sdf(scene, x - step)) / (2 * eps)
    return grad / np.maximum(np.linalg.norm(grad, axis=-1, keepdims=True), 1e-12)


def ray_directions(intrinsics: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Unit camera-frame directions through (..., 2) pixel coordinates"""
    pixels = np.asarray(pixels, dtype=np.float64)
    d = np.stack([
        (pixels[..., 0] - intrinsics.cx) / intrinsics.fx,
        (pixels[..., 1] - intrinsics.cy) / intrinsics.fy,
        np.ones(pixels.shape[:-1]),
    ], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def sphere_trace(
    scene: AnalyticScene,
    origins: np.ndarray,
    directions: np.ndarray,
    max_steps: int = MAX_STEPS,
    tolerance: float = HIT_TOLERANCE,
    max_range: float = MAX_RANGE,
) -> Tuple[np.ndarray, np.ndarray]:
    """March (N, 3) rays; returns (ray length, hit mask)"""
    n = directions.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        d = scene_sdf(scene, origins[idx] + t[idx, None] * directions[idx])
        converged = np.abs(d) < tolerance
        hit[idx[converged]] = True
        t[idx[~converged]] += d[~converged]
        escaped = t[idx] > max_range
        active[idx[converged | escaped]] = False
    return t, hit


def render_ground_truth(
    scene: AnalyticScene,
    pose: Pose,
    intrinsics: CameraIntrinsics,
) -> Tuple[np.ndarray, np.ndarray]:
    """Sphere-traced (H, W, 3) RGB and (H, W) range image (+inf where nothing is hit)"""
    h, w = intrinsics.height, intrinsics.width
    rgb = np.broadcast_to(BACKGROUND, (h, w, 3)).copy()
    depth = np.full((h, w), np.inf)
    if scene.is_empty:
        return rgb, depth

    dirs = ray_directions(intrinsics, intrinsics.pixel_grid()).reshape(-1, 3) @ pose.R.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    t, hit = sphere_trace(scene, origins, dirs)

    points = origins[hit] + t[hit, None] * dirs[hit]
    which = primitive_sdfs(scene, points).argmin(axis=-1)
    normals = scene_normals(scene, points)
    lambert = np.clip(normals @ -LIGHT_DIRECTION, 0.0, None)
    shade = AMBIENT + (1.0 - AMBIENT) * lambert
    colors = scene.albedos()[which] * shade[:, None]

    flat_rgb = rgb.reshape(-1, 3)
    flat_rgb[hit] = np.clip(colors, 0.0, 1.0)
    flat_depth = depth.reshape(-1)
    flat_depth[hit] = t[hit]
    return rgb, depth


def gen_trajectory(
    kind: str,
    n_frames: int,
    center: Sequence[float] = (0.0, 0.0, 0.0),
    radius: float = 3.0,
    height: float = 0.0,
    step: float = 0.25,
) -> List[Pose]:
    """Smooth camera path looking at `center`

    orbit: n poses evenly spaced on a circle; loop: the same circle closed so
    the last pose equals the first; lawnmower: boustrophedon rows above the
    scene with consecutive camera centres at most `step` apart.
    """
    if n_frames < 2:
        raise InvalidInputError(f"n_frames must be >= 2, got {n_frames}")
    c = np.asarray(center, dtype=np.float64)

    if kind in ("orbit", "loop"):
        denom = n_frames if kind == "orbit" else n_frames - 1
        angles = 2.0 * np.pi * np.arange(n_frames) / denom
        eyes = c + np.stack([radius * np.cos(angles), radius * np.sin(angles), np.full(n_frames, height)], axis=1)
    elif kind == "lawnmower":
        z = c[2] + (height if height != 0.0 else radius)
        waypoints = np.array([
            [-radius, -radius], [radius, -radius], [radius, 0.0],
            [-radius, 0.0], [-radius, radius], [radius, radius],
        ]) + c[:2]
        seg = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        spacing = min(step, cum[-1] / (n_frames - 1))
        s = spacing * np.arange(n_frames)
        xy = np.stack([np.interp(s, cum, waypoints[:, 0]), np.interp(s, cum, waypoints[:, 1])], axis=1)
        eyes = np.concatenate([xy, np.full((n_frames, 1), z)], axis=1)
    else:
        raise InvalidInputError(f"unknown trajectory kind: {kind}")

    return [Pose.look_at(eye, c) for eye in eyes]


def corrupt_depth(depth: np.ndarray, spec: DepthPriorSpec, frame_index: int = 0) -> np.ndarray:
    """a*d + b + N(0, sigma^2), clamped positive; +inf pixels stay +inf"""
    depth = np.asarray(depth, dtype=np.float64)
    rng = np.random.default_rng(spec.seed + frame_index)
    noise = rng.normal(0.0, spec.noise_sigma, size=depth.shape)
    scale = spec.scale * (1.0 + spec.scale_drift) ** frame_index
    finite = np.isfinite(depth)
    prior = np.full(depth.shape, np.inf)
    prior[finite] = np.maximum(scale * depth[finite] + spec.offset + noise[finite], 1e-6)
    return prior


def align_depth_prior(
    prior: np.ndarray,
    reference: np.ndarray,
    mask: Optional[np.ndarray] = None,
) -> Tuple[float, float, np.ndarray]:
    """Least-squares scale/shift mapping the prior onto reference depths"""
    valid = np.isfinite(prior) & np.isfinite(reference)
    if mask is not None:
        valid &= mask
    if valid.sum() < 2:
        raise InvalidInputError("need at least two valid pixels to align a depth prior")
    A = np.stack([prior[valid], np.ones(valid.sum())], axis=1)
    (scale, shift), *_ = np.linalg.lstsq(A, reference[valid], rcond=None)
    aligned = np.where(np.isfinite(prior), scale * prior + shift, np.inf)
    return float(scale), float(shift), aligned


@dataclass(frozen=True)
class Correspondences:
    """Matches from frame i into frame j

    index points into the pixel set that was unprojected in frame i.
    """
    pixel_i: np.ndarray
    pixel_j: np.ndarray
    confidence: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return len(self.confidence)

    def mean_flow(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.pixel_j - self.pixel_i, axis=1).mean())


def sample_pixels(intrinsics: CameraIntrinsics, depth: np.ndarray, n: int, seed: int, margin: int = 1) -> np.ndarray:
    """Up to n distinct integer pixels with finite depth, away from the border"""
    h, w = depth.shape
    v, u = np.mgrid[margin:h - margin, margin:w - margin]
    candidates = np.stack([u.ravel(), v.ravel()], axis=1)
    candidates = candidates[np.isfinite(depth[candidates[:, 1], candidates[:, 0]])]
    rng = np.random.default_rng(seed)
    take = min(n, len(candidates))
    chosen = rng.choice(len(candidates), size=take, replace=False)
    return candidates[np.sort(chosen)].astype(np.float64)


def unproject(intrinsics: CameraIntrinsics, pixels: np.ndarray, ranges: np.ndarray) -> np.ndarray:
    """Camera-frame points at Euclidean distance `ranges` along pixel rays"""
    return ray_directions(intrinsics, pixels) * np.asarray(ranges)[..., None]


def project(intrinsics: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    z = points[..., 2]
    return np.stack([
        intrinsics.fx * points[..., 0] / z + intrinsics.cx,
        intrinsics.fy * points[..., 1] / z + intrinsics.cy,
    ], axis=-1)


def gen_correspondences(
    pose_i: Pose,
    pose_j: Pose,
    depth_i: np.ndarray,
    intrinsics: CameraIntrinsics,
    pixel_noise_sigma: float,
    seed: int,
    pixels: Optional[np.ndarray] = None,
) -> Correspondences:
    """Noisy ground-truth matches i -> j via unproject / reproject"""
    if pixels is None:
        pixels = sample_pixels(intrinsics, depth_i, depth_i.size, seed)
    pixels = np.asarray(pixels, dtype=np.float64)
    iu = np.rint(pixels[:, 0]).astype(int)
    iv = np.rint(pixels[:, 1]).astype(int)
    ranges = depth_i[iv, iu]
    if not np.all(np.isfinite(ranges)):
        raise InvalidInputError("correspondence pixels must have finite depth")

    world = pose_i.apply(unproject(intrinsics, pixels, ranges))
    in_j = pose_j.inverse().apply(world)
    front = in_j[:, 2] > 1e-9
    projected = np.full_like(pixels, np.nan)
    projected[front] = project(intrinsics, in_j[front])

    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, pixel_noise_sigma, size=pixels.shape)
    observed = projected + noise
    if pixel_noise_sigma > 0:
        confidence = np.exp(-np.sum(noise**2, axis=1) / (2.0 * pixel_noise_sigma**2))
    else:
        confidence = np.ones(len(pixels))
    confidence = np.clip(confidence, 1e-12, 1.0)

    keep = front & intrinsics.contains(np.nan_to_num(observed, nan=-1e9))
    return Correspondences(
        pixel_i=pixels[keep],
        pixel_j=observed[keep],
        confidence=confidence[keep],
        index=np.flatnonzero(keep),
    )


def sample_landmarks(scene: AnalyticScene, n: int, seed: int, extent: float = 1.5) -> np.ndarray:
    """(n, 3) points on the scene surface inside a cube of half-size `extent`"""
    rng = np.random.default_rng(seed)
    found: List[np.ndarray] = []
    total = 0
    for _ in range(50):
        p = rng.uniform(-extent, extent, size=(4 * n, 3))
        for _ in range(8):
            p = p - scene_sdf(scene, p)[:, None] * scene_normals(scene, p)
        ok = (np.abs(scene_sdf(scene, p)) < 1e-6) & np.all(np.abs(p) <= extent, axis=1)
        found.append(p[ok])
        total += int(ok.sum())
        if total >= n:
            break
    return np.concatenate(found)[:n]


def landmark_visibility(
    landmarks: np.ndarray,
    poses: Sequence[Pose],
    depths: Sequence[np.ndarray],
    intrinsics: CameraIntrinsics,
    rel_tolerance: float = 0.02,
) -> np.ndarray:
    """(F, N) mask: landmark in front of camera, inside the image, and not occluded"""
    vis = np.zeros((len(poses), len(landmarks)), dtype=bool)
    for f, (pose, depth) in enumerate(zip(poses, depths)):
        cam = pose.inverse().apply(landmarks)
        front = cam[:, 2] > 1e-6
        pix = np.full((len(landmarks), 2), -1e9)
        pix[front] = project(intrinsics, cam[front])
        inside = front & intrinsics.contains(pix)
        iu = np.clip(np.rint(pix[:, 0]).astype(int), 0, intrinsics.width - 1)
        iv = np.clip(np.rint(pix[:, 1]).astype(int), 0, intrinsics.height - 1)
        rng_cam = np.linalg.norm(cam, axis=1)
        observed = depth[iv, iu]
        unoccluded = np.isfinite(observed) & (np.abs(observed - rng_cam) < rel_tolerance * rng_cam)
        vis[f] = inside & unoccluded
    return vis


def scene_diameter(scene: AnalyticScene, extent: float = 1.5) -> float:
    """Diameter of the bounded part of the scene (planes are clipped to the cube)"""
    spans = []
    for p in scene.primitives:
        if p.kind == "sphere":
            spans.append(2.0 * p.radius)
        elif p.kind == "box":
            spans.append(2.0 * float(np.linalg.norm(p.half_extents)))
    return max(spans) if spans else 2.0 * extent
