"""
Configuration and report models
Every run is described by one RunConfig and summarised by one MetricsReport
"""
import math
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class CameraIntrinsics(BaseModel):
    """Pinhole camera (pixel centres at integer coordinates, z forward, y down)"""
    model_config = ConfigDict(frozen=True)

    fx: float = Field(60.0, gt=0, description="Focal length along x (pixels)")
    fy: float = Field(60.0, gt=0, description="Focal length along y (pixels)")
    cx: float = Field(31.5, description="Principal point x (pixels)")
    cy: float = Field(23.5, description="Principal point y (pixels)")
    width: int = Field(64, gt=0)
    height: int = Field(48, gt=0)

    @model_validator(mode="after")
    def check_principal_point(self) -> "CameraIntrinsics":
        if not 0 <= self.cx < self.width:
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not 0 <= self.cy < self.height:
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")
        return self

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix K"""
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def pixel_grid(self) -> np.ndarray:
        """(H, W, 2) array of (u, v) pixel coordinates"""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([u, v], axis=-1)

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        """Mask of pixels that land inside the image (rounded to nearest pixel)"""
        u, v = pixels[..., 0], pixels[..., 1]
        return (u > -0.5) & (u < self.width - 0.5) & (v > -0.5) & (v < self.height - 0.5)


class DepthPriorSpec(BaseModel):
    """Affine corruption applied to true depth to imitate a monocular depth network"""

    scale: float = Field(1.0, gt=0, description="Multiplicative factor a")
    offset: float = Field(0.0, description="Additive offset b (meters)")
    noise_sigma: float = Field(0.0, ge=0, description="Gaussian noise std (meters)")
    seed: int = 0
    scale_drift: float = Field(
        0.0,
        description="Per-frame multiplicative scale drift; frame k uses a*(1+drift)^k",
    )


class SceneSpec(BaseModel):
    """Which analytic scene to simulate"""

    kind: Literal["single_sphere", "two_primitive_room"] = "two_primitive_room"
    scale: float = Field(1.0, gt=0, description="Uniform scene scale")


class TrajectorySpec(BaseModel):
    """Camera path around the scene centroid"""

    kind: Literal["orbit", "lawnmower", "loop"] = "loop"
    n_frames: int = Field(24, ge=2)
    radius: float = Field(2.5, gt=0, description="Orbit radius / lawnmower half-extent (meters)")
    height: float = Field(0.6, description="Camera height above the centroid (meters)")
    step: float = Field(0.25, gt=0, description="Max lawnmower step between frames (meters)")
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)


class SamplingParams(BaseModel):
    """Per-ray sampling configuration"""

    n_strat: int = Field(20, ge=1)
    n_imp: int = Field(40, ge=0)
    near: float = Field(0.2, gt=0)
    far: float = Field(6.0, gt=0)
    use_importance: bool = True
    spacing: Literal["inverse_depth", "linear"] = "inverse_depth"
    ray_shape: Literal["cone", "cylinder"] = "cone"

    @model_validator(mode="after")
    def check_range(self) -> "SamplingParams":
        if not self.near < self.far:
            raise ValueError(f"near={self.near} must be < far={self.far}")
        return self


class LossWeights(BaseModel):
    """Weights and thresholds of the mapping objective"""

    lambda_c: float = Field(1.0, ge=0)
    lambda_dep: float = Field(1.0, ge=0)
    lambda_dist: float = Field(0.002, ge=0)
    lambda_eik: float = Field(0.15, ge=0)
    lambda_sdf: float = Field(1.0, ge=0)
    lambda_con: float = Field(1.0, ge=0)
    tau: float = Field(0.05, ge=0, description="Correspondence-loss margin (meters)")
    tau_prime: float = Field(0.05, ge=0, description="Continuity-loss tolerance (meters)")
    zeta: float = Field(0.1, ge=0, description="Near-surface band half-width (meters)")
    alpha: float = Field(5.0, ge=0)
    literal_margin: bool = Field(
        False,
        description="Use the printed max(|.| + tau', 0) continuity form instead of the hinge",
    )


class MappingParams(BaseModel):
    """Field representation and map optimiser settings"""

    grid_resolution: int = Field(64, ge=2)
    feature_dim: int = Field(8, ge=1)
    hidden_dim: int = Field(32, ge=1)
    n_bands: int = Field(8, ge=1)
    beta_init: float = Field(0.1, gt=0)
    init_radius: float = Field(0.5, gt=0, description="Radius of the initial SDF sphere")
    optimizer: Literal["momentum", "adam"] = "adam"
    learning_rate: float = Field(0.01, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    n_steps: int = Field(300, ge=1)
    patches_per_step: int = Field(48, ge=1)
    correspondence_pairs: int = Field(256, ge=1)
    eikonal_probes: int = Field(512, ge=1)
    use_contraction: bool = True
    use_gaussian_encoding: bool = True
    seed: int = 0


class RobustDepthConfig(BaseModel):
    """Depth penalty added to the tracking cost"""

    enabled: bool = True
    tau_tra: float = Field(0.2, gt=0, description="Quadratic/linear switch point (meters)")
    weight: float = Field(1.0, ge=0)
    mode: Literal["robust", "l1", "l2"] = "robust"


class TrackerParams(BaseModel):
    """Bundle-adjustment tracker settings"""

    damping: float = Field(1e-4, ge=0)
    max_iters: int = Field(20, ge=1)
    pixels_per_frame: int = Field(64, ge=4)
    pixel_noise_sigma: float = Field(0.5, ge=0)
    window: int = Field(4, ge=1, description="Keyframes linked to each new frame")
    keyframe_flow_px: float = Field(16.0, ge=0)
    keyframe_inlier_fraction: float = Field(0.6, ge=0, le=1)
    depth: RobustDepthConfig = RobustDepthConfig()


class LoopClosureParams(BaseModel):
    """Loop detection, verification and pose-graph settings"""

    enabled: bool = True
    exclusion_window: int = Field(10, ge=0)
    max_candidates: int = Field(3, ge=1)
    min_score: float = Field(0.05, ge=0)
    window_size: int = Field(5, ge=1)
    inlier_fraction: float = Field(0.7, ge=0, le=1)
    inlier_px: float = Field(3.0, gt=0)
    consecutive: int = Field(2, ge=1)
    loop_information: float = Field(10.0, gt=0)
    n_landmarks: int = Field(400, ge=3)
    covisibility_noise: float = Field(0.0, ge=0)
    max_iters: int = Field(50, ge=1)


class RunConfig(BaseModel):
    """Everything a pipeline run depends on; seeds are explicit"""

    mode: Literal["monocular", "rgbd"] = "monocular"
    seed: int = 0
    output_dir: Optional[str] = None
    scene: SceneSpec = SceneSpec()
    trajectory: TrajectorySpec = TrajectorySpec()
    camera: CameraIntrinsics = CameraIntrinsics()
    depth_prior: DepthPriorSpec = DepthPriorSpec(scale=1.2, noise_sigma=0.02)
    sampling: SamplingParams = SamplingParams()
    loss_weights: LossWeights = LossWeights()
    mapping: MappingParams = MappingParams()
    tracker: TrackerParams = TrackerParams()
    loop_closure: LoopClosureParams = LoopClosureParams()
    held_out_every: int = Field(6, ge=0, description="Every n-th frame is held out of mapping (0 = none)")

    @field_validator("depth_prior")
    @classmethod
    def finite_prior(cls, v: DepthPriorSpec) -> DepthPriorSpec:
        if not math.isfinite(v.offset):
            raise ValueError("depth_prior.offset must be finite")
        return v

    def effective_depth_prior(self) -> DepthPriorSpec:
        """RGB-D runs use oracle metric priors"""
        if self.mode == "rgbd":
            return self.depth_prior.model_copy(update={"scale": 1.0, "offset": 0.0, "scale_drift": 0.0})
        return self.depth_prior

    def to_config_text(self) -> str:
        """Serialise to the flat `key = value` grammar"""
        lines = []
        for key, value in _flatten(self.model_dump()).items():
            if value is None:
                continue
            if isinstance(value, (list, tuple)):
                value = ",".join(repr(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_flat(cls, flat: Dict[str, Optional[str]]) -> "RunConfig":
        """Build from dotted keys (values as text); unknown keys are rejected"""
        known = _flatten(cls().model_dump())
        nested: Dict[str, Any] = {}
        for key, raw in flat.items():
            if key not in known:
                raise ValueError(f"unknown config key: {key}")
            value: Any = raw
            if raw is not None and "," in raw:
                value = [part.strip() for part in raw.split(",")]
            node = nested
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        return cls.model_validate(nested)


class MetricsReport(BaseModel):
    """Evaluation summary of one run"""

    mode: str
    alignment: Literal["sim3", "rigid"]
    n_frames: int
    n_keyframes: int
    n_loop_closures: int
    ate_rmse: float = Field(..., ge=0, description="Meters")
    depth_l1: float = Field(..., ge=0, description="Meters")
    psnr: float = Field(..., description="dB; inf when images are identical")
    ssim: float = Field(..., le=1.0)
    surface_p50: float = Field(0.0, description="Median |scene SDF| at mesh vertices (meters)")
    surface_p90: float = Field(0.0, description="90th percentile |scene SDF| at mesh vertices (meters)")
    per_frame_error: List[float] = Field(default_factory=list, description="Aligned per-frame position errors (meters)")
    runtime_s: Dict[str, float] = Field(default_factory=dict, exclude=True)


def _flatten(tree: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, prefix=f"{name}."))
        else:
            flat[name] = value
    return flat
