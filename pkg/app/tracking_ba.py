"""
Depth-supervised bundle-adjustment tracking
Factor graph over a keyframe window: confidence-weighted reprojection residuals,
a robust penalty tying inverse depths to the depth prior, and damped
Gauss-Newton steps solved through the Schur complement on the point block.

Conventions: poses are camera-to-world, increments xi = (rho, phi) act on the
left, points are parameterised by inverse z-depth in their host frame.
"""
import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import InvalidInputError, SingularSystemError
from app.geometry import Pose, skew
from app.models import CameraIntrinsics, RobustDepthConfig, TrackerParams
from app.scene_sim import Correspondences, gen_correspondences, ray_directions, sample_pixels

MIN_INVERSE_DEPTH = 1e-6
LINEAR_CURVATURE_FLOOR = 1e-6
MIN_DAMPING = 1e-6
MAX_DAMPING = 1e8
MAX_CONDITION = 1e15
RELATIVE_TOLERANCE = 1e-8
ABSOLUTE_TOLERANCE = 1e-20
BEHIND_CAMERA = 1e-9
STEP_TOLERANCE = 1e-10


@dataclass
class Keyframe:
    """A frame kept for mapping and loop closure"""
    index: int
    pose: Pose
    rgb: np.ndarray
    prior_depth: np.ndarray
    intrinsics: CameraIntrinsics
    gt_depth: Optional[np.ndarray] = None


@dataclass
class Edge:
    """Matches of points hosted in frame i observed in frame j"""
    i: int
    j: int
    points: np.ndarray
    targets: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        if self.i == self.j:
            raise InvalidInputError("edge endpoints must differ")
        if np.any(self.confidence <= 0) or np.any(self.confidence > 1):
            raise InvalidInputError("confidences must lie in (0, 1]")


@dataclass
class FactorGraph:
    poses: List[Pose]
    point_frame: np.ndarray
    point_pixel: np.ndarray
    inv_depth: np.ndarray
    depth_prior: np.ndarray
    edges: List[Edge] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    @property
    def n_points(self) -> int:
        return len(self.inv_depth)

    def validate(self) -> None:
        n = self.n_frames
        for e in self.edges:
            if not (0 <= e.i < n and 0 <= e.j < n):
                raise InvalidInputError(f"edge ({e.i}, {e.j}) references a missing frame")
            if np.any(self.point_frame[e.points] != e.i):
                raise InvalidInputError(f"edge ({e.i}, {e.j}) uses points hosted elsewhere")
        if np.any(self.inv_depth <= 0):
            raise InvalidInputError("inverse depths must be positive")

    def snapshot(self) -> "FactorGraph":
        """Independent copy for readers that must not see later updates"""
        return copy.deepcopy(self)

    def retracted(self, dxi: np.ndarray, dd: np.ndarray) -> "FactorGraph":
        """Graph after applying per-frame increments and inverse-depth steps"""
        poses = [pose.retract(step) for pose, step in zip(self.poses, dxi)]
        inv_depth = np.maximum(self.inv_depth + dd, MIN_INVERSE_DEPTH)
        return FactorGraph(poses, self.point_frame, self.point_pixel, inv_depth, self.depth_prior, self.edges)


@dataclass
class ResidualBlock:
    """Unweighted residuals p* - pi(...) and their Jacobians for one edge"""
    edge: Edge
    points: np.ndarray
    residual: np.ndarray
    weight: np.ndarray
    jac_i: np.ndarray
    jac_j: np.ndarray
    jac_depth: np.ndarray


@dataclass
class HessianSystem:
    """Half-scaled normal equations [C E; E^T diag(P)] [dxi; dd] = [v; w]"""
    C: np.ndarray
    E: np.ndarray
    P: np.ndarray
    v: np.ndarray
    w: np.ndarray
    fixed_frames: Tuple[int, ...] = ()

    def dense(self) -> Tuple[np.ndarray, np.ndarray]:
        H = np.block([[self.C, self.E], [self.E.T, np.diag(self.P)]])
        return H, np.concatenate([self.v, self.w])


@dataclass
class GaussNewtonResult:
    graph: FactorGraph
    cost_trace: List[float]
    converged: bool
    diverged: bool
    iterations: int
    n_dropped: int


def host_points(graph: FactorGraph, intrinsics: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """Camera-frame points of the given point ids in their host frames"""
    K_inv = np.linalg.inv(intrinsics.matrix())
    pixels = graph.point_pixel[points]
    homog = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1) @ K_inv.T
    return homog / graph.inv_depth[points, None]


def reprojection_residuals(graph: FactorGraph, intrinsics: CameraIntrinsics) -> Tuple[List[ResidualBlock], int]:
    """Residuals and analytic Jacobians of every edge

    Correspondences landing behind camera j are dropped; their count is returned.
    """
    K_inv = np.linalg.inv(intrinsics.matrix())
    fx, fy = intrinsics.fx, intrinsics.fy
    blocks: List[ResidualBlock] = []
    dropped = 0
    for edge in graph.edges:
        Ti, Tj = graph.poses[edge.i], graph.poses[edge.j]
        Ri, Rj = Ti.R, Tj.R
        inv = graph.inv_depth[edge.points]
        pixels = graph.point_pixel[edge.points]
        ray = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1) @ K_inv.T
        Xw = Ti.apply(ray / inv[:, None])
        Xj = (Xw - Tj.translation) @ Rj

        front = Xj[:, 2] > BEHIND_CAMERA
        dropped += int((~front).sum())
        if not front.any():
            continue
        Xw, Xj, ray, inv = Xw[front], Xj[front], ray[front], inv[front]
        x, y, z = Xj[:, 0], Xj[:, 1], Xj[:, 2]
        projected = np.stack([fx * x / z + intrinsics.cx, fy * y / z + intrinsics.cy], axis=1)

        n = len(z)
        J_proj = np.zeros((n, 2, 3))
        J_proj[:, 0, 0] = fx / z
        J_proj[:, 0, 2] = -fx * x / z**2
        J_proj[:, 1, 1] = fy / z
        J_proj[:, 1, 2] = -fy * y / z**2

        # d(Exp(xi) X)/dxi = [I, -[X]x]
        lifted = np.zeros((n, 3, 6))
        lifted[:, :, :3] = np.eye(3)
        lifted[:, :, 3:] = -np.stack([skew(p) for p in Xw])
        dXj_dxi_i = Rj.T @ lifted
        dXj_dd = (Rj.T @ Ri @ (-ray / inv[:, None] ** 2).T).T

        blocks.append(ResidualBlock(
            edge=edge,
            points=edge.points[front],
            residual=edge.targets[front] - projected,
            weight=edge.confidence[front],
            jac_i=-J_proj @ dXj_dxi_i,
            jac_j=J_proj @ dXj_dxi_i,
            jac_depth=-np.einsum("nab,nb->na", J_proj, dXj_dd),
        ))
    return blocks, dropped


def robust_depth_penalty(d_prior, d_est, tau_tra: float) -> Tuple[np.ndarray, np.ndarray]:
    """Quadratic below tau_tra, tau_tra * |diff| above; derivative w.r.t. d_est"""
    if tau_tra <= 0:
        raise InvalidInputError("tau_tra must be positive")
    diff = np.asarray(d_prior, dtype=np.float64) - np.asarray(d_est, dtype=np.float64)
    inner = np.abs(diff) < tau_tra
    value = np.where(inner, diff**2, tau_tra * np.abs(diff))
    derivative = np.where(inner, -2.0 * diff, -tau_tra * np.sign(diff))
    return value, derivative


def depth_penalty(d_prior: np.ndarray, d_est: np.ndarray, config: RobustDepthConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(value, first derivative, Gauss-Newton curvature) w.r.t. d_est for the configured mode"""
    diff = d_prior - d_est
    floor = np.full_like(diff, LINEAR_CURVATURE_FLOOR)
    if config.mode == "l2":
        return diff**2, -2.0 * diff, np.full_like(diff, 2.0)
    if config.mode == "l1":
        return np.abs(diff), -np.sign(diff), floor
    value, derivative = robust_depth_penalty(d_prior, d_est, config.tau_tra)
    curvature = np.where(np.abs(diff) < config.tau_tra, 2.0, floor)
    return value, derivative, curvature


def _depth_terms(graph: FactorGraph, config: Optional[RobustDepthConfig]):
    if config is None or not config.enabled or config.weight == 0:
        return None
    has_prior = np.isfinite(graph.depth_prior)
    d_est = 1.0 / graph.inv_depth
    value, derivative, curvature = depth_penalty(
        np.where(has_prior, graph.depth_prior, d_est), d_est, config
    )
    return has_prior, value, derivative, curvature


def total_cost(graph: FactorGraph, intrinsics: CameraIntrinsics, depth: Optional[RobustDepthConfig] = None) -> float:
    """sum w |r|^2 + weight * sum f(d_prior - 1/d')"""
    blocks, _ = reprojection_residuals(graph, intrinsics)
    cost = sum(float(np.sum(b.weight * np.sum(b.residual**2, axis=1))) for b in blocks)
    terms = _depth_terms(graph, depth)
    if terms is not None:
        has_prior, value, _, _ = terms
        cost += depth.weight * float(value[has_prior].sum())
    return cost


def build_normal_equations(
    graph: FactorGraph,
    intrinsics: CameraIntrinsics,
    depth: Optional[RobustDepthConfig],
    damping: float,
) -> HessianSystem:
    """Assemble the block system; frame 0 is marked as the gauge anchor"""
    if not graph.edges:
        raise InvalidInputError("cannot build normal equations for a graph without edges")
    graph.validate()
    nf, npts = graph.n_frames, graph.n_points
    C = np.zeros((6 * nf, 6 * nf))
    E = np.zeros((6 * nf, npts))
    P = np.zeros(npts)
    v = np.zeros(6 * nf)
    w = np.zeros(npts)

    blocks, _ = reprojection_residuals(graph, intrinsics)
    for b in blocks:
        i, j = b.edge.i, b.edge.j
        si, sj = slice(6 * i, 6 * i + 6), slice(6 * j, 6 * j + 6)
        Wi = b.jac_i * b.weight[:, None, None]
        Wj = b.jac_j * b.weight[:, None, None]
        Wd = b.jac_depth * b.weight[:, None]
        C[si, si] += np.einsum("nai,naj->ij", Wi, b.jac_i)
        C[sj, sj] += np.einsum("nai,naj->ij", Wj, b.jac_j)
        C_ij = np.einsum("nai,naj->ij", Wi, b.jac_j)
        C[si, sj] += C_ij
        C[sj, si] += C_ij.T
        np.add.at(E.T, (b.points, si), np.einsum("nai,na->ni", Wi, b.jac_depth))
        np.add.at(E.T, (b.points, sj), np.einsum("nai,na->ni", Wj, b.jac_depth))
        np.add.at(P, b.points, np.einsum("na,na->n", Wd, b.jac_depth))
        v[si] -= np.einsum("nai,na->i", Wi, b.residual)
        v[sj] -= np.einsum("nai,na->i", Wj, b.residual)
        np.add.at(w, b.points, -np.einsum("na,na->n", Wd, b.residual))

    terms = _depth_terms(graph, depth)
    if terms is not None:
        has_prior, _, derivative, curvature = terms
        dest_dd = -1.0 / graph.inv_depth**2
        scale = 0.5 * depth.weight * has_prior
        P += scale * curvature * dest_dd**2
        w -= scale * derivative * dest_dd

    C[np.diag_indices_from(C)] += damping
    P += damping
    return HessianSystem(C=C, E=E, P=P, v=v, w=w, fixed_frames=(0,))


def schur_solve(sys: HessianSystem) -> Tuple[np.ndarray, np.ndarray]:
    """dxi = S^-1 (v - E P^-1 w) with S = C - E P^-1 E^T; dd = P^-1 (w - E^T dxi)

    Fixed frames get a zero increment.

    Raises:
        SingularSystemError: P has non-positive entries or S is numerically singular
    """
    if np.any(sys.P <= 0):
        raise SingularSystemError("point block has non-positive entries", np.inf)
    nf = sys.C.shape[0] // 6
    free_frames = [f for f in range(nf) if f not in sys.fixed_frames]
    free = np.concatenate([np.arange(6 * f, 6 * f + 6) for f in free_frames]) if free_frames else np.zeros(0, dtype=int)
    P_inv = 1.0 / sys.P

    dxi = np.zeros(6 * nf)
    if len(free):
        E_f = sys.E[free]
        S = sys.C[np.ix_(free, free)] - (E_f * P_inv) @ E_f.T
        rhs = sys.v[free] - E_f @ (P_inv * sys.w)
        condition = float(np.linalg.cond(S))
        if not np.isfinite(condition):
            condition = np.inf
        if condition > MAX_CONDITION:
            raise SingularSystemError("reduced camera system is singular", condition)
        dxi[free] = np.linalg.solve(S, rhs)
    dd = P_inv * (sys.w - sys.E.T @ dxi)
    return dxi.reshape(nf, 6), dd


def gauss_newton_iterate(
    graph: FactorGraph,
    intrinsics: CameraIntrinsics,
    tracker: Optional[TrackerParams] = None,
    max_iters: Optional[int] = None,
) -> GaussNewtonResult:
    """Levenberg-damped Gauss-Newton; only cost-decreasing steps are accepted"""
    tracker = tracker or TrackerParams()
    max_iters = max_iters or tracker.max_iters
    if max_iters < 1:
        raise InvalidInputError("max_iters must be >= 1")
    depth = tracker.depth
    damping = max(tracker.damping, MIN_DAMPING)
    cost = total_cost(graph, intrinsics, depth)
    trace = [cost]
    converged = diverged = False
    iterations = 0

    while iterations < max_iters:
        if cost < ABSOLUTE_TOLERANCE:
            converged = True
            break
        iterations += 1
        try:
            dxi, dd = schur_solve(build_normal_equations(graph, intrinsics, depth, damping))
        except SingularSystemError:
            dxi = dd = None
        if dxi is not None and max(np.abs(dxi).max(initial=0.0), np.abs(dd).max(initial=0.0)) < STEP_TOLERANCE:
            converged = True
            break
        if dxi is None:
            new_cost = np.inf
        else:
            candidate = graph.retracted(dxi, dd)
            new_cost = total_cost(candidate, intrinsics, depth)

        if np.isfinite(new_cost) and new_cost < cost:
            relative = (cost - new_cost) / max(cost, ABSOLUTE_TOLERANCE)
            graph, cost = candidate, new_cost
            trace.append(cost)
            damping = max(damping / 10.0, MIN_DAMPING)
            if relative < RELATIVE_TOLERANCE:
                converged = True
                break
        else:
            damping *= 10.0
            if damping > MAX_DAMPING:
                diverged = True
                break

    _, dropped = reprojection_residuals(graph, intrinsics)
    return GaussNewtonResult(graph, trace, converged, diverged, iterations, dropped)


def select_keyframe(
    correspondences: Correspondences,
    n_tracked: int,
    flow_px: float = 16.0,
    inlier_fraction: float = 0.6,
) -> bool:
    """New keyframe when the view moved far enough or too few points still track"""
    if n_tracked <= 0:
        return True
    if len(correspondences) / n_tracked < inlier_fraction:
        return True
    return correspondences.mean_flow() > flow_px


def edge_seed(seed: int, i: int, j: int) -> int:
    return int(np.random.default_rng([seed, i, j]).integers(2**31 - 1))


@dataclass
class FrameData:
    """Inputs the tracker sees for one frame"""
    rgb: np.ndarray
    prior_depth: np.ndarray
    gt_pose: Pose
    gt_depth: np.ndarray


@dataclass
class TrackingResult:
    poses: List[Pose]
    keyframe_ids: List[int]
    cost_trace: List[Dict[str, float]]
    n_dropped: int
    diverged_frames: List[int]
    depth_scales: List[float] = field(default_factory=list)


def constant_velocity(poses: Sequence[Pose]) -> Pose:
    if len(poses) < 2:
        return poses[-1]
    motion = poses[-2].inverse() @ poses[-1]
    return poses[-1] @ motion


class SequenceTracker:
    """Tracks frames one by one against a sliding window of keyframes

    Correspondences come from ground-truth geometry plus pixel noise; every
    estimate is seeded from the depth prior and the previous motion.
    """

    def __init__(self, intrinsics: CameraIntrinsics, tracker: TrackerParams, seed: int = 0):
        self.intrinsics = intrinsics
        self.tracker = tracker
        self.seed = seed
        self.frames: List[FrameData] = []
        self.poses: List[Pose] = []
        self.keyframe_ids: List[int] = []
        self.pixels: Dict[int, np.ndarray] = {}
        self.inv_depth: Dict[int, np.ndarray] = {}
        self.prior_z: Dict[int, np.ndarray] = {}
        self.cost_trace: List[Dict[str, float]] = []
        self.n_dropped = 0
        self.diverged_frames: List[int] = []

    def _host(self, k: int) -> None:
        frame = self.frames[k]
        pixels = sample_pixels(
            self.intrinsics, frame.gt_depth, self.tracker.pixels_per_frame, seed=edge_seed(self.seed, k, k)
        )
        iu, iv = pixels[:, 0].astype(int), pixels[:, 1].astype(int)
        z = frame.prior_depth[iv, iu] * ray_directions(self.intrinsics, pixels)[:, 2]
        self.pixels[k] = pixels
        self.prior_z[k] = z
        self.inv_depth[k] = 1.0 / np.where(np.isfinite(z) & (z > 0), z, 1.0)

    def _correspondences(self, i: int, j: int) -> Correspondences:
        return gen_correspondences(
            self.frames[i].gt_pose, self.frames[j].gt_pose, self.frames[i].gt_depth, self.intrinsics,
            self.tracker.pixel_noise_sigma, edge_seed(self.seed, i, j), pixels=self.pixels[i],
        )

    def _window_graph(self, window: List[int]) -> Tuple[FactorGraph, Dict[int, slice]]:
        offsets: Dict[int, slice] = {}
        frames, pixels, inv, prior = [], [], [], []
        start = 0
        for local, k in enumerate(window):
            n = len(self.pixels[k])
            offsets[k] = slice(start, start + n)
            frames.append(np.full(n, local))
            pixels.append(self.pixels[k])
            inv.append(self.inv_depth[k])
            prior.append(self.prior_z[k])
            start += n
        edges = []
        for a, i in enumerate(window):
            for b, j in enumerate(window):
                if i == j:
                    continue
                corr = self._correspondences(i, j)
                if len(corr) == 0:
                    continue
                edges.append(Edge(a, b, offsets[i].start + corr.index, corr.pixel_j, corr.confidence))
        graph = FactorGraph(
            poses=[self.poses[k] for k in window],
            point_frame=np.concatenate(frames),
            point_pixel=np.concatenate(pixels),
            inv_depth=np.concatenate(inv),
            depth_prior=np.concatenate(prior),
            edges=edges,
        )
        return graph, offsets

    def add_frame(self, frame: FrameData) -> Pose:
        k = len(self.frames)
        self.frames.append(frame)
        self._host(k)
        if k == 0:
            # the first frame defines the world frame
            self.poses.append(frame.gt_pose)
            self.keyframe_ids.append(0)
            return frame.gt_pose

        self.poses.append(constant_velocity(self.poses))
        window = self.keyframe_ids[-self.tracker.window:] + [k]
        graph, offsets = self._window_graph(window)
        if graph.edges:
            result = gauss_newton_iterate(graph, self.intrinsics, self.tracker)
            self.n_dropped += result.n_dropped
            if result.diverged:
                self.diverged_frames.append(k)
            for local, idx in enumerate(window):
                if local > 0:
                    self.poses[idx] = result.graph.poses[local]
                self.inv_depth[idx] = result.graph.inv_depth[offsets[idx]]
            for it, cost in enumerate(result.cost_trace):
                self.cost_trace.append({"frame": k, "iteration": it, "cost": cost})

        last = self.keyframe_ids[-1]
        if select_keyframe(
            self._correspondences(last, k),
            len(self.pixels[last]),
            self.tracker.keyframe_flow_px,
            self.tracker.keyframe_inlier_fraction,
        ):
            self.keyframe_ids.append(k)
        return self.poses[k]

    def depth_scale(self, k: int) -> float:
        """Median ratio of refined to prior depth over the pixels frame k hosts"""
        prior = self.prior_z[k]
        ok = np.isfinite(prior) & (prior > 0)
        if not ok.any():
            return 1.0
        return float(np.median(1.0 / self.inv_depth[k][ok] / prior[ok]))

    def result(self) -> TrackingResult:
        return TrackingResult(
            poses=list(self.poses),
            keyframe_ids=list(self.keyframe_ids),
            cost_trace=list(self.cost_trace),
            n_dropped=self.n_dropped,
            diverged_frames=list(self.diverged_frames),
            depth_scales=[self.depth_scale(k) for k in self.keyframe_ids],
        )


def track_sequence(
    frames: Sequence[FrameData],
    intrinsics: CameraIntrinsics,
    tracker: Optional[TrackerParams] = None,
    seed: int = 0,
) -> TrackingResult:
    if not frames:
        raise InvalidInputError("nothing to track")
    seq = SequenceTracker(intrinsics, tracker or TrackerParams(), seed)
    for frame in frames:
        seq.add_frame(frame)
    return seq.result()
