"""
Loop closure
Candidate detection from keyframe covisibility, robust Sim3 estimation between
the current keyframe and a candidate's local window, geometric plus temporal
verification, and Sim3 pose-graph optimisation over the keyframes.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from app.errors import InvalidInputError, SingularSystemError
from app.geometry import Pose, Sim3, umeyama_alignment
from app.models import CameraIntrinsics, LoopClosureParams
from app.scene_sim import project

ROBUST_ROUNDS = 3
HUBER_K = 1.345
MAD_SCALE = 1.4826
SURVIVOR_CUTOFF = 3.0
MIN_SURVIVORS = 6
HYPOTHESES = 50
COLLINEAR_TOLERANCE = 1e-9
JACOBIAN_STEP = 1e-6


@dataclass
class PoseEdge:
    i: int
    j: int
    measurement: Sim3
    information: float = 1.0
    kind: Literal["odometry", "loop"] = "odometry"

    def __post_init__(self):
        if not np.all(np.isfinite(self.measurement.matrix())):
            raise InvalidInputError(f"edge ({self.i}, {self.j}) has a non-finite measurement")


@dataclass
class PoseGraph:
    """Keyframe poses (camera-to-world Sim3) joined by relative-Sim3 edges"""
    nodes: List[Sim3]
    edges: List[PoseEdge] = field(default_factory=list)

    @classmethod
    def from_odometry(cls, poses: Sequence[Pose]) -> "PoseGraph":
        nodes = [Sim3.from_pose(p) for p in poses]
        edges = [
            PoseEdge(k, k + 1, nodes[k].inverse() @ nodes[k + 1])
            for k in range(len(nodes) - 1)
        ]
        return cls(nodes, edges)

    @property
    def loop_edges(self) -> List[PoseEdge]:
        return [e for e in self.edges if e.kind == "loop"]

    def add_loop(self, i: int, j: int, measurement: Sim3, information: float) -> None:
        self.edges.append(PoseEdge(i, j, measurement, information, "loop"))

    def is_connected(self) -> bool:
        n = len(self.nodes)
        parent = list(range(n))

        def find(a: int) -> int:
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for e in self.edges:
            if e.kind == "odometry":
                parent[find(e.i)] = find(e.j)
        return len({find(k) for k in range(n)}) <= 1


@dataclass
class PoseGraphResult:
    nodes: List[Sim3]
    residual: float
    cost_trace: List[float]
    converged: bool


@dataclass
class Sim3Estimate:
    transform: Sim3
    rms: float
    survivors: np.ndarray


@dataclass
class LoopEvent:
    current_kf: int
    candidate_kf: int
    scale: float
    inlier_fraction: float
    accepted: bool


def covisibility_matrix(visibility: np.ndarray, noise: float = 0.0, seed: int = 0) -> np.ndarray:
    """Fraction of co-observed landmarks (intersection over union) per keyframe pair"""
    vis = np.asarray(visibility, dtype=np.float64)
    shared = vis @ vis.T
    counts = vis.sum(axis=1)
    union = counts[:, None] + counts[None, :] - shared
    scores = np.divide(shared, union, out=np.zeros_like(shared), where=union > 0)
    if noise > 0:
        rng = np.random.default_rng(seed)
        jitter = rng.normal(0.0, noise, size=scores.shape)
        scores = np.clip(scores + 0.5 * (jitter + jitter.T), 0.0, 1.0)
    np.fill_diagonal(scores, 1.0)
    return scores


def detect_candidates(
    scores: np.ndarray,
    current: int,
    exclusion_window: int = 10,
    max_candidates: int = 3,
    min_score: float = 0.05,
) -> List[int]:
    """Best-scoring earlier keyframes at least `exclusion_window` keyframes back"""
    scores = np.asarray(scores, dtype=np.float64)
    eligible = [k for k in range(min(current, len(scores))) if current - k >= exclusion_window]
    ranked = sorted(
        (k for k in eligible if scores[k] > min_score),
        key=lambda k: (-scores[k], k),
    )
    return ranked[:max_candidates]


def local_window(candidate: int, covisibility: np.ndarray, size: int = 5, exclude: Sequence[int] = ()) -> List[int]:
    """The candidate plus its most covisible keyframes, `size` in total"""
    row = covisibility[candidate]
    others = [k for k in np.argsort(-row, kind="stable") if k != candidate and k not in exclude and row[k] > 0]
    return [candidate] + [int(k) for k in others[:size - 1]]


def _check_configuration(source: np.ndarray) -> None:
    if len(source) < 3:
        raise InvalidInputError("Sim3 estimation needs at least 3 point pairs")
    singular = np.linalg.svd(source - source.mean(axis=0), compute_uv=False)
    if singular[0] <= 0 or singular[1] < COLLINEAR_TOLERANCE * singular[0]:
        raise InvalidInputError("Sim3 estimation needs non-collinear points")


def _residuals(transform: Sim3, source: np.ndarray, target: np.ndarray) -> np.ndarray:
    return np.linalg.norm(transform.apply(source) - target, axis=1)


def estimate_sim3(source: np.ndarray, target: np.ndarray, seed: int = 0) -> Sim3Estimate:
    """Similarity with target ~ s R source + t, robust to gross outliers

    A least-median hypothesis from seeded minimal samples starts three rounds of
    Huber reweighting; pairs beyond 3 robust sigmas are dropped.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape:
        raise InvalidInputError("point sets must have equal shape")
    _check_configuration(source)

    n = len(source)
    best = umeyama_alignment(source, target)
    best_median = float(np.median(_residuals(best, source, target)))
    if n > 3:
        rng = np.random.default_rng(seed)
        for _ in range(HYPOTHESES):
            pick = rng.choice(n, size=3, replace=False)
            try:
                _check_configuration(source[pick])
                hypothesis = umeyama_alignment(source[pick], target[pick])
            except InvalidInputError:
                continue
            median = float(np.median(_residuals(hypothesis, source, target)))
            if median < best_median:
                best, best_median = hypothesis, median

    spread = np.sqrt(np.mean(np.sum((target - target.mean(axis=0)) ** 2, axis=1)))
    floor = 1e-9 * max(spread, 1e-12)
    transform = best
    survivors = np.ones(n, dtype=bool)
    for _ in range(ROBUST_ROUNDS):
        r = _residuals(transform, source, target)
        sigma = max(MAD_SCALE * float(np.median(r)), floor)
        survivors = r < SURVIVOR_CUTOFF * sigma
        if survivors.sum() < 3:
            break
        weights = np.where(survivors, np.minimum(1.0, HUBER_K * sigma / np.maximum(r, floor)), 0.0)
        try:
            transform = umeyama_alignment(source, target, weights=weights)
        except InvalidInputError:
            break

    r = _residuals(transform, source, target)
    sigma = max(MAD_SCALE * float(np.median(r)), floor)
    survivors = r < SURVIVOR_CUTOFF * sigma
    rms = float(np.sqrt(np.mean(r[survivors] ** 2))) if survivors.any() else float("inf")
    return Sim3Estimate(transform, rms, survivors)


@dataclass
class LoopMatches:
    """Landmarks seen by the current keyframe and by the candidate window

    current_points live in the current keyframe's estimated world frame,
    candidate_points in the window's; observer indexes observer_poses and
    pixels are where the observer saw each landmark.
    """
    current_points: np.ndarray
    candidate_points: np.ndarray
    pixels: np.ndarray
    observer: np.ndarray
    observer_poses: List[Pose]

    def __len__(self) -> int:
        return len(self.current_points)


class ConsistencyTracker:
    """Per-candidate streaks of geometric passes over consecutive current keyframes

    A candidate continues a streak when it, or a keyframe adjacent to it,
    passed at the previous current keyframe.
    """

    def __init__(self, required: int = 2):
        self.required = required
        self.last_current: Optional[int] = None
        self.previous: Dict[int, int] = {}
        self.current: Dict[int, int] = {}

    def observe(self, current: int, candidate: int, passed: bool) -> bool:
        if current != self.last_current:
            if self.last_current is not None:
                self.previous = self.current
            self.current = {}
            self.last_current = current
        if not passed:
            return False
        streak = 1 + max((self.previous.get(c, 0) for c in (candidate - 1, candidate, candidate + 1)), default=0)
        self.current[candidate] = max(self.current.get(candidate, 0), streak)
        return streak >= self.required


def reprojection_inlier_fraction(
    estimate: Sim3Estimate,
    matches: LoopMatches,
    intrinsics: CameraIntrinsics,
    inlier_px: float = 3.0,
) -> float:
    """Share of surviving matches that reproject within inlier_px in their observer"""
    keep = np.flatnonzero(estimate.survivors)
    if len(keep) == 0:
        return 0.0
    moved = estimate.transform.apply(matches.current_points[keep])
    inliers = 0
    for k, point in zip(keep, moved):
        cam = matches.observer_poses[matches.observer[k]].inverse().apply(point[None])[0]
        if cam[2] <= 1e-9:
            continue
        if np.linalg.norm(project(intrinsics, cam[None])[0] - matches.pixels[k]) < inlier_px:
            inliers += 1
    return inliers / len(keep)


def verify_candidate(
    candidate: int,
    current: int,
    estimate: Sim3Estimate,
    matches: LoopMatches,
    intrinsics: CameraIntrinsics,
    consistency: ConsistencyTracker,
    params: Optional[LoopClosureParams] = None,
) -> Tuple[bool, float]:
    """Geometric check over the window, then the temporal streak check"""
    params = params or LoopClosureParams()
    if estimate.survivors.sum() < MIN_SURVIVORS:
        consistency.observe(current, candidate, False)
        return False, 0.0
    fraction = reprojection_inlier_fraction(estimate, matches, intrinsics, params.inlier_px)
    passed = fraction > params.inlier_fraction
    return consistency.observe(current, candidate, passed), fraction


def _edge_residual(nodes: Sequence[Sim3], edge: PoseEdge) -> np.ndarray:
    error = edge.measurement.inverse() @ nodes[edge.i].inverse() @ nodes[edge.j]
    return np.sqrt(edge.information) * error.to_vector()


def graph_cost(nodes: Sequence[Sim3], edges: Sequence[PoseEdge]) -> float:
    return float(sum(np.sum(_edge_residual(nodes, e) ** 2) for e in edges))


def _edge_jacobians(nodes: List[Sim3], edge: PoseEdge) -> Tuple[np.ndarray, np.ndarray]:
    """Central differences w.r.t. right increments X <- X Exp(delta) of both ends"""
    blocks = []
    for node in (edge.i, edge.j):
        J = np.zeros((7, 7))
        for k in range(7):
            delta = np.zeros(7)
            delta[k] = JACOBIAN_STEP
            plus, minus = list(nodes), list(nodes)
            plus[node] = nodes[node] @ Sim3.from_vector(delta)
            minus[node] = nodes[node] @ Sim3.from_vector(-delta)
            J[:, k] = (_edge_residual(plus, edge) - _edge_residual(minus, edge)) / (2 * JACOBIAN_STEP)
        blocks.append(J)
    return blocks[0], blocks[1]


def pose_graph_optimize(
    graph: PoseGraph,
    max_iters: int = 50,
    damping: float = 1e-6,
) -> PoseGraphResult:
    """Levenberg-damped Gauss-Newton on the Sim3 edge residuals, node 0 fixed"""
    if not graph.nodes:
        raise InvalidInputError("empty pose graph")
    if not graph.is_connected():
        raise InvalidInputError("pose graph is not connected over odometry edges")
    nodes = list(graph.nodes)
    n = len(nodes)
    cost = graph_cost(nodes, graph.edges)
    trace = [cost]
    converged = False
    if n == 1 or cost < 1e-20:
        return PoseGraphResult(nodes, cost, trace, True)

    for _ in range(max_iters):
        H = np.zeros((7 * n, 7 * n))
        b = np.zeros(7 * n)
        for e in graph.edges:
            r = _edge_residual(nodes, e)
            Ji, Jj = _edge_jacobians(nodes, e)
            si, sj = slice(7 * e.i, 7 * e.i + 7), slice(7 * e.j, 7 * e.j + 7)
            H[si, si] += Ji.T @ Ji
            H[sj, sj] += Jj.T @ Jj
            H[si, sj] += Ji.T @ Jj
            H[sj, si] += Jj.T @ Ji
            b[si] -= Ji.T @ r
            b[sj] -= Jj.T @ r

        free = slice(7, 7 * n)
        accepted = False
        while damping < 1e10:
            A = H[free, free] + damping * np.eye(7 * (n - 1))
            try:
                step = np.linalg.solve(A, b[free])
            except np.linalg.LinAlgError as exc:
                raise SingularSystemError("pose-graph system is singular", float("inf")) from exc
            candidate = [nodes[0]] + [
                nodes[k] @ Sim3.from_vector(step[7 * (k - 1):7 * k]) for k in range(1, n)
            ]
            new_cost = graph_cost(candidate, graph.edges)
            if new_cost < cost:
                accepted = True
                break
            damping *= 10.0
        if not accepted:
            converged = True
            break
        relative = (cost - new_cost) / max(cost, 1e-20)
        nodes, cost = candidate, new_cost
        trace.append(cost)
        damping = max(damping / 10.0, 1e-12)
        if relative < 1e-10 or cost < 1e-20:
            converged = True
            break
    return PoseGraphResult(nodes, cost, trace, converged)
