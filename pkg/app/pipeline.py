"""
End-to-end pipeline
simulate -> track -> loop -> map -> evaluate, each stage reading its inputs from
and writing its outputs to the run directory. Loop closure runs before the map
optimisation so the field is fitted to corrected keyframe poses.
"""
import bisect
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from jinja2 import Environment, FileSystemLoader, select_autoescape

from app.config import settings
from app.errors import InvalidInputError, SlamError, StageError
from app.field_renderer import FieldParams
from app.geometry import Pose, Sim3
from app.loop_closure import (
    ConsistencyTracker,
    LoopEvent,
    LoopMatches,
    PoseGraph,
    covisibility_matrix,
    detect_candidates,
    estimate_sim3,
    local_window,
    pose_graph_optimize,
    verify_candidate,
)
from app.mapper import optimize_map, render_image
from app.mesh_export import export_mesh
from app.metrics import align_trajectory, depth_l1, positions, psnr, ssim, surface_percentiles
from app.models import CameraIntrinsics, MetricsReport, RunConfig, SceneSpec
from app.scene_sim import (
    AnalyticScene,
    corrupt_depth,
    gen_trajectory,
    landmark_visibility,
    project,
    render_ground_truth,
    sample_landmarks,
    scene_sdf,
    single_sphere_scene,
    two_primitive_room,
    unproject,
)
from app.storage import ArtifactStorage, echo, quantize_depth, quantize_rgb
from app.tracking_ba import FrameData, Keyframe, track_sequence

STAGES = ("simulate", "track", "loop", "map", "evaluate")
TEMPLATE_DIR = Path(__file__).parent / "templates"
SVG_SIZE = 480

GROUND_TRUTH = "groundtruth.txt"
TRACKED = "tracking/trajectory.txt"
KEYFRAMES = "tracking/keyframes.csv"
TRACKING_COST = "tracking/cost.csv"
LOOP_EVENTS = "loop/events.csv"
TRAJECTORY = "trajectory.txt"
CHECKPOINT = "mapping/field.modf"
MAPPING_LOSS = "mapping/loss.csv"
MESH = "mesh.ply"
SVG = "trajectory.svg"
TIMINGS = "timings.json"


def frame_key(kind: str, index: int) -> str:
    suffix = "png" if kind == "rgb" else "pfm"
    return f"frames/{kind}_{index:04d}.{suffix}"


def build_scene(spec: SceneSpec) -> AnalyticScene:
    if spec.kind == "single_sphere":
        return single_sphere_scene(scale=spec.scale)
    return two_primitive_room(scale=spec.scale)


def held_out_frames(n_frames: int, every: int) -> List[int]:
    """Every `every`-th frame (1-based) is kept out of mapping for evaluation"""
    if every <= 0:
        return []
    return [k for k in range(n_frames) if k % every == every - 1]


@dataclass
class SimulatedSequence:
    scene: AnalyticScene
    gt_poses: List[Pose]
    rgb: List[np.ndarray]
    gt_depth: List[np.ndarray]
    prior_depth: List[np.ndarray]

    @property
    def n_frames(self) -> int:
        return len(self.gt_poses)


def simulate(config: RunConfig) -> SimulatedSequence:
    """Ground-truth renders and corrupted priors, quantised as they are stored"""
    scene = build_scene(config.scene)
    traj = config.trajectory
    poses = gen_trajectory(traj.kind, traj.n_frames, traj.center, traj.radius, traj.height, traj.step)
    prior_spec = config.effective_depth_prior()
    rgb, depth, prior = [], [], []
    for k, pose in enumerate(poses):
        image, rng_map = render_ground_truth(scene, pose, config.camera)
        rgb.append(quantize_rgb(image))
        depth.append(quantize_depth(rng_map))
        prior.append(quantize_depth(corrupt_depth(rng_map, prior_spec, frame_index=k)))
    return SimulatedSequence(scene, poses, rgb, depth, prior)


def load_sequence(storage: ArtifactStorage, config: RunConfig) -> SimulatedSequence:
    _, poses = storage.read_trajectory(GROUND_TRUTH)
    n = len(poses)
    return SimulatedSequence(
        scene=build_scene(config.scene),
        gt_poses=poses,
        rgb=[storage.read_rgb(frame_key("rgb", k)) for k in range(n)],
        gt_depth=[storage.read_depth(frame_key("depth", k)) for k in range(n)],
        prior_depth=[storage.read_depth(frame_key("prior", k)) for k in range(n)],
    )


@dataclass
class LoopOutcome:
    poses: List[Pose]
    events: List[LoopEvent]
    n_closures: int
    residual: float


def loop_matches(
    current: int,
    window: Sequence[int],
    landmarks: np.ndarray,
    visibility: np.ndarray,
    gt_poses: Sequence[Pose],
    est_poses: Sequence[Pose],
    depths: Sequence[np.ndarray],
    intrinsics: CameraIntrinsics,
) -> LoopMatches:
    """Landmarks shared by the current keyframe and the window, lifted with the tracked depth

    `depths` are the priors rescaled to the tracker's refined depths, so lifted
    points live at the scale of the estimated trajectory.
    """

    def observe(kf: int, ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pixels = project(intrinsics, gt_poses[kf].inverse().apply(landmarks[ids]))
        iu = np.clip(np.rint(pixels[:, 0]).astype(int), 0, intrinsics.width - 1)
        iv = np.clip(np.rint(pixels[:, 1]).astype(int), 0, intrinsics.height - 1)
        points = est_poses[kf].apply(unproject(intrinsics, pixels, depths[kf][iv, iu]))
        return pixels, points

    taken = np.zeros(len(landmarks), dtype=bool)
    cur, cand, pix, obs = [], [], [], []
    for slot, kf in enumerate(window):
        ids = np.flatnonzero(visibility[kf] & visibility[current] & ~taken)
        if len(ids) == 0:
            continue
        taken[ids] = True
        _, current_points = observe(current, ids)
        pixels, window_points = observe(kf, ids)
        keep = np.all(np.isfinite(current_points), axis=1) & np.all(np.isfinite(window_points), axis=1)
        cur.append(current_points[keep])
        cand.append(window_points[keep])
        pix.append(pixels[keep])
        obs.append(np.full(int(keep.sum()), slot))
    if not cur:
        empty = np.zeros((0, 3))
        return LoopMatches(empty, empty, np.zeros((0, 2)), np.zeros(0, dtype=int), [])
    return LoopMatches(
        current_points=np.concatenate(cur),
        candidate_points=np.concatenate(cand),
        pixels=np.concatenate(pix),
        observer=np.concatenate(obs),
        observer_poses=[est_poses[kf] for kf in window],
    )


def close_loops(
    config: RunConfig,
    seq: SimulatedSequence,
    est_poses: Sequence[Pose],
    keyframe_ids: Sequence[int],
    depth_scales: Optional[Sequence[float]] = None,
) -> LoopOutcome:
    """Detect, verify and fuse loops over the keyframes, then correct every frame

    Partners are searched at least min(exclusion_window, half the keyframes)
    keyframes back, so a single lap still has a revisit window.
    """
    params = config.loop_closure
    intr = config.camera
    ids = list(keyframe_ids)
    kf_gt = [seq.gt_poses[k] for k in ids]
    kf_est = [est_poses[k] for k in ids]
    scales = list(depth_scales) if depth_scales is not None else [1.0] * len(ids)
    kf_depth = [seq.prior_depth[k] * s for k, s in zip(ids, scales)]
    exclusion = min(params.exclusion_window, max(2, len(ids) // 2))

    landmarks = sample_landmarks(seq.scene, params.n_landmarks, seed=config.seed)
    visibility = landmark_visibility(landmarks, kf_gt, [seq.gt_depth[k] for k in ids], intr)
    covisibility = covisibility_matrix(visibility, params.covisibility_noise, config.seed)

    graph = PoseGraph.from_odometry(kf_est)
    consistency = ConsistencyTracker(params.consecutive)
    events: List[LoopEvent] = []
    closed = set()
    for c in range(len(ids)):
        candidates = detect_candidates(
            covisibility[c], c, exclusion, params.max_candidates, params.min_score,
        )
        recent = [k for k in range(len(ids)) if abs(c - k) < exclusion]
        for cand in candidates:
            window = local_window(cand, covisibility, params.window_size, exclude=recent)
            matches = loop_matches(c, window, landmarks, visibility, kf_gt, kf_est, kf_depth, intr)
            try:
                estimate = estimate_sim3(matches.current_points, matches.candidate_points, seed=config.seed)
            except InvalidInputError:
                consistency.observe(c, cand, False)
                events.append(LoopEvent(ids[c], ids[cand], float("nan"), 0.0, False))
                continue
            accepted, fraction = verify_candidate(cand, c, estimate, matches, intr, consistency, params)
            events.append(LoopEvent(ids[c], ids[cand], estimate.transform.scale, fraction, accepted))
            if accepted and (cand, c) not in closed:
                closed.add((cand, c))
                corrected = estimate.transform @ graph.nodes[c]
                graph.add_loop(cand, c, graph.nodes[cand].inverse() @ corrected, params.loop_information)

    if not graph.loop_edges:
        return LoopOutcome(list(est_poses), events, 0, 0.0)

    result = pose_graph_optimize(graph, params.max_iters)
    if not result.converged:
        echo(f"⚠️  Pose graph did not converge in {params.max_iters} iterations")
    corrected_poses = []
    for f, pose in enumerate(est_poses):
        j = max(bisect.bisect_right(ids, f) - 1, 0)
        correction = result.nodes[j] @ graph.nodes[j].inverse()
        corrected_poses.append((correction @ Sim3.from_pose(pose)).to_pose())
    return LoopOutcome(corrected_poses, events, len(graph.loop_edges), result.residual)


def mapping_keyframes(config: RunConfig, seq: SimulatedSequence, poses: Sequence[Pose], keyframe_ids: Sequence[int]) -> List[Keyframe]:
    held_out = set(held_out_frames(seq.n_frames, config.held_out_every))
    keyframes = [
        Keyframe(k, poses[k], seq.rgb[k], seq.prior_depth[k], config.camera, seq.gt_depth[k])
        for k in keyframe_ids if k not in held_out
    ]
    if not keyframes:
        raise InvalidInputError("every keyframe is held out; nothing to map")
    return keyframes


def render_svg(gt: np.ndarray, est: np.ndarray, keyframe_ids: Sequence[int], loops: Sequence[Tuple[int, int]], ate: float) -> str:
    """Top-down (x, y) overlay of ground truth and the aligned estimate"""
    both = np.concatenate([gt[:, :2], est[:, :2]])
    lo, hi = both.min(axis=0), both.max(axis=0)
    span = max(float((hi - lo).max()), 1e-9)
    margin = 40.0
    scale = (SVG_SIZE - 2 * margin) / span

    def to_px(p: np.ndarray) -> Tuple[float, float]:
        return (round(margin + (p[0] - lo[0]) * scale, 2), round(SVG_SIZE - margin - (p[1] - lo[1]) * scale, 2))

    def polyline(points: np.ndarray) -> str:
        return " ".join("%s,%s" % to_px(p) for p in points)

    env = Environment(loader=FileSystemLoader(TEMPLATE_DIR), autoescape=select_autoescape(["svg.j2"]))
    template = env.get_template("trajectory.svg.j2")
    return template.render(
        title="trajectory overlay",
        size=SVG_SIZE,
        ground_truth=polyline(gt),
        estimate=polyline(est),
        keyframes=[dict(zip(("x", "y"), to_px(est[k]))) for k in keyframe_ids],
        loops=[dict(zip(("x1", "y1", "x2", "y2"), to_px(est[a]) + to_px(est[b]))) for a, b in loops],
        ate=ate,
    )


def evaluate_run(run_dir) -> MetricsReport:
    """Recompute the report purely from the files of a run directory"""
    storage = run_dir if isinstance(run_dir, ArtifactStorage) else ArtifactStorage(run_dir)
    config = storage.read_config()
    seq = load_sequence(storage, config)
    stamps, est = storage.read_trajectory(TRAJECTORY)
    gt_stamps, gt = storage.read_trajectory(GROUND_TRUTH)
    keyframe_ids = [int(row["frame"]) for row in storage.read_csv(KEYFRAMES)]
    events = storage.read_csv(LOOP_EVENTS) if storage.exists(LOOP_EVENTS) else []
    loops = sorted({
        (int(e["candidate_kf"]), int(e["current_kf"])) for e in events if e["accepted"] == "True"
    })

    monocular = config.mode == "monocular"
    alignment = align_trajectory(est, gt, align_scale=monocular, est_stamps=stamps, gt_stamps=gt_stamps)
    params = storage.read_checkpoint(CHECKPOINT)

    views = held_out_frames(seq.n_frames, config.held_out_every) or keyframe_ids
    psnrs, ssims, depth_errors = [], [], []
    with torch.no_grad():
        for k in views:
            rgb_hat, depth_hat = render_image(params, est[k], config.camera, config.sampling, config.mapping, seed=config.seed)
            psnrs.append(psnr(rgb_hat, seq.rgb[k]))
            ssims.append(ssim(rgb_hat, seq.rgb[k]))
            if np.isfinite(seq.gt_depth[k]).any():
                depth_errors.append(depth_l1(alignment.transform.scale * depth_hat, seq.gt_depth[k]))

    mesh = export_mesh(params)
    storage.write_mesh(MESH, mesh)
    distances = scene_sdf(seq.scene, alignment.transform.apply(mesh.vertices)) if not mesh.is_empty else np.zeros(0)
    p50, p90 = surface_percentiles(distances)

    storage.write_text(SVG, render_svg(positions(gt), alignment.aligned, keyframe_ids, loops, alignment.rmse))

    report = MetricsReport(
        mode=config.mode,
        alignment="sim3" if monocular else "rigid",
        n_frames=seq.n_frames,
        n_keyframes=len(keyframe_ids),
        n_loop_closures=len(loops),
        ate_rmse=alignment.rmse,
        depth_l1=float(np.mean(depth_errors)) if depth_errors else 0.0,
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        surface_p50=p50,
        surface_p90=p90,
        per_frame_error=[float(e) for e in alignment.errors],
    )
    storage.write_report(report)
    return report


class SlamPipeline:
    """Stage runner over one run directory"""

    def __init__(self, config: RunConfig, storage: Optional[ArtifactStorage] = None):
        self.config = config
        self.storage = storage or ArtifactStorage(config.output_dir or settings.OUTPUT_DIR)
        self.timings: Dict[str, float] = {}

    def stage_simulate(self) -> None:
        seq = simulate(self.config)
        self.storage.write_config(self.config)
        self.storage.write_trajectory(GROUND_TRUTH, seq.gt_poses)
        for k in range(seq.n_frames):
            self.storage.write_rgb(frame_key("rgb", k), seq.rgb[k])
            self.storage.write_depth(frame_key("depth", k), seq.gt_depth[k])
            self.storage.write_depth(frame_key("prior", k), seq.prior_depth[k])
        echo(f"  🎬 Rendered {seq.n_frames} frames of a {self.config.scene.kind} scene")

    def stage_track(self) -> None:
        seq = load_sequence(self.storage, self.config)
        frames = [FrameData(seq.rgb[k], seq.prior_depth[k], seq.gt_poses[k], seq.gt_depth[k]) for k in range(seq.n_frames)]
        result = track_sequence(frames, self.config.camera, self.config.tracker, seed=self.config.seed)
        self.storage.write_trajectory(TRACKED, result.poses)
        rows = [{"frame": k, "depth_scale": s} for k, s in zip(result.keyframe_ids, result.depth_scales)]
        self.storage.write_csv(KEYFRAMES, rows, ["frame", "depth_scale"])
        self.storage.write_csv(TRACKING_COST, result.cost_trace, ["frame", "iteration", "cost"])
        if result.diverged_frames:
            echo(f"  ⚠️  Tracking hit the damping ceiling on frames {result.diverged_frames}")
        if result.n_dropped:
            echo(f"  ⚠️  {result.n_dropped} correspondences dropped behind the camera")
        echo(f"  📍 Tracked {len(result.poses)} frames, {len(result.keyframe_ids)} keyframes")

    def stage_loop(self) -> None:
        _, tracked = self.storage.read_trajectory(TRACKED)
        rows = self.storage.read_csv(KEYFRAMES)
        keyframe_ids = [int(row["frame"]) for row in rows]
        depth_scales = [float(row.get("depth_scale") or 1.0) for row in rows]
        fields = ["current_kf", "candidate_kf", "scale", "inlier_fraction", "accepted"]
        if not self.config.loop_closure.enabled:
            self.storage.write_trajectory(TRAJECTORY, tracked)
            self.storage.write_csv(LOOP_EVENTS, [], fields)
            echo("  ⏸️  Loop closure disabled")
            return
        seq = load_sequence(self.storage, self.config)
        outcome = close_loops(self.config, seq, tracked, keyframe_ids, depth_scales)
        self.storage.write_trajectory(TRAJECTORY, outcome.poses)
        self.storage.write_csv(LOOP_EVENTS, [e.__dict__ for e in outcome.events], fields)
        echo(f"  🔁 {len(outcome.events)} candidates checked, {outcome.n_closures} loops closed")

    def stage_map(self) -> None:
        seq = load_sequence(self.storage, self.config)
        _, poses = self.storage.read_trajectory(TRAJECTORY)
        keyframe_ids = [int(row["frame"]) for row in self.storage.read_csv(KEYFRAMES)]
        keyframes = mapping_keyframes(self.config, seq, poses, keyframe_ids)
        m = self.config.mapping
        params = FieldParams.create(
            m.grid_resolution, m.feature_dim, m.hidden_dim, m.n_bands, m.beta_init, m.init_radius, m.seed,
        )
        params, trace = optimize_map(
            params, keyframes, self.config.loss_weights, m.n_steps, m.learning_rate,
            self.config.sampling, m, seed=self.config.seed, progress=not settings.QUIET,
        )
        self.storage.write_checkpoint(CHECKPOINT, params)
        self.storage.write_csv(MAPPING_LOSS, trace)
        echo(f"  🗺️  Mapped {len(keyframes)} keyframes: loss {trace[0]['loss_total']:.4f} -> {trace[-1]['loss_total']:.4f}")

    def stage_evaluate(self) -> MetricsReport:
        report = evaluate_run(self.storage)
        echo(f"  📊 ATE {report.ate_rmse:.4f} m, PSNR {report.psnr:.2f} dB, SSIM {report.ssim:.3f}, depth L1 {report.depth_l1:.4f} m")
        return report

    def run_stage(self, stage: str):
        handlers: Dict[str, Callable] = {
            "simulate": self.stage_simulate,
            "track": self.stage_track,
            "loop": self.stage_loop,
            "map": self.stage_map,
            "evaluate": self.stage_evaluate,
        }
        if stage not in handlers:
            raise InvalidInputError(f"unknown stage: {stage}")
        echo(f"\n▶️  Stage: {stage}")
        echo("-" * 40)
        start = time.perf_counter()
        try:
            result = handlers[stage]()
        except StageError:
            self.storage.mark_stage(stage, ok=False)
            raise
        except (SlamError, ValueError, OSError) as e:
            self.storage.mark_stage(stage, ok=False)
            raise StageError(stage, e) from e
        self.timings[stage] = time.perf_counter() - start
        self.storage.mark_stage(stage)
        echo(f"✅ {stage} done in {self.timings[stage]:.1f}s")
        return result

    def run(self) -> MetricsReport:
        echo(f"\n🚀 {settings.APP_NAME} - {self.config.mode} run")
        echo("=" * 60)
        echo(f"📁 Output: {self.storage.root}")
        torch.set_num_threads(max(1, settings.THREADS))
        report = None
        for stage in STAGES:
            report = self.run_stage(stage)
        report.runtime_s = dict(self.timings)
        self.storage.write_json(TIMINGS, self.timings)

        echo("\n" + "=" * 60)
        echo("📊 RUN SUMMARY")
        echo("=" * 60)
        echo(f"Frames: {report.n_frames}  Keyframes: {report.n_keyframes}  Loops: {report.n_loop_closures}")
        echo(f"ATE RMSE: {report.ate_rmse:.6f} m ({report.alignment} alignment)")
        echo(f"PSNR: {report.psnr:.2f} dB  SSIM: {report.ssim:.4f}  Depth L1: {report.depth_l1:.4f} m")
        echo(f"💾 Report: {self.storage.root / 'report.json'}")
        return report


def run_pipeline(config: RunConfig, storage: Optional[ArtifactStorage] = None) -> MetricsReport:
    return SlamPipeline(config, storage).run()
