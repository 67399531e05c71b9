"""
Desk-scale SLAM - Example Usage
Examples of how to drive the pipeline programmatically
"""

from app.metrics import ate_rmse
from app.models import (
    CameraIntrinsics,
    LoopClosureParams,
    MappingParams,
    RunConfig,
    SamplingParams,
    TrackerParams,
    TrajectorySpec,
)
from app.pipeline import SlamPipeline, evaluate_run, simulate
from app.storage import ArtifactStorage
from app.tracking_ba import FrameData, track_sequence


def small_config(**updates) -> RunConfig:
    """A run that finishes in about a minute on a laptop"""
    config = RunConfig(
        trajectory=TrajectorySpec(kind="loop", n_frames=16),
        camera=CameraIntrinsics(fx=30.0, fy=30.0, cx=19.5, cy=14.5, width=40, height=30),
        mapping=MappingParams(grid_resolution=24, n_steps=100, patches_per_step=16),
        loop_closure=LoopClosureParams(exclusion_window=5),
    )
    return config.model_copy(update=updates)


def example_1_full_run():
    """
    Example 1: Run every stage and print the report
    This is what `python -m app.main run` does
    """
    print("\n📖 Example 1: Full Run")
    print("=" * 60)

    report = SlamPipeline(small_config(output_dir="runs/example_1")).run()
    print(f"\n✅ ATE {report.ate_rmse:.4f} m over {report.n_frames} frames")


def example_2_stage_by_stage():
    """
    Example 2: Run stages one at a time, resuming from the run directory
    Each stage only reads files written by the previous ones
    """
    print("\n📖 Example 2: Stage by Stage")
    print("=" * 60)

    config = small_config(output_dir="runs/example_2")
    pipeline = SlamPipeline(config)
    done = pipeline.storage.load_progress()["completed_stages"]
    for stage in ("simulate", "track", "loop", "map", "evaluate"):
        if stage in done:
            print(f"⏭️  {stage} already completed")
            continue
        pipeline.run_stage(stage)


def example_3_check_progress():
    """
    Example 3: Inspect the progress of an existing run
    """
    print("\n📖 Example 3: Check Progress")
    print("=" * 60)

    progress = ArtifactStorage("runs/example_2").load_progress()
    print(f"Completed: {', '.join(progress['completed_stages']) or 'none'}")
    print(f"Failed: {', '.join(progress['failed_stages']) or 'none'}")
    print(f"Last updated: {progress['last_updated']}")


def example_4_depth_term_ablation():
    """
    Example 4: Track the same sequence with and without the depth prior term
    """
    print("\n📖 Example 4: Depth Term Ablation")
    print("=" * 60)

    config = small_config()
    seq = simulate(config)
    frames = [FrameData(seq.rgb[k], seq.prior_depth[k], seq.gt_poses[k], seq.gt_depth[k]) for k in range(seq.n_frames)]
    for mode in ("robust", "l1", "l2"):
        tracker = config.tracker.model_copy(update={"depth": config.tracker.depth.model_copy(update={"mode": mode})})
        result = track_sequence(frames, config.camera, tracker, seed=config.seed)
        print(f"📊 {mode:>6}: ATE {ate_rmse(result.poses, seq.gt_poses):.4f} m")
    off = TrackerParams(depth=config.tracker.depth.model_copy(update={"enabled": False}))
    result = track_sequence(frames, config.camera, off, seed=config.seed)
    print(f"📊    off: ATE {ate_rmse(result.poses, seq.gt_poses):.4f} m")


def example_5_mapping_ablations():
    """
    Example 5: Compare held-out rendering with ray-model toggles switched off
    """
    print("\n📖 Example 5: Mapping Ablations")
    print("=" * 60)

    base = small_config()
    variants = {
        "full": {},
        "no contraction": {"mapping": base.mapping.model_copy(update={"use_contraction": False})},
        "point encoding": {"mapping": base.mapping.model_copy(update={"use_gaussian_encoding": False})},
        "cylinders": {"sampling": base.sampling.model_copy(update={"ray_shape": "cylinder"})},
        "linear spacing": {"sampling": SamplingParams(spacing="linear")},
    }
    for name, update in variants.items():
        slug = name.replace(" ", "_")
        report = SlamPipeline(small_config(output_dir=f"runs/ablation_{slug}", **update)).run()
        print(f"📊 {name:>15}: PSNR {report.psnr:.2f} dB, depth L1 {report.depth_l1:.4f} m")


def example_6_monocular_vs_rgbd():
    """
    Example 6: Scale-ambiguous priors (Sim3 evaluation) vs metric priors (rigid evaluation)
    """
    print("\n📖 Example 6: Monocular vs RGB-D")
    print("=" * 60)

    for mode in ("monocular", "rgbd"):
        report = SlamPipeline(small_config(mode=mode, output_dir=f"runs/mode_{mode}")).run()
        print(f"📊 {mode}: ATE {report.ate_rmse:.4f} m ({report.alignment})")


def example_7_reevaluate():
    """
    Example 7: Recompute report.json from the files of a finished run
    """
    print("\n📖 Example 7: Re-evaluate a Run")
    print("=" * 60)

    try:
        report = evaluate_run("runs/example_1")
        print(f"✅ ATE {report.ate_rmse:.4f} m, SSIM {report.ssim:.3f}")
    except Exception as e:
        print(f"❌ {e}")


# Run examples
if __name__ == '__main__':
    print("\n" + "=" * 60)
    print("DESK-SCALE SLAM - USAGE EXAMPLES")
    print("=" * 60)

    # Uncomment the example you want to run:

    example_1_full_run()
    # example_2_stage_by_stage()
    # example_3_check_progress()
    # example_4_depth_term_ablation()
    # example_5_mapping_ablations()
    # example_6_monocular_vs_rgbd()
    # example_7_reevaluate()
