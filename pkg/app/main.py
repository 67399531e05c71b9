"""
Command-line entry point
Usage: python -m app.main <command> [--config run.cfg] [--out runs/x]
"""
import argparse
import sys
from typing import List, Optional

import torch

from app.config import settings
from app.errors import SlamError
from app.mesh_export import export_mesh
from app.models import RunConfig
from app.pipeline import STAGES, SlamPipeline, evaluate_run
from app.storage import ArtifactStorage, echo, load_config

STAGE_COMMANDS = tuple(s for s in STAGES if s != "evaluate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modslam",
        description=f"{settings.APP_NAME} v{settings.APP_VERSION}",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "Render a synthetic sequence and its depth priors"),
        ("track", "Track the simulated sequence"),
        ("loop", "Detect and close loops on the tracked keyframes"),
        ("map", "Optimise the neural field on the keyframes"),
        ("run", "Run every stage and write report.json"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="Flat key = value config file")
        p.add_argument("--out", help="Run directory (overrides output_dir)")

    p = sub.add_parser("eval", help="Recompute report.json from an existing run directory")
    p.add_argument("run_dir")

    p = sub.add_parser("export-mesh", help="Marching cubes on a stored field checkpoint")
    p.add_argument("run_dir")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--level", type=float, default=0.0)
    p.add_argument("--output", default="mesh.ply")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.out:
        config = config.model_copy(update={"output_dir": args.out})
    return config


def main(argv: Optional[List[str]] = None) -> int:
    """Returns 0 only when the command finished (for `run`/`eval`: report.json written)"""
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, settings.THREADS))
    try:
        if args.command == "run":
            SlamPipeline(resolve_config(args)).run()
        elif args.command in STAGE_COMMANDS:
            config = resolve_config(args)
            pipeline = SlamPipeline(config)
            if args.command != "simulate":
                # later stages read the config the sequence was simulated with
                pipeline.config = pipeline.storage.read_config()
            pipeline.run_stage(args.command)
        elif args.command == "eval":
            report = evaluate_run(args.run_dir)
            echo(f"📊 ATE {report.ate_rmse:.6f} m, PSNR {report.psnr:.2f} dB")
        elif args.command == "export-mesh":
            storage = ArtifactStorage(args.run_dir)
            mesh = export_mesh(storage.read_checkpoint("mapping/field.modf"), args.level, args.resolution)
            path = storage.write_mesh(args.output, mesh)
            echo(f"💾 {len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {path}")
    except SlamError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
