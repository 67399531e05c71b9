"""
Tests for run-directory file formats and stage progress
"""

import os
import sys

import numpy as np
import pytest
import torch

# Add repo root to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from app.errors import FormatError
from app.field_renderer import FieldParams
from app.mesh_export import Mesh
from app.models import MetricsReport, RunConfig, TrajectorySpec
from app.scene_sim import gen_trajectory
from app.storage import (
    ArtifactStorage,
    checkpoint_bytes,
    format_tum,
    load_config,
    params_from_bytes,
    parse_ply,
    parse_tum,
    quantize_depth,
    quantize_rgb,
)


def test_tum_round_trip_is_exact():
    poses = gen_trajectory("loop", 7, radius=2.5, height=0.6)
    stamps, parsed = parse_tum(format_tum(poses, stamps=[0.5 * k for k in range(7)]))
    assert np.array_equal(stamps, 0.5 * np.arange(7))
    for a, b in zip(poses, parsed):
        assert np.array_equal(a.translation, b.translation)
        assert a.allclose(b, atol=1e-12)


def test_tum_skips_comments_and_rejects_bad_lines():
    stamps, poses = parse_tum("# timestamp tx ty tz qx qy qz qw\n\n0 0 0 0 0 0 0 1\n")
    assert len(poses) == 1 and stamps[0] == 0.0
    with pytest.raises(FormatError):
        parse_tum("0 0 0 0 0 0 1\n")
    with pytest.raises(FormatError):
        parse_tum("0 0 0 zero 0 0 0 1\n")


def test_depth_file_keeps_orientation_and_invalid_pixels(tmp_path):
    storage = ArtifactStorage(tmp_path)
    depth = np.arange(12, dtype=np.float64).reshape(3, 4) * 0.37 + 0.5
    depth[1, 2] = np.inf
    storage.write_depth("frames/depth.pfm", depth)
    back = storage.read_depth("frames/depth.pfm")
    assert back.shape == (3, 4)
    assert np.isinf(back[1, 2])
    assert np.array_equal(back, quantize_depth(depth))


def test_depth_file_rejects_other_formats(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"PF\n1 1\n-1.0\n" + b"\x00" * 12)
    storage = ArtifactStorage(tmp_path)
    with pytest.raises(FormatError):
        storage.read_depth("bad.pfm")
    path.write_bytes(b"Pf\n2 2\n-1.0\n" + b"\x00" * 4)
    with pytest.raises(FormatError):
        storage.read_depth("bad.pfm")


def test_rgb_file_matches_quantization(tmp_path):
    storage = ArtifactStorage(tmp_path)
    rgb = np.random.default_rng(0).uniform(size=(6, 5, 3))
    storage.write_rgb("frames/rgb.png", rgb)
    assert np.array_equal(storage.read_rgb("frames/rgb.png"), quantize_rgb(rgb))


def test_mesh_file(tmp_path):
    storage = ArtifactStorage(tmp_path)
    mesh = Mesh(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.1]]), np.array([[0, 1, 2]]))
    storage.write_mesh("mesh.ply", mesh)
    back = storage.read_mesh("mesh.ply")
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)
    assert storage.read_mesh("mesh.ply").faces.dtype == np.int64


def test_empty_mesh_file(tmp_path):
    storage = ArtifactStorage(tmp_path)
    storage.write_mesh("mesh.ply", Mesh.empty())
    assert storage.read_mesh("mesh.ply").is_empty


def test_ply_rejects_bad_files():
    with pytest.raises(FormatError):
        parse_ply("off\n")
    quad = "\n".join([
        "ply", "format ascii 1.0", "element vertex 4", "property double x", "property double y",
        "property double z", "element face 1", "property list uchar int vertex_indices", "end_header",
        "0 0 0", "1 0 0", "1 1 0", "0 1 0", "4 0 1 2 3",
    ])
    with pytest.raises(FormatError):
        parse_ply(quad)


def test_checkpoint_restores_every_parameter():
    params = FieldParams.create(resolution=5, feature_dim=2, hidden_dim=3, n_bands=1, beta=0.07, seed=4)
    restored = params_from_bytes(checkpoint_bytes(params))
    assert restored.resolution == 5 and restored.n_bands == 1
    for a, b in zip(params.parameters(), restored.parameters()):
        assert torch.equal(a, b)
    assert float(restored.beta) == pytest.approx(0.07)


def test_checkpoint_rejects_corruption():
    data = checkpoint_bytes(FieldParams.create(resolution=3, feature_dim=1, hidden_dim=2, n_bands=1))
    with pytest.raises(FormatError):
        params_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        params_from_bytes(data[:-8])
    with pytest.raises(FormatError):
        params_from_bytes(data[:10])


def test_config_round_trip(tmp_path):
    config = RunConfig(mode="rgbd", seed=3, trajectory=TrajectorySpec(kind="orbit", n_frames=9, center=(0.1, 0.0, -0.2)))
    storage = ArtifactStorage(tmp_path)
    storage.write_config(config)
    assert storage.read_config().model_dump() == config.model_dump()


def test_config_file_grammar(tmp_path):
    path = tmp_path / "run.txt"
    path.write_text("# small run\nmode = rgbd\ntrajectory.n_frames = 12\nmapping.use_contraction = false\n")
    config = load_config(path)
    assert config.mode == "rgbd"
    assert config.trajectory.n_frames == 12
    assert config.mapping.use_contraction is False
    assert config.sampling.n_strat == 20


def test_config_errors(tmp_path):
    with pytest.raises(FormatError):
        load_config(tmp_path / "missing.txt")
    path = tmp_path / "bad.txt"
    path.write_text("mapping.no_such_key = 1\n")
    with pytest.raises(FormatError):
        load_config(path)
    path.write_text("trajectory.n_frames = 1\n")
    with pytest.raises(FormatError):
        load_config(path)


def test_report_round_trip_keeps_infinite_psnr(tmp_path):
    report = MetricsReport(
        mode="monocular", alignment="sim3", n_frames=4, n_keyframes=2, n_loop_closures=0,
        ate_rmse=0.01, depth_l1=0.02, psnr=float("inf"), ssim=1.0, per_frame_error=[0.0, 0.01],
        runtime_s={"track": 1.0},
    )
    storage = ArtifactStorage(tmp_path)
    storage.write_report(report)
    assert "runtime_s" not in storage.read_json("report.json")
    back = storage.read_report()
    assert back.psnr == float("inf")
    assert back.per_frame_error == [0.0, 0.01]


def test_csv_keeps_float_precision(tmp_path):
    storage = ArtifactStorage(tmp_path)
    storage.write_csv("trace.csv", [{"step": 0, "loss_total": 0.1 + 0.2}])
    rows = storage.read_csv("trace.csv")
    assert float(rows[0]["loss_total"]) == 0.1 + 0.2
    assert rows[0]["step"] == "0"


def test_progress_records_stages(tmp_path):
    storage = ArtifactStorage(tmp_path)
    storage.mark_stage("simulate")
    storage.mark_stage("simulate")
    storage.mark_stage("track", ok=False)
    progress = storage.load_progress()
    assert progress["completed_stages"] == ["simulate"]
    assert progress["failed_stages"] == ["track"]
    assert progress["last_updated"] is not None


def test_missing_artifact(tmp_path):
    with pytest.raises(FormatError):
        ArtifactStorage(tmp_path).read_trajectory("trajectory.txt")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
