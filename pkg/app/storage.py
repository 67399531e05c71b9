"""
Run-directory storage
Readers and writers for every artifact a run produces (trajectories, depth maps,
images, meshes, traces, checkpoints, report, config) plus stage progress.
"""
import csv
import json
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from dotenv import dotenv_values
from PIL import Image

from app.config import settings
from app.errors import FormatError
from app.geometry import Pose
from app.models import MetricsReport, RunConfig

if TYPE_CHECKING:
    from app.field_renderer import FieldParams
    from app.mesh_export import Mesh

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = b"MODF"
CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = struct.Struct("<4sIIIIId")


def echo(message: str) -> None:
    """Status line on stdout unless MODSLAM_QUIET is set"""
    if not settings.QUIET:
        print(message, flush=True)


def debug(message: str) -> None:
    if settings.DEBUG and not settings.QUIET:
        print(message, flush=True)


# --- trajectories (TUM: timestamp tx ty tz qx qy qz qw) ---

def format_tum(poses: Sequence[Pose], stamps: Optional[Sequence[float]] = None) -> str:
    stamps = list(range(len(poses))) if stamps is None else stamps
    lines = []
    for stamp, pose in zip(stamps, poses):
        values = [float(stamp), *pose.translation, *pose.rotation]
        lines.append(" ".join(repr(float(v)) for v in values))
    return "\n".join(lines) + "\n"


def parse_tum(text: str) -> Tuple[np.ndarray, List[Pose]]:
    stamps, poses = [], []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"TUM line {number}: expected 8 fields, got {len(parts)}")
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"TUM line {number}: {exc}") from exc
        stamps.append(values[0])
        poses.append(Pose(np.array(values[4:8]), np.array(values[1:4])))
    return np.array(stamps), poses


# --- depth maps (PFM, little-endian, rows bottom to top, inf stored as 0) ---

def write_pfm(path: PathLike, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise FormatError("PFM writer expects a single-channel (H, W) map")
    h, w = depth.shape
    data = np.where(np.isfinite(depth), depth, 0.0).astype("<f4")
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(data).tobytes())


def read_pfm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise FormatError(f"{path}: not a single-channel PFM file")
        try:
            w, h = (int(v) for v in f.readline().split())
            scale = float(f.readline())
        except ValueError as exc:
            raise FormatError(f"{path}: malformed PFM header") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(f.read(), dtype=dtype)
    if raw.size != w * h:
        raise FormatError(f"{path}: expected {w * h} values, found {raw.size}")
    depth = np.flipud(raw.reshape(h, w)).astype(np.float64)
    return np.where(depth == 0.0, np.inf, depth)


def quantize_depth(depth: np.ndarray) -> np.ndarray:
    """Depth exactly as it reads back from PFM"""
    depth = np.asarray(depth, dtype=np.float64)
    return np.where(np.isfinite(depth), depth.astype(np.float32).astype(np.float64), np.inf)


# --- colour images (PNG or PPM by suffix) ---

def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize_rgb(rgb: np.ndarray) -> np.ndarray:
    """Colours exactly as they read back from an 8-bit image"""
    return to_uint8(rgb).astype(np.float64) / 255.0


def write_image(path: PathLike, rgb: np.ndarray) -> None:
    Image.fromarray(to_uint8(rgb), mode="RGB").save(path)


def read_image(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# --- meshes (ASCII PLY) ---

def format_ply(mesh: "Mesh") -> str:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines += ["3 " + " ".join(str(int(i)) for i in face) for face in mesh.faces]
    return "\n".join(lines) + "\n"


def parse_ply(text: str) -> "Mesh":
    from app.mesh_export import Mesh

    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError("not a PLY file")
    n_vertices = n_faces = None
    try:
        end = lines.index("end_header")
    except ValueError as exc:
        raise FormatError("PLY header has no end_header") from exc
    for line in lines[1:end]:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vertices = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_faces = int(parts[2])
        elif parts[:1] == ["format"] and parts[1] != "ascii":
            raise FormatError("only ASCII PLY is supported")
    if n_vertices is None or n_faces is None:
        raise FormatError("PLY header lacks vertex or face counts")
    body = lines[end + 1:]
    if len(body) < n_vertices + n_faces:
        raise FormatError("PLY body is truncated")
    vertices = np.array([[float(v) for v in body[k].split()] for k in range(n_vertices)]).reshape(-1, 3)
    faces = []
    for line in body[n_vertices:n_vertices + n_faces]:
        parts = [int(v) for v in line.split()]
        if parts[0] != 3 or len(parts) != 4:
            raise FormatError("only triangle faces are supported")
        faces.append(parts[1:])
    return Mesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3))


# --- field checkpoints (MODF) ---

def checkpoint_bytes(params: "FieldParams") -> bytes:
    """Header (magic, version, R, F, H, L, beta) then float64 payload

    Payload order: sdf grid, colour grid, hidden weight and bias, output weight
    and bias, log beta.
    """
    header = CHECKPOINT_HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.resolution, params.feature_dim,
        params.hidden_dim, params.n_bands, float(params.beta),
    )
    arrays = [t.detach().numpy().astype("<f8").ravel() for t in _checkpoint_tensors(params)]
    return header + b"".join(a.tobytes() for a in arrays)


def _checkpoint_tensors(params: "FieldParams"):
    return [
        params.sdf_grid, params.color_grid,
        params.hidden.weight, params.hidden.bias,
        params.output.weight, params.output.bias,
        params.log_beta,
    ]


def params_from_bytes(data: bytes) -> "FieldParams":
    import torch

    from app.field_renderer import FieldParams

    if len(data) < CHECKPOINT_HEADER.size:
        raise FormatError("checkpoint is truncated")
    magic, version, R, F, H, L, beta = CHECKPOINT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    params = FieldParams(R, F, H, L, beta)
    payload = np.frombuffer(data, dtype="<f8", offset=CHECKPOINT_HEADER.size)
    tensors = _checkpoint_tensors(params)
    expected = sum(t.numel() for t in tensors)
    if payload.size != expected:
        raise FormatError(f"checkpoint payload has {payload.size} values, expected {expected}")
    offset = 0
    with torch.no_grad():
        for t in tensors:
            chunk = payload[offset:offset + t.numel()].reshape(t.shape)
            t.copy_(torch.from_numpy(chunk.copy()))
            offset += t.numel()
    return params


# --- storage ---

class ArtifactStorage:
    """Files of one run, rooted at a directory"""

    PROGRESS_FILE = "progress.json"

    def __init__(self, root: Optional[PathLike] = None):
        self.root = Path(root or settings.OUTPUT_DIR)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        p = self.root / key
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def exists(self, key: str) -> bool:
        return (self.root / key).exists()

    def _require(self, key: str) -> Path:
        p = self.root / key
        if not p.exists():
            raise FormatError(f"missing artifact: {p}")
        return p

    def write_text(self, key: str, text: str) -> Path:
        p = self.path(key)
        p.write_text(text)
        debug(f"💾 {p}")
        return p

    def read_text(self, key: str) -> str:
        return self._require(key).read_text()

    def write_json(self, key: str, data: Any) -> Path:
        return self.write_text(key, json.dumps(data, indent=2) + "\n")

    def read_json(self, key: str) -> Any:
        try:
            return json.loads(self.read_text(key))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{key}: {exc}") from exc

    def write_trajectory(self, key: str, poses: Sequence[Pose], stamps: Optional[Sequence[float]] = None) -> Path:
        return self.write_text(key, format_tum(poses, stamps))

    def read_trajectory(self, key: str) -> Tuple[np.ndarray, List[Pose]]:
        return parse_tum(self.read_text(key))

    def write_depth(self, key: str, depth: np.ndarray) -> Path:
        p = self.path(key)
        write_pfm(p, depth)
        return p

    def read_depth(self, key: str) -> np.ndarray:
        return read_pfm(self._require(key))

    def write_rgb(self, key: str, rgb: np.ndarray) -> Path:
        p = self.path(key)
        write_image(p, rgb)
        return p

    def read_rgb(self, key: str) -> np.ndarray:
        return read_image(self._require(key))

    def write_mesh(self, key: str, mesh: "Mesh") -> Path:
        return self.write_text(key, format_ply(mesh))

    def read_mesh(self, key: str) -> "Mesh":
        return parse_ply(self.read_text(key))

    def write_csv(self, key: str, rows: Sequence[Dict[str, Any]], fieldnames: Optional[Sequence[str]] = None) -> Path:
        p = self.path(key)
        fieldnames = list(fieldnames or (rows[0].keys() if rows else []))
        with open(p, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return p

    def read_csv(self, key: str) -> List[Dict[str, str]]:
        with open(self._require(key), newline="") as f:
            return list(csv.DictReader(f))

    def write_checkpoint(self, key: str, params: "FieldParams") -> Path:
        p = self.path(key)
        p.write_bytes(checkpoint_bytes(params))
        return p

    def read_checkpoint(self, key: str) -> "FieldParams":
        return params_from_bytes(self._require(key).read_bytes())

    def write_report(self, report: MetricsReport, key: str = "report.json") -> Path:
        return self.write_json(key, report.model_dump())

    def read_report(self, key: str = "report.json") -> MetricsReport:
        return MetricsReport.model_validate(self.read_json(key))

    def write_config(self, config: RunConfig, key: str = "config.txt") -> Path:
        return self.write_text(key, config.to_config_text())

    def read_config(self, key: str = "config.txt") -> RunConfig:
        return load_config(self._require(key))

    def load_progress(self) -> Dict[str, Any]:
        """Completed and failed stages of this run"""
        if self.exists(self.PROGRESS_FILE):
            try:
                return self.read_json(self.PROGRESS_FILE)
            except FormatError as e:
                echo(f"⚠️  Could not load progress: {e}")
        return {"completed_stages": [], "failed_stages": [], "last_updated": None}

    def save_progress(self, progress: Dict[str, Any]) -> None:
        progress["last_updated"] = datetime.now(timezone.utc).isoformat()
        self.write_json(self.PROGRESS_FILE, progress)

    def mark_stage(self, stage: str, ok: bool = True) -> None:
        progress = self.load_progress()
        bucket = "completed_stages" if ok else "failed_stages"
        if stage not in progress[bucket]:
            progress[bucket].append(stage)
        self.save_progress(progress)


def load_config(path: PathLike) -> RunConfig:
    """Parse a flat `key = value` config file into a RunConfig"""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"config file not found: {path}")
    try:
        return RunConfig.from_flat(dict(dotenv_values(path)))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
