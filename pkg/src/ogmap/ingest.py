"""On-disk input parsing: calibration, poses, point clouds, detection records.

Directory layout of a sequence:

    manifest.json            {"embedding_dim", "image_width", "image_height", "class_list"?}
    calib.txt                labeled lines "P2: <12 floats>" and "Tr: <12 floats>"
    poses.txt                one line per frame, 12 floats (row-major 3x4, LiDAR->map)
    velodyne/<frame>.bin     flat little-endian float32 (x, y, z, intensity)
    detections/<frame>.jsonl one JSON object per line (see Detection)
    dynamic/<frame>.flags    optional, one byte per point (0/1)

Masks are run-length encoded over row-major image pixels: alternating run
lengths starting with a run of zeros, stored as little-endian uint32 and
base64-encoded in the JSON record.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ROT_TOL = 1e-6


class IngestError(ValueError):
    """Fatal problem with sequence inputs."""


# ---------------------------------------------------------------------------
# mask RLE


def rle_encode(mask: np.ndarray) -> str:
    """Encode a 2D boolean mask to base64 RLE (zeros-first run lengths)."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return base64.b64encode(b"").decode("ascii")
    runs = []
    changes = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    for s, e in zip(bounds[:-1], bounds[1:]):
        if not runs and flat[s]:
            runs.append(0)  # leading run of zeros may be empty
        runs.append(int(e - s))
    arr = np.asarray(runs, dtype="<u4")
    return base64.b64encode(arr.tobytes()).decode("ascii")


def rle_decode(data: str, width: int, height: int) -> np.ndarray:
    """Decode base64 RLE back to a (height, width) boolean mask."""
    runs = np.frombuffer(base64.b64decode(data), dtype="<u4").astype(np.int64)
    total = int(runs.sum())
    if total != width * height:
        raise IngestError(
            f"RLE covers {total} pixels, image has {width * height}"
        )
    flat = np.zeros(total, dtype=bool)
    pos = 0
    val = False
    for r in runs:
        if val:
            flat[pos:pos + r] = True
        pos += r
        val = not val
    return flat.reshape(height, width)


# ---------------------------------------------------------------------------
# domain types


def _check_rotation(m: np.ndarray, what: str):
    r = m[:3, :3]
    if not np.allclose(r @ r.T, np.eye(3), atol=ROT_TOL):
        raise IngestError(f"{what}: rotation block is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > ROT_TOL:
        raise IngestError(f"{what}: rotation determinant is {np.linalg.det(r)}, not +1")


@dataclass(frozen=True)
class SensorCalibration:
    """Pinhole projection (3x4, pixels) and LiDAR-to-camera transform (4x4)."""

    camera_projection: np.ndarray
    lidar_to_camera: np.ndarray
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        object.__setattr__(self, "camera_projection",
                           np.asarray(self.camera_projection, dtype=float).reshape(3, 4))
        object.__setattr__(self, "lidar_to_camera",
                           np.asarray(self.lidar_to_camera, dtype=float).reshape(4, 4))
        _check_rotation(self.lidar_to_camera, "lidar_to_camera")
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise IngestError(f"image size must be positive, got {self.image_size}")


@dataclass(frozen=True)
class Pose:
    """Rigid transform, map frame <- LiDAR frame, as a 4x4 matrix."""

    transform: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.transform, dtype=float).reshape(4, 4)
        object.__setattr__(self, "transform", m)
        _check_rotation(m, "pose")
        if not np.all(np.isfinite(m[:3, 3])):
            raise IngestError("pose translation is not finite")

    @property
    def rotation(self) -> np.ndarray:
        return self.transform[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.transform[:3, 3]


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3) float
    dynamic: np.ndarray | None = None  # (n,) bool
    intensity: np.ndarray | None = None  # (n,) float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise IngestError("point cloud contains non-finite coordinates")
        for name in ("dynamic", "intensity"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != len(self.points):
                raise IngestError(
                    f"{name} length {len(arr)} != point count {len(self.points)}"
                )

    def __len__(self):
        return len(self.points)


@dataclass
class Detection:
    """One masked instance in one frame."""

    mask: np.ndarray  # (h, w) bool
    caption: str
    embedding: np.ndarray  # (d,) unit-norm

    def __post_init__(self):
        if not self.caption:
            raise IngestError("empty caption")
        self.embedding = np.asarray(self.embedding, dtype=float)


@dataclass
class FrameRecord:
    index: int
    cloud: PointCloud
    pose: Pose
    detections: list[Detection]


@dataclass
class Manifest:
    embedding_dim: int
    image_width: int
    image_height: int
    class_list: list[str] = field(default_factory=list)

    @staticmethod
    def load(path: Path) -> "Manifest":
        raw = json.loads(Path(path).read_text())
        try:
            return Manifest(
                embedding_dim=int(raw["embedding_dim"]),
                image_width=int(raw["image_width"]),
                image_height=int(raw["image_height"]),
                class_list=list(raw.get("class_list", [])),
            )
        except KeyError as e:
            raise IngestError(f"manifest missing key {e}") from e

    def save(self, path: Path):
        doc = {
            "embedding_dim": self.embedding_dim,
            "image_width": self.image_width,
            "image_height": self.image_height,
        }
        if self.class_list:
            doc["class_list"] = self.class_list
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


@dataclass
class IngestConfig:
    """Knobs for sequence loading."""

    strict: bool = False  # escalate skip-warnings to errors


# ---------------------------------------------------------------------------
# loaders


def _parse_3x4(tokens: list[str], what: str) -> np.ndarray:
    if len(tokens) != 12:
        raise IngestError(f"{what}: expected 12 floats, got {len(tokens)}")
    vals = np.array([float(t) for t in tokens]).reshape(3, 4)
    return vals


def load_calibration(path: Path, image_size: tuple[int, int]) -> SensorCalibration:
    entries = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        label, _, rest = line.partition(":")
        entries[label.strip()] = rest.split()
    if "P2" not in entries or "Tr" not in entries:
        raise IngestError(f"{path}: calibration needs 'P2:' and 'Tr:' lines")
    p2 = _parse_3x4(entries["P2"], "P2")
    tr = np.vstack([_parse_3x4(entries["Tr"], "Tr"), [0.0, 0.0, 0.0, 1.0]])
    return SensorCalibration(p2, tr, image_size)


def load_poses(path: Path) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            m = _parse_3x4(line.split(), "pose")
            poses.append(Pose(np.vstack([m, [0.0, 0.0, 0.0, 1.0]])))
        except (IngestError, ValueError) as e:
            raise IngestError(f"{path}:{lineno}: malformed pose line: {e}") from e
    return poses


def load_point_cloud(path: Path, flags_path: Path | None = None) -> PointCloud:
    path = Path(path)
    if path.suffix == ".bin":
        data = path.read_bytes()
        if len(data) % 16 != 0:
            raise IngestError(f"{path}: byte length not a multiple of 4 float32s")
        rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
        points = rec[:, :3].astype(float)
        intensity = rec[:, 3].astype(float)
    else:  # ASCII XYZ
        rows = np.loadtxt(path, dtype=float, ndmin=2)
        points = rows[:, :3]
        intensity = None
    dynamic = None
    if flags_path is not None and Path(flags_path).exists():
        dynamic = np.frombuffer(Path(flags_path).read_bytes(), dtype=np.uint8).astype(bool)
    return PointCloud(points, dynamic=dynamic, intensity=intensity)


def normalized(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("zero-norm vector")
    return v if n == 1.0 else v / n


def load_frame_detections(path: Path, manifest: Manifest) -> list[Detection]:
    """Parse one JSONL detection file; embeddings are L2-normalized on load."""
    w, h = manifest.image_width, manifest.image_height
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        emb = np.asarray(rec["embedding"], dtype=float)
        if emb.shape != (manifest.embedding_dim,):
            raise IngestError(
                f"{path}:{lineno}: embedding dim {emb.shape} != manifest "
                f"({manifest.embedding_dim},)"
            )
        if not np.all(np.isfinite(emb)):
            raise IngestError(f"{path}:{lineno}: non-finite embedding")
        norm = float(np.linalg.norm(emb))
        if norm == 0.0:
            log.warning("%s:%d: zero-norm embedding, detection rejected", path, lineno)
            continue
        mask = rle_decode(rec["mask_rle"], w, h)
        if not mask.any():
            log.warning("%s:%d: mask covers 0 pixels, detection rejected", path, lineno)
            continue
        out.append(Detection(mask=mask, caption=rec["caption"], embedding=normalized(emb)))
    return out


@dataclass
class FrameStream:
    """Ordered frame records plus load diagnostics.

    `poses` holds the full pose file, which may extend beyond the frames
    that carry sensor data; lane extraction uses the whole trajectory.
    """

    manifest: Manifest
    calibration: SensorCalibration
    frames: list[FrameRecord]
    poses: list[Pose] = field(default_factory=list)
    skipped: int = 0

    def __iter__(self):
        return iter(self.frames)

    def __len__(self):
        return len(self.frames)


def load_sequence(data_dir: Path, config: IngestConfig | None = None) -> FrameStream:
    """Load a full sequence directory into an index-ordered FrameStream.

    Frames missing any component are skipped with a warning; structural
    problems (bad calibration, malformed pose lines, embedding dim
    mismatch) are fatal.
    """
    config = config or IngestConfig()
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise IngestError(f"no frames found: {data_dir} has no manifest.json")
    manifest = Manifest.load(manifest_path)
    calib = load_calibration(
        data_dir / "calib.txt", (manifest.image_width, manifest.image_height)
    )
    poses = load_poses(data_dir / "poses.txt")

    cloud_dir = data_dir / "velodyne"
    det_dir = data_dir / "detections"
    flag_dir = data_dir / "dynamic"
    indices = sorted(int(p.stem) for p in cloud_dir.glob("*.bin")) if cloud_dir.is_dir() else []
    if not indices:
        raise IngestError(f"no frames found in {data_dir}")

    frames = []
    skipped = 0
    for idx in indices:
        name = f"{idx:06d}"
        det_path = det_dir / f"{name}.jsonl"
        if idx >= len(poses) or not det_path.exists():
            log.warning("frame %d skipped: missing pose or detections", idx)
            skipped += 1
            continue
        cloud = load_point_cloud(cloud_dir / f"{name}.bin", flag_dir / f"{name}.flags")
        detections = load_frame_detections(det_path, manifest)
        frames.append(FrameRecord(idx, cloud, poses[idx], detections))
    if config.strict and skipped:
        raise IngestError(f"{skipped} frames skipped in strict mode")
    return FrameStream(manifest, calib, frames, poses, skipped)


# ---------------------------------------------------------------------------
# writers (used by the synthetic generator and round-trip tests)


def write_point_cloud(path: Path, cloud: PointCloud):
    n = len(cloud)
    rec = np.zeros((n, 4), dtype="<f4")
    rec[:, :3] = cloud.points
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    Path(path).write_bytes(rec.tobytes())
    if cloud.dynamic is not None:
        Path(path).with_suffix(".flags").write_bytes(
            cloud.dynamic.astype(np.uint8).tobytes()
        )


def write_frame_detections(path: Path, detections: list[Detection]):
    lines = []
    for d in detections:
        lines.append(json.dumps({
            "caption": d.caption,
            "embedding": [float(x) for x in d.embedding],
            "mask_rle": rle_encode(d.mask),
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_poses(path: Path, poses: list[Pose]):
    lines = []
    for p in poses:
        lines.append(" ".join(repr(float(x)) for x in p.transform[:3].ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def write_calibration(path: Path, calib: SensorCalibration):
    p2 = " ".join(repr(float(x)) for x in calib.camera_projection.ravel())
    tr = " ".join(repr(float(x)) for x in calib.lidar_to_camera[:3].ravel())
    Path(path).write_text(f"P2: {p2}\nTr: {tr}\n")
