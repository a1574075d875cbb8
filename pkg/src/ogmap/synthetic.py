"""Deterministic desk-scale scene generator with exact ground truth.

Scenes are emitted in the same on-disk formats the ingest module reads, so
the whole pipeline can be exercised end to end without any sensor data or
model inference. Everything is a pure function of the spec plus its seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ingest
from .ingest import Detection, Manifest, PointCloud, Pose, SensorCalibration
from .object_map import tokenize
from .projection import project_points

TRAJECTORY_SHAPES = ("straight", "L", "T", "cross")


def hash_embedding(text: str, dim: int) -> np.ndarray:
    """Signed-hash bag-of-tokens embedding, unit norm.

    Each token is hashed with blake2b (9-byte digest): the first 8 bytes,
    little-endian, pick the basis index mod dim; the low bit of the ninth
    byte picks the sign. Deterministic across runs and platforms.
    """
    if dim < 8:
        raise ValueError("embedding dim must be >= 8")
    tokens = tokenize(text)
    if not tokens:
        raise ValueError(f"no tokens in text {text!r}")
    vec = np.zeros(dim, dtype=float)
    for tok in tokens:
        digest = hashlib.blake2b(tok.encode("utf-8"), digest_size=9).digest()
        idx = int.from_bytes(digest[:8], "little") % dim
        sign = 1.0 if digest[8] & 1 == 0 else -1.0
        vec[idx] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError(f"degenerate hash embedding for {text!r}")
    return vec / norm


# ---------------------------------------------------------------------------
# trajectories


def generate_trajectory(
    shape: str,
    arm_length: float = 50.0,
    spacing: float = 1.0,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> tuple[np.ndarray, list[dict]]:
    """2D trajectory samples for one of the canonical shapes, plus ground
    truth (interior node positions and breakpoint count).

    Multi-pass shapes (T, cross) contain one jump between passes that the
    extractor treats as a chain boundary.
    """
    L = arm_length

    def line(a, b):
        a, b = np.asarray(a, float), np.asarray(b, float)
        n = max(2, int(round(np.linalg.norm(b - a) / spacing)) + 1)
        t = np.linspace(0.0, 1.0, n)[:, None]
        return a + t * (b - a)

    if shape == "straight":
        pts = line((0, 0), (L, 0))
        gt_nodes = []
        breakpoints = 2
    elif shape == "L":
        pts = np.vstack([line((0, 0), (L, 0)), line((L, 0), (L, L))[1:]])
        gt_nodes = [{"position": [L, 0.0], "kind": "l_intersection"}]
        breakpoints = 2
    elif shape == "T":
        pts = np.vstack([line((0, 0), (2 * L, 0)), line((L, 0), (L, L))])
        gt_nodes = [{"position": [L, 0.0], "kind": "t_intersection"}]
        breakpoints = 3
    elif shape == "cross":
        pts = np.vstack([line((0, 0), (2 * L, 0)), line((L, -L), (L, L))])
        gt_nodes = [{"position": [L, 0.0], "kind": "intersection"}]
        breakpoints = 4
    else:
        raise ValueError(f"unknown trajectory shape {shape!r}")

    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    gt = [{"position": n["position"], "kind": n["kind"]} for n in gt_nodes]
    return pts, gt + [{"breakpoint_count": breakpoints}]


def poses_from_xy(points_xy: np.ndarray) -> list[Pose]:
    """Identity-rotation poses at the given 2D positions (z = 0)."""
    poses = []
    for x, y in np.asarray(points_xy, dtype=float):
        m = np.eye(4)
        m[0, 3] = x
        m[1, 3] = y
        poses.append(Pose(m))
    return poses


# ---------------------------------------------------------------------------
# scenes


@dataclass
class ObjectSpec:
    class_name: str
    caption: str
    center: tuple[float, float, float]
    extent: tuple[float, float, float]
    points: int = 300


@dataclass
class SceneSpec:
    objects: list[ObjectSpec]
    trajectory_shape: str = "straight"
    arm_length: float = 50.0
    spacing: float = 1.0
    frame_count: int = 5
    noise_sigma: float = 0.0
    seed: int = 0
    embedding_mode: str = "hash"   # "hash" | "basis"
    embedding_dim: int = 256
    image_width: int = 800
    image_height: int = 600
    focal: float = 400.0
    ground_extent: float = 60.0
    ground_points: int = 2000
    ground_z: float = -2.0

    def __post_init__(self):
        if self.trajectory_shape not in TRAJECTORY_SHAPES:
            raise ValueError(f"unknown trajectory shape {self.trajectory_shape!r}")
        if self.embedding_mode not in ("hash", "basis"):
            raise ValueError(f"unknown embedding mode {self.embedding_mode!r}")
        for o in self.objects:
            if o.points <= 0 or min(o.extent) <= 0:
                raise ValueError(f"object {o.class_name}: non-positive extent or count")

    @staticmethod
    def from_json(text: str) -> "SceneSpec":
        doc = json.loads(text)
        objects = [ObjectSpec(
            class_name=o["class_name"],
            caption=o["caption"],
            center=tuple(o["center"]),
            extent=tuple(o["extent"]),
            points=int(o.get("points", 300)),
        ) for o in doc.pop("objects")]
        return SceneSpec(objects=objects, **doc)


def default_calibration(spec: SceneSpec) -> SensorCalibration:
    f, w, h = spec.focal, spec.image_width, spec.image_height
    p2 = np.array([[f, 0.0, w / 2.0, 0.0],
                   [0.0, f, h / 2.0, 0.0],
                   [0.0, 0.0, 1.0, 0.0]])
    # LiDAR x-forward/z-up to camera z-forward/y-down
    tr = np.array([[0.0, -1.0, 0.0, 0.0],
                   [0.0, 0.0, -1.0, 0.0],
                   [1.0, 0.0, 0.0, 0.0],
                   [0.0, 0.0, 0.0, 1.0]])
    return SensorCalibration(p2, tr, (w, h))


def _class_embedding(spec: SceneSpec, class_names: list[str], name: str) -> np.ndarray:
    if spec.embedding_mode == "basis":
        if len(class_names) > spec.embedding_dim:
            raise ValueError("basis mode needs embedding_dim >= class count")
        vec = np.zeros(spec.embedding_dim)
        vec[class_names.index(name)] = 1.0
        return vec
    return hash_embedding(name, spec.embedding_dim)


def generate_scene(spec: SceneSpec, out_dir: Path) -> dict:
    """Write a full ingest-format sequence plus ground truth; returns the
    ground-truth document."""
    out_dir = Path(out_dir)
    (out_dir / "velodyne").mkdir(parents=True, exist_ok=True)
    (out_dir / "detections").mkdir(exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    class_names = sorted({o.class_name for o in spec.objects})
    calib = default_calibration(spec)
    manifest = Manifest(
        embedding_dim=spec.embedding_dim,
        image_width=spec.image_width,
        image_height=spec.image_height,
        class_list=class_names,
    )

    # object point sets in the map frame
    obj_points = []
    for o in spec.objects:
        c = np.asarray(o.center, float)
        e = np.asarray(o.extent, float)
        obj_points.append(c + rng.uniform(-0.5, 0.5, size=(o.points, 3)) * e)

    ground = np.column_stack([
        rng.uniform(-spec.ground_extent, spec.ground_extent, spec.ground_points),
        rng.uniform(-spec.ground_extent, spec.ground_extent, spec.ground_points),
        np.full(spec.ground_points, spec.ground_z),
    ]) if spec.ground_points > 0 else np.zeros((0, 3))

    traj, lane_gt = generate_trajectory(
        spec.trajectory_shape, spec.arm_length, spec.spacing,
        spec.noise_sigma, spec.seed,
    )
    # poses cover the whole trajectory; only the first frame_count poses
    # carry sensor frames
    all_poses = poses_from_xy(traj)
    poses = all_poses[: spec.frame_count]

    embeddings = {
        o.caption: (
            _class_embedding(spec, class_names, o.class_name)
            if spec.embedding_mode == "basis"
            else hash_embedding(o.caption, spec.embedding_dim)
        )
        for o in spec.objects
    }

    for fidx, pose in enumerate(poses):
        inv_r = pose.rotation.T
        inv_t = -inv_r @ pose.translation

        def to_sensor(pts):
            return pts @ inv_r.T + inv_t

        sensor_obj = [to_sensor(p) for p in obj_points]
        cloud_pts = np.vstack(sensor_obj + [to_sensor(ground)])
        cloud = PointCloud(cloud_pts, intensity=np.zeros(len(cloud_pts)))
        ingest.write_point_cloud(out_dir / "velodyne" / f"{fidx:06d}.bin", cloud)

        detections = []
        for o, pts in zip(spec.objects, sensor_obj):
            pixels, depth = project_points(pts, calib)
            ok = depth > 0
            px = np.rint(pixels[ok, 0]).astype(int)
            py = np.rint(pixels[ok, 1]).astype(int)
            inside = (px >= 0) & (px < spec.image_width) & (py >= 0) & (py < spec.image_height)
            if inside.sum() < 10:
                continue
            mask = np.zeros((spec.image_height, spec.image_width), dtype=bool)
            mask[py[inside], px[inside]] = True
            detections.append(Detection(mask=mask, caption=o.caption,
                                        embedding=embeddings[o.caption]))
        ingest.write_frame_detections(out_dir / "detections" / f"{fidx:06d}.jsonl",
                                      detections)

    manifest.save(out_dir / "manifest.json")
    ingest.write_calibration(out_dir / "calib.txt", calib)
    ingest.write_poses(out_dir / "poses.txt", all_poses)

    gt = {
        "classes": class_names,
        "class_embeddings": {
            name: [float(x) for x in _class_embedding(spec, class_names, name)]
            for name in class_names
        },
        "objects": [
            {
                "id": i,
                "class_name": o.class_name,
                "caption": o.caption,
                "center": list(o.center),
                "extent": list(o.extent),
                "points": [[float(v) for v in row] for row in obj_points[i]],
            }
            for i, o in enumerate(spec.objects)
        ],
        "lane": lane_gt,
        "trajectory": [[float(x), float(y)] for x, y in traj],
    }
    (out_dir / "ground_truth.json").write_text(json.dumps(gt, sort_keys=True))
    (out_dir / "classes.json").write_text(json.dumps({
        "names": class_names,
        "embeddings": [
            [float(x) for x in _class_embedding(spec, class_names, n)]
            for n in class_names
        ],
    }, sort_keys=True))
    return gt
