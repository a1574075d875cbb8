"""Assembly of the five-layer hierarchical map and its on-disk container.

Layers: downsampled labeled point cloud, lane graph, instance graph (MST
over fused objects with relation labels), road segments, and a single
environment node linking every segment.

Container format "opengraph-map/1": a directory holding one JSON index and
one binary sidecar (little-endian, row-major arrays; offsets and lengths
in the index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .geom import AxisAlignedBox, WeightedGraph, aabb_iou, minimum_spanning_tree, voxel_downsample
from .lane_graph import INTERIOR_KINDS, LaneGraph
from .object_map import ObjectMap

FORMAT_VERSION = "opengraph-map/1"

RelationLabeler = Callable[["InstanceNode", "InstanceNode"], str]


class PersistenceError(ValueError):
    pass


@dataclass
class ClassCatalog:
    """Named class embeddings for caption-feature classification."""

    names: list[str]
    embeddings: np.ndarray  # (n_classes, dim), unit rows
    colors: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=float)
        if len(self.names) != len(set(self.names)):
            raise ValueError("class names must be unique")
        if len(self.embeddings) != len(self.names):
            raise ValueError("one embedding per class required")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("class embeddings must be unit norm")
        if not self.colors:
            self.colors = [_default_color(i) for i in range(len(self.names))]

    @staticmethod
    def from_names(names: list[str], dim: int) -> "ClassCatalog":
        from .synthetic import hash_embedding
        return ClassCatalog(list(names),
                            np.array([hash_embedding(n, dim) for n in names]))

    @staticmethod
    def load(path: Path) -> "ClassCatalog":
        doc = json.loads(Path(path).read_text())
        return ClassCatalog(doc["names"], np.array(doc["embeddings"], dtype=float))


def _default_color(i: int) -> tuple[int, int, int]:
    # golden-angle hue walk, good enough for rendering distinct classes
    h = (i * 0.61803398875) % 1.0
    r = int(255 * abs(h * 6 % 2 - 1))
    return (r, int(255 * h), 255 - r)


@dataclass
class InstanceNode:
    id: int
    centroid: np.ndarray
    aabb: AxisAlignedBox
    caption: str
    embedding: np.ndarray
    class_id: int
    obs_count: int


@dataclass
class Segment:
    id: int
    kind: str
    polyline: np.ndarray  # (n, 2)
    centroid: np.ndarray  # (2,)
    lane_node: int | None = None          # originating lane node (node segments)
    edge: tuple[int, int] | None = None   # originating lane edge (straight segments)


@dataclass
class HierarchicalGraph:
    points: np.ndarray            # (n, 3) downsampled
    point_instance_ids: np.ndarray  # (n,)
    point_class_ids: np.ndarray     # (n,)
    lane_graph: LaneGraph | None
    instances: list[InstanceNode]
    instance_edges: list[tuple[int, int, str]]   # (instance id, instance id, relation)
    segments: list[Segment]
    instance_segment: dict[int, int]             # instance id -> segment id
    class_names: list[str]

    def instance(self, instance_id: int) -> InstanceNode:
        for node in self.instances:
            if node.id == instance_id:
                return node
        raise KeyError(f"no instance with id {instance_id}")

    def instance_points(self, instance_id: int) -> np.ndarray:
        return self.points[self.point_instance_ids == instance_id]

    @property
    def environment_segments(self) -> list[int]:
        return [s.id for s in self.segments]


# ---------------------------------------------------------------------------
# layer builders


def classify_objects(embeddings: np.ndarray, catalog: ClassCatalog) -> np.ndarray:
    """Argmax cosine against the catalog; ties resolve to the lowest index."""
    emb = np.asarray(embeddings, dtype=float)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    sims = (emb / norms) @ catalog.embeddings.T
    return sims.argmax(axis=1)


def build_point_cloud_layer(omap: ObjectMap, voxel: float, class_ids: dict[int, int]):
    """Union of per-object voxel-downsampled points, tagged with owning
    instance and class ids."""
    pts, inst, cls = [], [], []
    for oid in sorted(omap.objects):
        down = voxel_downsample(omap.objects[oid].points, voxel)
        pts.append(down)
        inst.append(np.full(len(down), oid, dtype=np.int64))
        cls.append(np.full(len(down), class_ids[oid], dtype=np.int64))
    if not pts:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.vstack(pts), np.concatenate(inst), np.concatenate(cls)


def default_relation_labeler(a: InstanceNode, b: InstanceNode) -> str:
    """Geometric relation of a with respect to b."""
    alo, ahi = np.array(a.aabb.min), np.array(a.aabb.max)
    blo, bhi = np.array(b.aabb.min), np.array(b.aabb.max)
    overlap_xy = np.all(np.minimum(ahi, bhi)[:2] >= np.maximum(alo, blo)[:2])
    if overlap_xy:
        if alo[2] >= bhi[2] - 0.1:
            return "on"
        if blo[2] >= ahi[2] - 0.1:
            return "under"
    gaps = np.clip(np.maximum(alo - bhi, blo - ahi), 0.0, None)
    if float(np.linalg.norm(gaps)) < 1.0:
        return "adjacent to"
    return "near"


def build_instance_layer(
    instances: list[InstanceNode],
    labeler: RelationLabeler | None = None,
) -> list[tuple[int, int, str]]:
    """MST over the dense graph with weight distance * (1 - IoU), each edge
    labeled by the relation labeler."""
    labeler = labeler or default_relation_labeler
    n = len(instances)
    if n <= 1:
        return []
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.linalg.norm(instances[i].centroid - instances[j].centroid))
            w = d * (1.0 - aabb_iou(instances[i].aabb, instances[j].aabb))
            edges.append((i, j, w))
    mst = minimum_spanning_tree(WeightedGraph(n, edges))
    out = []
    for u, v, _ in sorted(mst):
        out.append((instances[u].id, instances[v].id,
                    labeler(instances[u], instances[v])))
    return out


def build_segment_layer(lg: LaneGraph, node_radius: float = 10.0) -> list[Segment]:
    """One segment per interior lane node (its owned path section) plus one
    straight-roadway segment per edge polyline."""
    segments = []
    sid = 0
    for ni, node in enumerate(lg.nodes):
        if node.kind not in INTERIOR_KINDS:
            continue
        section = [node.position]
        for e in lg.edges:
            if ni not in (e.u, e.v):
                continue
            near = e.polyline[
                np.linalg.norm(e.polyline - node.position, axis=1) <= node_radius
            ]
            section.extend(near)
        poly = np.array(section)
        segments.append(Segment(sid, node.kind, poly, poly.mean(axis=0), lane_node=ni))
        sid += 1
    for e in lg.edges:
        poly = np.asarray(e.polyline, dtype=float)
        segments.append(Segment(sid, "straight", poly, poly.mean(axis=0),
                                edge=(e.u, e.v)))
        sid += 1
    return segments


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(a + t * ab - p))


def polyline_distance(p_xy: np.ndarray, polyline: np.ndarray) -> float:
    poly = np.asarray(polyline, dtype=float)
    if len(poly) == 1:
        return float(np.linalg.norm(poly[0] - p_xy))
    return min(
        _point_segment_distance(p_xy, poly[i], poly[i + 1])
        for i in range(len(poly) - 1)
    )


def link_instances_to_segments(
    instances: list[InstanceNode], segments: list[Segment]
) -> dict[int, int]:
    """Nearest segment polyline per instance centroid; ties -> lowest id."""
    links = {}
    for node in instances:
        if not segments:
            break
        p_xy = node.centroid[:2]
        best = min(segments, key=lambda s: (polyline_distance(p_xy, s.polyline), s.id))
        links[node.id] = best.id
    return links


@dataclass
class AssemblyConfig:
    voxel: float = 0.2
    node_radius: float = 10.0


def assemble(
    omap: ObjectMap,
    lg: LaneGraph | None,
    catalog: ClassCatalog,
    cfg: AssemblyConfig | None = None,
    labeler: RelationLabeler | None = None,
) -> HierarchicalGraph:
    """Build all five layers plus cross-layer links.

    An empty object map or missing lane graph yields a partial graph with
    the corresponding layers empty.
    """
    cfg = cfg or AssemblyConfig()
    ids = sorted(omap.objects)
    if ids:
        class_ids = classify_objects(
            np.array([omap.objects[i].embedding for i in ids]), catalog
        )
    else:
        class_ids = np.zeros(0, dtype=int)
    cls_of = {oid: int(c) for oid, c in zip(ids, class_ids)}
    points, inst_ids, pt_cls = build_point_cloud_layer(omap, cfg.voxel, cls_of)

    instances = []
    for oid in ids:
        m = omap.objects[oid]
        instances.append(InstanceNode(
            id=oid,
            centroid=np.array(m.centroid, dtype=float),
            aabb=m.aabb,
            caption=m.caption,
            embedding=np.array(m.embedding, dtype=float),
            class_id=cls_of[oid],
            obs_count=m.obs_count,
        ))
    edges = build_instance_layer(instances, labeler)
    segments = build_segment_layer(lg, cfg.node_radius) if lg is not None else []
    links = link_instances_to_segments(instances, segments)
    return HierarchicalGraph(
        points=points,
        point_instance_ids=inst_ids,
        point_class_ids=pt_cls,
        lane_graph=lg,
        instances=instances,
        instance_edges=edges,
        segments=segments,
        instance_segment=links,
        class_names=list(catalog.names),
    )


# ---------------------------------------------------------------------------
# validation


def validate(h: HierarchicalGraph) -> list[str]:
    """Invariant check shared by assemble and apply_patch; returns a list of
    violations (empty means the graph is consistent)."""
    problems = []
    inst_ids = {n.id for n in h.instances}
    if len(inst_ids) != len(h.instances):
        problems.append("duplicate instance ids")
    stray = set(np.unique(h.point_instance_ids)) - inst_ids
    if stray:
        problems.append(f"points reference unknown instances {sorted(stray)}")
    for n in h.instances:
        if abs(np.linalg.norm(n.embedding) - 1.0) > 1e-6:
            problems.append(f"instance {n.id}: embedding not unit norm")
        pts = h.instance_points(n.id)
        if len(pts) == 0:
            problems.append(f"instance {n.id}: no points in point cloud layer")
            continue
        box = AxisAlignedBox.of_points(pts)
        lo, hi = np.array(n.aabb.min), np.array(n.aabb.max)
        # 1 mm slack: the point layer is stored as float32 in the container
        if np.any(np.array(box.min) < lo - 1e-3) or np.any(np.array(box.max) > hi + 1e-3):
            problems.append(f"instance {n.id}: cached aabb inconsistent with points")
    if h.segments:
        for n in h.instances:
            if n.id not in h.instance_segment:
                problems.append(f"instance {n.id}: missing segment link")
        seg_ids = {s.id for s in h.segments}
        bad = set(h.instance_segment.values()) - seg_ids
        if bad:
            problems.append(f"segment links to unknown segments {sorted(bad)}")
        if set(h.environment_segments) != seg_ids:
            problems.append("environment node does not link every segment")
    for a, b, _ in h.instance_edges:
        if a not in inst_ids or b not in inst_ids:
            problems.append(f"instance edge ({a},{b}) references unknown instance")
    if len(h.instances) >= 1 and len(h.instance_edges) != len(h.instances) - 1:
        problems.append(
            f"instance MST has {len(h.instance_edges)} edges for "
            f"{len(h.instances)} nodes"
        )
    return problems


# ---------------------------------------------------------------------------
# persistence


def _blob(blobs: list[bytes], index: dict, name: str, arr: np.ndarray, dtype: str):
    data = np.ascontiguousarray(arr).astype(dtype).tobytes()
    offset = sum(len(b) for b in blobs)
    blobs.append(data)
    index[name] = {
        "offset": offset,
        "length": len(data),
        "dtype": dtype,
        "shape": list(arr.shape),
    }


def save(h: HierarchicalGraph, path: Path):
    """Write the container: <path>/index.json + <path>/data.bin."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs: list[bytes] = []
    blob_index: dict = {}
    _blob(blobs, blob_index, "points", h.points, "<f4")
    _blob(blobs, blob_index, "point_instance_ids", h.point_instance_ids, "<u4")
    _blob(blobs, blob_index, "point_class_ids", h.point_class_ids, "<u4")
    if h.instances:
        emb = np.array([n.embedding for n in h.instances])
        _blob(blobs, blob_index, "embeddings", emb, "<f4")

    doc = {
        "format": FORMAT_VERSION,
        "class_names": h.class_names,
        "blobs": blob_index,
        "instances": [
            {
                "id": n.id,
                "centroid": [float(x) for x in n.centroid],
                "aabb_min": [float(x) for x in n.aabb.min],
                "aabb_max": [float(x) for x in n.aabb.max],
                "caption": n.caption,
                "class_id": n.class_id,
                "obs_count": n.obs_count,
            }
            for n in h.instances
        ],
        "instance_edges": [[a, b, rel] for a, b, rel in h.instance_edges],
        "segments": [
            {
                "id": s.id,
                "kind": s.kind,
                "polyline": [[float(x), float(y)] for x, y in s.polyline],
                "centroid": [float(x) for x in s.centroid],
                "lane_node": s.lane_node,
                "edge": list(s.edge) if s.edge else None,
            }
            for s in h.segments
        ],
        "instance_segment": {str(k): v for k, v in sorted(h.instance_segment.items())},
        "lane_graph": json.loads(h.lane_graph.to_json()) if h.lane_graph else None,
    }
    (path / "data.bin").write_bytes(b"".join(blobs))
    (path / "index.json").write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
    )


def _read_blob(data: bytes, entry: dict) -> np.ndarray:
    raw = data[entry["offset"]:entry["offset"] + entry["length"]]
    if len(raw) != entry["length"]:
        raise PersistenceError("truncated data.bin")
    return np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])


def load(path: Path) -> HierarchicalGraph:
    path = Path(path)
    try:
        doc = json.loads((path / "index.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise PersistenceError(f"cannot read map container at {path}: {e}") from e
    found = doc.get("format")
    if found != FORMAT_VERSION:
        raise PersistenceError(
            f"format version mismatch: expected {FORMAT_VERSION!r}, found {found!r}"
        )
    data = (path / "data.bin").read_bytes()
    blobs = doc["blobs"]
    points = _read_blob(data, blobs["points"]).astype(float)
    inst_ids = _read_blob(data, blobs["point_instance_ids"]).astype(np.int64)
    cls_ids = _read_blob(data, blobs["point_class_ids"]).astype(np.int64)
    embeddings = (
        _read_blob(data, blobs["embeddings"]).astype(float)
        if "embeddings" in blobs else np.zeros((0, 0))
    )
    instances = []
    for i, rec in enumerate(doc["instances"]):
        emb = embeddings[i]
        norm = float(np.linalg.norm(emb))
        instances.append(InstanceNode(
            id=rec["id"],
            centroid=np.array(rec["centroid"], dtype=float),
            aabb=AxisAlignedBox(tuple(rec["aabb_min"]), tuple(rec["aabb_max"])),
            caption=rec["caption"],
            embedding=emb / norm if norm else emb,
            class_id=rec["class_id"],
            obs_count=rec["obs_count"],
        ))
    segments = [
        Segment(s["id"], s["kind"], np.array(s["polyline"], dtype=float),
                np.array(s["centroid"], dtype=float),
                lane_node=s.get("lane_node"),
                edge=tuple(s["edge"]) if s.get("edge") else None)
        for s in doc["segments"]
    ]
    lg = None
    if doc["lane_graph"] is not None:
        lg = LaneGraph.from_json(json.dumps(doc["lane_graph"]))
    return HierarchicalGraph(
        points=points,
        point_instance_ids=inst_ids,
        point_class_ids=cls_ids,
        lane_graph=lg,
        instances=instances,
        instance_edges=[(a, b, rel) for a, b, rel in doc["instance_edges"]],
        segments=segments,
        instance_segment={int(k): v for k, v in doc["instance_segment"].items()},
        class_names=doc["class_names"],
    )
