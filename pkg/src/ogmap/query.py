"""Read/interaction surfaces over an assembled hierarchical graph:
open-vocabulary retrieval, segmentation export, structured localization,
lane-graph path planning, and copy-on-write map patches."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import AxisAlignedBox, WeightedGraph, shortest_path
from .hierarchy import (
    HierarchicalGraph,
    build_instance_layer,
    link_instances_to_segments,
)
from .ingest import normalized


class QueryError(ValueError):
    pass


@dataclass
class RetrievalResult:
    ranked: list[tuple[int, float, str]]  # (instance id, score, caption)
    k: int

    def ids(self) -> list[int]:
        return [r[0] for r in self.ranked]

    def to_json(self) -> str:
        return json.dumps({
            "k": self.k,
            "results": [
                {"id": i, "score": s, "caption": c} for i, s, c in self.ranked
            ],
        }, sort_keys=True)


def retrieve(h: HierarchicalGraph, query_embedding: np.ndarray, k: int) -> RetrievalResult:
    """Top-k instances by embedding cosine; ties break on instance id."""
    q = np.asarray(query_embedding, dtype=float)
    if h.instances and q.shape != h.instances[0].embedding.shape:
        raise QueryError(
            f"query dim {q.shape} != map dim {h.instances[0].embedding.shape}"
        )
    q = normalized(q)
    scored = [
        (n.id, float(np.dot(q, n.embedding)), n.caption) for n in h.instances
    ]
    scored.sort(key=lambda r: (-r[1], r[0]))
    return RetrievalResult(scored[:k], k)


def semantic_segmentation(h: HierarchicalGraph):
    """Labeled point cloud plus per-class point counts."""
    counts = {
        name: int((h.point_class_ids == ci).sum())
        for ci, name in enumerate(h.class_names)
    }
    return h.points, h.point_class_ids, counts


def locate(
    h: HierarchicalGraph,
    segment_kind: str | None,
    constraints: list[tuple[str, int]],
) -> list[tuple[int, int]]:
    """Rank segments of a kind by how many instance-layer relations satisfy
    the (relation label, class id) constraints.

    A constraint is satisfied at a segment once per instance edge with that
    relation whose one endpoint links to the segment and whose other
    endpoint has the class.
    """
    cls_of = {n.id: n.class_id for n in h.instances}
    results = []
    for seg in h.segments:
        if segment_kind is not None and seg.kind != segment_kind:
            continue
        linked = {i for i, s in h.instance_segment.items() if s == seg.id}
        score = 0
        for rel, cls in constraints:
            for a, b, label in h.instance_edges:
                if label != rel:
                    continue
                if (a in linked and cls_of.get(b) == cls) or \
                   (b in linked and cls_of.get(a) == cls):
                    score += 1
        results.append((seg.id, score))
    results.sort(key=lambda r: (-r[1], r[0]))
    return results


def _segment_to_lane_node(h: HierarchicalGraph, seg_id: int) -> int:
    seg = next((s for s in h.segments if s.id == seg_id), None)
    if seg is None:
        raise QueryError(f"unknown segment id {seg_id}")
    if seg.lane_node is not None:
        return seg.lane_node
    if seg.edge is not None:
        u, v = seg.edge
        pu = h.lane_graph.nodes[u].position
        pv = h.lane_graph.nodes[v].position
        du = float(np.linalg.norm(pu - seg.centroid))
        dv = float(np.linalg.norm(pv - seg.centroid))
        if du < dv or (du == dv and u < v):
            return u
        return v
    raise QueryError(f"segment {seg_id} has no lane-graph anchor")


def resolve_endpoint(h: HierarchicalGraph, spec: str | int) -> int:
    """'S<id>' picks a segment (mapped to its lane node), 'N<idx>' or a bare
    integer picks a lane node directly."""
    if h.lane_graph is None or not h.lane_graph.nodes:
        raise QueryError("map has no lane graph")
    if isinstance(spec, int):
        idx = spec
    else:
        s = str(spec).strip()
        if s.upper().startswith("S"):
            return _segment_to_lane_node(h, int(s[1:]))
        idx = int(s[1:]) if s.upper().startswith("N") else int(s)
    if not (0 <= idx < len(h.lane_graph.nodes)):
        raise QueryError(f"lane node {idx} out of range")
    return idx


def plan_path(h: HierarchicalGraph, start: str | int, goal: str | int):
    """Shortest path over lane-graph edges weighted by polyline length.

    Returns (node index path, total length) or (None, inf) when no route
    exists.
    """
    src = resolve_endpoint(h, start)
    dst = resolve_endpoint(h, goal)
    lg = h.lane_graph
    edges = [(e.u, e.v, e.length) for e in lg.edges if e.u != e.v]
    g = WeightedGraph(len(lg.nodes), edges)
    return shortest_path(g, src, dst)


# ---------------------------------------------------------------------------
# patches


@dataclass
class MapPatch:
    op: str                      # remove | replace_caption | replace_points
    target: int
    caption: str | None = None
    embedding: np.ndarray | None = None
    points: np.ndarray | None = None

    def __post_init__(self):
        if self.op not in ("remove", "replace_caption", "replace_points"):
            raise ValueError(f"unknown patch op {self.op!r}")


def apply_patch(h: HierarchicalGraph, patch: MapPatch) -> HierarchicalGraph:
    """Copy-on-write map update; the input graph is left untouched.

    Removal drops the instance with its points, instance-layer edges, and
    cross-layer links, then recomputes the MST. Replacements update the
    field and every cache derived from it.
    """
    if all(n.id != patch.target for n in h.instances):
        raise QueryError(f"unknown target instance {patch.target}")
    out = copy.deepcopy(h)

    if patch.op == "remove":
        keep = out.point_instance_ids != patch.target
        out.points = out.points[keep]
        out.point_class_ids = out.point_class_ids[keep]
        out.point_instance_ids = out.point_instance_ids[keep]
        out.instances = [n for n in out.instances if n.id != patch.target]
        out.instance_segment.pop(patch.target, None)
        out.instance_edges = build_instance_layer(out.instances)
        return out

    node = out.instance(patch.target)
    if patch.op == "replace_caption":
        if patch.caption is None:
            raise QueryError("replace_caption needs a caption")
        node.caption = patch.caption
        if patch.embedding is not None:
            node.embedding = normalized(np.asarray(patch.embedding, dtype=float))
        else:
            from .synthetic import hash_embedding
            node.embedding = hash_embedding(patch.caption, len(node.embedding))
        return out

    # replace_points
    if patch.points is None:
        raise QueryError("replace_points needs points")
    new_pts = np.asarray(patch.points, dtype=float).reshape(-1, 3)
    if len(new_pts) == 0:
        raise QueryError("replace_points needs a non-empty point set")
    keep = out.point_instance_ids != patch.target
    out.points = np.vstack([out.points[keep], new_pts])
    out.point_class_ids = np.concatenate([
        out.point_class_ids[keep],
        np.full(len(new_pts), node.class_id, dtype=out.point_class_ids.dtype),
    ])
    out.point_instance_ids = np.concatenate([
        out.point_instance_ids[keep],
        np.full(len(new_pts), patch.target, dtype=out.point_instance_ids.dtype),
    ])
    node.aabb = AxisAlignedBox.of_points(new_pts)
    node.centroid = new_pts.mean(axis=0)
    out.instance_edges = build_instance_layer(out.instances)
    if out.segments:
        out.instance_segment.update(
            link_instances_to_segments([node], out.segments)
        )
    return out


# ---------------------------------------------------------------------------
# labeled-cloud export


def write_labeled_cloud(
    path: Path,
    points: np.ndarray,
    class_ids: np.ndarray,
    class_names: list[str],
    colors: list[tuple[int, int, int]] | None = None,
):
    """Binary float32 xyz + uint16 class id per point, JSON header sidecar."""
    path = Path(path)
    n = len(points)
    rec = np.empty(n, dtype=[("xyz", "<f4", (3,)), ("cls", "<u2")])
    rec["xyz"] = np.asarray(points, dtype="<f4")
    rec["cls"] = np.asarray(class_ids, dtype="<u2")
    path.write_bytes(rec.tobytes())
    header = {
        "count": n,
        "class_list": list(class_names),
        "colors": [list(c) for c in (colors or [])],
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(header, sort_keys=True) + "\n"
    )


def read_labeled_cloud(path: Path):
    path = Path(path)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = path.read_bytes()
    n = header["count"]
    rec = np.frombuffer(raw, dtype=[("xyz", "<f4", (3,)), ("cls", "<u2")], count=n)
    return rec["xyz"].astype(float), rec["cls"].astype(np.int64), header["class_list"]
