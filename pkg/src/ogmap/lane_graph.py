"""Lane graph extraction from historical trajectories.

Trajectory points are projected to 2D; a local disfluency measure (the mean
folded pairwise angle of neighborhood vectors) flags corners and
intersections, while a near-zero unfolded mean angle flags trajectory
breakpoints. Flagged points are clustered into lane nodes, and the
trajectory sections between node-owned stretches become edges.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import dbscan
from .ingest import Pose

INTERIOR_KINDS = ("intersection", "t_intersection", "l_intersection")


class LaneGraphError(ValueError):
    pass


@dataclass
class DisfluencyConfig:
    radius: float = 5.0            # neighborhood radius R, meters
    disfluency_threshold: float = 0.3   # radians; above = corner/intersection
    breakpoint_tolerance: float = 0.15  # radians; mean angle below = endpoint
    cluster_eps: float = 5.0
    cluster_min_pts: int = 3
    node_radius: float = 10.0      # section of trajectory owned by a node
    max_gap: float = 10.0          # larger inter-sample steps split the trajectory
    smoothing_window: int = 5      # odd moving-average window; 1 = off

    def __post_init__(self):
        for name in ("radius", "disfluency_threshold", "breakpoint_tolerance",
                     "cluster_eps", "node_radius", "max_gap"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.cluster_min_pts < 1 or self.smoothing_window < 1:
            raise ValueError("cluster_min_pts and smoothing_window must be >= 1")


@dataclass
class LaneNode:
    position: np.ndarray           # (2,)
    kind: str
    members: list[int]             # trajectory point indices
    from_disfluency: bool = False


@dataclass
class LaneEdge:
    u: int
    v: int
    polyline: np.ndarray           # (n, 2), n >= 2
    length: float


@dataclass
class LaneGraph:
    nodes: list[LaneNode]
    edges: list[LaneEdge]

    def degree(self, node_idx: int) -> int:
        return sum((e.u == node_idx) + (e.v == node_idx) for e in self.edges)

    def to_json(self) -> str:
        doc = {
            "nodes": [
                {"position": [float(x) for x in n.position], "kind": n.kind}
                for n in self.nodes
            ],
            "edges": [
                {
                    "u": e.u,
                    "v": e.v,
                    "length": float(e.length),
                    "polyline": [[float(x), float(y)] for x, y in e.polyline],
                }
                for e in self.edges
            ],
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @staticmethod
    def from_json(text: str) -> "LaneGraph":
        doc = json.loads(text)
        nodes = [
            LaneNode(np.array(n["position"], dtype=float), n["kind"], [])
            for n in doc["nodes"]
        ]
        edges = [
            LaneEdge(e["u"], e["v"], np.array(e["polyline"], dtype=float), e["length"])
            for e in doc["edges"]
        ]
        return LaneGraph(nodes, edges)

    def save(self, path: Path):
        Path(path).write_text(self.to_json() + "\n")

    @staticmethod
    def load(path: Path) -> "LaneGraph":
        return LaneGraph.from_json(Path(path).read_text())


def arc_length(polyline: np.ndarray) -> float:
    pts = np.asarray(polyline, dtype=float)
    if len(pts) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def project_trajectory(poses: list[Pose]) -> np.ndarray:
    """Drop the vertical axis and collapse consecutive near-duplicates (<1 cm)."""
    if len(poses) < 2:
        raise LaneGraphError("need at least 2 poses")
    xy = np.array([[p.translation[0], p.translation[1]] for p in poses])
    keep = [0]
    for i in range(1, len(xy)):
        if np.linalg.norm(xy[i] - xy[keep[-1]]) >= 0.01:
            keep.append(i)
    out = xy[keep]
    if len(out) < 2:
        raise LaneGraphError("trajectory has fewer than 2 distinct points")
    return out


def split_chains(pts: np.ndarray, max_gap: float) -> list[np.ndarray]:
    """Index ranges of temporally contiguous stretches (gaps split them)."""
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    breaks = np.nonzero(steps > max_gap)[0] + 1
    bounds = np.concatenate(([0], breaks, [len(pts)]))
    return [np.arange(s, e) for s, e in zip(bounds[:-1], bounds[1:])]


def smooth_trajectory(pts: np.ndarray, window: int, max_gap: float) -> np.ndarray:
    """Per-chain moving average; window is clipped at chain boundaries."""
    if window <= 1:
        return np.asarray(pts, dtype=float)
    pts = np.asarray(pts, dtype=float)
    out = pts.copy()
    half = window // 2
    for chain in split_chains(pts, max_gap):
        lo, hi = chain[0], chain[-1]
        for i in chain:
            if i - lo >= half and hi - i >= half:
                out[i] = pts[i - half:i + half + 1].mean(axis=0)
            else:
                # near a chain end a clipped average would drag the point
                # inward; a local line fit denoises without that bias
                s = max(lo, min(i - half, hi - window + 1))
                e = min(hi, s + window - 1)
                t = np.arange(s, e + 1, dtype=float)
                if len(t) < 2:
                    continue
                for axis in range(pts.shape[1]):
                    b, a = np.polyfit(t, pts[s:e + 1, axis], 1)
                    out[i, axis] = a + b * i
    return out


def local_disfluency(pts: np.ndarray, n: int, cfg: DisfluencyConfig):
    """Disfluency at trajectory point n.

    Returns (lambda, mean_theta, neighbor_count); the angles are NaN when
    fewer than 2 neighborhood vectors exist.
    """
    pts = np.asarray(pts, dtype=float)
    diff = pts - pts[n]
    dist = np.linalg.norm(diff, axis=1)
    sel = (dist < cfg.radius) & (np.arange(len(pts)) != n) & (dist > 0)
    vecs = diff[sel]
    k = len(vecs)
    if k < 2:
        return math.nan, math.nan, k
    unit = vecs / np.linalg.norm(vecs, axis=1)[:, None]
    gram = np.clip(unit @ unit.T, -1.0, 1.0)
    iu = np.triu_indices(k, 1)
    thetas = np.arccos(gram[iu])
    folded = np.minimum(np.abs(thetas), np.abs(thetas - math.pi))
    return float(folded.mean()), float(thetas.mean()), k


def detect_nodes(pts: np.ndarray, cfg: DisfluencyConfig | None = None) -> list[LaneNode]:
    """Cluster high-disfluency points into interior nodes and one-sided
    (mean angle near zero) points into breakpoint nodes."""
    cfg = cfg or DisfluencyConfig()
    pts = np.asarray(pts, dtype=float)
    lam = np.full(len(pts), math.nan)
    mean_theta = np.full(len(pts), math.nan)
    for i in range(len(pts)):
        lam[i], mean_theta[i], _ = local_disfluency(pts, i, cfg)

    nodes = []
    high = np.nonzero(lam > cfg.disfluency_threshold)[0]
    if len(high):
        labels = dbscan(pts[high], cfg.cluster_eps, cfg.cluster_min_pts)
        for cid in range(labels.max() + 1 if len(labels) else 0):
            members = high[labels == cid]
            nodes.append(LaneNode(
                position=pts[members].mean(axis=0),
                kind="l_intersection",  # provisional; degree decides later
                members=list(map(int, members)),
                from_disfluency=True,
            ))

    taken = set(high)
    bp = np.nonzero((mean_theta < cfg.breakpoint_tolerance)
                    & ~np.isnan(mean_theta))[0]
    bp = np.array([i for i in bp if i not in taken], dtype=int)
    if len(bp):
        # min_pts 1: a trajectory end contributes only one or two candidate
        # points, which must still become a node
        labels = dbscan(pts[bp], cfg.cluster_eps, 1)
        for cid in range(labels.max() + 1):
            members = bp[labels == cid]
            nodes.append(LaneNode(
                position=pts[members].mean(axis=0),
                kind="breakpoint",
                members=list(map(int, members)),
                from_disfluency=False,
            ))
    nodes.sort(key=lambda nd: min(nd.members))
    return nodes


def _classify(graph: LaneGraph):
    for i, node in enumerate(graph.nodes):
        deg = graph.degree(i)
        if deg >= 4:
            node.kind = "intersection"
        elif deg == 3:
            node.kind = "t_intersection"
        elif deg == 2 and node.from_disfluency:
            node.kind = "l_intersection"
        else:
            node.kind = "breakpoint"


def build_lane_graph(
    pts: np.ndarray, nodes: list[LaneNode], cfg: DisfluencyConfig | None = None
) -> LaneGraph:
    """Assemble edges from trajectory runs between node-owned sections.

    Duplicate edges between a node pair keep the shortest polyline; node
    kinds are then assigned from graph degree.
    """
    cfg = cfg or DisfluencyConfig()
    pts = np.asarray(pts, dtype=float)
    if not nodes:
        if np.linalg.norm(pts[0] - pts[-1]) < cfg.max_gap:
            loop_node = LaneNode(pts[0].copy(), "breakpoint", [0])
            poly = np.vstack([pts, pts[:1]])
            return LaneGraph([loop_node],
                             [LaneEdge(0, 0, poly, arc_length(poly))])
        raise LaneGraphError("no lane nodes detected on an open trajectory")

    positions = np.array([n.position for n in nodes])
    d = np.linalg.norm(pts[:, None, :] - positions[None, :, :], axis=2)
    nearest = d.argmin(axis=1)
    owner = np.where(d[np.arange(len(pts)), nearest] <= cfg.node_radius, nearest, -1)

    best: dict[tuple[int, int], LaneEdge] = {}
    for chain in split_chains(pts, cfg.max_gap):
        last: int | None = None
        gap: list[np.ndarray] = []
        for i in chain:
            o = int(owner[i])
            if o == -1:
                if last is not None:
                    gap.append(pts[i])
                continue
            if last is not None and o != last:
                poly = np.vstack([nodes[last].position[None, :]]
                                 + [g[None, :] for g in gap]
                                 + [nodes[o].position[None, :]])
                if last > o:
                    poly = poly[::-1]
                edge = LaneEdge(min(last, o), max(last, o), poly, arc_length(poly))
                key = (edge.u, edge.v)
                if key not in best or edge.length < best[key].length:
                    best[key] = edge
            last = o
            gap = []

    graph = LaneGraph(nodes, sorted(best.values(), key=lambda e: (e.u, e.v)))
    _classify(graph)
    return graph


def extract_lane_graph(poses: list[Pose], cfg: DisfluencyConfig | None = None) -> LaneGraph:
    """End-to-end: project, smooth, detect nodes, assemble the graph."""
    cfg = cfg or DisfluencyConfig()
    pts = project_trajectory(poses)
    pts = smooth_trajectory(pts, cfg.smoothing_window, cfg.max_gap)
    nodes = detect_nodes(pts, cfg)
    return build_lane_graph(pts, nodes, cfg)
