"""Geometry and graph primitives shared by every pipeline stage.

Everything here is a pure function over numpy arrays; all tie-breaking is
deterministic so repeated runs produce identical maps.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

# Zero-volume boxes (signs, poles) get a 1 cm per-axis floor so IoU stays usable.
AABB_FLOOR = 0.01


class GraphError(ValueError):
    """Raised for structurally invalid graph inputs."""


@dataclass(frozen=True)
class AxisAlignedBox:
    """Axis-aligned 3D box, min/max corners in meters."""

    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self):
        if any(lo > hi for lo, hi in zip(self.min, self.max)):
            raise ValueError(f"box min {self.min} exceeds max {self.max}")

    @staticmethod
    def of_points(points: np.ndarray) -> "AxisAlignedBox":
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("cannot bound an empty point set")
        return AxisAlignedBox(tuple(pts.min(axis=0)), tuple(pts.max(axis=0)))


@dataclass
class WeightedGraph:
    """Undirected weighted graph; edges are (u, v, weight >= 0)."""

    node_count: int
    edges: list[tuple[int, int, float]]

    def __post_init__(self):
        seen = set()
        for u, v, w in self.edges:
            if u == v:
                raise GraphError(f"self-loop at node {u}")
            if w < 0:
                raise GraphError(f"negative weight on edge ({u},{v})")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise GraphError(f"duplicate edge ({u},{v})")
            seen.add(key)
            if not (0 <= u < self.node_count and 0 <= v < self.node_count):
                raise GraphError(f"edge ({u},{v}) out of range")


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density-based clustering; returns one label per point, noise = -1.

    Cluster ids are contiguous from 0 in order of the first core point
    encountered in input order.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n == 0:
        return np.empty(0, dtype=int)
    if pts.ndim == 1:
        pts = pts[:, None]

    tree = cKDTree(pts)
    neighborhoods = tree.query_ball_point(pts, r=eps)  # inclusive: dist <= eps
    core = np.array([len(nb) >= min_pts for nb in neighborhoods])

    labels = np.full(n, -2, dtype=int)  # -2 = unvisited
    cluster = 0
    for i in range(n):
        if labels[i] != -2:
            continue
        if not core[i]:
            labels[i] = -1
            continue
        labels[i] = cluster
        frontier = [j for j in neighborhoods[i] if j != i]
        k = 0
        while k < len(frontier):
            j = frontier[k]
            k += 1
            if labels[j] == -1:
                labels[j] = cluster  # noise becomes a border point
            if labels[j] != -2:
                continue
            labels[j] = cluster
            if core[j]:
                frontier.extend(m for m in neighborhoods[j] if labels[m] in (-2, -1))
        cluster += 1
    return labels


def _floored_box(b: AxisAlignedBox) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array(b.min, dtype=float)
    hi = np.array(b.max, dtype=float)
    thin = (hi - lo) < AABB_FLOOR
    c = (lo + hi) / 2.0
    lo = np.where(thin, c - AABB_FLOOR / 2.0, lo)
    hi = np.where(thin, c + AABB_FLOOR / 2.0, hi)
    return lo, hi


def aabb_iou(a: AxisAlignedBox, b: AxisAlignedBox) -> float:
    """Intersection-over-union of two axis-aligned boxes, in [0, 1]."""
    alo, ahi = _floored_box(a)
    blo, bhi = _floored_box(b)
    inter = np.clip(np.minimum(ahi, bhi) - np.maximum(alo, blo), 0.0, None)
    vol_i = float(np.prod(inter))
    vol_a = float(np.prod(ahi - alo))
    vol_b = float(np.prod(bhi - blo))
    union = vol_a + vol_b - vol_i
    return vol_i / union if union > 0 else 0.0


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm input")
    return float(np.dot(u, v) / (nu * nv))


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """One centroid per occupied voxel, output ordered by ascending voxel index."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return pts
    idx = np.floor(pts / voxel).astype(np.int64)
    # Lexicographic voxel index: sort by (x, y, z) voxel coordinates.
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
    idx_sorted = idx[order]
    pts_sorted = pts[order]
    boundaries = np.any(np.diff(idx_sorted, axis=0) != 0, axis=1)
    starts = np.concatenate(([0], np.nonzero(boundaries)[0] + 1))
    ends = np.concatenate((starts[1:], [len(pts)]))
    out = np.empty((len(starts), 3), dtype=float)
    for k, (s, e) in enumerate(zip(starts, ends)):
        out[k] = pts_sorted[s:e].mean(axis=0)
    return out


def minimum_spanning_tree(g: WeightedGraph) -> list[tuple[int, int, float]]:
    """Kruskal MST; ties broken by (weight, u, v) with u < v.

    Raises GraphError on disconnected input, listing the components.
    """
    n = g.node_count
    if n == 0:
        return []
    edges = sorted((w, min(u, v), max(u, v)) for u, v, w in g.edges)
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    out = []
    for w, u, v in edges:
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
            out.append((u, v, w))
    if len(out) != n - 1:
        comps: dict[int, list[int]] = {}
        for i in range(n):
            comps.setdefault(find(i), []).append(i)
        raise GraphError(f"graph disconnected; components: {sorted(comps.values())}")
    return out


def shortest_path(g: WeightedGraph, src: int, dst: int):
    """Dijkstra with deterministic tie-break by lexicographically smallest path.

    Returns (path, cost) or (None, inf) when dst is unreachable.
    """
    n = g.node_count
    if not (0 <= src < n and 0 <= dst < n):
        raise GraphError(f"node out of range: src={src} dst={dst} n={n}")
    adj: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for u, v, w in g.edges:
        adj[u].append((v, w))
        adj[v].append((u, w))

    best: dict[int, tuple[float, tuple[int, ...]]] = {}
    heap = [(0.0, (src,))]
    while heap:
        cost, path = heapq.heappop(heap)
        node = path[-1]
        if node in best and best[node] <= (cost, path):
            continue
        best[node] = (cost, path)
        if node == dst:
            return list(path), cost
        for nxt, w in sorted(adj[node]):
            if nxt in path:
                continue
            cand = (cost + w, path + (nxt,))
            if nxt not in best or cand < best[nxt]:
                heapq.heappush(heap, cand)
    return None, float("inf")
