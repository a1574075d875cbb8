"""Incremental association and fusion of per-frame observations into the
object-centric map.

Association scores each observation against nearby map objects with a
weighted sum of bounding-box IoU, TF-IDF caption cosine, and embedding
cosine, then greedily fuses above a threshold or spawns a new object.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from math import log
from typing import Callable

import numpy as np

from .geom import AxisAlignedBox, aabb_iou, cosine_similarity
from .ingest import normalized
from .projection import ObjectObservation

CaptionMerger = Callable[[str, str], str]

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


class CaptionCorpus:
    """Document-frequency statistics for smoothed TF-IDF caption vectors."""

    def __init__(self, documents: list[str]):
        self.n_docs = len(documents)
        self.df: dict[str, int] = {}
        for doc in documents:
            for tok in set(tokenize(doc)):
                self.df[tok] = self.df.get(tok, 0) + 1

    def idf(self, token: str) -> float:
        return log((1 + self.n_docs) / (1 + self.df.get(token, 0))) + 1.0

    def vector(self, text: str) -> dict[str, float]:
        vec: dict[str, float] = {}
        for tok in tokenize(text):
            vec[tok] = vec.get(tok, 0.0) + 1.0
        return {tok: tf * self.idf(tok) for tok, tf in vec.items()}


def caption_similarity(c_i: str, c_j: str, corpus: CaptionCorpus) -> float:
    """Cosine of smoothed TF-IDF vectors, in [0, 1]."""
    u = corpus.vector(c_i)
    v = corpus.vector(c_j)
    dot = sum(w * v[t] for t, w in u.items() if t in v)
    nu = sum(w * w for w in u.values()) ** 0.5
    nv = sum(w * w for w in v.values()) ** 0.5
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return dot / (nu * nv)


def merge_captions(c_new: str, c_old: str, merger: CaptionMerger | None = None) -> str:
    if merger is not None:
        return merger(c_new, c_old)
    return default_caption_merger(c_new, c_old)


def default_caption_merger(c_new: str, c_old: str) -> str:
    """Keep the longer caption; append the shorter when they barely overlap.

    Overlap is token-set Jaccard; below 0.5 the shorter caption is appended
    after "; ". Length tie breaks lexicographically (smaller string counts
    as "longer" side of the join).
    """
    a, b = sorted((c_new, c_old), key=lambda c: (-len(c), c))
    if a == b:
        return a
    ta, tb = set(tokenize(a)), set(tokenize(b))
    union = ta | tb
    jaccard = len(ta & tb) / len(union) if union else 1.0
    if jaccard < 0.5:
        return f"{a}; {b}"
    return a


@dataclass
class SimilarityWeights:
    """Weights of the geometric / caption / feature terms plus the
    association threshold."""

    w_geo: float = 0.4
    w_cap: float = 0.2
    w_fea: float = 0.4
    threshold: float = 0.6

    def __post_init__(self):
        if min(self.w_geo, self.w_cap, self.w_fea) < 0:
            raise ValueError("weights must be non-negative")
        total = self.w_geo + self.w_cap + self.w_fea
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {total}")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must be in (0,1), got {self.threshold}")


@dataclass
class MapObject:
    """A fused instance: point set, caption, embedding, observation count."""

    id: int
    points: np.ndarray
    caption: str
    embedding: np.ndarray          # unit-norm, mean of observation embeddings
    obs_count: int
    aabb: AxisAlignedBox
    centroid: np.ndarray
    embedding_sum: np.ndarray = None  # running sum, keeps fusion order-free

    def __post_init__(self):
        if self.embedding_sum is None:
            self.embedding_sum = np.array(self.embedding, dtype=float)

    @staticmethod
    def from_observation(obj_id: int, o: ObjectObservation) -> "MapObject":
        pts = np.asarray(o.points_map_frame, dtype=float)
        return MapObject(
            id=obj_id,
            points=pts,
            caption=o.caption,
            embedding=normalized(np.array(o.embedding, dtype=float)),
            obs_count=1,
            aabb=AxisAlignedBox.of_points(pts),
            centroid=pts.mean(axis=0),
        )


def observation_aabb(o: ObjectObservation) -> AxisAlignedBox:
    return AxisAlignedBox.of_points(o.points_map_frame)


def overall_similarity(
    o: ObjectObservation,
    m: MapObject,
    w: SimilarityWeights,
    corpus: CaptionCorpus,
) -> float:
    """Weighted sum of the three component similarities, in [0, 1].

    Negative embedding cosines clamp to 0 so the result stays in range.
    """
    geo = aabb_iou(observation_aabb(o), m.aabb)
    cap = caption_similarity(o.caption, m.caption, corpus)
    fea = max(0.0, cosine_similarity(o.embedding, m.embedding))
    return w.w_geo * geo + w.w_cap * cap + w.w_fea * fea


def fuse(o: ObjectObservation, m: MapObject, merger: CaptionMerger | None = None) -> MapObject:
    """Fold an observation into a map object (in place; returns the object).

    The embedding becomes the running mean of all fused observation
    embeddings, re-normalized; the point sets concatenate; the caption goes
    through the merger.
    """
    m.points = np.vstack([m.points, o.points_map_frame])
    m.embedding_sum = m.embedding_sum + np.asarray(o.embedding, dtype=float)
    m.embedding = normalized(m.embedding_sum.copy())
    m.obs_count += 1
    m.caption = merge_captions(o.caption, m.caption, merger)
    m.aabb = AxisAlignedBox.of_points(m.points)
    m.centroid = m.points.mean(axis=0)
    return m


class ObjectMap:
    """The incrementally built object map, gated by a uniform centroid grid."""

    def __init__(self, gating_radius: float = 30.0):
        self.objects: dict[int, MapObject] = {}
        self.gating_radius = gating_radius
        self._next_id = 0
        self._grid: dict[tuple[int, int, int], set[int]] = {}
        self._cell_of: dict[int, tuple[int, int, int]] = {}

    def __len__(self):
        return len(self.objects)

    def _cell(self, p: np.ndarray) -> tuple[int, int, int]:
        return tuple(np.floor(np.asarray(p) / self.gating_radius).astype(int))

    def _index(self, obj: MapObject):
        cell = self._cell(obj.centroid)
        old = self._cell_of.get(obj.id)
        if old == cell:
            return
        if old is not None:
            self._grid[old].discard(obj.id)
        self._grid.setdefault(cell, set()).add(obj.id)
        self._cell_of[obj.id] = cell

    def add(self, o: ObjectObservation) -> MapObject:
        obj = MapObject.from_observation(self._next_id, o)
        self._next_id += 1
        self.objects[obj.id] = obj
        self._index(obj)
        return obj

    def candidates_near(self, p: np.ndarray) -> list[MapObject]:
        """Map objects whose centroid is within the gating radius of p."""
        cx, cy, cz = self._cell(p)
        out = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for oid in self._grid.get((cx + dx, cy + dy, cz + dz), ()):
                        obj = self.objects[oid]
                        if np.linalg.norm(obj.centroid - p) <= self.gating_radius:
                            out.append(obj)
        return sorted(out, key=lambda m: m.id)

    def captions(self) -> list[str]:
        return [self.objects[i].caption for i in sorted(self.objects)]


def associate_and_integrate(
    frame_objs: list[ObjectObservation],
    omap: ObjectMap,
    w: SimilarityWeights | None = None,
    merger: CaptionMerger | None = None,
) -> ObjectMap:
    """Greedy per-frame association: each observation fuses into its best
    candidate above the threshold, otherwise starts a new object.

    Many-to-one within a frame is allowed; newly created objects are
    immediately eligible for later observations of the same frame.
    """
    w = w or SimilarityWeights()
    corpus = CaptionCorpus(omap.captions() + [o.caption for o in frame_objs])
    for o in frame_objs:
        obs_centroid = np.asarray(o.points_map_frame, dtype=float).mean(axis=0)
        best_obj = None
        best_phi = -1.0
        for m in omap.candidates_near(obs_centroid):
            phi = overall_similarity(o, m, w, corpus)
            if phi > best_phi:
                best_phi = phi
                best_obj = m
        if best_obj is not None and best_phi >= w.threshold:
            fuse(o, best_obj, merger)
            omap._index(best_obj)
        else:
            omap.add(o)
    return omap
