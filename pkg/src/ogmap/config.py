"""Run-wide configuration: every tunable of every stage, with defaults,
loadable from a simple `key = value` text file and overridable by CLI flags."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .hierarchy import AssemblyConfig
from .lane_graph import DisfluencyConfig
from .object_map import SimilarityWeights
from .projection import ProjectionConfig


@dataclass
class RunConfig:
    # association / fusion
    w_geo: float = 0.4
    w_cap: float = 0.2
    w_fea: float = 0.4
    sim_threshold: float = 0.6
    gating_radius: float = 30.0
    # projection / denoising
    denoise_eps: float = 0.5
    denoise_min_pts: int = 5
    min_object_points: int = 10
    # lane graph
    lane_radius: float = 5.0
    disfluency_threshold: float = 0.3
    breakpoint_tolerance: float = 0.15
    cluster_eps: float = 5.0
    cluster_min_pts: int = 3
    node_radius: float = 10.0
    max_gap: float = 10.0
    smoothing_window: int = 5
    # layers / evaluation
    voxel: float = 0.2
    alignment_radius: float = 0.2
    seed: int = 0

    def similarity_weights(self) -> SimilarityWeights:
        return SimilarityWeights(self.w_geo, self.w_cap, self.w_fea,
                                 self.sim_threshold)

    def projection(self) -> ProjectionConfig:
        return ProjectionConfig(self.denoise_eps, self.denoise_min_pts,
                                self.min_object_points)

    def disfluency(self) -> DisfluencyConfig:
        return DisfluencyConfig(
            radius=self.lane_radius,
            disfluency_threshold=self.disfluency_threshold,
            breakpoint_tolerance=self.breakpoint_tolerance,
            cluster_eps=self.cluster_eps,
            cluster_min_pts=self.cluster_min_pts,
            node_radius=self.node_radius,
            max_gap=self.max_gap,
            smoothing_window=self.smoothing_window,
        )

    def assembly(self) -> AssemblyConfig:
        return AssemblyConfig(self.voxel, self.node_radius)

    def validate(self):
        self.similarity_weights()
        self.projection()
        self.disfluency()
        if self.voxel <= 0 or self.alignment_radius <= 0 or self.gating_radius <= 0:
            raise ValueError("voxel, alignment_radius and gating_radius must be positive")
        return self

    @staticmethod
    def load(path: Path) -> "RunConfig":
        """Parse `key = value` lines; '#' starts a comment."""
        known = {f.name: f.type for f in fields(RunConfig)}
        kwargs = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            cast = int if known[key] == "int" else float
            kwargs[key] = cast(value.strip())
        return RunConfig(**kwargs).validate()
