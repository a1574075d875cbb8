"""End-to-end build: sequence directory in, hierarchical graph out."""

from __future__ import annotations

from pathlib import Path

from . import hierarchy, ingest, lane_graph, object_map, projection
from .config import RunConfig
from .hierarchy import ClassCatalog, HierarchicalGraph


def catalog_for(stream: ingest.FrameStream, classes_path: Path | None) -> ClassCatalog:
    if classes_path is not None:
        return ClassCatalog.load(classes_path)
    names = stream.manifest.class_list or ["object"]
    return ClassCatalog.from_names(names, stream.manifest.embedding_dim)


def build_map(
    data_dir: Path,
    cfg: RunConfig | None = None,
    classes_path: Path | None = None,
) -> HierarchicalGraph:
    cfg = (cfg or RunConfig()).validate()
    stream = ingest.load_sequence(data_dir)
    weights = cfg.similarity_weights()
    proj_cfg = cfg.projection()

    omap = object_map.ObjectMap(gating_radius=cfg.gating_radius)
    for frame in stream:
        observations = projection.extract_observations(
            frame.cloud, frame.pose, stream.calibration, frame.detections, proj_cfg
        )
        object_map.associate_and_integrate(observations, omap, weights)

    lg = None
    if len(stream.poses) >= 2:
        try:
            lg = lane_graph.extract_lane_graph(stream.poses, cfg.disfluency())
        except lane_graph.LaneGraphError:
            lg = None  # too short or degenerate; hierarchy stays partial
    catalog = catalog_for(stream, classes_path)
    return hierarchy.assemble(omap, lg, catalog, cfg.assembly())
