"""Command-line entry point: build, lane, retrieve, segment, locate, plan,
patch, eval, and synth subcommands.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import hierarchy, ingest, lane_graph, metrics, query, synthetic
from .config import RunConfig
from .pipeline import build_map

USAGE_ERROR = 1
DATA_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for name in vars(cfg):
        override = getattr(args, f"opt_{name}", None)
        if override is not None:
            setattr(cfg, name, override)
    return cfg.validate()


def _load_embedding(path: Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    text = path.read_text().strip()
    if text.startswith("["):
        return np.array(json.loads(text), dtype=float)
    return np.array(text.split(), dtype=float)


def _add_config_flags(p: _Parser):
    p.add_argument("--config", type=Path, help="key = value config file")
    for name, value in vars(RunConfig()).items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"opt_{name}",
                       type=type(value), help=argparse.SUPPRESS)


def make_parser() -> _Parser:
    parser = _Parser(prog="ogmap")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build a map container from a sequence dir")
    p.add_argument("data_dir", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--classes", type=Path, help="classes.json with embeddings")
    _add_config_flags(p)

    p = sub.add_parser("lane", help="extract the lane graph only")
    p.add_argument("data_dir", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    _add_config_flags(p)

    p = sub.add_parser("retrieve", help="top-k instances for a query embedding")
    p.add_argument("map", type=Path)
    p.add_argument("--query-emb", type=Path)
    p.add_argument("--query-text", help="hash-embed this text as the query")
    p.add_argument("-k", type=int, default=3)

    p = sub.add_parser("segment", help="export the labeled point cloud")
    p.add_argument("map", type=Path)
    p.add_argument("--classes", type=Path, help="classes.json (colors only)")
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("locate", help="rank segments by kind and relations")
    p.add_argument("map", type=Path)
    p.add_argument("--kind")
    p.add_argument("--near", action="append", default=[],
                   help="class name that must appear in a 'near' relation")
    p.add_argument("--constraint", action="append", default=[],
                   metavar="RELATION:CLASS")

    p = sub.add_parser("plan", help="shortest lane-graph route")
    p.add_argument("map", type=Path)
    p.add_argument("--from", dest="start", required=True)
    p.add_argument("--to", dest="goal", required=True)

    p = sub.add_parser("patch", help="apply a map patch, write a new container")
    p.add_argument("map", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--remove", type=int, metavar="ID")
    g.add_argument("--caption", nargs=2, metavar=("ID", "TEXT"))

    p = sub.add_parser("eval", help="segmentation metrics from labeled clouds")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--radius", type=float, default=0.2)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("spec", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    return parser


def _class_index(names: list[str], name: str) -> int:
    try:
        return names.index(name)
    except ValueError:
        raise ingest.IngestError(f"unknown class {name!r}; map has {names}")


def run(argv: list[str]) -> int:
    logging.basicConfig(level=os.environ.get("OGMAP_LOG", "WARNING").upper())
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else USAGE_ERROR

    try:
        if args.command == "build":
            h = build_map(args.data_dir, _load_config(args), args.classes)
            hierarchy.save(h, args.output)
            print(json.dumps({
                "objects": len(h.instances),
                "points": len(h.points),
                "segments": len(h.segments),
                "output": str(args.output),
            }))
        elif args.command == "lane":
            poses = ingest.load_poses(args.data_dir / "poses.txt")
            lg = lane_graph.extract_lane_graph(poses, _load_config(args).disfluency())
            lg.save(args.output)
            print(json.dumps({"nodes": len(lg.nodes), "edges": len(lg.edges)}))
        elif args.command == "retrieve":
            h = hierarchy.load(args.map)
            if args.query_text:
                dim = len(h.instances[0].embedding) if h.instances else 256
                emb = synthetic.hash_embedding(args.query_text, dim)
            elif args.query_emb:
                emb = _load_embedding(args.query_emb)
            else:
                parser.error("retrieve needs --query-emb or --query-text")
            print(query.retrieve(h, emb, args.k).to_json())
        elif args.command == "segment":
            h = hierarchy.load(args.map)
            pts, cls, counts = query.semantic_segmentation(h)
            colors = None
            if args.classes:
                colors = hierarchy.ClassCatalog.load(args.classes).colors
            query.write_labeled_cloud(args.output, pts, cls, h.class_names, colors)
            print(json.dumps({"points": len(pts), "per_class": counts}, sort_keys=True))
        elif args.command == "locate":
            h = hierarchy.load(args.map)
            constraints = [("near", _class_index(h.class_names, n)) for n in args.near]
            for spec in args.constraint:
                rel, _, cls = spec.rpartition(":")
                constraints.append((rel, _class_index(h.class_names, cls)))
            ranked = query.locate(h, args.kind, constraints)
            print(json.dumps([{"segment": s, "score": c} for s, c in ranked]))
        elif args.command == "plan":
            h = hierarchy.load(args.map)
            path, cost = query.plan_path(h, args.start, args.goal)
            if path is None:
                print(json.dumps({"path": None, "length": None, "reason": "no path"}))
            else:
                print(json.dumps({"path": path, "length": cost}))
        elif args.command == "patch":
            h = hierarchy.load(args.map)
            if args.remove is not None:
                patch = query.MapPatch(op="remove", target=args.remove)
            else:
                patch = query.MapPatch(op="replace_caption",
                                       target=int(args.caption[0]),
                                       caption=args.caption[1])
            h2 = query.apply_patch(h, patch)
            problems = hierarchy.validate(h2)
            if problems:
                raise hierarchy.PersistenceError(f"patched map invalid: {problems}")
            hierarchy.save(h2, args.output)
            print(json.dumps({"objects": len(h2.instances), "output": str(args.output)}))
        elif args.command == "eval":
            gt_pts, gt_cls, classes = query.read_labeled_cloud(args.gt)
            pr_pts, pr_cls, _ = query.read_labeled_cloud(args.pred)
            aligned = metrics.point_alignment(gt_pts, pr_pts, pr_cls, args.radius)
            result = metrics.segmentation_metrics(gt_cls, aligned, classes)
            print(json.dumps(result.to_dict(), sort_keys=True))
            print(result.table(), file=sys.stderr)
        elif args.command == "synth":
            spec = synthetic.SceneSpec.from_json(args.spec.read_text())
            gt = synthetic.generate_scene(spec, args.output)
            print(json.dumps({
                "objects": len(gt["objects"]),
                "frames": spec.frame_count,
                "output": str(args.output),
            }))
    except SystemExit as e:
        return e.code if e.code is not None else USAGE_ERROR
    except (ingest.IngestError, hierarchy.PersistenceError, query.QueryError,
            lane_graph.LaneGraphError, ValueError, OSError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_ERROR
    return 0


def main():
    raise SystemExit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
