import json

import numpy as np
import pytest

from ogmap.cli import run
from ogmap.query import read_labeled_cloud
from ogmap.synthetic import ObjectSpec, SceneSpec, generate_scene


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    spec = SceneSpec(
        objects=[
            ObjectSpec("car", "a red car", (15.0, -3.0, 0.0), (2.0, 1.0, 1.0)),
            ObjectSpec("tree", "a tall tree", (18.0, 4.0, 1.0), (1.0, 1.0, 3.0)),
            ObjectSpec("mailbox", "a blue mailbox", (20.0, -5.0, 0.0),
                       (0.6, 0.6, 1.2)),
        ],
        trajectory_shape="cross",
        frame_count=4,
        embedding_dim=64,
        seed=3,
    )
    generate_scene(spec, root / "data")
    assert run(["build", str(root / "data"), "-o", str(root / "map")]) == 0
    return root


def _out(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


class TestBuild:
    def test_build_reports_objects(self, scene_dir, capsys):
        assert run(["build", str(scene_dir / "data"), "-o",
                    str(scene_dir / "map2")]) == 0
        doc = _out(capsys)
        assert doc["objects"] == 3
        assert doc["segments"] == 5  # cross: 1 intersection + 4 straights

    def test_empty_dir_is_data_error(self, tmp_path, capsys):
        tmp_path.joinpath("empty").mkdir()
        assert run(["build", str(tmp_path / "empty"), "-o",
                    str(tmp_path / "m")]) == 2
        assert "no frames found" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(self, tmp_path):
        assert run(["build", str(tmp_path), "-o", str(tmp_path / "m"),
                    "--frobnicate"]) == 1

    def test_missing_subcommand_is_usage_error(self):
        assert run([]) == 1

    def test_config_file_and_override(self, scene_dir, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("gating_radius = 25.0  # comment\nvoxel = 0.1\n")
        assert run(["build", str(scene_dir / "data"), "-o",
                    str(tmp_path / "m"), "--config", str(cfg),
                    "--voxel", "0.3"]) == 0

    def test_bad_config_key_is_data_error(self, scene_dir, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("warp_speed = 9\n")
        assert run(["build", str(scene_dir / "data"), "-o",
                    str(tmp_path / "m"), "--config", str(cfg)]) == 2


class TestRetrieve:
    def test_query_text_ranks_target_first(self, scene_dir, capsys):
        assert run(["retrieve", str(scene_dir / "map"),
                    "--query-text", "a blue mailbox", "-k", "2"]) == 0
        doc = _out(capsys)
        assert doc["results"][0]["caption"] == "a blue mailbox"
        assert doc["results"][0]["score"] == pytest.approx(1.0, abs=1e-5)

    def test_query_embedding_file(self, scene_dir, tmp_path, capsys):
        from ogmap.synthetic import hash_embedding
        emb = hash_embedding("a red car", 64)
        path = tmp_path / "q.json"
        path.write_text(json.dumps(emb.tolist()))
        assert run(["retrieve", str(scene_dir / "map"),
                    "--query-emb", str(path), "-k", "1"]) == 0
        assert _out(capsys)["results"][0]["caption"] == "a red car"

    def test_missing_map_is_data_error(self, tmp_path):
        assert run(["retrieve", str(tmp_path / "nope"),
                    "--query-text", "x"]) == 2


class TestSegmentAndEval:
    def test_segment_export_and_eval_round_trip(self, scene_dir, tmp_path,
                                                capsys):
        out = tmp_path / "cloud.bin"
        assert run(["segment", str(scene_dir / "map"), "-o", str(out)]) == 0
        doc = _out(capsys)
        pts, cls, names = read_labeled_cloud(out)
        assert doc["points"] == len(pts)
        assert names == ["car", "mailbox", "tree"]

        # evaluating an export against itself is a perfect score
        assert run(["eval", "--gt", str(out), "--pred", str(out)]) == 0
        metrics = _out(capsys)
        assert metrics["micro_f1"] == pytest.approx(1.0)
        assert all(v == pytest.approx(1.0)
                   for v in metrics["per_class_iou"].values())


class TestLaneAndPlan:
    def test_lane_subcommand(self, scene_dir, tmp_path, capsys):
        assert run(["lane", str(scene_dir / "data"), "-o",
                    str(tmp_path / "lane.json")]) == 0
        doc = _out(capsys)
        assert doc["nodes"] == 5 and doc["edges"] == 4

    def test_plan_route(self, scene_dir, capsys):
        assert run(["plan", str(scene_dir / "map"),
                    "--from", "N0", "--to", "N0"]) == 0
        doc = _out(capsys)
        assert doc["path"] == [0]
        assert doc["length"] == 0.0

    def test_plan_between_arms(self, scene_dir, capsys):
        from ogmap import hierarchy
        h = hierarchy.load(scene_dir / "map")
        pos = np.array([n.position for n in h.lane_graph.nodes])
        src = int(np.linalg.norm(pos - [0, 0], axis=1).argmin())
        dst = int(np.linalg.norm(pos - [100, 0], axis=1).argmin())
        assert run(["plan", str(scene_dir / "map"),
                    "--from", f"N{src}", "--to", f"N{dst}"]) == 0
        doc = _out(capsys)
        assert doc["length"] == pytest.approx(100.0, rel=0.01)

    def test_plan_bad_node_is_data_error(self, scene_dir):
        assert run(["plan", str(scene_dir / "map"),
                    "--from", "N99", "--to", "N0"]) == 2


class TestLocate:
    def test_locate_runs(self, scene_dir, capsys):
        assert run(["locate", str(scene_dir / "map"), "--kind", "straight",
                    "--near", "tree"]) == 0
        ranked = json.loads(capsys.readouterr().out)
        assert all("segment" in r and "score" in r for r in ranked)

    def test_unknown_class_is_data_error(self, scene_dir, capsys):
        assert run(["locate", str(scene_dir / "map"),
                    "--near", "spaceship"]) == 2


class TestPatch:
    def test_remove_writes_valid_smaller_map(self, scene_dir, tmp_path, capsys):
        assert run(["patch", str(scene_dir / "map"), "-o",
                    str(tmp_path / "patched"), "--remove", "0"]) == 0
        assert _out(capsys)["objects"] == 2
        assert run(["retrieve", str(tmp_path / "patched"),
                    "--query-text", "a red car", "-k", "5"]) == 0
        ids = [r["id"] for r in _out(capsys)["results"]]
        assert 0 not in ids

    def test_replace_caption(self, scene_dir, tmp_path, capsys):
        assert run(["patch", str(scene_dir / "map"), "-o",
                    str(tmp_path / "renamed"), "--caption", "1",
                    "a fire hydrant"]) == 0
        assert run(["retrieve", str(tmp_path / "renamed"),
                    "--query-text", "a fire hydrant", "-k", "1"]) == 0
        assert _out(capsys)["results"][0]["caption"] == "a fire hydrant"

    def test_remove_unknown_id_is_data_error(self, scene_dir, tmp_path):
        assert run(["patch", str(scene_dir / "map"), "-o",
                    str(tmp_path / "p"), "--remove", "42"]) == 2


class TestSynth:
    def test_synth_subcommand(self, tmp_path, capsys):
        spec = {
            "objects": [{"class_name": "cone", "caption": "a traffic cone",
                         "center": [12.0, 0.0, 0.0], "extent": [0.5, 0.5, 0.8]}],
            "frame_count": 2,
            "embedding_dim": 32,
        }
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec))
        assert run(["synth", str(spec_path), "-o", str(tmp_path / "scene")]) == 0
        assert _out(capsys)["objects"] == 1
        assert (tmp_path / "scene" / "manifest.json").exists()

    def test_malformed_spec_is_data_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert run(["synth", str(path), "-o", str(tmp_path / "s")]) == 2
