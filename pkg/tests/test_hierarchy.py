import json

import numpy as np
import pytest

from ogmap.geom import AxisAlignedBox
from ogmap.hierarchy import (
    ClassCatalog,
    InstanceNode,
    PersistenceError,
    assemble,
    build_instance_layer,
    build_segment_layer,
    classify_objects,
    default_relation_labeler,
    link_instances_to_segments,
    load,
    polyline_distance,
    save,
    validate,
)
from ogmap.object_map import ObjectMap
from ogmap.projection import ObjectObservation
from ogmap.synthetic import generate_trajectory, hash_embedding, poses_from_xy
from ogmap.lane_graph import extract_lane_graph


def _node(nid, lo, hi, caption="x", class_id=0):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    emb = np.zeros(8)
    emb[0] = 1.0
    return InstanceNode(
        id=nid,
        centroid=(lo + hi) / 2,
        aabb=AxisAlignedBox(tuple(lo), tuple(hi)),
        caption=caption,
        embedding=emb,
        class_id=class_id,
        obs_count=1,
    )


def _box_obs(center, caption, embedding, half=0.5, n=20, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.asarray(center, float) + rng.uniform(-half, half, size=(n, 3))
    return ObjectObservation(pts, caption, np.asarray(embedding, float))


def _basis(i, dim=8):
    v = np.zeros(dim)
    v[i] = 1.0
    return v


def _fixture_map(n_objects=4, spread=12.0):
    omap = ObjectMap()
    for i in range(n_objects):
        omap.add(_box_obs([i * spread - 20.0, 3.0, 0.0], f"object {i}",
                          _basis(i % 4), seed=i))
    return omap


def _catalog(dim=8, n=4):
    return ClassCatalog([f"class{i}" for i in range(n)],
                        np.eye(dim)[:n])


class TestClassCatalog:
    def test_unit_norm_enforced(self):
        with pytest.raises(ValueError, match="unit norm"):
            ClassCatalog(["a"], np.array([[2.0] + [0.0] * 7]))

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            ClassCatalog(["a", "a"], np.eye(8)[:2])

    def test_from_names_uses_hash_embeddings(self):
        cat = ClassCatalog.from_names(["car", "tree"], 64)
        np.testing.assert_allclose(cat.embeddings[0], hash_embedding("car", 64))

    def test_load_classes_json(self, tmp_path):
        path = tmp_path / "classes.json"
        path.write_text(json.dumps({
            "names": ["a", "b"],
            "embeddings": np.eye(8)[:2].tolist(),
        }))
        cat = ClassCatalog.load(path)
        assert cat.names == ["a", "b"]
        assert len(cat.colors) == 2


class TestClassify:
    def test_argmax_cosine(self):
        cat = _catalog()
        embs = np.array([_basis(2), _basis(0)])
        assert classify_objects(embs, cat).tolist() == [2, 0]

    def test_tie_resolves_to_lowest_index(self):
        cat = _catalog()
        emb = (_basis(1) + _basis(3)) / np.sqrt(2)
        assert classify_objects(emb[None, :], cat).tolist() == [1]

    def test_unnormalized_input_handled(self):
        cat = _catalog()
        assert classify_objects((10.0 * _basis(2))[None, :], cat).tolist() == [2]


class TestInstanceLayer:
    def test_collinear_mst(self):
        nodes = [
            _node(0, (0, 0, 0), (0.4, 1, 1)),
            _node(1, (1, 0, 0), (1.4, 1, 1)),
            _node(2, (5, 0, 0), (5.4, 1, 1)),
        ]
        edges = build_instance_layer(nodes)
        assert [(a, b) for a, b, _ in edges] == [(0, 1), (1, 2)]

    def test_on_relation(self):
        table = _node(0, (0, 0, 0), (2, 2, 1))
        cup = _node(1, (0.5, 0.5, 1.0), (1, 1, 1.3))
        assert default_relation_labeler(cup, table) == "on"
        assert default_relation_labeler(table, cup) == "under"

    def test_adjacent_and_near(self):
        a = _node(0, (0, 0, 0), (1, 1, 1))
        b = _node(1, (1.5, 0, 0), (2.5, 1, 1))
        c = _node(2, (10, 0, 0), (11, 1, 1))
        assert default_relation_labeler(a, b) == "adjacent to"
        assert default_relation_labeler(a, c) == "near"

    def test_single_instance_no_edges(self):
        assert build_instance_layer([_node(0, (0, 0, 0), (1, 1, 1))]) == []


def _lane(shape):
    pts, _ = generate_trajectory(shape)
    return extract_lane_graph(poses_from_xy(pts))


class TestSegmentLayer:
    def test_l_counts(self):
        segs = build_segment_layer(_lane("L"))
        kinds = [s.kind for s in segs]
        assert kinds.count("l_intersection") == 1
        assert kinds.count("straight") == 2
        assert len(segs) == 3

    def test_cross_counts(self):
        segs = build_segment_layer(_lane("cross"))
        kinds = [s.kind for s in segs]
        assert kinds.count("intersection") == 1
        assert kinds.count("straight") == 4
        assert len(segs) == 5

    def test_straight_has_no_interior_segment(self):
        segs = build_segment_layer(_lane("straight"))
        assert [s.kind for s in segs] == ["straight"]

    def test_linking_matches_brute_force(self):
        segs = build_segment_layer(_lane("cross"))
        nodes = [_node(i, (x, y, 0), (x + 1, y + 1, 1))
                 for i, (x, y) in enumerate([(5, 2), (48, 40), (80, -3), (50, 2)])]
        links = link_instances_to_segments(nodes, segs)
        for node in nodes:
            want = min(
                ((polyline_distance(node.centroid[:2], s.polyline), s.id)
                 for s in segs),
            )[1]
            assert links[node.id] == want


class TestAssembleAndValidate:
    def test_assembled_fixture_is_consistent(self):
        h = assemble(_fixture_map(), _lane("cross"), _catalog())
        assert validate(h) == []
        assert len(h.instances) == 4
        assert len(h.instance_edges) == 3
        assert set(h.instance_segment) == {0, 1, 2, 3}
        assert sorted(h.environment_segments) == [s.id for s in h.segments]

    def test_empty_map_partial_graph(self):
        h = assemble(ObjectMap(), None, _catalog())
        assert h.instances == []
        assert h.segments == []
        assert validate(h) == []

    def test_validator_catches_corrupted_aabb(self):
        h = assemble(_fixture_map(), None, _catalog())
        bad = h.instances[0].aabb
        h.instances[0].aabb = AxisAlignedBox(bad.min,
                                             tuple(np.array(bad.max) - 0.5))
        assert any("aabb" in p for p in validate(h))

    def test_validator_catches_broken_mst(self):
        h = assemble(_fixture_map(), None, _catalog())
        h.instance_edges = h.instance_edges[:-1]
        assert any("MST" in p for p in validate(h))


class TestPersistence:
    def test_round_trip_preserves_everything(self, tmp_path):
        h = assemble(_fixture_map(), _lane("cross"), _catalog())
        save(h, tmp_path / "map")
        back = load(tmp_path / "map")
        assert validate(back) == []
        assert len(back.instances) == len(h.instances)
        for a, b in zip(back.instances, h.instances):
            assert a.id == b.id and a.caption == b.caption
            assert a.class_id == b.class_id and a.obs_count == b.obs_count
            np.testing.assert_allclose(a.centroid, b.centroid, atol=1e-6)
            np.testing.assert_allclose(a.embedding, b.embedding, atol=1e-6)
        np.testing.assert_allclose(back.points, h.points, atol=1e-5)
        assert back.instance_edges == h.instance_edges
        assert back.instance_segment == h.instance_segment
        assert back.class_names == h.class_names
        assert len(back.lane_graph.nodes) == len(h.lane_graph.nodes)

    def test_second_save_is_byte_identical(self, tmp_path):
        h = assemble(_fixture_map(), _lane("L"), _catalog())
        save(h, tmp_path / "a")
        save(load(tmp_path / "a"), tmp_path / "b")
        for name in ("index.json", "data.bin"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_version_mismatch_rejected(self, tmp_path):
        h = assemble(_fixture_map(), None, _catalog())
        save(h, tmp_path / "map")
        doc = json.loads((tmp_path / "map" / "index.json").read_text())
        doc["format"] = "opengraph-map/999"
        (tmp_path / "map" / "index.json").write_text(json.dumps(doc))
        with pytest.raises(PersistenceError, match="version"):
            load(tmp_path / "map")

    def test_truncated_data_rejected(self, tmp_path):
        h = assemble(_fixture_map(), None, _catalog())
        save(h, tmp_path / "map")
        blob = (tmp_path / "map" / "data.bin").read_bytes()
        (tmp_path / "map" / "data.bin").write_bytes(blob[:10])
        with pytest.raises(PersistenceError, match="truncated"):
            load(tmp_path / "map")

    def test_missing_index_rejected(self, tmp_path):
        with pytest.raises(PersistenceError, match="cannot read"):
            load(tmp_path / "nope")
