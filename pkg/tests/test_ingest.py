import json

import numpy as np
import pytest

from ogmap.ingest import (
    Detection,
    IngestError,
    Manifest,
    PointCloud,
    Pose,
    SensorCalibration,
    load_calibration,
    load_frame_detections,
    load_point_cloud,
    load_poses,
    load_sequence,
    normalized,
    rle_decode,
    rle_encode,
    write_calibration,
    write_frame_detections,
    write_point_cloud,
    write_poses,
)


class TestRle:
    def test_round_trip_random_masks(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            mask = rng.random((12, 17)) < 0.3
            assert np.array_equal(rle_decode(rle_encode(mask), 17, 12), mask)

    def test_all_zeros_and_all_ones(self):
        zeros = np.zeros((4, 5), dtype=bool)
        ones = np.ones((4, 5), dtype=bool)
        assert not rle_decode(rle_encode(zeros), 5, 4).any()
        assert rle_decode(rle_encode(ones), 5, 4).all()

    def test_leading_one_gets_empty_zero_run(self):
        mask = np.array([[True, False]])
        assert np.array_equal(rle_decode(rle_encode(mask), 2, 1), mask)

    def test_pixel_count_mismatch_rejected(self):
        data = rle_encode(np.zeros((2, 2), dtype=bool))
        with pytest.raises(IngestError, match="pixels"):
            rle_decode(data, 3, 3)


class TestCalibrationAndPoses:
    def test_pose_line_round_trips_known_transform(self, tmp_path):
        # 90-degree yaw plus a translation, written as 12 row-major floats
        m = np.array([
            [0.0, -1.0, 0.0, 1.5],
            [1.0, 0.0, 0.0, -2.0],
            [0.0, 0.0, 1.0, 0.25],
        ])
        path = tmp_path / "poses.txt"
        path.write_text(" ".join(str(x) for x in m.ravel()) + "\n")
        poses = load_poses(path)
        assert len(poses) == 1
        np.testing.assert_allclose(poses[0].transform[:3], m)
        np.testing.assert_allclose(poses[0].transform[3], [0, 0, 0, 1])

    def test_wrong_float_count_rejected(self, tmp_path):
        path = tmp_path / "poses.txt"
        path.write_text("1 0 0 0 0 1 0 0 0 0 1\n")  # 11 floats
        with pytest.raises(IngestError, match="12 floats"):
            load_poses(path)

    def test_perturbed_rotation_rejected(self):
        m = np.eye(4)
        m[0, 1] = 1e-3  # orthonormality violated beyond tolerance
        with pytest.raises(IngestError, match="orthonormal"):
            Pose(m)

    def test_reflection_rejected(self):
        m = np.eye(4)
        m[2, 2] = -1.0  # determinant -1
        with pytest.raises(IngestError, match="determinant"):
            Pose(m)

    def test_calibration_file_round_trip(self, tmp_path):
        p2 = np.array([[400.0, 0, 400, 0], [0, 400, 300, 0], [0, 0, 1, 0]])
        tr = np.array([
            [0.0, -1, 0, 0.1],
            [0, 0, -1, -0.2],
            [1, 0, 0, 0.3],
            [0, 0, 0, 1],
        ])
        calib = SensorCalibration(p2, tr, (800, 600))
        path = tmp_path / "calib.txt"
        write_calibration(path, calib)
        back = load_calibration(path, (800, 600))
        np.testing.assert_array_equal(back.camera_projection, p2)
        np.testing.assert_array_equal(back.lidar_to_camera, tr)

    def test_missing_label_rejected(self, tmp_path):
        path = tmp_path / "calib.txt"
        path.write_text("P2: " + " ".join(["1"] * 12) + "\n")
        with pytest.raises(IngestError, match="Tr"):
            load_calibration(path, (10, 10))


class TestPointCloud:
    def test_bin_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-5, 5, size=(40, 3)).astype(np.float32).astype(float)
        cloud = PointCloud(pts, intensity=np.linspace(0, 1, 40))
        path = tmp_path / "000000.bin"
        write_point_cloud(path, cloud)
        back = load_point_cloud(path)
        np.testing.assert_allclose(back.points, pts, atol=1e-6)
        assert back.intensity is not None

    def test_dynamic_flags(self, tmp_path):
        pts = np.zeros((4, 3))
        flags = np.array([1, 0, 1, 0], dtype=bool)
        cloud = PointCloud(pts, dynamic=flags)
        path = tmp_path / "000000.bin"
        write_point_cloud(path, cloud)
        back = load_point_cloud(path, path.with_suffix(".flags"))
        assert back.dynamic.tolist() == flags.tolist()

    def test_truncated_bin_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 10)  # not a multiple of 16 bytes
        with pytest.raises(IngestError):
            load_point_cloud(path)

    def test_non_finite_rejected(self):
        with pytest.raises(IngestError, match="finite"):
            PointCloud(np.array([[0.0, np.nan, 0.0]]))


def _manifest(dim=8, w=4, h=3):
    return Manifest(embedding_dim=dim, image_width=w, image_height=h)


class TestDetections:
    def test_round_trip(self, tmp_path):
        mask = np.zeros((3, 4), dtype=bool)
        mask[1, 2] = True
        det = Detection(mask=mask, caption="a thing",
                        embedding=normalized(np.arange(1.0, 9.0)))
        path = tmp_path / "000000.jsonl"
        write_frame_detections(path, [det])
        back = load_frame_detections(path, _manifest())
        assert len(back) == 1
        assert back[0].caption == "a thing"
        assert np.array_equal(back[0].mask, mask)
        np.testing.assert_allclose(back[0].embedding, det.embedding)

    def test_embeddings_normalized_on_load(self, tmp_path):
        mask = np.ones((3, 4), dtype=bool)
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps({
            "caption": "x", "embedding": [3.0] + [0.0] * 7,
            "mask_rle": rle_encode(mask),
        }) + "\n")
        dets = load_frame_detections(path, _manifest())
        assert np.linalg.norm(dets[0].embedding) == pytest.approx(1.0)

    def test_zero_norm_embedding_rejected_with_warning(self, tmp_path, caplog):
        mask = np.ones((3, 4), dtype=bool)
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps({
            "caption": "x", "embedding": [0.0] * 8,
            "mask_rle": rle_encode(mask),
        }) + "\n")
        with caplog.at_level("WARNING"):
            dets = load_frame_detections(path, _manifest())
        assert dets == []
        assert "zero-norm" in caplog.text

    def test_empty_mask_rejected_with_warning(self, tmp_path, caplog):
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps({
            "caption": "x", "embedding": [1.0] + [0.0] * 7,
            "mask_rle": rle_encode(np.zeros((3, 4), dtype=bool)),
        }) + "\n")
        with caplog.at_level("WARNING"):
            dets = load_frame_detections(path, _manifest())
        assert dets == []
        assert "0 pixels" in caplog.text

    def test_dim_mismatch_fatal(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps({
            "caption": "x", "embedding": [1.0, 0.0],
            "mask_rle": rle_encode(np.ones((3, 4), dtype=bool)),
        }) + "\n")
        with pytest.raises(IngestError, match="dim"):
            load_frame_detections(path, _manifest())


def _write_sequence(root, n_frames=3, with_detections=True):
    (root / "velodyne").mkdir(parents=True)
    (root / "detections").mkdir()
    _manifest().save(root / "manifest.json")
    calib = SensorCalibration(
        np.array([[100.0, 0, 2, 0], [0, 100, 1.5, 0], [0, 0, 1, 0]]),
        np.eye(4), (4, 3),
    )
    write_calibration(root / "calib.txt", calib)
    poses = [Pose(np.eye(4)) for _ in range(n_frames)]
    write_poses(root / "poses.txt", poses)
    mask = np.ones((3, 4), dtype=bool)
    for i in range(n_frames):
        write_point_cloud(root / "velodyne" / f"{i:06d}.bin",
                          PointCloud(np.ones((5, 3))))
        if with_detections:
            # basis-vector embedding: norm is exactly 1, so a load/write
            # cycle reproduces the file bit for bit
            emb = np.zeros(8)
            emb[0] = 1.0
            write_frame_detections(
                root / "detections" / f"{i:06d}.jsonl",
                [Detection(mask, "a box", emb)],
            )
    return root


class TestSequence:
    def test_three_frames_load_in_order(self, tmp_path):
        stream = load_sequence(_write_sequence(tmp_path))
        assert len(stream) == 3
        assert [f.index for f in stream] == [0, 1, 2]
        assert all(len(f.detections) == 1 for f in stream)

    def test_frame_missing_detections_skipped(self, tmp_path, caplog):
        root = _write_sequence(tmp_path)
        (root / "detections" / "000001.jsonl").unlink()
        with caplog.at_level("WARNING"):
            stream = load_sequence(root)
        assert [f.index for f in stream] == [0, 2]
        assert stream.skipped == 1

    def test_empty_directory_reports_no_frames(self, tmp_path):
        with pytest.raises(IngestError, match="no frames found"):
            load_sequence(tmp_path)

    def test_dir_without_clouds_reports_no_frames(self, tmp_path):
        root = _write_sequence(tmp_path)
        for p in (root / "velodyne").glob("*.bin"):
            p.unlink()
        with pytest.raises(IngestError, match="no frames found"):
            load_sequence(root)

    def test_serialize_round_trip_is_exact(self, tmp_path):
        """Writers use repr() floats, so a load/write cycle is bit-stable."""
        root = _write_sequence(tmp_path / "a")
        stream = load_sequence(root)
        write_poses(tmp_path / "poses2.txt", [f.pose for f in stream])
        assert (tmp_path / "poses2.txt").read_bytes() == \
            (root / "poses.txt").read_bytes()
        write_calibration(tmp_path / "calib2.txt", stream.calibration)
        assert (tmp_path / "calib2.txt").read_bytes() == \
            (root / "calib.txt").read_bytes()
        write_frame_detections(tmp_path / "det2.jsonl", stream.frames[0].detections)
        assert (tmp_path / "det2.jsonl").read_bytes() == \
            (root / "detections" / "000000.jsonl").read_bytes()
