"""Per-frame geometry: dynamic filtering, LiDAR-to-image projection against
detection masks, cluster-based denoising, and map-frame transforms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import dbscan
from .ingest import Detection, PointCloud, Pose, SensorCalibration


@dataclass
class ProjectionConfig:
    denoise_eps: float = 0.5       # meters
    denoise_min_pts: int = 5
    min_object_points: int = 10    # observations below this are dropped


@dataclass
class ObjectObservation:
    """A denoised, map-frame 3D observation of one detected instance."""

    points_map_frame: np.ndarray  # (n, 3)
    caption: str
    embedding: np.ndarray         # unit-norm


def filter_dynamic(cloud: PointCloud) -> PointCloud:
    """Drop points whose dynamic flag is set; no flags means no-op."""
    if cloud.dynamic is None:
        return cloud
    keep = ~cloud.dynamic
    return PointCloud(
        cloud.points[keep],
        dynamic=None,
        intensity=cloud.intensity[keep] if cloud.intensity is not None else None,
    )


def project_points(points: np.ndarray, calib: SensorCalibration):
    """Project LiDAR points into the image.

    Returns (pixels (n,2) float, depth (n,) float); callers round pixels to
    the nearest integer. Depth is the projective scale (camera-frame depth).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    homog = np.hstack([pts, np.ones((len(pts), 1))])
    cam = homog @ calib.lidar_to_camera.T
    proj = cam @ calib.camera_projection.T
    depth = proj[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pixels = proj[:, :2] / depth[:, None]
    return pixels, depth


def project_and_mask(
    cloud: PointCloud, calib: SensorCalibration, masks: list[np.ndarray]
) -> list[np.ndarray]:
    """Index sets of cloud points falling inside each mask.

    A point belongs to a mask iff its depth is positive and its projected
    pixel, rounded to the nearest integer, lies inside the image and inside
    the mask. Points inside several masks are assigned to every one.
    """
    w, h = calib.image_size
    pixels, depth = project_points(cloud.points, calib)
    valid = depth > 0
    px = np.full(len(cloud.points), -1, dtype=np.int64)
    py = np.full(len(cloud.points), -1, dtype=np.int64)
    px[valid] = np.rint(pixels[valid, 0]).astype(np.int64)
    py[valid] = np.rint(pixels[valid, 1]).astype(np.int64)
    inside = valid & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    idx_inside = np.nonzero(inside)[0]
    out = []
    for mask in masks:
        hits = mask[py[idx_inside], px[idx_inside]]
        out.append(idx_inside[hits])
    return out


def denoise_object_points(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Keep only the largest density cluster of an object's points.

    Ties on cluster size go to the cluster containing the point closest to
    the centroid of all clustered (non-noise) points. All-noise input
    yields an empty array.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return pts
    labels = dbscan(pts, eps, min_pts)
    ids, counts = np.unique(labels[labels >= 0], return_counts=True)
    if len(ids) == 0:
        return pts[:0]
    best = counts.max()
    tied = ids[counts == best]
    if len(tied) == 1:
        winner = tied[0]
    else:
        member_centroid = pts[labels >= 0].mean(axis=0)
        dist = np.linalg.norm(pts - member_centroid, axis=1)
        order = np.argsort(dist, kind="stable")
        winner = next(labels[i] for i in order if labels[i] in set(tied))
    return pts[labels == winner]


def to_map_frame(points: np.ndarray, pose: Pose) -> np.ndarray:
    """Apply the frame pose: x -> R x + t."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return pts @ pose.rotation.T + pose.translation


def extract_observations(
    cloud: PointCloud,
    pose: Pose,
    calib: SensorCalibration,
    detections: list[Detection],
    cfg: ProjectionConfig | None = None,
) -> list[ObjectObservation]:
    """Full per-frame path: filter dynamics, project against masks, denoise,
    transform to the map frame. Observations with too few surviving points
    are discarded. Output order follows detection order."""
    cfg = cfg or ProjectionConfig()
    static = filter_dynamic(cloud)
    index_sets = project_and_mask(static, calib, [d.mask for d in detections])
    out = []
    for det, idx in zip(detections, index_sets):
        obj_pts = denoise_object_points(
            static.points[idx], cfg.denoise_eps, cfg.denoise_min_pts
        )
        if len(obj_pts) < cfg.min_object_points:
            continue
        out.append(ObjectObservation(
            points_map_frame=to_map_frame(obj_pts, pose),
            caption=det.caption,
            embedding=det.embedding,
        ))
    return out
