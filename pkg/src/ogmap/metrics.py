"""Evaluation metrics: per-class IoU, F1, retrieval recall@k, and the
point alignment needed to compare a downsampled map against ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

UNLABELED = -1


@dataclass
class ConfusionMatrix:
    """Square class-by-class count matrix; the extra last row/column holds
    unlabeled (unmatched) points."""

    matrix: np.ndarray
    class_list: list[str]

    @staticmethod
    def of(gt: np.ndarray, pred: np.ndarray, n_classes: int,
           class_list: list[str]) -> "ConfusionMatrix":
        gt = np.asarray(gt, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if gt.shape != pred.shape:
            raise ValueError(f"length mismatch: gt {gt.shape} vs pred {pred.shape}")
        size = n_classes + 1  # last slot = unlabeled
        m = np.zeros((size, size), dtype=np.int64)
        g = np.where(gt == UNLABELED, n_classes, gt)
        p = np.where(pred == UNLABELED, n_classes, pred)
        np.add.at(m, (g, p), 1)
        return ConfusionMatrix(m, class_list)


@dataclass
class SegmentationMetrics:
    per_class_iou: dict[str, float]
    mean_iou_present: float   # averaged over classes with ground-truth support
    mean_iou_all: float       # averaged over classes present in gt or pred
    micro_f1: float
    macro_f1: float

    def to_dict(self) -> dict:
        return {
            "per_class_iou": self.per_class_iou,
            "mean_iou_present": self.mean_iou_present,
            "mean_iou_all": self.mean_iou_all,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
        }

    def table(self) -> str:
        names = list(self.per_class_iou) + ["Average", "F1 Score"]
        values = list(self.per_class_iou.values()) + [
            self.mean_iou_present, self.micro_f1,
        ]
        widths = [max(len(n), 8) for n in names]
        head = "  ".join(n.rjust(w) for n, w in zip(names, widths))
        row = "  ".join(f"{v:.4f}".rjust(w) for v, w in zip(values, widths))
        return head + "\n" + row


def segmentation_metrics(
    gt: np.ndarray, pred: np.ndarray, class_list: list[str]
) -> SegmentationMetrics:
    """Per-class IoU and F1 from aligned label arrays.

    Classes absent from both gt and pred are excluded from the per-class
    table; labels of -1 count as unlabeled (never a true positive).
    """
    n = len(class_list)
    cm = ConfusionMatrix.of(gt, pred, n, class_list).matrix
    per_class = {}
    present_ious = []
    all_ious = []
    tp_sum = fp_sum = fn_sum = 0
    f1s = []
    for c in range(n):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum() - tp)
        fn = int(cm[c, :].sum() - tp)
        tp_sum += tp
        fp_sum += fp
        fn_sum += fn
        denom = tp + fp + fn
        if denom == 0:
            continue  # class absent from both gt and pred

        iou = tp / denom
        per_class[class_list[c]] = iou
        all_ious.append(iou)
        f1s.append(2 * tp / (2 * tp + fp + fn))
        if fn + tp > 0:  # gt support
            present_ious.append(iou)
    micro_denom = 2 * tp_sum + fp_sum + fn_sum
    return SegmentationMetrics(
        per_class_iou=per_class,
        mean_iou_present=float(np.mean(present_ious)) if present_ious else 0.0,
        mean_iou_all=float(np.mean(all_ious)) if all_ious else 0.0,
        micro_f1=2 * tp_sum / micro_denom if micro_denom else 0.0,
        macro_f1=float(np.mean(f1s)) if f1s else 0.0,
    )


def recall_at_k(rankings: list[list[int]], gt: list[set[int]], k: int) -> float:
    """Fraction of queries whose top-k ranking hits a relevant id.

    A query with an empty relevant set counts as a miss.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(rankings) != len(gt):
        raise ValueError("one relevant set per query required")
    if not rankings:
        return 0.0
    hits = sum(
        1 for ranked, rel in zip(rankings, gt) if rel and set(ranked[:k]) & rel
    )
    return hits / len(rankings)


def point_alignment(
    gt_points: np.ndarray,
    pred_points: np.ndarray,
    pred_labels: np.ndarray,
    radius: float,
) -> np.ndarray:
    """Label each ground-truth point with its nearest prediction within
    radius, or -1 (unlabeled) when none is close enough."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    gt_points = np.asarray(gt_points, dtype=float).reshape(-1, 3)
    pred_points = np.asarray(pred_points, dtype=float).reshape(-1, 3)
    out = np.full(len(gt_points), UNLABELED, dtype=np.int64)
    if len(pred_points) == 0 or len(gt_points) == 0:
        return out
    tree = cKDTree(pred_points)
    dist, idx = tree.query(gt_points, distance_upper_bound=radius)
    matched = np.isfinite(dist)
    out[matched] = np.asarray(pred_labels, dtype=np.int64)[idx[matched]]
    return out
