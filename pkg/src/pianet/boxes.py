"""Cube anchors, IoU, ground-truth matching, offset coding and NMS.

Boxes are axis-aligned cubes stored as rows ``(x, y, z, r)``: the center in
cube-local coordinates (voxel ``i`` is centered at ``i + 0.5`` along its
axis, 1 voxel = 1 mm) and the side length ``r``. Arrays of boxes are float64
with shape (n, 4).

Anchors are enumerated scale-major (in ``PiaNetConfig.prediction_scales``
order), then feature cell z, y, x, then anchor-size index, which is also the
row order of ``RawPrediction.flat_boxes``.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import ConfigError

POSITIVE, NEGATIVE, IGNORED = 1, 0, -1
DEFAULT_NEG_IOU_MAX = 0.02
DEFAULT_NMS_THRESHOLD = 0.1


class BoxCube(NamedTuple):
    x: float
    y: float
    z: float
    r: float


class Detection(NamedTuple):
    x: float
    y: float
    z: float
    r: float
    score: float

    @property
    def box(self):
        return BoxCube(self.x, self.y, self.z, self.r)


def check_boxes(boxes, name="boxes"):
    """Coerce to an (n, 4) float64 array and enforce r > 0 and finite centers."""
    b = kernels.as_boxes(boxes)
    if not np.all(np.isfinite(b)):
        raise ValueError(f"{name} contain non-finite values")
    if np.any(b[:, 3] <= 0):
        raise ValueError(f"{name} need side r > 0")
    return b


@dataclass
class AnchorSet:
    boxes: np.ndarray  # (n, 4)
    scale_index: np.ndarray  # (n,) position in prediction_scales
    size_index: np.ndarray  # (n,) anchor-size slot within its scale

    def __len__(self):
        return len(self.boxes)

    def sides(self):
        return self.boxes[:, 3]


def generate_anchors(config):
    """All anchors of ``config`` in flattened prediction order."""
    cube = config.input_cube_side
    boxes, scale_idx, size_idx = [], [], []
    for k, ((side, count), radii) in enumerate(zip(config.prediction_scales, config.anchor_sides_per_scale())):
        centers = (np.arange(side) + 0.5) * (cube / side)
        z, y, x, a = np.meshgrid(centers, centers, centers, np.arange(count), indexing="ij")
        b = np.stack([x.ravel(), y.ravel(), z.ravel(), np.asarray(radii, dtype=float)[a.ravel()]], axis=1)
        boxes.append(b)
        scale_idx.append(np.full(len(b), k, dtype=np.int64))
        size_idx.append(a.ravel().astype(np.int64))
    return AnchorSet(np.concatenate(boxes), np.concatenate(scale_idx), np.concatenate(size_idx))


def iou_cube(a, b):
    """IoU of two single cubes."""
    return float(iou_matrix([a], [b])[0, 0])


def iou_matrix(a, b):
    """Pairwise IoU, shape (len(a), len(b))."""
    return kernels.iou_matrix(kernels.as_boxes(a), kernels.as_boxes(b))


@dataclass
class MatchAssignment:
    labels: np.ndarray  # per anchor: POSITIVE, NEGATIVE (candidate) or IGNORED
    gt_anchor: np.ndarray  # per ground truth: index of its positive anchor
    gt_iou: np.ndarray  # per ground truth: IoU with that anchor

    @property
    def positives(self):
        return self.gt_anchor

    @property
    def negative_candidates(self):
        return np.nonzero(self.labels == NEGATIVE)[0]


def match_anchors(anchors, gts, neg_iou_max=DEFAULT_NEG_IOU_MAX):
    """Give every ground truth its maximum-IoU anchor.

    Ground truths claim anchors in order of decreasing best IoU (lower index
    first on ties); each takes its highest-IoU anchor not already claimed,
    lowest anchor index on ties. Anchors whose IoU with every ground truth is
    below ``neg_iou_max`` become negative candidates; the rest are ignored.
    """
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else kernels.as_boxes(anchors)
    n = len(boxes)
    if n == 0:
        raise ConfigError("match_anchors needs at least one anchor")
    gts = kernels.as_boxes(gts)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    if len(gts) == 0:
        return MatchAssignment(labels, np.zeros(0, dtype=np.int64), np.zeros(0))
    if len(gts) > n:
        raise ConfigError(f"{len(gts)} ground truths cannot each claim one of {n} anchors")
    iou = iou_matrix(boxes, gts)  # (anchors, gts)
    labels[iou.max(axis=1) >= neg_iou_max] = IGNORED
    best = iou.max(axis=0)
    order = sorted(range(len(gts)), key=lambda j: (-best[j], j))
    gt_anchor = np.empty(len(gts), dtype=np.int64)
    claimed = np.zeros(n, dtype=bool)
    for j in order:
        col = np.where(claimed, -1.0, iou[:, j])
        i = int(np.argmax(col))  # argmax returns the first maximum
        gt_anchor[j] = i
        claimed[i] = True
    labels[gt_anchor] = POSITIVE
    return MatchAssignment(labels, gt_anchor, iou[gt_anchor, np.arange(len(gts))])


def encode_boxes(gts, anchors):
    """Regression targets (tx, ty, tz, tr) of ``gts`` relative to paired ``anchors``."""
    g = kernels.as_boxes(gts)
    a = kernels.as_boxes(anchors)
    if np.any(g[:, 3] <= 0) or np.any(a[:, 3] <= 0):
        raise ValueError("encode_boxes needs r > 0 for boxes and anchors")
    t = np.empty_like(g)
    t[:, :3] = (g[:, :3] - a[:, :3]) / a[:, 3:4]
    t[:, 3] = np.log(g[:, 3] / a[:, 3])
    return t


def decode_boxes(offsets, anchors):
    """Inverse of ``encode_boxes``."""
    t = kernels.as_boxes(offsets)
    a = kernels.as_boxes(anchors)
    out = np.empty_like(t)
    out[:, :3] = a[:, :3] + t[:, :3] * a[:, 3:4]
    out[:, 3] = a[:, 3] * np.exp(t[:, 3])
    return out


def encode_box(gt, anchor):
    return tuple(encode_boxes([gt], [anchor])[0])


def decode_box(pred, anchor):
    return BoxCube(*decode_boxes([pred], [anchor])[0])


def nms(boxes, scores, iou_threshold=DEFAULT_NMS_THRESHOLD):
    """Greedy non-maximum suppression.

    Returns indices of the surviving boxes sorted by descending score (lower
    index first on ties). A box is suppressed when its IoU with an already
    kept box exceeds ``iou_threshold``.
    """
    boxes = kernels.as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    keep = kernels.nms_sorted(np.ascontiguousarray(boxes[order]), float(iou_threshold))
    return order[keep]


def nms_detections(detections, iou_threshold=DEFAULT_NMS_THRESHOLD):
    """``nms`` over a list of ``Detection`` tuples."""
    if not detections:
        return []
    arr = np.asarray(detections, dtype=np.float64)
    return [detections[i] for i in nms(arr[:, :4], arr[:, 4], iou_threshold)]
