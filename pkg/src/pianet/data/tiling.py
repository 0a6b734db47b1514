"""Sliding-window cube tiling of a scan and scan-level merging of cube detections.

Origin rule, per axis of extent e: a single origin 0 when e <= side
(the cube is zero-padded), otherwise n = ceil((e - side) / stride) + 1
origins at k * stride with the last one clamped to e - side so the cube
ends flush with the volume.
"""

import math

import numpy as np

from .. import boxes as bx
from .volume import CubeSample


def axis_origins(extent, side=128, stride=64):
    if extent <= side:
        return [0]
    n = math.ceil((extent - side) / stride) + 1
    return [min(k * stride, extent - side) for k in range(n)]


def cube_origins(shape, side=128, stride=64):
    """All cube origins (z, y, x) for a volume of ``shape``, z-major."""
    oz, oy, ox = (axis_origins(e, side, stride) for e in shape)
    return [(z, y, x) for z in oz for y in oy for x in ox]


def cube_count(shape, side=128, stride=64):
    return len(cube_origins(shape, side, stride))


def crop_cube(data, origin, side):
    """(side,)*3 window of ``data`` at ``origin``, zero-padded outside the volume."""
    out = np.zeros((side, side, side), dtype=np.float64)
    src, dst = [], []
    for o, e in zip(origin, data.shape):
        lo, hi = max(o, 0), min(o + side, e)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - o, hi - o))
    out[tuple(dst)] = data[tuple(src)]
    return out


def boxes_in_cube(boxes, origin, side):
    """Boxes whose centers fall inside the cube, translated to cube-local coordinates."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    shift = np.array([origin[2], origin[1], origin[0]], dtype=np.float64)
    local = b.copy()
    local[:, :3] -= shift
    inside = np.all((local[:, :3] >= 0) & (local[:, :3] < side), axis=1)
    return local[inside]


def iter_cubes(volume, side=128, stride=64, boxes=None):
    data = volume.data
    for origin in cube_origins(data.shape, side, stride):
        cube = crop_cube(data, origin, side)[None, None]
        local = boxes_in_cube(boxes, origin, side) if boxes is not None else None
        yield CubeSample(cube, origin, local)


def extract_cubes(volume, side=128, stride=64, boxes=None):
    """Tile ``volume`` into cubes; ``boxes`` are scan-local ground truths."""
    return list(iter_cubes(volume, side, stride, boxes))


def stitch_detections(per_cube, nms_threshold=bx.DEFAULT_NMS_THRESHOLD):
    """Merge cube-local detections into one scan-level set.

    ``per_cube`` is a list of ``(origin, boxes, scores)`` with origin in
    (z, y, x) voxels. Boxes are shifted into scan coordinates, pooled, and
    suppressed with one global NMS. Returns (boxes, scores) by descending score.
    """
    all_boxes, all_scores = [], []
    for origin, boxes, scores in per_cube:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
        b[:, :3] += np.array([origin[2], origin[1], origin[0]], dtype=np.float64)
        all_boxes.append(b)
        all_scores.append(np.asarray(scores, dtype=np.float64).reshape(-1))
    if not all_boxes:
        return np.zeros((0, 4)), np.zeros(0)
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    keep = bx.nms(boxes, scores, nms_threshold)
    return boxes[keep], scores[keep]
