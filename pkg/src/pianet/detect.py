"""Inference: per-cube decoding and NMS, then scan-level stitching."""

from dataclasses import dataclass

import numpy as np

from . import boxes as bx
from .data.tiling import iter_cubes, stitch_detections
from .data.volume import boxes_to_world
from .errors import ConfigError
from .loss import ggo_probability

MAX_LOG_SCALE = 6.0  # decoded sides are limited to anchor * e^6


@dataclass(frozen=True)
class DetectConfig:
    score_threshold: float = 0.01
    top_k: int = 100  # candidates per cube entering NMS
    nms_threshold: float = bx.DEFAULT_NMS_THRESHOLD
    stride: int = None  # cube stride, default half the cube side

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown detection config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


def decode_prediction(pred, anchors, index=0):
    """Decoded boxes and GGO probabilities of one cube of a RawPrediction."""
    offsets = pred.flat_boxes[index].copy()
    offsets[:, 3] = np.clip(offsets[:, 3], -MAX_LOG_SCALE, MAX_LOG_SCALE)
    return bx.decode_boxes(offsets, anchors.boxes), ggo_probability(pred.flat_scores[index])


def select_detections(boxes, scores, cfg):
    """Threshold, keep the top-k, then NMS. Returns (boxes, scores) by descending score."""
    cand = np.nonzero(scores >= cfg.score_threshold)[0]
    cand = cand[np.argsort(-scores[cand], kind="stable")[:cfg.top_k]]
    keep = bx.nms(boxes[cand], scores[cand], cfg.nms_threshold)
    return boxes[cand][keep], scores[cand][keep]


def detect_cube(model, cube, anchors, cfg=DetectConfig()):
    pred = model.forward(cube, train=False)
    boxes, scores = decode_prediction(pred, anchors)
    return select_detections(boxes, scores, cfg)


def detect_volume(model, volume, anchors, cfg=DetectConfig()):
    """Tile, detect per cube, stitch. Returns scan-local (boxes, scores)."""
    side = model.config.input_cube_side
    stride = cfg.stride or side // 2
    per_cube = []
    for sample in iter_cubes(volume, side, stride):
        b, s = detect_cube(model, sample.cube, anchors, cfg)
        per_cube.append((sample.origin, b, s))
    return stitch_detections(per_cube, cfg.nms_threshold)


def detections_to_world(volume, boxes, scores):
    """Rows (x_mm, y_mm, z_mm, r_mm, score) in world coordinates."""
    w = boxes_to_world(volume, boxes)
    return np.column_stack([w, np.asarray(scores, dtype=np.float64)]) if len(w) else np.zeros((0, 5))
