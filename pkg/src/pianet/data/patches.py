"""Labeled patch sets for stage-1 classifier pretraining."""

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .augment import OPERATORS, augment
from .tiling import crop_cube
from .volume import CubeSample

log = logging.getLogger(__name__)


@dataclass
class PatchSet:
    patches: np.ndarray  # (n, 1, p, p, p)
    labels: np.ndarray  # (n,) 1 = GGO, 0 = background
    scan_index: np.ndarray = None  # (n,) source scan of each patch
    centers: np.ndarray = None  # (n, 3) scan-local (x, y, z) patch centers before augmentation

    def __len__(self):
        return len(self.labels)

    def counts(self):
        return int(np.sum(self.labels == 1)), int(np.sum(self.labels == 0))


def _overlaps(center, side, boxes):
    """True when the cube (center, side) intersects any box with positive volume."""
    if not len(boxes):
        return False
    half = (side + boxes[:, 3]) / 2.0
    return bool(np.any(np.all(np.abs(boxes[:, :3] - center) < half[:, None], axis=1)))


def crop_patches(scans, patch_side=64, negatives_per_positive=3, rng=None, positives_per_nodule=1,
                 jitter=None, augment_positives=True, max_tries=200):
    """Crop positive patches around nodules and negative patches from nodule-free lung.

    ``scans`` is a list of (volume, boxes) with ``boxes`` the scan-local
    nodule cubes (x, y, z, r) of a preprocessed volume. Positives are shifted
    by at most ``jitter`` (default patch_side / 8) voxels per axis and, when
    ``augment_positives`` is set, passed through all five augmentation
    operators. Negatives are centered inside the lung mask and share no
    volume with any nodule cube.
    """
    rng = np.random.default_rng(rng)
    p = int(patch_side)
    jitter = p // 8 if jitter is None else int(jitter)
    if jitter >= p // 2:
        raise ConfigError(f"jitter {jitter} would push nodule centers out of a {p}-voxel patch")
    patches, labels, sources, centers = [], [], [], []
    n_pos = 0
    for si, (volume, boxes) in enumerate(scans):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        for box in boxes:
            if box[3] > p:
                log.warning("skipping nodule of side %.1f: larger than the %d-voxel patch", box[3], p)
                continue
            for _ in range(positives_per_nodule):
                shift = rng.integers(-jitter, jitter + 1, size=3)
                idx = np.floor(box[2::-1]).astype(int) + shift  # voxel holding the center, (z, y, x)
                origin = tuple(int(v) for v in idx - p // 2)
                local = box.copy()
                local[:3] -= np.array(origin[::-1], dtype=np.float64)
                sample = CubeSample(crop_cube(volume.data, origin, p)[None, None], origin, local[None])
                if augment_positives:
                    sample = augment(sample, OPERATORS, rng)
                patches.append(sample.cube[0])
                labels.append(1)
                sources.append(si)
                centers.append(np.array(origin[::-1], dtype=np.float64) + p / 2.0)
                n_pos += 1
    per_scan = [0] * len(scans)
    for k in range(negatives_per_positive * n_pos):
        per_scan[k % max(1, len(scans))] += 1
    n_neg_missing = 0
    for si, ((volume, boxes), want) in enumerate(zip(scans, per_scan)):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        inside = np.argwhere(volume.mask) if volume.mask is not None else np.argwhere(np.ones(volume.shape, bool))
        got = 0
        for _ in range(max_tries * max(want, 1)):
            if got == want:
                break
            idx = inside[rng.integers(len(inside))]
            origin = tuple(int(v) for v in idx - p // 2)
            center = np.array(origin[::-1], dtype=np.float64) + p / 2.0
            if _overlaps(center, p, boxes):
                continue
            patches.append(crop_cube(volume.data, origin, p)[None])
            labels.append(0)
            sources.append(si)
            centers.append(center)
            got += 1
        n_neg_missing += want - got
    if n_neg_missing:
        log.warning("could only place %d of %d negative patches", negatives_per_positive * n_pos - n_neg_missing,
                    negatives_per_positive * n_pos)
    if not patches:
        return PatchSet(np.zeros((0, 1, p, p, p)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                        np.zeros((0, 3)))
    return PatchSet(np.stack(patches), np.asarray(labels, dtype=np.int64), np.asarray(sources, dtype=np.int64),
                    np.stack(centers))
