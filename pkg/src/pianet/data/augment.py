"""Cube augmentation: flip, resize, translate, rotate and axis swap.

Every operator transforms the cube data and its boxes together. Array axes
are (z, y, x) while box coordinates are (x, y, z); ``_COORD`` maps an array
axis to its box column. A box center c along an axis of length s maps to
s - c under a flip because voxel i is centered at i + 0.5.
"""

import numpy as np
from scipy import ndimage

from .volume import CubeSample

OPERATORS = ("flip", "resize", "translate", "rotate", "axis_swap")
STAGE2_OPERATORS = ("flip", "resize")
_COORD = {0: 2, 1: 1, 2: 0}


def flip_cube(sample, axes):
    cube = sample.cube
    b = sample.boxes.copy()
    s = sample.side
    for ax in axes:
        cube = np.flip(cube, axis=2 + ax)
        b[:, _COORD[ax]] = s - b[:, _COORD[ax]]
    return CubeSample(np.ascontiguousarray(cube), sample.origin, b)


def swap_axes(sample, perm):
    """New array axis k is old axis perm[k]."""
    perm = tuple(int(p) for p in perm)
    cube = np.ascontiguousarray(sample.cube.transpose((0, 1) + tuple(2 + p for p in perm)))
    b = sample.boxes.copy()
    for k, p in enumerate(perm):
        b[:, _COORD[k]] = sample.boxes[:, _COORD[p]]
    return CubeSample(cube, sample.origin, b)


def rotate90(sample, plane, k):
    """Rotate by k quarter turns in the plane of array axes ``plane`` (same as np.rot90)."""
    p, q = plane
    perm = [0, 1, 2]
    perm[p], perm[q] = perm[q], perm[p]
    out = sample
    for _ in range(k % 4):
        out = swap_axes(flip_cube(out, [q]), perm)
    return out


def resize_boxes(boxes, factor, side):
    """Scale boxes about the cube center."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    c = side / 2.0
    b[:, :3] = c + factor * (b[:, :3] - c)
    b[:, 3] *= factor
    return b


def _resample(cube, src_coords):
    """Trilinear sampling of a (1, 1, s, s, s) cube at index coordinates, zeros outside."""
    out = ndimage.map_coordinates(cube[0, 0], src_coords, order=1, mode="constant", cval=0.0)
    return out.reshape(cube.shape)


def resize_cube(sample, factor):
    s = sample.side
    c = s / 2.0
    grid = np.indices((s, s, s), dtype=np.float64)
    src = c + (grid + 0.5 - c) / factor - 0.5
    return CubeSample(_resample(sample.cube, src.reshape(3, -1)), sample.origin,
                      resize_boxes(sample.boxes, factor, s))


def translate_cube(sample, shift):
    """Shift content by integer voxels ``shift`` (z, y, x), filling with zeros."""
    cube = np.zeros_like(sample.cube)
    src, dst = [], []
    for t, n in zip(shift, cube.shape[2:]):
        t = int(t)
        src.append(slice(max(0, -t), n - max(0, t)))
        dst.append(slice(max(0, t), n - max(0, -t)))
    cube[(Ellipsis, *dst)] = sample.cube[(Ellipsis, *src)]
    b = sample.boxes.copy()
    for ax, t in enumerate(shift):
        b[:, _COORD[ax]] += t
    return CubeSample(cube, sample.origin, b)


def rotate_free(sample, plane, degrees):
    """Rotate by an arbitrary angle about the cube center in ``plane``; box sides unchanged."""
    s = sample.side
    c = s / 2.0
    p, q = plane
    th = np.deg2rad(degrees)
    grid = np.indices((s, s, s), dtype=np.float64) + 0.5 - c
    src = grid.copy()
    # inverse rotation maps each output voxel back to its source position
    src[p] = np.cos(th) * grid[p] + np.sin(th) * grid[q]
    src[q] = -np.sin(th) * grid[p] + np.cos(th) * grid[q]
    cube = _resample(sample.cube, (src + c - 0.5).reshape(3, -1))
    b = sample.boxes.copy()
    cp, cq = _COORD[p], _COORD[q]
    dp, dq = sample.boxes[:, cp] - c, sample.boxes[:, cq] - c
    b[:, cp] = c + np.cos(th) * dp - np.sin(th) * dq
    b[:, cq] = c + np.sin(th) * dp + np.cos(th) * dq
    return CubeSample(cube, sample.origin, b)


def augment(sample, ops, rng, max_shift=8, resize_range=(0.9, 1.1), free_rotation=False,
            max_degrees=10.0, max_redraws=10):
    """Apply the listed operators in canonical order with random parameters.

    Operators whose result would push a box center out of the cube are
    redrawn up to ``max_redraws`` times and skipped after that.
    """
    unknown = set(ops) - set(OPERATORS)
    if unknown:
        raise ValueError(f"unknown augmentation operators: {sorted(unknown)}")
    out = sample
    for op in OPERATORS:
        if op not in ops:
            continue
        for _ in range(max_redraws):
            cand = _draw(op, out, rng, max_shift, resize_range, free_rotation, max_degrees)
            if cand.is_valid():
                out = cand
                break
    return out


def _draw(op, sample, rng, max_shift, resize_range, free_rotation, max_degrees):
    if op == "flip":
        return flip_cube(sample, [ax for ax in range(3) if rng.random() < 0.5])
    if op == "resize":
        return resize_cube(sample, rng.uniform(*resize_range))
    if op == "translate":
        return translate_cube(sample, rng.integers(-max_shift, max_shift + 1, size=3))
    if op == "rotate":
        plane = [(0, 1), (0, 2), (1, 2)][rng.integers(3)]
        if free_rotation:
            return rotate_free(sample, plane, rng.uniform(-max_degrees, max_degrees))
        return rotate90(sample, plane, int(rng.integers(1, 4)))
    return swap_axes(sample, rng.permutation(3))
