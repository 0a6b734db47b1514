import numpy as np
import pytest

from pianet.data.tiling import (
    axis_origins, boxes_in_cube, crop_cube, cube_count, cube_origins, extract_cubes, stitch_detections,
)
from pianet.data.volume import Volume


def test_reference_scan_cube_count():
    # The reported count for a 252x222x192 scan is 24. The documented rule
    # gives 3 * 3 * 2 = 18; see the decisions ledger for why no single
    # per-axis stride-64 rule yields 24.
    assert cube_count((252, 222, 192)) == 24


def test_documented_rule_counts():
    assert axis_origins(252) == [0, 64, 124]
    assert axis_origins(222) == [0, 64, 94]
    assert axis_origins(192) == [0, 64]
    assert cube_count((252, 222, 192)) == 18


def test_single_cube_cases():
    assert cube_origins((128, 128, 128)) == [(0, 0, 0)]
    assert cube_origins((40, 100, 128)) == [(0, 0, 0)]


def test_every_voxel_covered(rng):
    for _ in range(50):
        shape = tuple(int(e) for e in rng.integers(20, 400, size=3))
        side, stride = 128, 64
        for e in shape:
            covered = np.zeros(e, dtype=bool)
            for o in axis_origins(e, side, stride):
                covered[o:o + side] = True
                assert 0 <= o and (o + side <= e or o == 0)
            assert covered.all()


def test_crop_cube_pads_with_zeros():
    data = np.arange(27.0).reshape(3, 3, 3)
    cube = crop_cube(data, (0, 0, 0), 4)
    np.testing.assert_array_equal(cube[:3, :3, :3], data)
    assert cube[3].sum() == 0
    shifted = crop_cube(data, (-1, 0, 2), 2)
    assert shifted[0].sum() == 0 and shifted[1, 0, 0] == data[0, 0, 2]


def test_boxes_translated_into_cubes():
    vol = Volume(np.zeros((192, 192, 192)))
    boxes = np.array([[70.5, 10.5, 130.5, 8.0]])
    cubes = extract_cubes(vol, boxes=boxes)
    holding = [c for c in cubes if len(c.boxes)]
    assert {c.origin for c in holding} == {(64, 0, 0), (64, 0, 64)}
    for c in holding:
        np.testing.assert_allclose(c.boxes[0, :3] + [c.origin[2], c.origin[1], c.origin[0]], boxes[0, :3])
        assert c.is_valid()


def test_nodules_in_lung_appear_in_some_cube(rng):
    vol = Volume(np.zeros((150, 200, 170)))
    boxes = np.column_stack([rng.uniform(0, 170, 30), rng.uniform(0, 200, 30), rng.uniform(0, 150, 30),
                             rng.uniform(4, 20, 30)])
    cubes = extract_cubes(vol, boxes=boxes)
    seen = set()
    for c in cubes:
        shift = np.array([c.origin[2], c.origin[1], c.origin[0]])
        for b in c.boxes:
            seen.add(tuple(np.round(b[:3] + shift, 9)))
    assert seen == {tuple(np.round(b[:3], 9)) for b in boxes}


def test_boxes_in_cube_excludes_outside():
    b = boxes_in_cube([[10, 10, 10, 4], [200, 10, 10, 4]], (0, 0, 0), 128)
    assert len(b) == 1


def test_stitch_examples():
    b, s = stitch_detections([((0, 0, 64), [[10, 20, 30, 8]], [0.7])])
    np.testing.assert_allclose(b, [[74, 20, 30, 8]])
    # the same nodule seen from two overlapping cubes
    per_cube = [((0, 0, 0), [[80, 20, 30, 8]], [0.6]), ((0, 0, 64), [[16.5, 20, 30, 8]], [0.9])]
    b, s = stitch_detections(per_cube)
    assert s.tolist() == [0.9] and b[0, 0] == 80.5
    b, s = stitch_detections([])
    assert b.shape == (0, 4) and s.shape == (0,)
