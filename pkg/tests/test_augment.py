import numpy as np
import pytest

from pianet import boxes as bx
from pianet.data import augment as aug
from pianet.data.volume import CubeSample


@pytest.fixture
def sample(rng):
    cube = rng.standard_normal((1, 1, 16, 16, 16))
    return CubeSample(cube, (3, 4, 5), np.array([[4.5, 8.0, 11.25, 3.0], [10.0, 2.5, 6.0, 5.0]]))


def blob_sample(center_xyz, side=24, radius=3.0):
    idx = np.indices((side, side, side), dtype=np.float64) + 0.5
    zyx = np.asarray(center_xyz)[::-1].reshape(3, 1, 1, 1)
    cube = (np.sum((idx - zyx) ** 2, axis=0) <= radius ** 2).astype(np.float64)
    return CubeSample(cube[None, None], (0, 0, 0), [[*center_xyz, 2 * radius]])


def centroid_xyz(cube):
    w = cube[0, 0]
    idx = np.indices(w.shape, dtype=np.float64) + 0.5
    zyx = [(idx[k] * w).sum() / w.sum() for k in range(3)]
    return np.array(zyx[::-1])


def test_flip_twice_is_identity(sample):
    for ax in range(3):
        twice = aug.flip_cube(aug.flip_cube(sample, [ax]), [ax])
        np.testing.assert_array_equal(twice.cube, sample.cube)
        np.testing.assert_array_equal(twice.boxes, sample.boxes)


def test_axis_swap_inverse(sample):
    perm = (2, 0, 1)
    inv = tuple(np.argsort(perm))
    back = aug.swap_axes(aug.swap_axes(sample, perm), inv)
    np.testing.assert_array_equal(back.cube, sample.cube)
    np.testing.assert_array_equal(back.boxes, sample.boxes)


@pytest.mark.parametrize("op", ["flip", "swap", "rot90"])
def test_boxes_follow_content(op):
    s = blob_sample((6.5, 9.5, 15.5))
    if op == "flip":
        out = aug.flip_cube(s, [0, 2])
    elif op == "swap":
        out = aug.swap_axes(s, (1, 2, 0))
    else:
        out = aug.rotate90(s, (1, 2), 1)
    np.testing.assert_allclose(centroid_xyz(out.cube), out.boxes[0, :3], atol=1e-9)


def test_rotate90_matches_numpy(sample):
    for plane in [(0, 1), (0, 2), (1, 2)]:
        for k in range(4):
            out = aug.rotate90(sample, plane, k)
            np.testing.assert_array_equal(out.cube[0, 0], np.rot90(sample.cube[0, 0], k, axes=plane))


def test_translate_moves_boxes_with_content():
    s = blob_sample((8.5, 9.5, 10.5))
    out = aug.translate_cube(s, (2, -3, 1))  # (z, y, x)
    np.testing.assert_allclose(out.boxes[0, :3], [9.5, 6.5, 12.5])
    np.testing.assert_allclose(centroid_xyz(out.cube), out.boxes[0, :3], atol=1e-9)


def test_resize_scales_boxes_and_keeps_iou():
    side = 32
    gt = np.array([[10.0, 14.0, 20.0, 6.0]])
    anchor = np.array([[12.0, 12.0, 18.0, 8.0]])
    for f in (0.9, 1.0, 1.07):
        g2 = aug.resize_boxes(gt, f, side)
        a2 = aug.resize_boxes(anchor, f, side)
        assert g2[0, 3] == pytest.approx(6.0 * f)
        assert abs(bx.iou_matrix(g2, a2)[0, 0] - bx.iou_matrix(gt, anchor)[0, 0]) < 1e-9


def test_resize_moves_blob_with_box():
    s = blob_sample((7.0, 15.0, 12.0), radius=3.5)
    out = aug.resize_cube(s, 1.1)
    np.testing.assert_allclose(centroid_xyz(out.cube), out.boxes[0, :3], atol=0.05)


def test_free_rotation_zero_is_identity(sample):
    out = aug.rotate_free(sample, (0, 1), 0.0)
    np.testing.assert_allclose(out.cube, sample.cube, atol=1e-12)
    np.testing.assert_allclose(out.boxes, sample.boxes, atol=1e-12)


def test_augment_keeps_samples_valid(sample, rng):
    for _ in range(30):
        out = aug.augment(sample, aug.OPERATORS, rng)
        assert out.is_valid() and out.cube.shape == sample.cube.shape


def test_augment_skips_when_redraws_exhausted(rng):
    s = CubeSample(np.zeros((1, 1, 8, 8, 8)), (0, 0, 0), [[0.2, 4.0, 4.0, 1.0]])
    out = aug.augment(s, ["translate"], rng, max_shift=8, max_redraws=0)
    assert out is s


def test_unknown_operator(sample, rng):
    with pytest.raises(ValueError):
        aug.augment(sample, ["shear"], rng)
