import numpy as np
import pytest

from pianet.data.preprocess import (
    apply_lung_mask, crop_to_mask, mask_bounds, normalize_intensity, preprocess, resample_isotropic,
)
from pianet.data.volume import Volume
from pianet.errors import ConfigError, DataError


def test_isotropic_volume_unchanged(rng):
    vol = Volume(rng.standard_normal((4, 5, 6)))
    assert resample_isotropic(vol) is vol


def test_constant_volume_stays_constant():
    vol = Volume(np.full((5, 6, 7), 3.25), spacing=(2.5, 0.7, 1.3))
    out = resample_isotropic(vol)
    assert out.shape == (round(5 * 2.5), round(6 * 0.7), round(7 * 1.3))
    assert np.all(out.data == 3.25) and out.spacing == (1.0, 1.0, 1.0)


def test_linear_ramp_reproduced():
    x = np.arange(20) * 3.0  # value 3 per voxel at spacing 2 mm -> 1.5 per mm
    vol = Volume(np.broadcast_to(x, (3, 4, 20)).copy(), spacing=(1.0, 1.0, 2.0))
    out = resample_isotropic(vol)
    assert out.shape == (3, 4, 40)
    interior = out.data[:, :, :38]
    expect = np.arange(38) * 1.5
    assert np.max(np.abs(interior - expect)) < 1e-9


def test_single_voxel_axis_rejected():
    with pytest.raises(ConfigError, match="single-voxel"):
        resample_isotropic(Volume(np.zeros((1, 4, 4)), spacing=(2, 1, 1)))


def test_mask_resampled_with_volume():
    mask = np.zeros((4, 4, 4), dtype=bool)
    mask[:2] = True
    out = resample_isotropic(Volume(np.zeros((4, 4, 4)), spacing=(2, 1, 1), mask=mask))
    assert out.mask.shape == (8, 4, 4)
    assert out.mask[:3].all() and not out.mask[4:].any()


def test_normalize_endpoints():
    vol = Volume(np.array([-1200.0, 600.0, -300.0, -5000.0, 9000.0]).reshape(1, 1, 5))
    out = normalize_intensity(vol)
    np.testing.assert_allclose(out.data.ravel(), [0.0, 255.0, 127.5, 0.0, 255.0])
    assert out.normalized
    assert normalize_intensity(out) is out
    with pytest.raises(ConfigError):
        normalize_intensity(vol, 10, 10)


def test_lung_mask():
    vol = Volume(np.full((2, 2, 2), 5.0), mask=np.ones((2, 2, 2), dtype=bool))
    np.testing.assert_array_equal(apply_lung_mask(vol).data, vol.data)
    empty = vol.with_(mask=np.zeros((2, 2, 2), dtype=bool))
    assert not apply_lung_mask(empty).data.any()
    with pytest.raises(ConfigError, match="supply one"):
        apply_lung_mask(Volume(np.zeros((2, 2, 2))))


def test_crop_moves_origin():
    mask = np.zeros((6, 6, 6), dtype=bool)
    mask[2:4, 1:5, 3:6] = True
    vol = Volume(np.arange(216.0).reshape(6, 6, 6), spacing=(1, 1, 1), origin=(10, 20, 30), mask=mask)
    lo, hi = mask_bounds(mask)
    assert lo.tolist() == [2, 1, 3] and hi.tolist() == [4, 5, 6]
    out = crop_to_mask(vol)
    assert out.shape == (2, 4, 3) and out.origin == (12.0, 21.0, 33.0)
    # a voxel keeps its world position
    np.testing.assert_allclose(out.voxel_to_world([0, 0, 0]), vol.voxel_to_world([2, 1, 3]))
    with pytest.raises(DataError):
        mask_bounds(np.zeros((2, 2, 2), dtype=bool))


def test_preprocess_idempotent(rng):
    mask = np.ones((6, 8, 8), dtype=bool)
    vol = Volume(rng.uniform(-1500, 800, size=(6, 8, 8)), spacing=(2.0, 0.75, 0.75), mask=mask)
    once = preprocess(vol, crop=False)
    twice = preprocess(once, crop=False)
    np.testing.assert_array_equal(once.data, twice.data)
    assert once.spacing == (1.0, 1.0, 1.0) and once.data.min() >= 0 and once.data.max() <= 255
