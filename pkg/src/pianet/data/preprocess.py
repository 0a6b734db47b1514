"""Scan preprocessing: isotropic resampling, HU windowing, lung masking, cropping."""

import numpy as np

from ..errors import ConfigError, DataError

HU_MIN, HU_MAX = -1200.0, 600.0


def _resample_axis(data, n_out, step, axis):
    """Linear interpolation along ``axis`` at source positions j * step (edge clamped)."""
    n_in = data.shape[axis]
    pos = np.minimum(np.arange(n_out) * step, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    w = pos - lo
    shape = [1] * data.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    a = np.take(data, lo, axis=axis)
    b = np.take(data, hi, axis=axis)
    return a + w * (b - a)


def resample_isotropic(volume, target=1.0):
    """Trilinear resampling to ``target`` mm voxels.

    Output voxel j along an axis samples the input at index j * target /
    spacing, so voxel 0 keeps its world position. Extents become
    round(extent * spacing / target).
    """
    if min(volume.shape) < 2:
        raise ConfigError(f"cannot resample a volume with a single-voxel axis, shape {volume.shape}")
    if all(s == target for s in volume.spacing):
        return volume
    data = volume.data.astype(np.float64)
    mask = None if volume.mask is None else volume.mask.astype(np.float64)
    for axis, (n, s) in enumerate(zip(volume.shape, volume.spacing)):
        n_out = max(1, int(round(n * s / target)))
        data = _resample_axis(data, n_out, target / s, axis)
        if mask is not None:
            mask = _resample_axis(mask, n_out, target / s, axis)
    return volume.with_(data=data, spacing=(target,) * 3, mask=None if mask is None else mask >= 0.5)


def normalize_intensity(volume, hu_min=HU_MIN, hu_max=HU_MAX):
    """Linear map of [hu_min, hu_max] onto [0, 255] with clamping; identity if already normalized."""
    if not hu_min < hu_max:
        raise ConfigError(f"hu_min must be below hu_max, got {hu_min}, {hu_max}")
    if volume.normalized:
        return volume
    data = (volume.data.astype(np.float64) - hu_min) * (255.0 / (hu_max - hu_min))
    return volume.with_(data=np.clip(data, 0.0, 255.0), normalized=True)


def apply_lung_mask(volume):
    if volume.mask is None:
        raise ConfigError("apply_lung_mask needs a lung mask; supply one with the scan (e.g. --mask)")
    return volume.with_(data=np.where(volume.mask, volume.data, 0.0))


def mask_bounds(mask):
    """Inclusive-exclusive (lo, hi) voxel bounds of the mask, per axis."""
    idx = np.nonzero(mask)
    if not idx[0].size:
        raise DataError("lung mask is empty")
    lo = np.array([i.min() for i in idx])
    hi = np.array([i.max() + 1 for i in idx])
    return lo, hi


def crop_to_mask(volume, margin=0):
    """Crop to the mask's bounding box (plus ``margin`` voxels), moving the origin accordingly."""
    lo, hi = mask_bounds(volume.mask)
    lo = np.maximum(lo - margin, 0)
    hi = np.minimum(hi + margin, volume.shape)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    origin = np.asarray(volume.origin) + lo * np.asarray(volume.spacing)
    return volume.with_(data=volume.data[sl], mask=volume.mask[sl], origin=tuple(origin))


def preprocess(volume, mask=None, hu_min=HU_MIN, hu_max=HU_MAX, crop=True):
    """Resample to 1 mm, window to [0, 255], zero outside the lung, crop to the lung box."""
    if mask is not None:
        volume = volume.with_(mask=mask)
    v = normalize_intensity(resample_isotropic(volume), hu_min, hu_max)
    v = apply_lung_mask(v)
    return crop_to_mask(v) if crop else v
