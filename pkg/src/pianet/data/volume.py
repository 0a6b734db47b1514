"""Scan, annotation and cube containers.

Array axes are (z, y, x). Physical vectors (spacing, origin) are also stored
in (z, y, x) order; MetaImage headers list them x first and are converted at
the I/O boundary. World coordinates in mm follow the MetaImage convention:
voxel index ``i`` sits at ``origin + i * spacing``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError, DataError


@dataclass(frozen=True)
class Volume:
    data: np.ndarray  # (z, y, x)
    spacing: tuple = (1.0, 1.0, 1.0)  # mm per voxel, (dz, dy, dx)
    origin: tuple = (0.0, 0.0, 0.0)  # world mm of voxel (0, 0, 0), (z, y, x)
    mask: np.ndarray = None  # boolean lung mask, same extents
    normalized: bool = False  # True once mapped from HU to [0, 255]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ConfigError(f"volume data must be 3-D, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigError(f"spacing must be three positive values, got {self.spacing}")
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != data.shape:
                raise ConfigError(f"mask shape {mask.shape} does not match data shape {data.shape}")
            object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.data.shape

    def with_(self, **changes):
        return replace(self, **changes)

    def world_to_voxel(self, xyz):
        """World (x, y, z) mm -> fractional voxel indices (z, y, x)."""
        zyx = np.asarray(xyz, dtype=np.float64)[..., ::-1]
        return (zyx - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_to_world(self, zyx):
        """Fractional voxel indices (z, y, x) -> world (x, y, z) mm."""
        w = np.asarray(self.origin) + np.asarray(zyx, dtype=np.float64) * np.asarray(self.spacing)
        return w[..., ::-1]


@dataclass(frozen=True)
class Nodule:
    x: float  # world mm
    y: float
    z: float
    diameter: float  # mm
    agreement: int = 4  # radiologists marking it, 0..4
    relevant: bool = True  # False for "irrelevant findings"

    def __post_init__(self):
        if not self.diameter > 0:
            raise DataError(f"nodule diameter must be > 0, got {self.diameter}")
        if int(self.agreement) != self.agreement or not 0 <= self.agreement <= 4:
            raise DataError(f"nodule agreement must be an integer in 0..4, got {self.agreement}")

    @property
    def center(self):
        return np.array([self.x, self.y, self.z])


@dataclass
class ScanAnnotation:
    scan_id: str
    nodules: list = field(default_factory=list)

    def relevant(self):
        return [n for n in self.nodules if n.relevant]

    def irrelevant(self):
        return [n for n in self.nodules if not n.relevant]


def filter_annotation(annotation, min_agreement=3):
    """Mark nodules below the agreement threshold as irrelevant findings.

    Nothing is dropped: evaluation excuses hits on irrelevant findings
    rather than counting them as false positives.
    """
    out = [replace(n, relevant=bool(n.relevant and n.agreement >= min_agreement)) for n in annotation.nodules]
    return ScanAnnotation(annotation.scan_id, out)


@dataclass
class CubeSample:
    cube: np.ndarray  # (1, 1, s, s, s)
    origin: tuple = (0, 0, 0)  # voxel offset of the cube inside the scan, (z, y, x)
    boxes: np.ndarray = None  # (n, 4) cube-local (x, y, z, r)

    def __post_init__(self):
        self.boxes = np.zeros((0, 4)) if self.boxes is None else np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)

    @property
    def side(self):
        return self.cube.shape[-1]

    def is_valid(self):
        s = self.side
        b = self.boxes
        return bool(np.all(b[:, 3] > 0) and np.all(b[:, :3] >= 0) and np.all(b[:, :3] < s)
                    and np.all(np.isfinite(b)))


def nodule_boxes(volume, nodules):
    """Scan-local boxes (x, y, z, r) for ``nodules`` in a 1 mm isotropic volume.

    Voxel ``i`` of the volume is centered at local coordinate ``i + 0.5``.
    """
    if not nodules:
        return np.zeros((0, 4))
    centers = np.array([n.center for n in nodules])
    zyx = volume.world_to_voxel(centers) + 0.5
    r = np.array([n.diameter for n in nodules])
    return np.column_stack([zyx[:, ::-1], r])


def boxes_to_world(volume, boxes):
    """Inverse of ``nodule_boxes``: scan-local boxes -> world (x, y, z) and side in mm."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    xyz = volume.voxel_to_world(b[:, 2::-1] - 0.5)
    return np.column_stack([xyz, b[:, 3] * volume.spacing[0]])
