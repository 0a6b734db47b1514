"""Synthetic GGO phantoms for desk-scale training and testing.

Intensities are on the normalized [0, 255] scale. A phantom is an
ellipsoidal lung (textured background around ``background``) inside a bright
chest wall, crossed by bright tubular vessels, with optional bright pleural
plaques on the wall and faint spherical GGO blobs with soft edges.
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from ..errors import ConfigError, GenerationError
from .volume import Nodule, ScanAnnotation, Volume

WALL_INTENSITY = 175.0


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    side: int = 64
    nodule_count: tuple = (1, 3)  # inclusive range
    diameter_mm: tuple = (6.0, 14.0)
    contrast: tuple = (40.0, 80.0)  # GGO amplitude above background
    background: float = 60.0
    noise: float = 6.0  # std of the smoothed texture
    vessel_count: int = 4
    wall_count: int = 3  # 0: no chest wall; n >= 1: wall plus n - 1 pleural plaques
    scan_id: str = None

    def __post_init__(self):
        object.__setattr__(self, "nodule_count", tuple(int(v) for v in self.nodule_count))
        object.__setattr__(self, "diameter_mm", tuple(float(v) for v in self.diameter_mm))
        object.__setattr__(self, "contrast", tuple(float(v) for v in self.contrast))
        lo, hi = self.diameter_mm
        if not 0 < lo <= hi < self.side / 2:
            raise ConfigError(f"diameter range must lie in (0, side/2), got {self.diameter_mm}")
        if not 0 < self.contrast[0] <= self.contrast[1]:
            raise ConfigError(f"contrast range must be positive, got {self.contrast}")
        if not 0 <= self.nodule_count[0] <= self.nodule_count[1]:
            raise ConfigError(f"bad nodule count range {self.nodule_count}")
        if self.side < 16 or self.noise < 0 or self.vessel_count < 0 or self.wall_count < 0:
            raise ConfigError("side >= 16 and non-negative noise and structure counts required")

    @property
    def min_contrast(self):
        return self.contrast[0]

    @property
    def name(self):
        return self.scan_id or f"phantom-{self.seed:04d}"

    def to_dict(self):
        d = asdict(self)
        for k in ("nodule_count", "diameter_mm", "contrast"):
            d[k] = list(d[k])
        return d


def _grid(side):
    return np.indices((side, side, side), dtype=np.float64)


def _segment_distance(grid, a, b):
    """Distance from every voxel to segment a-b (points in (z, y, x))."""
    ab = b - a
    rel = grid - a.reshape(3, 1, 1, 1)
    t = np.clip(np.tensordot(ab, rel, axes=1) / max(ab @ ab, 1e-12), 0.0, 1.0)
    d = rel - ab.reshape(3, 1, 1, 1) * t
    return np.sqrt(np.sum(d * d, axis=0))


def _vessel_path(rng, lung, side):
    inside = np.argwhere(lung)
    p = inside[rng.integers(len(inside))].astype(np.float64)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    points = [p]
    for _ in range(int(rng.integers(4, 9))):
        direction = direction + rng.normal(scale=0.35, size=3)
        direction /= np.linalg.norm(direction)
        p = np.clip(p + direction * side / 10.0, 0, side - 1)
        points.append(p)
    return points


def _measured_contrast(data, lung, center, radius, grid):
    d = np.sqrt(np.sum((grid - center.reshape(3, 1, 1, 1)) ** 2, axis=0))
    inside = d < radius
    ring = (d >= radius + 3) & (d < radius + 6) & lung
    if not inside.any() or not ring.any():
        return -np.inf
    return data[inside].mean() - data[ring].mean()


def generate_phantom(spec, max_tries=200):
    """Return (Volume, ScanAnnotation) for ``spec``; deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    s = spec.side
    grid = _grid(s)
    c = (s - 1) / 2.0
    semi = np.array([0.40, 0.42, 0.44]) * s * rng.uniform(0.95, 1.05, size=3)
    ell = np.sqrt(np.sum(((grid - c) / semi.reshape(3, 1, 1, 1)) ** 2, axis=0))
    lung = ell < 1.0

    texture = ndimage.gaussian_filter(rng.normal(size=(s, s, s)), 1.5)
    texture *= spec.noise / max(texture.std(), 1e-12)
    data = spec.background + texture
    mask = lung
    if spec.wall_count >= 1:
        data = np.where(lung, data, WALL_INTENSITY + 0.5 * texture)
        # roughly labeled mask: one voxel of wall survives masking
        mask = ndimage.binary_dilation(lung, iterations=1)
        boundary = np.argwhere(lung & ~ndimage.binary_erosion(lung, iterations=1))
        for _ in range(spec.wall_count - 1):
            q = boundary[rng.integers(len(boundary))].astype(np.float64)
            rad = rng.uniform(2.0, 4.0)
            dist = np.sqrt(np.sum((grid - q.reshape(3, 1, 1, 1)) ** 2, axis=0))
            plaque = np.exp(-np.maximum(dist - rad, 0.0) ** 2 / 2.0)
            data = np.maximum(data, spec.background + (WALL_INTENSITY - spec.background) * plaque)
    else:
        data = np.where(lung, data, 0.0)

    vessel_dist = np.full((s, s, s), np.inf)
    for _ in range(spec.vessel_count):
        pts = _vessel_path(rng, lung, s)
        rad = rng.uniform(0.8, 1.8)
        amp = rng.uniform(90.0, 130.0)
        dist = np.full((s, s, s), np.inf)
        for a, b in zip(pts, pts[1:]):
            dist = np.minimum(dist, _segment_distance(grid, a, b))
        data = data + amp * np.exp(-(dist ** 2) / (2 * rad ** 2)) * lung
        vessel_dist = np.minimum(vessel_dist, dist - rad)

    depth = ndimage.distance_transform_edt(lung)
    n_nodules = int(rng.integers(spec.nodule_count[0], spec.nodule_count[1] + 1))
    placed = []
    for _ in range(n_nodules):
        for _ in range(max_tries):
            diameter = float(rng.uniform(*spec.diameter_mm))
            radius = diameter / 2.0
            clearance = radius + 4.0
            allowed = (depth >= clearance) & (vessel_dist >= clearance)
            for p, r, _ in placed:
                allowed &= np.sum((grid - p.reshape(3, 1, 1, 1)) ** 2, axis=0) >= (radius + r + 4.0) ** 2
            candidates = np.argwhere(allowed)
            if not len(candidates):
                continue
            center = candidates[rng.integers(len(candidates))] + rng.uniform(-0.5, 0.5, size=3)
            amp = float(rng.uniform(*spec.contrast))
            d = np.sqrt(np.sum((grid - center.reshape(3, 1, 1, 1)) ** 2, axis=0))
            blob = amp * np.exp(-np.maximum(d - (radius - 0.5), 0.0) ** 2 / 2.0)
            trial = data + blob
            if _measured_contrast(trial, lung, center, radius, grid) < spec.min_contrast:
                continue
            data = trial
            placed.append((center, radius, amp))
            break
        else:
            raise GenerationError(f"could not place nodule {len(placed) + 1} of {n_nodules} "
                                  f"after {max_tries} tries (seed {spec.seed})")

    data = np.clip(data, 0.0, 255.0)
    volume = Volume(data, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), mask=mask, normalized=True)
    nodules = [Nodule(float(p[2]), float(p[1]), float(p[0]), 2.0 * r, 4, True) for p, r, _ in placed]
    return volume, ScanAnnotation(spec.name, nodules)


def to_hu(volume, hu_min=-1200.0, hu_max=600.0):
    """Normalized intensities back to int16 HU (inverse of the default window)."""
    hu = volume.data * ((hu_max - hu_min) / 255.0) + hu_min
    return volume.with_(data=np.rint(hu).astype(np.int16), normalized=False)
