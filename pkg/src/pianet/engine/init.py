"""Parameter initialisation."""

import zlib
from dataclasses import dataclass

import numpy as np


@dataclass
class LayerParams:
    weight: np.ndarray
    bias: np.ndarray


def fans(shape):
    """Fan-in and fan-out of a dense (out, in) or conv (out, in, k...) weight."""
    if len(shape) < 2:
        raise ValueError(f"cannot derive fans from shape {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_init(shape, rng_seed, bias_size=None):
    """Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)) and zero bias.

    ``bias_size`` defaults to ``shape[0]``; transposed convolutions pass their
    output channel count (``shape[1]``).
    """
    fan_in, fan_out = fans(shape)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(rng_seed)
    weight = rng.uniform(-limit, limit, size=shape)
    return LayerParams(weight, np.zeros(shape[0] if bias_size is None else bias_size))


def layer_seed(seed, name):
    """Stable per-layer seed so each layer's init depends only on (seed, name)."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
