"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen at import time from the ``PIANET_BACKEND`` environment
variable (``numba`` or ``numpy``). When unset, numba is used if it imports.
``use_backend`` switches at runtime, which the benchmark and the
backend-equivalence tests rely on. Call kernels through the module
(``kernels.nms_sorted(...)``) so a switch is picked up.

Convolutions normally run as shifted BLAS matrix products in
``pianet.engine.ops``. The numba backend adds direct stride-1 convolution
loops (``conv3d_direct*``) that ops uses for layers with very few input
channels, where BLAS is inefficient; under the numpy backend they are None.
"""

import os

import numpy as np

from . import _numpy

try:
    from . import _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

_NAMES = ("maxpool2_forward", "scatter_add", "gather", "avgpool3d", "iou_matrix", "nms_sorted")
_OPTIONAL = ("conv3d_direct", "conv3d_direct_weight_grad", "conv3d_direct_input_grad")
_active = None


def available_backends():
    return ("numba", "numpy") if _numba is not None else ("numpy",)


def use_backend(name):
    """Select ``"numba"`` or ``"numpy"`` for every kernel in this module."""
    global _active
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and _numba is None:
        raise ValueError("numba backend requested but numba is not importable")
    impl = _numba if name == "numba" else _numpy
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(impl, fn)
    for fn in _OPTIONAL:
        g[fn] = getattr(impl, fn, None)
    _active = name


def current_backend():
    return _active


use_backend(os.environ.get("PIANET_BACKEND", "numba" if _numba is not None else "numpy"))


def as_boxes(arr):
    """Coerce to a C-contiguous float64 (n, 4) array of (x, y, z, r)."""
    out = np.ascontiguousarray(arr, dtype=np.float64)
    return out.reshape(-1, 4)
