"""Time each kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Numba timings exclude the first (compiling) call. Outputs of the two
backends are compared on every workload before timing.
"""

import argparse
import timeit

import numpy as np

from pianet import kernels
from pianet.engine import ops


def workloads(rng):
    x = rng.standard_normal((2, 16, 32, 32, 32))
    pooled, idx = ops.maxpool3d(x)
    boxes = np.column_stack([rng.uniform(0, 64, (400, 3)), rng.uniform(2, 16, 400)])
    order = np.argsort(-rng.random(400))
    w = rng.standard_normal((8, 2, 3, 3, 3))
    xc = rng.standard_normal((1, 2, 32, 32, 32))
    return {
        "maxpool3d 2x16x32^3": lambda: ops.maxpool3d(x),
        "max_unpool3d 2x16x16^3": lambda: ops.max_unpool3d(pooled, idx, x.shape),
        "avgpool3d w2 s2": lambda: ops.avgpool3d(x, 2, 2),
        "iou_matrix 400x400": lambda: kernels.iou_matrix(boxes, boxes),
        "nms 400 boxes": lambda: kernels.nms_sorted(np.ascontiguousarray(boxes[order]), 0.1),
        "conv3d cin=2 32^3": lambda: ops.conv3d(xc, w, None, 1, 1),
    }


def _as_arrays(out):
    return [np.asarray(o) for o in (out if isinstance(out, tuple) else (out,))]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    names = list(workloads(rng))
    backends = kernels.available_backends()
    results = {}
    for name in names:
        outs = {}
        for b in backends:
            kernels.use_backend(b)
            fn = workloads(np.random.default_rng(0))[name]
            outs[b] = _as_arrays(fn())  # warm-up (compiles under numba)
            results[(name, b)] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        if len(outs) == 2:
            for a, c in zip(outs["numba"], outs["numpy"]):
                assert a.shape == c.shape and np.allclose(a, c, rtol=0, atol=1e-10), name
    print(f"{'kernel':28s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name in names:
        row = f"{name:28s}" + "".join(f"{results[(name, b)] * 1e3:10.2f}ms" for b in backends)
        if len(backends) == 2:
            row += f"{results[(name, 'numpy')] / results[(name, 'numba')]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
