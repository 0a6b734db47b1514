"""Pure-numpy implementations of the hot loops."""

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view


def maxpool2_forward(x):
    n, c, d, h, w = x.shape
    win = x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    win = win.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // 2, h // 2, w // 2, 8)
    # argmax returns the first maximum, which is the tie rule we want
    local = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    dz, dy, dx = local // 4, (local // 2) % 2, local % 2
    oz = np.arange(d // 2).reshape(-1, 1, 1) * 2
    oy = np.arange(h // 2).reshape(1, -1, 1) * 2
    ox = np.arange(w // 2).reshape(1, 1, -1) * 2
    idx = ((oz + dz) * h + (oy + dy)) * w + (ox + dx)
    return np.ascontiguousarray(out), idx.astype(np.int64)


def scatter_add(values, indices, spatial_size):
    n, c = values.shape[:2]
    out = np.zeros((n, c, spatial_size))
    m = int(np.prod(values.shape[2:]))
    flat_v = values.reshape(n, c, m)
    flat_i = indices.reshape(n, c, m)
    for b in range(n):
        for ch in range(c):
            np.add.at(out[b, ch], flat_i[b, ch], flat_v[b, ch])
    return out


def gather(values, indices):
    n, c = values.shape[:2]
    flat = values.reshape(n, c, int(np.prod(values.shape[2:])))
    return np.take_along_axis(flat, indices.reshape(n, c, int(np.prod(indices.shape[2:]))), axis=-1).reshape(indices.shape)


def avgpool3d(x, window, stride):
    if window == stride and all(s % window == 0 for s in x.shape[2:]):
        n, c, d, h, w = x.shape
        k = window
        r = x.reshape(n, c, d // k, k, h // k, k, w // k, k)
        return r.mean(axis=(3, 5, 7))
    view = sliding_window_view(x, (window, window, window), axis=(2, 3, 4))
    view = view[:, :, ::stride, ::stride, ::stride]
    return view.mean(axis=(-3, -2, -1))


def cube_bounds(boxes):
    half = boxes[:, 3:4] / 2.0
    return boxes[:, :3] - half, boxes[:, :3] + half


def iou_matrix(a, b):
    lo_a, hi_a = cube_bounds(a)
    lo_b, hi_b = cube_bounds(b)
    lo = np.maximum(lo_a[:, None, :], lo_b[None, :, :])
    hi = np.minimum(hi_a[:, None, :], hi_b[None, :, :])
    va = a[:, 3] ** 3
    vb = b[:, 3] ** 3
    # rounded bounds can overshoot the smaller volume; cap so IoU stays in [0, 1]
    inter = np.minimum(np.prod(np.clip(hi - lo, 0.0, None), axis=-1), np.minimum(va[:, None], vb[None, :]))
    union = va[:, None] + vb[None, :] - inter
    return inter / union


def nms_sorted(boxes, threshold):
    """Greedy suppression over boxes already sorted by descending score."""
    n = boxes.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    alive = np.ones(n, dtype=np.bool_)
    for i in range(n):
        if not alive[i]:
            continue
        keep[i] = True
        rest = np.nonzero(alive[i + 1:])[0] + i + 1
        if rest.size:
            ious = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            alive[rest[ious > threshold]] = False
    return keep
