"""numba-compiled versions of the hot loops in ``_numpy``."""

import numpy as np
from numba import njit


@njit(cache=True)
def maxpool2_forward(x):
    n, c, d, h, w = x.shape
    od, oh, ow = d // 2, h // 2, w // 2
    out = np.empty((n, c, od, oh, ow))
    idx = np.empty((n, c, od, oh, ow), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        best = -np.inf
                        arg = -1
                        for dz in range(2):
                            for dy in range(2):
                                for dx in range(2):
                                    zi = 2 * z + dz
                                    yi = 2 * y + dy
                                    xi = 2 * xx + dx
                                    v = x[b, ch, zi, yi, xi]
                                    if v > best or arg < 0:
                                        best = v
                                        arg = (zi * h + yi) * w + xi
                        out[b, ch, z, y, xx] = best
                        idx[b, ch, z, y, xx] = arg
    return out, idx


@njit(cache=True)
def scatter_add(values, indices, spatial_size):
    n, c = values.shape[0], values.shape[1]
    out = np.zeros((n, c, spatial_size))
    flat_v = values.reshape(n, c, -1)
    flat_i = indices.reshape(n, c, -1)
    m = flat_v.shape[2]
    for b in range(n):
        for ch in range(c):
            for j in range(m):
                out[b, ch, flat_i[b, ch, j]] += flat_v[b, ch, j]
    return out


@njit(cache=True)
def _gather(flat, flat_i):
    n, c, m = flat_i.shape
    out = np.empty((n, c, m))
    for b in range(n):
        for ch in range(c):
            for j in range(m):
                out[b, ch, j] = flat[b, ch, flat_i[b, ch, j]]
    return out


def gather(values, indices):
    n, c = values.shape[:2]
    flat = np.ascontiguousarray(values).reshape(n, c, -1)
    fi = np.ascontiguousarray(indices).reshape(n, c, -1)
    return _gather(flat, fi).reshape(indices.shape)


@njit(cache=True)
def _avgpool3d(x, window, stride):
    n, c, d, h, w = x.shape
    od = (d - window) // stride + 1
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.empty((n, c, od, oh, ow))
    inv = 1.0 / (window * window * window)
    for b in range(n):
        for ch in range(c):
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        s = 0.0
                        for dz in range(window):
                            for dy in range(window):
                                for dx in range(window):
                                    s += x[b, ch, z * stride + dz, y * stride + dy, xx * stride + dx]
                        out[b, ch, z, y, xx] = s * inv
    return out


def avgpool3d(x, window, stride):
    return _avgpool3d(np.ascontiguousarray(x), window, stride)


@njit(cache=True)
def _overlap(a, b):
    inter = 1.0
    for k in range(3):
        lo = max(a[k] - a[3] / 2.0, b[k] - b[3] / 2.0)
        hi = min(a[k] + a[3] / 2.0, b[k] + b[3] / 2.0)
        if hi <= lo:
            return 0.0
        inter *= hi - lo
    return inter


@njit(cache=True)
def iou_matrix(a, b):
    out = np.zeros((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        va = a[i, 3] ** 3
        for j in range(b.shape[0]):
            vb = b[j, 3] ** 3
            inter = min(_overlap(a[i], b[j]), va, vb)  # rounded bounds can overshoot the smaller volume
            if inter > 0.0:
                out[i, j] = inter / (va + vb - inter)
    return out


@njit(cache=True)
def nms_sorted(boxes, threshold):
    n = boxes.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    alive = np.ones(n, dtype=np.bool_)
    for i in range(n):
        if not alive[i]:
            continue
        keep[i] = True
        vi = boxes[i, 3] ** 3
        for j in range(i + 1, n):
            if alive[j]:
                vj = boxes[j, 3] ** 3
                inter = min(_overlap(boxes[i], boxes[j]), vi, vj)
                if inter > 0.0 and inter / (vi + vj - inter) > threshold:
                    alive[j] = False
    return keep


# -- direct stride-1 convolution ------------------------------------------------
# Row-accumulating loops: the innermost x loop is contiguous, and a row buffer
# stays in L1 while all (ci, kd, kh, kw) taps are summed into it. These beat
# the shifted-matmul path when channel counts are small.


@njit(cache=True)
def conv3d_direct(xp, w, out_d, out_h, out_w):
    n, cin = xp.shape[0], xp.shape[1]
    cout, _, kd_, kh_, kw_ = w.shape
    out = np.empty((n, cout, out_d, out_h, out_w))
    row = np.empty(out_w)
    for b in range(n):
        for co in range(cout):
            for z in range(out_d):
                for y in range(out_h):
                    row[:] = 0.0
                    for ci in range(cin):
                        for kd in range(kd_):
                            for kh in range(kh_):
                                src = xp[b, ci, z + kd, y + kh]
                                for kw in range(kw_):
                                    wv = w[co, ci, kd, kh, kw]
                                    for x in range(out_w):
                                        row[x] += wv * src[x + kw]
                    out[b, co, z, y, :] = row
    return out


@njit(cache=True)
def conv3d_direct_weight_grad(g, xp, kd_, kh_, kw_):
    n, cout, out_d, out_h, out_w = g.shape
    cin = xp.shape[1]
    dw = np.zeros((cout, cin, kd_, kh_, kw_))
    for b in range(n):
        for co in range(cout):
            for ci in range(cin):
                for z in range(out_d):
                    for y in range(out_h):
                        grow = g[b, co, z, y]
                        for kd in range(kd_):
                            for kh in range(kh_):
                                src = xp[b, ci, z + kd, y + kh]
                                for kw in range(kw_):
                                    s = 0.0
                                    for x in range(out_w):
                                        s += grow[x] * src[x + kw]
                                    dw[co, ci, kd, kh, kw] += s
    return dw


@njit(cache=True)
def conv3d_direct_input_grad(g, w, pd, ph, pw):
    """Gradient w.r.t. the zero-padded input, shape (N, Cin, pd, ph, pw)."""
    n, cout, out_d, out_h, out_w = g.shape
    cin, kd_, kh_, kw_ = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
    dxp = np.zeros((n, cin, pd, ph, pw))
    row = np.empty(pw)
    for b in range(n):
        for ci in range(cin):
            for zp in range(pd):
                for yp in range(ph):
                    row[:] = 0.0
                    for co in range(cout):
                        for kd in range(kd_):
                            z = zp - kd
                            if z < 0 or z >= out_d:
                                continue
                            for kh in range(kh_):
                                y = yp - kh
                                if y < 0 or y >= out_h:
                                    continue
                                grow = g[b, co, z, y]
                                for kw in range(kw_):
                                    wv = w[co, ci, kd, kh, kw]
                                    for x in range(out_w):
                                        row[x + kw] += wv * grow[x]
                    dxp[b, ci, zp, yp, :] = row
    return dxp
