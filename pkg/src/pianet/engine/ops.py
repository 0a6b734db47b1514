"""Functional 3D tensor operations with explicit backward passes.

All activations are float64 arrays of shape (batch, channel, depth, height,
width). Convolution weights use the (out_channels, in_channels, kd, kh, kw)
layout; transposed-convolution weights use (in_channels, out_channels, kd,
kh, kw), i.e. the layout of the convolution they are the adjoint of.

Convolutions are evaluated as a sum of shifted matrix products: for each
(kd, kh) kernel row the kw taps are stacked into a column block and
multiplied by the matching weight slice. This keeps peak memory at three
shifted copies of the input while leaving the arithmetic to BLAS. Layers
with at most ``DIRECT_MAX_CIN`` input channels use the numba direct loops
instead when that backend is active.
"""

import numpy as np

from .. import kernels
from ..errors import ConfigError, DataError


DIRECT_MAX_CIN = 4


def _use_direct(cin, stride, n):
    return kernels.conv3d_direct is not None and stride == 1 and n > 0 and cin <= DIRECT_MAX_CIN


def _pad(x, padding):
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else np.ascontiguousarray(x)


def check_tensor5(x, name="input"):
    if not isinstance(x, np.ndarray) or x.ndim != 5:
        shape = getattr(x, "shape", None)
        raise ConfigError(f"{name} must be a 5-axis array (N, C, D, H, W), got shape {shape}")


def _out_extent(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv_output_shape(in_shape, weight_shape, stride=1, padding=0):
    n, cin = in_shape[:2]
    cout, wcin, kd, kh, kw = weight_shape
    if cin != wcin:
        raise ConfigError(
            f"conv3d channel mismatch: input shape {tuple(in_shape)} vs kernel shape {tuple(weight_shape)}"
        )
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv3d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    spatial = tuple(_out_extent(s, k, stride, padding) for s, k in zip(in_shape[2:], (kd, kh, kw)))
    if min(spatial) < 1:
        raise ConfigError(
            f"conv3d produces an empty output: input shape {tuple(in_shape)}, "
            f"kernel shape {tuple(weight_shape)}, stride {stride}, padding {padding}"
        )
    return (n, cout) + spatial


def _pad_channels_first(x, padding):
    """(N, C, D, H, W) -> zero-padded (C, N, D+2p, H+2p, W+2p), contiguous."""
    xt = np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4))
    if padding:
        p = padding
        xt = np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    return xt


def _columns(xp, kd, kh, k_w, out_sp, stride):
    """Stack the kw taps of kernel row (kd, kh) into a (C*kw, M) block."""
    c, n = xp.shape[:2]
    do, ho, wo = out_sp
    s = stride
    cols = np.empty((c, k_w, n, do, ho, wo))
    for kw in range(k_w):
        cols[:, kw] = xp[:, :, kd:kd + s * do:s, kh:kh + s * ho:s, kw:kw + s * wo:s]
    return cols.reshape(c * k_w, -1)


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` with ``weight`` plus per-channel ``bias``."""
    check_tensor5(x)
    out_shape = conv_output_shape(x.shape, weight.shape, stride, padding)
    n, cout = out_shape[:2]
    cin, kd_, kh_, kw_ = weight.shape[1:]
    out_sp = out_shape[2:]
    if _use_direct(weight.shape[1], stride, n):
        y = kernels.conv3d_direct(_pad(x, padding), np.ascontiguousarray(weight), *out_sp)
        if bias is not None:
            y += bias.reshape(1, -1, 1, 1, 1)
        return y
    xp = _pad_channels_first(x, padding)
    acc = np.zeros((cout, n * int(np.prod(out_sp))))
    for kd in range(kd_):
        for kh in range(kh_):
            w_row = weight[:, :, kd, kh, :].reshape(cout, cin * kw_)
            acc += w_row @ _columns(xp, kd, kh, kw_, out_sp, stride)
    y = acc.reshape((cout, n) + out_sp).transpose(1, 0, 2, 3, 4)
    if bias is not None:
        y = y + bias.reshape(1, -1, 1, 1, 1)
    return np.ascontiguousarray(y)


def _conv_input_grad(grad, weight, in_shape, stride, padding):
    n, cin = in_shape[:2]
    cout, _, kd_, kh_, kw_ = weight.shape
    out_sp = grad.shape[2:]
    p = padding
    if _use_direct(weight.shape[1], stride, n):
        padded = tuple(e + 2 * p for e in in_shape[2:])
        dxp = kernels.conv3d_direct_input_grad(np.ascontiguousarray(grad), np.ascontiguousarray(weight), *padded)
        return np.ascontiguousarray(dxp[:, :, p:-p, p:-p, p:-p]) if p else dxp
    padded = (cin, n) + tuple(s + 2 * p for s in in_shape[2:])
    dxp = np.zeros(padded)
    g = np.ascontiguousarray(grad.transpose(1, 0, 2, 3, 4)).reshape(cout, -1)
    do, ho, wo = out_sp
    s = stride
    for kd in range(kd_):
        for kh in range(kh_):
            w_row = weight[:, :, kd, kh, :].reshape(cout, cin * kw_)
            dcols = (w_row.T @ g).reshape((cin, kw_, n) + tuple(out_sp))
            for kw in range(kw_):
                dxp[:, :, kd:kd + s * do:s, kh:kh + s * ho:s, kw:kw + s * wo:s] += dcols[:, kw]
    if p:
        dxp = dxp[:, :, p:-p, p:-p, p:-p]
    return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3, 4))


def _conv_weight_grad(grad, x, weight_shape, stride, padding):
    cout, cin, kd_, kh_, kw_ = weight_shape
    if _use_direct(cin, stride, x.shape[0]):
        return kernels.conv3d_direct_weight_grad(np.ascontiguousarray(grad), _pad(x, padding), kd_, kh_, kw_)
    xp = _pad_channels_first(x, padding)
    g = np.ascontiguousarray(grad.transpose(1, 0, 2, 3, 4)).reshape(cout, -1)
    out_sp = grad.shape[2:]
    dw = np.empty(weight_shape)
    for kd in range(kd_):
        for kh in range(kh_):
            cols = _columns(xp, kd, kh, kw_, out_sp, stride)
            dw[:, :, kd, kh, :] = (g @ cols.T).reshape(cout, cin, kw_)
    return dw


def conv3d_backward(grad, x, weight, stride=1, padding=0, need_input_grad=True):
    """Gradients of ``conv3d`` with respect to (input, weight, bias).

    The input gradient is ``None`` when ``need_input_grad`` is false.
    """
    expected = conv_output_shape(x.shape, weight.shape, stride, padding)
    if grad.shape != expected:
        raise ConfigError(f"conv3d_backward: gradient shape {grad.shape} does not match output shape {expected}")
    dx = _conv_input_grad(grad, weight, x.shape, stride, padding) if need_input_grad else None
    dw = _conv_weight_grad(grad, x, weight.shape, stride, padding)
    db = grad.sum(axis=(0, 2, 3, 4))
    return dx, dw, db


def deconv_output_shape(in_shape, weight_shape, stride=1, padding=0):
    n, cin = in_shape[:2]
    wcin, cout = weight_shape[:2]
    if cin != wcin:
        raise ConfigError(
            f"deconv3d channel mismatch: input shape {tuple(in_shape)} vs kernel shape {tuple(weight_shape)}"
        )
    spatial = tuple((s - 1) * stride - 2 * padding + k for s, k in zip(in_shape[2:], weight_shape[2:]))
    if min(spatial) < 1:
        raise ConfigError(
            f"deconv3d produces an empty output: input shape {tuple(in_shape)}, kernel shape {tuple(weight_shape)}"
        )
    return (n, cout) + spatial


def deconv3d(x, weight, bias=None, stride=1, padding=0):
    """Transposed convolution: the adjoint of ``conv3d`` with the same kernel."""
    check_tensor5(x)
    out_shape = deconv_output_shape(x.shape, weight.shape, stride, padding)
    y = _conv_input_grad(x, weight, out_shape, stride, padding)
    if bias is not None:
        y += bias.reshape(1, -1, 1, 1, 1)
    return y


def deconv3d_backward(grad, x, weight, stride=1, padding=0, need_input_grad=True):
    dx = conv3d(grad, weight, None, stride, padding) if need_input_grad else None
    dw = _conv_weight_grad(x, grad, weight.shape, stride, padding)
    db = grad.sum(axis=(0, 2, 3, 4))
    return dx, dw, db


# -- batch normalisation -------------------------------------------------------


def batchnorm3d(x, scale, shift, running_mean, running_var, train, eps=1e-5, momentum=0.1):
    """Per-channel normalisation over (batch, depth, height, width).

    In train mode the running statistics are updated in place. Returns the
    output and a cache for ``batchnorm3d_backward``.
    """
    check_tensor5(x)
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ConfigError(f"batchnorm3d channel mismatch: input shape {x.shape} vs parameters for {scale.shape[0]} channels")
    bshape = (1, c, 1, 1, 1)
    if train:
        count = x.size // c
        mean = x.mean(axis=(0, 2, 3, 4))
        centered = x - mean.reshape(bshape)
        var = (centered * centered).mean(axis=(0, 2, 3, 4))
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
        centered = x - mean.reshape(bshape)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.reshape(bshape)
    y = xhat * scale.reshape(bshape) + shift.reshape(bshape)
    return y, (xhat, inv_std, scale, train)


def batchnorm3d_backward(grad, cache):
    xhat, inv_std, scale, train = cache
    bshape = (1, -1, 1, 1, 1)
    dshift = grad.sum(axis=(0, 2, 3, 4))
    dscale = (grad * xhat).sum(axis=(0, 2, 3, 4))
    if train:
        count = grad.size // grad.shape[1]
        dx = (grad - (dshift / count).reshape(bshape) - xhat * (dscale / count).reshape(bshape))
        dx *= (scale * inv_std).reshape(bshape)
    else:
        dx = grad * (scale * inv_std).reshape(bshape)
    return dx, dscale, dshift


# -- activations ---------------------------------------------------------------


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad, x):
    # derivative at exactly 0 is taken as 0
    return np.where(x > 0.0, grad, 0.0)


# -- pooling -------------------------------------------------------------------


def maxpool3d(x):
    """Window-2, stride-2 max pool returning the output and argmax indices.

    Indices are flat positions in the input's (D, H, W) grid; ties go to the
    first element in (z, y, x) window order.
    """
    check_tensor5(x)
    if any(s % 2 for s in x.shape[2:]):
        raise ConfigError(f"maxpool3d needs spatial extents divisible by 2, got shape {x.shape}")
    return kernels.maxpool2_forward(np.ascontiguousarray(x))


def maxpool3d_backward(grad, indices, input_shape):
    n, c, d, h, w = input_shape
    return kernels.scatter_add(np.ascontiguousarray(grad), np.ascontiguousarray(indices), d * h * w).reshape(input_shape)


def max_unpool3d(x, indices, output_shape):
    """Scatter ``x`` to the positions in ``indices``; zeros elsewhere."""
    check_tensor5(x)
    if indices.shape != x.shape:
        raise ConfigError(f"max_unpool3d: indices shape {indices.shape} differs from input shape {x.shape}")
    output_shape = tuple(output_shape)
    if output_shape[:2] != x.shape[:2]:
        raise ConfigError(f"max_unpool3d: output shape {output_shape} incompatible with input shape {x.shape}")
    size = int(np.prod(output_shape[2:]))
    if indices.size and (indices.min() < 0 or indices.max() >= size):
        raise DataError(f"max_unpool3d: index out of range for output shape {output_shape}")
    return kernels.scatter_add(np.ascontiguousarray(x), np.ascontiguousarray(indices), size).reshape(output_shape)


def max_unpool3d_backward(grad, indices):
    return kernels.gather(np.ascontiguousarray(grad), indices)


def avgpool3d(x, window, stride):
    check_tensor5(x)
    if window < 1 or stride < 1:
        raise ConfigError(f"avgpool3d needs positive window and stride, got {window}, {stride}")
    for s in x.shape[2:]:
        if s < window or (s - window) % stride:
            raise ConfigError(f"avgpool3d: extent {s} incompatible with window {window}, stride {stride} (shape {x.shape})")
    return kernels.avgpool3d(x, window, stride)


# -- tensor plumbing -----------------------------------------------------------


def concat_channels(a, b):
    check_tensor5(a, "a")
    check_tensor5(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ConfigError(f"concat_channels: non-channel extents differ: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(grad, a_channels):
    return grad[:, :a_channels], grad[:, a_channels:]


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
