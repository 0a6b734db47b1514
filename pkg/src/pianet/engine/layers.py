"""Stateful layer wrappers around the functional ops.

A layer caches what its backward pass needs during ``forward`` and writes
parameter gradients into ``self.grads`` during ``backward``. Each forward is
paired with exactly one backward; layers are not reused within one pass.
"""

import numpy as np

from . import ops
from .init import layer_seed, xavier_init


class Module:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self.children = {}

    def add(self, name, module):
        self.children[name] = module
        return module

    def _walk(self, attr, prefix=""):
        for key, value in getattr(self, attr).items():
            yield prefix + key, value
        for cname, child in self.children.items():
            yield from child._walk(attr, f"{prefix}{cname}.")

    def named_parameters(self, prefix=""):
        return dict(self._walk("params", prefix))

    def named_grads(self, prefix=""):
        return dict(self._walk("grads", prefix))

    def named_buffers(self, prefix=""):
        return dict(self._walk("buffers", prefix))

    def state_dict(self):
        state = self.named_parameters()
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state, strict=True):
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        if strict and missing:
            raise KeyError(f"missing tensors: {', '.join(missing)}")
        for name, arr in own.items():
            if name in state:
                if state[name].shape != arr.shape:
                    raise ValueError(f"{name}: shape {state[name].shape} does not match {arr.shape}")
                arr[...] = state[name]

    def zero_grad(self):
        for child in [self, *self._modules()]:
            for name, p in child.params.items():
                child.grads[name] = np.zeros_like(p)

    def _modules(self):
        for child in self.children.values():
            yield child
            yield from child._modules()


class Conv3d(Module):
    def __init__(self, cin, cout, kernel=3, stride=1, padding=1, seed=0, name="conv"):
        super().__init__()
        p = xavier_init((cout, cin, kernel, kernel, kernel), layer_seed(seed, name))
        self.params = {"weight": p.weight, "bias": p.bias}
        self.stride, self.padding = stride, padding
        self.need_input_grad = True

    def forward(self, x, train=True):
        self._x = x
        return ops.conv3d(x, self.params["weight"], self.params["bias"], self.stride, self.padding)

    def backward(self, grad):
        dx, dw, db = ops.conv3d_backward(
            grad, self._x, self.params["weight"], self.stride, self.padding, self.need_input_grad
        )
        self.grads["weight"], self.grads["bias"] = dw, db
        return dx


class Deconv3d(Module):
    def __init__(self, cin, cout, kernel=3, stride=1, padding=1, seed=0, name="deconv"):
        super().__init__()
        p = xavier_init((cin, cout, kernel, kernel, kernel), layer_seed(seed, name), bias_size=cout)
        self.params = {"weight": p.weight, "bias": p.bias}
        self.stride, self.padding = stride, padding

    def forward(self, x, train=True):
        self._x = x
        return ops.deconv3d(x, self.params["weight"], self.params["bias"], self.stride, self.padding)

    def backward(self, grad):
        dx, dw, db = ops.deconv3d_backward(grad, self._x, self.params["weight"], self.stride, self.padding)
        self.grads["weight"], self.grads["bias"] = dw, db
        return dx


class BatchNorm3d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.params = {"scale": np.ones(channels), "shift": np.zeros(channels)}
        self.buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}
        self.eps, self.momentum = eps, momentum

    def forward(self, x, train=True):
        # a zero-size batch (shape probing) has no statistics to update
        train = train and x.size > 0
        y, self._cache = ops.batchnorm3d(
            x, self.params["scale"], self.params["shift"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train, self.eps, self.momentum,
        )
        return y

    def backward(self, grad):
        dx, self.grads["scale"], self.grads["shift"] = ops.batchnorm3d_backward(grad, self._cache)
        return dx


class ReLU(Module):
    def forward(self, x, train=True):
        self._x = x
        return ops.relu(x)

    def backward(self, grad):
        return ops.relu_backward(grad, self._x)

    @staticmethod
    def nondifferentiable_input(x):
        return x == 0.0


class MaxPool3d(Module):
    """Window-2 stride-2 max pool that keeps its argmax indices for unpooling."""

    def forward(self, x, train=True):
        self.input_shape = x.shape
        out, self.indices = ops.maxpool3d(x)
        return out

    def backward(self, grad):
        return ops.maxpool3d_backward(grad, self.indices, self.input_shape)


class MaxUnpool3d(Module):
    """Unpools with the indices recorded by a paired ``MaxPool3d``."""

    def __init__(self, pool):
        super().__init__()
        self.pool = pool

    def forward(self, x, train=True):
        self._indices = self.pool.indices
        return ops.max_unpool3d(x, self._indices, x.shape[:2] + self.pool.input_shape[2:])

    def backward(self, grad):
        return ops.max_unpool3d_backward(grad, self._indices)


class Linear(Module):
    def __init__(self, cin, cout, seed=0, name="linear"):
        super().__init__()
        p = xavier_init((cout, cin), layer_seed(seed, name))
        self.params = {"weight": p.weight, "bias": p.bias}

    def forward(self, x, train=True):
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] = grad.T @ self._x
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"]


class GlobalAvgPool(Module):
    def forward(self, x, train=True):
        self._shape = x.shape
        return x.mean(axis=(2, 3, 4))

    def backward(self, grad):
        n, c = self._shape[:2]
        count = int(np.prod(self._shape[2:]))
        return np.broadcast_to((grad / count).reshape(n, c, 1, 1, 1), self._shape).copy()


class Sequential(Module):
    def __init__(self, *named_layers):
        super().__init__()
        for name, layer in named_layers:
            self.add(name, layer)

    def forward(self, x, train=True):
        for layer in self.children.values():
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(list(self.children.values())):
            grad = layer.backward(grad)
        return grad


def conv_bn_relu(cin, cout, kernel, padding, seed, name):
    return Sequential(
        ("conv", Conv3d(cin, cout, kernel, 1, padding, seed=seed, name=f"{name}.conv")),
        ("bn", BatchNorm3d(cout)),
        ("relu", ReLU()),
    )
