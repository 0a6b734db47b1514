"""Stochastic gradient descent with momentum and L2 weight decay."""

import numpy as np

from ..errors import ConfigError


def sgd_step(params, grads, velocity, learning_rate, momentum=0.9, weight_decay=1e-4):
    """Update ``params`` in place: v <- m*v - lr*(g + wd*p); p <- p + v.

    All three arguments are dicts keyed by parameter name. Missing velocity
    entries start at zero.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"sgd_step: gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v -= learning_rate * (g + weight_decay * p) if weight_decay else learning_rate * g
        p += v
    return params


class SGD:
    def __init__(self, learning_rate=0.01, momentum=0.9, weight_decay=1e-4):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, params, grads):
        sgd_step(params, grads, self.velocity, self.learning_rate, self.momentum, self.weight_decay)
