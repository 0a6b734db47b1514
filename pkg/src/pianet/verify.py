"""Gradient-check suite run by ``pianet gradcheck``."""

import numpy as np

from . import boxes as bx
from .engine.gradcheck import gradcheck
from .engine.layers import BatchNorm3d, Conv3d, Deconv3d, MaxPool3d, Module, ReLU, Sequential
from .loss import LossConfig, multitask_loss
from .model import PiaNetConfig, build_pianet

LAYER_FRAGMENTS = {
    "conv3d": (lambda: Conv3d(2, 3, 3, 1, 1, seed=0), 2),
    "conv3d_stride2": (lambda: Conv3d(2, 3, 3, 2, 1, seed=0), 2),
    "conv3d_wide": (lambda: Conv3d(6, 5, 3, 1, 1, seed=0), 6),
    "deconv3d": (lambda: Deconv3d(2, 3, 3, 1, 1, seed=0), 2),
    "batchnorm3d": (lambda: BatchNorm3d(2), 2),
    "relu": (ReLU, 2),
    "maxpool3d": (MaxPool3d, 2),
    "conv_bn_relu": (lambda: Sequential(("c", Conv3d(2, 4, 3, 1, 1, seed=2)), ("b", BatchNorm3d(4)), ("r", ReLU())), 2),
}


class DetectorLoss(Module):
    """Scalar multi-task loss of a PiaNet for a fixed anchor assignment."""

    def __init__(self, config, seed=0):
        super().__init__()
        self.net = self.add("net", build_pianet(config, seed))
        anchors = bx.generate_anchors(config)
        s = config.input_cube_side
        gts = np.array([[0.32 * s, 0.4 * s, 0.47 * s, 7.0], [0.69 * s, 0.64 * s, 0.29 * s, 12.0]])
        m = bx.match_anchors(anchors, gts)
        self.pos = m.gt_anchor
        self.targets = bx.encode_boxes(gts, anchors.boxes[self.pos])
        rng = np.random.default_rng(seed)
        self.neg = rng.choice(m.negative_candidates, size=20, replace=False)

    def forward(self, x, train=True):
        pred = self.net.forward(x, train)
        self._lb = multitask_loss(self.pos, self.neg, pred.flat_scores[0], pred.flat_boxes[0], self.targets,
                                  LossConfig())
        return np.float64(self._lb.total)

    def backward(self, g):
        self.net.backward(g * self._lb.grad_offsets[None], g * self._lb.grad_logits[None])
        return None


def run_suite(full=True, side=32, width_divisor=4, fraction=0.01, seed=0):
    """Yield (name, report) for every engine layer, then the reduced detector loss."""
    rng = np.random.default_rng(seed)
    for name, (make, cin) in LAYER_FRAGMENTS.items():
        yield name, gradcheck(make(), rng.standard_normal((2, cin, 4, 4, 4)), tolerance=1e-4)
    if full:
        cfg = PiaNetConfig().reduced(side, width_divisor)
        x = rng.random((1, 1, side, side, side))
        yield "detector_loss", gradcheck(DetectorLoss(cfg, seed), x, tolerance=1e-3, step=1e-6,
                                         param_fraction=fraction, check_input=False)
