"""Multi-task detection loss: binary cross-entropy plus smooth-L1 box terms.

Functions return the loss value together with its gradient with respect to
their array inputs, so the training loop can feed the gradients straight into
the network's backward pass.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0  # weight of the localization term
    beta: float = 0.6  # center vs size balance inside the localization term
    normalize: bool = False  # divide terms by the number of contributing anchors
    clamp: float = PROB_CLAMP

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 < self.clamp < 0.5:
            raise ConfigError(f"clamp must lie in (0, 0.5), got {self.clamp}")


@dataclass
class LossBreakdown:
    total: float
    confidence_term: float
    localization_term: float
    n_positive: int
    n_negative: int
    grad_logits: np.ndarray = None  # d total / d classifier logits, (anchors, 2)
    grad_offsets: np.ndarray = None  # d total / d predicted offsets, (anchors, 4)

    def as_record(self):
        return {
            "loss": self.total,
            "conf": self.confidence_term,
            "loc": self.localization_term,
            "n_pos": self.n_positive,
            "n_neg": self.n_negative,
        }


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def _indices(idx):
    return np.asarray(idx, dtype=np.int64).reshape(-1)


def confidence_loss(positives, negatives, probs, clamp=PROB_CLAMP):
    """-sum log(c) over positives - sum log(1 - c) over selected negatives.

    ``probs`` holds the GGO probability of every anchor. Probabilities are
    clamped to [clamp, 1 - clamp]; the gradient is zero where clamping is
    active.
    """
    probs = np.asarray(probs, dtype=np.float64)
    pos, neg = _indices(positives), _indices(negatives)
    grad = np.zeros_like(probs)
    cp = probs[pos]
    cn = probs[neg]
    cp_c = np.clip(cp, clamp, 1.0 - clamp)
    cn_c = np.clip(1.0 - cn, clamp, 1.0 - clamp)
    value = -np.sum(np.log(cp_c)) - np.sum(np.log(cn_c))
    inside_p = (cp >= clamp) & (cp <= 1.0 - clamp)
    inside_n = (1.0 - cn >= clamp) & (1.0 - cn <= 1.0 - clamp)
    np.add.at(grad, pos, np.where(inside_p, -1.0 / cp_c, 0.0))
    np.add.at(grad, neg, np.where(inside_n, 1.0 / cn_c, 0.0))
    return float(value), grad


def localization_loss(positives, offsets, targets, beta=0.6):
    """beta * smooth-L1 over the center offsets plus (1 - beta) * smooth-L1 of the size offset.

    ``offsets`` are the predicted offsets of every anchor, shape (anchors, 4);
    ``targets`` are the encoded ground-truth offsets of the positive anchors,
    in the same order as ``positives``.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    pos = _indices(positives)
    targets = np.asarray(targets, dtype=np.float64).reshape(len(pos), 4)
    grad = np.zeros_like(offsets)
    if len(pos) == 0:
        return 0.0, grad
    w = np.array([beta, beta, beta, 1.0 - beta])
    diff = targets - offsets[pos]
    value = float(np.sum(smooth_l1(diff) * w))
    np.add.at(grad, pos, -smooth_l1_grad(diff) * w)
    return value, grad


def ggo_probability(logits):
    """Softmax GGO probability of (background, GGO) logit pairs."""
    logits = np.asarray(logits, dtype=np.float64)
    return expit(logits[..., 1] - logits[..., 0])


def confidence_logit_grad(positives, negatives, logits):
    """Gradient of the confidence term with respect to the logit pairs.

    This is the exact gradient of the unclamped cross-entropy; the clamp only
    guards the reported value, so saturated anchors keep a training signal.
    """
    logits = np.asarray(logits, dtype=np.float64)
    c = ggo_probability(logits)
    d = np.zeros(len(c))
    np.add.at(d, _indices(positives), c[_indices(positives)] - 1.0)
    np.add.at(d, _indices(negatives), c[_indices(negatives)])
    return np.stack([-d, d], axis=-1)


def multitask_loss(positives, negatives, logits, offsets, targets, config=LossConfig()):
    """Confidence term plus ``alpha`` times the localization term.

    ``logits`` are the (anchors, 2) classifier outputs and ``offsets`` the
    (anchors, 4) box outputs; gradients with respect to both are attached.
    """
    pos, neg = _indices(positives), _indices(negatives)
    if np.intersect1d(pos, neg).size:
        raise ConfigError("an anchor cannot be both positive and negative")
    conf, _ = confidence_loss(pos, neg, ggo_probability(logits), config.clamp)
    g_logits = confidence_logit_grad(pos, neg, logits)
    loc, g_off = localization_loss(pos, offsets, targets, config.beta)
    if config.normalize:
        nc = max(1, len(pos) + len(neg))
        nl = max(1, len(pos))
        conf, g_logits = conf / nc, g_logits / nc
        loc, g_off = loc / nl, g_off / nl
    total = conf + config.alpha * loc
    return LossBreakdown(total, conf, loc, len(pos), len(neg), g_logits, config.alpha * g_off)
