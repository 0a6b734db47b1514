"""Two-stage training: patch-classifier pretraining, then detector fine-tuning.

Both stages are bit-deterministic for a given (seed, data, config): all
randomness comes from one ``numpy.random.Generator`` whose state is saved in
every checkpoint, so a run resumed at an epoch boundary follows the same
trajectory as an uninterrupted one.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import boxes as bx
from .checkpoint import Checkpoint
from .data.augment import OPERATORS, STAGE2_OPERATORS, augment
from .data.tiling import boxes_in_cube, crop_cube
from .data.volume import CubeSample
from .engine import ops
from .engine.optim import SGD
from .errors import ConfigError, PianetIOError
from .loss import LossConfig, ggo_probability, multitask_loss
from .model import PiaNetConfig, build_pianet, build_stage1_classifier, transfer_features

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.01
    lr_decay: float = 0.1
    decay_at: tuple = (0.6, 0.85)  # fractions of ``epochs``
    batch_size: int = 2
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: float = 1.0
    beta: float = 0.6
    normalize_loss: bool = False
    hard_negatives: bool = True
    neg_floor: int = 8  # K = max(neg_floor, neg_per_positive * positives in the batch)
    neg_per_positive: int = 2
    pool_factor: int = 16  # random pool size = pool_factor * K
    neg_iou_max: float = bx.DEFAULT_NEG_IOU_MAX
    negatives_per_positive: int = 3  # stage-1 patch ratio
    background_fraction: float = 0.2  # stage-2 cubes drawn without centering on a nodule
    jitter: int = None  # stage-2 nodule-centering jitter, default side // 4
    augment: tuple = STAGE2_OPERATORS
    cls_prior: float = None  # initial GGO probability of the detector's classifier bias

    def __post_init__(self):
        object.__setattr__(self, "decay_at", tuple(float(f) for f in self.decay_at))
        object.__setattr__(self, "augment", tuple(self.augment))
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("learning_rate must be > 0 and lr_decay in (0, 1]")
        if self.neg_floor < 1 or self.neg_per_positive < 0 or self.pool_factor < 1:
            raise ConfigError("hard-negative K must be >= 1 and pool_factor >= 1")
        if set(self.augment) - set(OPERATORS):
            raise ConfigError(f"unknown augmentation operators {sorted(set(self.augment) - set(OPERATORS))}")
        if self.cls_prior is not None and not 0 < self.cls_prior < 1:
            raise ConfigError(f"cls_prior must lie in (0, 1), got {self.cls_prior}")
        self.loss_config()

    def loss_config(self):
        return LossConfig(self.alpha, self.beta, self.normalize_loss)

    def to_dict(self):
        d = asdict(self)
        d["decay_at"] = list(self.decay_at)
        d["augment"] = list(self.augment)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


def learning_rate_at(cfg, epoch):
    """Step schedule: multiply by ``lr_decay`` at each ``decay_at`` fraction of the run."""
    passed = sum(epoch >= int(round(f * cfg.epochs)) for f in cfg.decay_at)
    return cfg.learning_rate * cfg.lr_decay ** passed


class JsonlLog:
    """Append-only line-delimited JSON training log."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self._fh = open(self.path, "a", encoding="utf-8")
        except OSError as exc:
            raise PianetIOError(f"cannot open training log {path}: {exc.strerror or exc}") from exc

    def __call__(self, record):
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def mine_hard_negatives(scores, candidates, pool_size, k, rng):
    """Randomly pick ``pool_size`` candidates, then keep the ``k`` highest-scoring.

    Ties keep the lower candidate index. Returns indices into ``scores``.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if k > pool_size:
        raise ConfigError(f"K = {k} exceeds the pool size {pool_size}")
    if len(candidates) < k:
        log.warning("only %d negative candidates for K = %d; using all", len(candidates), k)
        return np.sort(candidates)
    pool = rng.choice(candidates, size=min(pool_size, len(candidates)), replace=False)
    order = np.lexsort((pool, -np.asarray(scores)[pool]))
    return pool[order[:k]]


def _snapshot(model, optimizer, rng, meta):
    state = {k: v.copy() for k, v in model.state_dict().items()}
    velocity = {k: v.copy() for k, v in optimizer.velocity.items()}
    meta = dict(meta, rng_state=rng.bit_generator.state)
    return Checkpoint(state, velocity, meta)


def _restore(model, optimizer, rng, ckpt):
    model.load_state_dict(ckpt.tensors)
    optimizer.velocity = {k: v.copy() for k, v in ckpt.velocity.items()}
    rng.bit_generator.state = ckpt.meta["rng_state"]


def _check_resume(ckpt, kind, cfg):
    if ckpt.kind != kind:
        raise ConfigError(f"cannot resume {kind} training from a {ckpt.kind} checkpoint")
    if ckpt.meta.get("train_config") != cfg.to_dict():
        raise ConfigError("resume checkpoint was written with a different training config")


# -- stage 1 -------------------------------------------------------------------


def pretrain_stage1(patches, model_config=None, cfg=TrainConfig(batch_size=8), resume=None,
                    log_fn=None, stop_after=None, on_epoch_end=None):
    """Train the patch classifier with softmax cross-entropy and mini-batch SGD."""
    model_config = model_config or PiaNetConfig()
    if len(patches) == 0:
        raise ConfigError("stage-1 pretraining needs a non-empty patch set")
    if len(set(patches.labels.tolist())) < 2:
        raise ConfigError("stage-1 pretraining needs both positive and negative patches")
    model = build_stage1_classifier(model_config, cfg.seed)
    opt = SGD(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history, step, start = [], 0, 0
    if resume is not None:
        _check_resume(resume, "stage1", cfg)
        _restore(model, opt, rng, resume)
        history, step, start = list(resume.meta["history"]), resume.meta["step"], resume.epoch
    n = len(patches)
    ckpt = None
    for epoch in range(start, cfg.epochs):
        opt.learning_rate = learning_rate_at(cfg, epoch)
        order = rng.permutation(n)
        losses, correct = [], 0
        for b0 in range(0, n, cfg.batch_size):
            idx = np.sort(order[b0:b0 + cfg.batch_size])
            x, y = patches.patches[idx], patches.labels[idx]
            logits = model.forward(x, train=True)
            p = ops.softmax(logits, axis=-1)
            loss = float(-np.mean(np.log(np.clip(p[np.arange(len(y)), y], 1e-12, None))))
            d = p.copy()
            d[np.arange(len(y)), y] -= 1.0
            model.backward(d / len(y))
            opt.step(model.named_parameters(), model.named_grads())
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
            losses.append(loss)
            step += 1
            if log_fn:
                log_fn({"stage": 1, "epoch": epoch, "step": step, "loss": loss, "lr": opt.learning_rate,
                        "n_pos": int(np.sum(y == 1)), "n_neg": int(np.sum(y == 0))})
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "accuracy": correct / n,
                        "lr": opt.learning_rate})
        ckpt = _snapshot(model, opt, rng, {
            "kind": "stage1", "epoch": epoch + 1, "step": step, "history": history,
            "model_config": model_config.to_dict(), "train_config": cfg.to_dict(),
        })
        if on_epoch_end:
            on_epoch_end(ckpt)
        if stop_after is not None and epoch + 1 >= stop_after:
            break
    return ckpt if ckpt is not None else resume


def classifier_accuracy(model, patches, batch_size=8):
    correct = 0
    for b0 in range(0, len(patches), batch_size):
        p = model.predict_proba(patches.patches[b0:b0 + batch_size])
        correct += int(np.sum(np.argmax(p, axis=1) == patches.labels[b0:b0 + batch_size]))
    return correct / max(1, len(patches))


def load_classifier(ckpt):
    model = build_stage1_classifier(PiaNetConfig.from_dict(ckpt.meta["model_config"]))
    model.load_state_dict(ckpt.tensors)
    return model


# -- stage 2 -------------------------------------------------------------------


@dataclass
class TrainScan:
    """A preprocessed volume with its nodule boxes in scan-local coordinates."""

    volume: object
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))


def sample_cube(scan, side, rng, cfg):
    """Crop one training cube: centered near a nodule, or anywhere for background draws."""
    shape = scan.volume.shape
    hi = [max(0, e - side) for e in shape]
    boxes = np.asarray(scan.boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0 or rng.random() < cfg.background_fraction:
        origin = [int(rng.integers(0, h + 1)) for h in hi]
    else:
        jitter = side // 4 if cfg.jitter is None else cfg.jitter
        b = boxes[rng.integers(len(boxes))]
        idx = np.floor(b[2::-1]).astype(int) + rng.integers(-jitter, jitter + 1, size=3)
        origin = [int(np.clip(i - side // 2, 0, h)) for i, h in zip(idx, hi)]
    origin = tuple(origin)
    sample = CubeSample(crop_cube(scan.volume.data, origin, side)[None, None], origin,
                        boxes_in_cube(boxes, origin, side))
    return augment(sample, cfg.augment, rng) if cfg.augment else sample


def set_classifier_prior(model, prior):
    """Bias every classifier head so that initial GGO probabilities equal ``prior``."""
    gap = float(np.log(prior / (1.0 - prior)))
    for head in model.cls_heads:
        b = head.params["bias"]
        b[0::2] = 0.0
        b[1::2] = gap


def detector_step(model, anchors, samples, cfg, rng, optimizer=None):
    """One forward/loss/backward pass over a batch of CubeSamples; SGD update if ``optimizer``."""
    batch = np.concatenate([s.cube for s in samples])
    pred = model.forward(batch, train=True)
    n, a = pred.flat_scores.shape[:2]
    probs = ggo_probability(pred.flat_scores).reshape(-1)
    pos, targets, cand = [], [], []
    for i, s in enumerate(samples):
        m = bx.match_anchors(anchors, s.boxes, cfg.neg_iou_max)
        pos.append(m.gt_anchor + i * a)
        targets.append(bx.encode_boxes(s.boxes, anchors.boxes[m.gt_anchor]) if len(s.boxes) else np.zeros((0, 4)))
        cand.append(m.negative_candidates + i * a)
    pos, targets, cand = np.concatenate(pos), np.concatenate(targets), np.concatenate(cand)
    if cfg.hard_negatives:
        k = max(cfg.neg_floor, cfg.neg_per_positive * len(pos))
        neg = mine_hard_negatives(probs, cand, cfg.pool_factor * k, k, rng)
    else:
        neg = cand
    lb = multitask_loss(pos, neg, pred.flat_scores.reshape(-1, 2), pred.flat_boxes.reshape(-1, 4), targets,
                        cfg.loss_config())
    model.backward(lb.grad_offsets.reshape(n, a, 4), lb.grad_logits.reshape(n, a, 2))
    if optimizer is not None:
        optimizer.step(model.named_parameters(), model.named_grads())
    return lb


def finetune_stage2(scans, model_config=None, cfg=TrainConfig(), init=None, resume=None, log_fn=None,
                    stop_after=None, on_epoch_end=None):
    """Fine-tune the detector with the multi-task loss and hard negative mining.

    ``init`` is a stage-1 checkpoint whose feature tensors are transferred,
    or None for a fresh Xavier start. ``resume`` continues a stage-2 run.
    """
    model_config = model_config or PiaNetConfig()
    if not scans:
        raise ConfigError("stage-2 fine-tuning needs at least one training scan")
    model = build_pianet(model_config, cfg.seed)
    if cfg.cls_prior is not None:
        set_classifier_prior(model, cfg.cls_prior)
    if init is not None:
        transfer_features(init, model)
    anchors = bx.generate_anchors(model_config)
    opt = SGD(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history, steps, step, start = [], [], 0, 0
    if resume is not None:
        _check_resume(resume, "stage2", cfg)
        _restore(model, opt, rng, resume)
        history, steps, step, start = (list(resume.meta["history"]), list(resume.meta["steps"]),
                                       resume.meta["step"], resume.epoch)
    side = model_config.input_cube_side
    ckpt = None
    for epoch in range(start, cfg.epochs):
        opt.learning_rate = learning_rate_at(cfg, epoch)
        order = rng.permutation(len(scans))
        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            samples = [sample_cube(scans[i], side, rng, cfg) for i in order[b0:b0 + cfg.batch_size]]
            try:
                lb = detector_step(model, anchors, samples, cfg, rng, opt)
            except ArithmeticError as exc:
                raise type(exc)(f"step {step + 1}: {exc}") from exc
            step += 1
            rec = dict(lb.as_record(), stage=2, epoch=epoch, step=step, lr=opt.learning_rate)
            steps.append(rec)
            losses.append(lb.total)
            if log_fn:
                log_fn(rec)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "lr": opt.learning_rate})
        ckpt = _snapshot(model, opt, rng, {
            "kind": "stage2", "epoch": epoch + 1, "step": step, "history": history, "steps": steps,
            "model_config": model_config.to_dict(), "train_config": cfg.to_dict(),
            "init": "stage1" if init is not None else "fresh",
        })
        if on_epoch_end:
            on_epoch_end(ckpt)
        if stop_after is not None and epoch + 1 >= stop_after:
            break
    return ckpt if ckpt is not None else resume


def load_detector(ckpt):
    """Rebuild a PiaNet from a stage-2 checkpoint."""
    if ckpt.kind != "stage2":
        raise ConfigError(f"expected a stage2 checkpoint, got {ckpt.kind}")
    model = build_pianet(PiaNetConfig.from_dict(ckpt.meta["model_config"]))
    model.load_state_dict(ckpt.tensors)
    return model
