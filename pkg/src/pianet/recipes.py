"""The phantom suite and the training recipe used on it.

The suite is 20 training and 10 test phantoms of side 64, run through a
PiaNet with cube side 64 and a quarter of the reference widths. The
stage-2 learning rate is lowered to 0.002. At the default 0.01, the
summed multi-task loss drives the middle-scale fuse layer's batch-norm
shift negative within a few dozen steps, and its ReLUs never recover.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import boxes as bx
from .data.patches import crop_patches
from .data.phantom import PhantomSpec, generate_phantom
from .data.preprocess import apply_lung_mask
from .data.volume import nodule_boxes
from .detect import DetectConfig, detect_volume, detections_to_world
from .evaluation import evaluate, sensitivity_at
from .model import PiaNetConfig
from .training import TrainConfig, TrainScan, finetune_stage2, load_detector, pretrain_stage1

TRAIN_SEEDS = tuple(range(20))
TEST_SEEDS = tuple(range(1000, 1010))
PHANTOM_MODEL = PiaNetConfig().reduced(64, 4)
PHANTOM_STAGE1 = TrainConfig(epochs=10, batch_size=8)
PHANTOM_STAGE2 = TrainConfig(epochs=60, batch_size=1, learning_rate=0.002, neg_floor=16, neg_per_positive=4)


def phantom_suite(seeds, **spec_overrides):
    """Preprocessed (volume, annotation) pairs, lung-masked, for the given seeds."""
    out = []
    for s in seeds:
        volume, ann = generate_phantom(PhantomSpec(seed=s, **spec_overrides))
        out.append((apply_lung_mask(volume), ann))
    return out


def train_scans(suite):
    return [TrainScan(v, nodule_boxes(v, a.relevant())) for v, a in suite]


def stage1_patches(suite, model_config=PHANTOM_MODEL, cfg=PHANTOM_STAGE1):
    scans = [(v, nodule_boxes(v, a.relevant())) for v, a in suite]
    return crop_patches(scans, model_config.input_cube_side // 2, cfg.negatives_per_positive,
                        np.random.default_rng(cfg.seed))


def detect_suite(model, suite, cfg=DetectConfig()):
    """World-coordinate detections per scan id."""
    anchors = bx.generate_anchors(model.config)
    return {a.scan_id: detections_to_world(v, *detect_volume(model, v, anchors, cfg)) for v, a in suite}


@dataclass
class PhantomRun:
    seed: int
    stage1: object = None
    stage2: object = None
    detections: dict = field(default_factory=dict)
    report: object = None
    sensitivity_at_2: float = float("nan")
    seconds: float = 0.0


def run_phantom_pipeline(seed, train=None, test=None, pretrain=True, stage1=PHANTOM_STAGE1,
                         stage2=PHANTOM_STAGE2, model_config=PHANTOM_MODEL, log_fn=None):
    """Stage-1 pretraining (optional), stage-2 fine-tuning, detection and FROC on the test suite."""
    t0 = time.perf_counter()
    train = train if train is not None else phantom_suite(TRAIN_SEEDS)
    test = test if test is not None else phantom_suite(TEST_SEEDS)
    run = PhantomRun(seed)
    if pretrain:
        s1 = replace(stage1, seed=seed)
        run.stage1 = pretrain_stage1(stage1_patches(train, model_config, s1), model_config, s1, log_fn=log_fn)
    run.stage2 = finetune_stage2(train_scans(train), model_config, replace(stage2, seed=seed), init=run.stage1,
                                 log_fn=log_fn)
    run.detections = detect_suite(load_detector(run.stage2), test)
    curve, run.report, _ = evaluate(run.detections, {a.scan_id: a for _, a in test})
    run.sensitivity_at_2 = sensitivity_at(curve, 2.0)
    run.seconds = time.perf_counter() - t0
    return run


def first_epoch_runs(seed, train=None, stage1=PHANTOM_STAGE1, stage2=PHANTOM_STAGE2, model_config=PHANTOM_MODEL):
    """One stage-2 epoch from stage-1 features and one from fresh init, same seed and data order.

    Returns (stage1, pretrained, fresh) checkpoints.
    """
    train = train if train is not None else phantom_suite(TRAIN_SEEDS)
    s1 = replace(stage1, seed=seed)
    init = pretrain_stage1(stage1_patches(train, model_config, s1), model_config, s1)
    s2 = replace(stage2, seed=seed)
    scans = train_scans(train)
    pre = finetune_stage2(scans, model_config, s2, init=init, stop_after=1)
    fresh = finetune_stage2(scans, model_config, s2, stop_after=1)
    return init, pre, fresh


def first_epoch_losses(seed, train=None, **kwargs):
    """(pretrained, fresh) mean stage-2 loss over the first epoch for one paired seed."""
    _, pre, fresh = first_epoch_runs(seed, train, **kwargs)
    return pre.meta["history"][0]["loss"], fresh.meta["history"][0]["loss"]
