"""The PiaNet detector and its stage-1 classifier wrapper.

Layout (for an input cube of side S):

* contracting pathway: four Conv-BN-ReLU-MaxPool blocks, each followed by a
  concatenation with the average-pooled input at the new scale (the source
  pyramid), then one Conv-BN-ReLU block without pooling at S/16;
* expanding pathway: a 1x1x1 Conv-BN-ReLU at S/16, then two Decov blocks
  (unpool, deconv, BN, ReLU, concat skip, 1x1x1 conv, BN, ReLU) reaching
  S/8 and S/4. A Decov block unpools with the indices of the contracting max
  pool at the same scale and takes that block's pre-pool activation as skip;
* prediction pathway: a 3x3x3 box regressor and classifier on each expanding
  output listed in ``prediction_scales``.

Flattened predictions are ordered scale-major (in ``prediction_scales``
order), then z, y, x of the feature cell, then anchor-size index. Head channel
``a * 4 + k`` holds coordinate k of anchor size a; score channel ``a * 2 + 1``
is the GGO logit and ``a * 2`` the background logit.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from .engine import ops
from .engine.layers import (
    BatchNorm3d, Conv3d, Deconv3d, GlobalAvgPool, Linear, MaxPool3d, MaxUnpool3d,
    Module, ReLU, Sequential, conv_bn_relu,
)
from .errors import CheckpointError, ConfigError, NumericError

FEATURE_PREFIX = "features."


@dataclass(frozen=True)
class PiaNetConfig:
    input_cube_side: int = 128
    contracting_widths: tuple = (24, 32, 64, 64, 64)
    expanding_widths: tuple = (64, 64, 128)
    prediction_scales: tuple = ((32, 1), (16, 3), (8, 5))
    anchor_sides_mm: tuple = (4, 6, 8, 10, 12, 16, 20, 26, 32)
    input_scale: float = 1.0 / 255.0  # maps the [0, 255] intensity range to [0, 1] on entry

    def __post_init__(self):
        # normalise lists from JSON into tuples so configs stay hashable
        object.__setattr__(self, "contracting_widths", tuple(int(w) for w in self.contracting_widths))
        object.__setattr__(self, "expanding_widths", tuple(int(w) for w in self.expanding_widths))
        object.__setattr__(self, "prediction_scales", tuple((int(s), int(a)) for s, a in self.prediction_scales))
        object.__setattr__(self, "anchor_sides_mm", tuple(float(r) for r in self.anchor_sides_mm))
        object.__setattr__(self, "input_scale", float(self.input_scale))
        self.validate()

    def validate(self):
        side = self.input_cube_side
        if side < 16 or side % 16:
            raise ConfigError(f"input_cube_side must be a positive multiple of 16, got {side}")
        if len(self.contracting_widths) != 5 or min(self.contracting_widths) < 1:
            raise ConfigError(f"contracting_widths needs 5 positive entries, got {self.contracting_widths}")
        if len(self.expanding_widths) != 3 or min(self.expanding_widths) < 1:
            raise ConfigError(f"expanding_widths needs 3 positive entries, got {self.expanding_widths}")
        cw, ew = self.contracting_widths, self.expanding_widths
        if ew[0] != cw[3] or ew[1] != cw[2]:
            # unpooling reuses the indices of contracting pools 3 and 2, so channel counts must agree
            raise ConfigError(f"expanding_widths[0:2] must equal contracting_widths[3], [2]; got {ew[:2]} vs "
                              f"({cw[3]}, {cw[2]})")
        sides = [s for s, _ in self.prediction_scales]
        allowed = set(self.feature_sides())
        if not sides or len(set(sides)) != len(sides) or not set(sides) <= allowed:
            raise ConfigError(f"prediction scale sides {sides} must be distinct members of {sorted(allowed)}")
        if min(a for _, a in self.prediction_scales) < 1:
            raise ConfigError("every prediction scale needs at least one anchor size")
        r = self.anchor_sides_mm
        if len(r) != sum(a for _, a in self.prediction_scales):
            raise ConfigError(f"{len(r)} anchor sides given for {sum(a for _, a in self.prediction_scales)} anchor slots")
        if any(b <= a for a, b in zip(r, r[1:])) or r[0] <= 0:
            raise ConfigError(f"anchor_sides_mm must be positive and strictly increasing, got {r}")
        if not self.input_scale > 0:
            raise ConfigError(f"input_scale must be > 0, got {self.input_scale}")

    def feature_sides(self):
        """Sides of the three expanding outputs, coarsest first."""
        s = self.input_cube_side
        return (s // 16, s // 8, s // 4)

    @property
    def total_anchors(self):
        return sum(s ** 3 * a for s, a in self.prediction_scales)

    def anchor_sides_per_scale(self):
        out, i = [], 0
        for _, a in self.prediction_scales:
            out.append(self.anchor_sides_mm[i:i + a])
            i += a
        return out

    def reduced(self, input_cube_side=None, width_divisor=1):
        """Same topology with a different cube side and/or narrower layers."""
        side = input_cube_side or self.input_cube_side
        ratio = self.input_cube_side // side if side <= self.input_cube_side else None
        if ratio is None or self.input_cube_side % side:
            raise ConfigError(f"cannot reduce cube side {self.input_cube_side} to {side}")
        return PiaNetConfig(
            input_cube_side=side,
            contracting_widths=tuple(max(1, w // width_divisor) for w in self.contracting_widths),
            expanding_widths=tuple(max(1, w // width_divisor) for w in self.expanding_widths),
            prediction_scales=tuple((s // ratio, a) for s, a in self.prediction_scales),
            anchor_sides_mm=self.anchor_sides_mm,
            input_scale=self.input_scale,
        )

    def to_dict(self):
        d = asdict(self)
        d["prediction_scales"] = [list(p) for p in self.prediction_scales]
        for k in ("contracting_widths", "expanding_widths", "anchor_sides_mm"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class RawPrediction:
    """Head outputs per scale plus their flattened (anchor-ordered) views."""

    boxes: list  # per scale (N, 4A, S, S, S)
    scores: list  # per scale (N, 2A, S, S, S) logits
    flat_boxes: np.ndarray = field(default=None)  # (N, total, 4)
    flat_scores: np.ndarray = field(default=None)  # (N, total, 2)

    @property
    def ggo_probability(self):
        return ops.softmax(self.flat_scores, axis=-1)[..., 1]


def _flatten_head(t, per_anchor):
    n, ch = t.shape[:2]
    a = ch // per_anchor
    s = t.shape[2:]
    r = t.reshape((n, a, per_anchor) + s).transpose(0, 3, 4, 5, 1, 2)
    return r.reshape(n, int(np.prod(s)) * a, per_anchor)


def _unflatten_head(flat, shape, per_anchor):
    n, ch = shape[:2]
    a = ch // per_anchor
    s = shape[2:]
    r = flat.reshape((n,) + s + (a, per_anchor)).transpose(0, 4, 5, 1, 2, 3)
    return np.ascontiguousarray(r.reshape(shape))


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite activation produced by {where}")


def source_pyramid(cube, side=None):
    """Successive window-2 average poolings: sides S/2, S/4, S/8, S/16."""
    ops.check_tensor5(cube, "cube")
    if side is not None and cube.shape[2:] != (side,) * 3:
        raise ConfigError(f"source_pyramid expects a cube of side {side}, got shape {cube.shape}")
    levels, level = [], cube
    for _ in range(4):
        level = ops.avgpool3d(level, 2, 2)
        levels.append(level)
    return levels


class ContractBlock(Module):
    def __init__(self, cin, cout, pool, seed, name):
        super().__init__()
        self.body = self.add("body", conv_bn_relu(cin, cout, 3, 1, seed, name + ".body"))
        self.pool = self.add("pool", MaxPool3d()) if pool else None

    def forward(self, x, train=True):
        pre = self.body.forward(x, train)
        return pre, (self.pool.forward(pre, train) if self.pool else pre)

    def backward(self, g_out, g_pre=None):
        g = self.pool.backward(g_out) if self.pool else g_out
        if g_pre is not None:
            g = g + g_pre
        return self.body.backward(g)


class Decov(Module):
    """Unpool -> deconv -> BN -> ReLU, concat skip, 1x1x1 conv -> BN -> ReLU."""

    def __init__(self, cin, skip_channels, cout, pool, seed, name):
        super().__init__()
        self.unpool = self.add("unpool", MaxUnpool3d(pool))
        self.up = self.add("up", Sequential(
            ("deconv", Deconv3d(cin, cin, 3, 1, 1, seed=seed, name=name + ".up.deconv")),
            ("bn", BatchNorm3d(cin)),
            ("relu", ReLU()),
        ))
        self.fuse = self.add("fuse", conv_bn_relu(cin + skip_channels, cout, 1, 0, seed, name + ".fuse"))
        self._cin = cin

    def forward(self, x, skip, train=True):
        up = self.up.forward(self.unpool.forward(x, train), train)
        return self.fuse.forward(ops.concat_channels(up, skip), train)

    def backward(self, grad):
        g_up, g_skip = ops.concat_channels_backward(self.fuse.backward(grad), self._cin)
        return self.unpool.backward(self.up.backward(g_up)), g_skip


class FeatureExtractor(Module):
    """Contracting + expanding pathways; returns the three expanding outputs."""

    def __init__(self, config, seed=0):
        super().__init__()
        cw, ew = config.contracting_widths, config.expanding_widths
        self.blocks = []
        cin = 1
        for k in range(5):
            block = self.add(f"contract{k}", ContractBlock(cin, cw[k], k < 4, seed, f"features.contract{k}"))
            self.blocks.append(block)
            cin = cw[k] + 1
        self.blocks[0].body.children["conv"].need_input_grad = False
        self.bottleneck = self.add("expand0", conv_bn_relu(cw[4], ew[0], 1, 0, seed, "features.expand0"))
        self.decov1 = self.add("expand1", Decov(ew[0], cw[3], ew[1], self.blocks[3].pool, seed, "features.expand1"))
        self.decov2 = self.add("expand2", Decov(ew[1], cw[2], ew[2], self.blocks[2].pool, seed, "features.expand2"))
        self.config = config

    def forward(self, x, train=True, trace=None):
        x = x * self.config.input_scale
        pyramid = source_pyramid(x)
        h = x
        self._pre = []
        self._concat_channels = []
        for k, block in enumerate(self.blocks):
            pre, out = block.forward(h, train)
            _check_finite(out, f"contract{k}")
            self._pre.append(pre)
            if trace is not None:
                trace.append((f"contract{k}", out.shape[1:]))
            if k < 4:
                self._concat_channels.append(out.shape[1])
                h = ops.concat_channels(out, pyramid[k])
                if trace is not None:
                    trace.append((f"concat{k}", h.shape[1:]))
            else:
                h = out
        e0 = self.bottleneck.forward(h, train)
        _check_finite(e0, "expand0")
        e1 = self.decov1.forward(e0, self._pre[3], train)
        _check_finite(e1, "expand1")
        e2 = self.decov2.forward(e1, self._pre[2], train)
        _check_finite(e2, "expand2")
        if trace is not None:
            trace += [("expand0", e0.shape[1:]), ("expand1", e1.shape[1:]), ("expand2", e2.shape[1:])]
        return [e0, e1, e2]

    def backward(self, grads):
        """``grads`` lists gradients for (e0, e1, e2); ``None`` means zero."""
        g_e0, g_e1, g_e2 = grads
        g_skip = [None] * 5
        if g_e2 is not None:
            g_from2, g_skip[2] = self.decov2.backward(g_e2)
            g_e1 = g_from2 if g_e1 is None else g_e1 + g_from2
        if g_e1 is not None:
            g_from1, g_skip[3] = self.decov1.backward(g_e1)
            g_e0 = g_from1 if g_e0 is None else g_e0 + g_from1
        g = self.bottleneck.backward(g_e0)
        for k in range(4, -1, -1):
            g = self.blocks[k].backward(g, g_skip[k])
            if k > 0:
                g, _ = ops.concat_channels_backward(g, self._concat_channels[k - 1])
        return None if g is None else g * self.config.input_scale


class PiaNet(Module):
    def __init__(self, config, seed=0):
        super().__init__()
        self.config = config
        self.features = self.add("features", FeatureExtractor(config, seed))
        sides = config.feature_sides()
        widths = config.expanding_widths
        self.head_sources = []
        self.box_heads, self.cls_heads = [], []
        for i, (s, a) in enumerate(config.prediction_scales):
            src = sides.index(s)
            self.head_sources.append(src)
            head = self.add(f"head{i}", Module())
            self.box_heads.append(head.add("box", Conv3d(widths[src], 4 * a, 3, 1, 1, seed=seed, name=f"head{i}.box")))
            self.cls_heads.append(head.add("cls", Conv3d(widths[src], 2 * a, 3, 1, 1, seed=seed, name=f"head{i}.cls")))

    def forward(self, cube, train=True, trace=None):
        side = self.config.input_cube_side
        if cube.ndim != 5 or cube.shape[1:] != (1, side, side, side):
            raise ConfigError(f"PiaNet expects input shape (N, 1, {side}, {side}, {side}), got {cube.shape}")
        feats = self.features.forward(cube, train, trace)
        boxes, scores = [], []
        for i, src in enumerate(self.head_sources):
            b = self.box_heads[i].forward(feats[src], train)
            c = self.cls_heads[i].forward(feats[src], train)
            _check_finite(b, f"head{i}.box")
            _check_finite(c, f"head{i}.cls")
            boxes.append(b)
            scores.append(c)
            if trace is not None:
                trace.append((f"head{i}", (b.shape[1:], c.shape[1:])))
        flat_b = np.concatenate([_flatten_head(b, 4) for b in boxes], axis=1)
        flat_s = np.concatenate([_flatten_head(c, 2) for c in scores], axis=1)
        if trace is not None:
            trace.append(("output", (flat_b.shape[1:] + (1, 1), flat_s.shape[1:] + (1, 1))))
        self._head_shapes = [(b.shape, c.shape) for b, c in zip(boxes, scores)]
        return RawPrediction(boxes, scores, flat_b, flat_s)

    def backward(self, d_flat_boxes, d_flat_scores):
        """Backpropagate gradients of the flattened outputs through the network."""
        g_feats = [None, None, None]
        start = 0
        for i, (bshape, cshape) in enumerate(self._head_shapes):
            count = int(np.prod(bshape[2:])) * (bshape[1] // 4)
            gb = _unflatten_head(d_flat_boxes[:, start:start + count], bshape, 4)
            gc = _unflatten_head(d_flat_scores[:, start:start + count], cshape, 2)
            start += count
            g = self.box_heads[i].backward(gb) + self.cls_heads[i].backward(gc)
            src = self.head_sources[i]
            g_feats[src] = g if g_feats[src] is None else g_feats[src] + g
        self.features.backward(g_feats)

    def probe_shapes(self):
        """Per-layer output shapes (batch axis dropped) from a zero-batch dummy."""
        side = self.config.input_cube_side
        trace = [("input", (1, side, side, side))]
        self.forward(np.zeros((0, 1, side, side, side)), train=False, trace=trace)
        return trace


def expected_shapes(config):
    """The Table-1-style shape listing implied by ``config``."""
    s = config.input_cube_side
    cw, ew = config.contracting_widths, config.expanding_widths
    rows = [("input", (1, s, s, s))]
    for k in range(4):
        t = s >> (k + 1)
        rows.append((f"contract{k}", (cw[k], t, t, t)))
        rows.append((f"concat{k}", (cw[k] + 1, t, t, t)))
    t = s // 16
    rows.append(("contract4", (cw[4], t, t, t)))
    for i, (w, f) in enumerate(zip(ew, config.feature_sides())):
        rows.append((f"expand{i}", (w, f, f, f)))
    for i, (f, a) in enumerate(config.prediction_scales):
        rows.append((f"head{i}", ((4 * a, f, f, f), (2 * a, f, f, f))))
    n = config.total_anchors
    rows.append(("output", ((n, 4, 1, 1), (n, 2, 1, 1))))
    return rows


def build_pianet(config=None, rng_seed=0):
    """Construct PiaNet and verify every probed layer shape against the config."""
    config = config or PiaNetConfig()
    model = PiaNet(config, rng_seed)
    probed = model.probe_shapes()
    expected = expected_shapes(config)
    if len(probed) != len(expected):
        raise ConfigError(f"shape probe produced {len(probed)} rows, expected {len(expected)}")
    for (name, got), (_, want) in zip(probed, expected):
        if tuple(got) != tuple(want):
            raise ConfigError(f"layer {name}: probed shape {got} differs from expected {want}")
    return model


class Stage1Classifier(Module):
    """Feature extractor + global average pool + linear layer to two logits."""

    def __init__(self, config, seed=0, features=None):
        super().__init__()
        self.config = config
        self.patch_side = config.input_cube_side // 2
        self.features = self.add("features", features or FeatureExtractor(config, seed))
        self.gap = self.add("gap", GlobalAvgPool())
        self.fc = self.add("fc", Linear(config.expanding_widths[2], 2, seed=seed, name="classifier.fc"))

    def forward(self, patch, train=True):
        p = self.patch_side
        if patch.ndim != 5 or patch.shape[1:] != (1, p, p, p):
            raise ConfigError(f"classifier expects patches of shape (N, 1, {p}, {p}, {p}), got {patch.shape}")
        e2 = self.features.forward(patch, train)[2]
        logits = self.fc.forward(self.gap.forward(e2, train), train)
        _check_finite(logits, "classifier.fc")
        return logits

    def backward(self, d_logits):
        self.features.backward([None, None, self.gap.backward(self.fc.backward(d_logits))])

    def predict_proba(self, patch):
        return ops.softmax(self.forward(patch, train=False), axis=-1)


def build_stage1_classifier(config=None, rng_seed=0, feature_module=None):
    """Classifier over patches of half the detector cube side (1/8 of its volume)."""
    config = config or PiaNetConfig()
    if config.input_cube_side // 2 < 16:
        raise ConfigError(f"cube side {config.input_cube_side} leaves patches too small for five blocks")
    if feature_module is not None and feature_module.config.expanding_widths != config.expanding_widths:
        raise ConfigError("feature module widths do not match the classifier config")
    return Stage1Classifier(config, rng_seed, feature_module)


def feature_tensors(state):
    return {k: v for k, v in state.items() if k.startswith(FEATURE_PREFIX)}


def transfer_features(classifier_checkpoint, pianet):
    """Copy feature-extraction tensors from a stage-1 checkpoint into ``pianet``.

    Accepts a ``Checkpoint`` (anything with a ``tensors`` dict) or a plain
    name -> array mapping. Heads keep their current values.
    """
    source = getattr(classifier_checkpoint, "tensors", classifier_checkpoint)
    target = feature_tensors(pianet.state_dict())
    missing = sorted(n for n in target if n not in source)
    mismatched = sorted(n for n in target if n in source and source[n].shape != target[n].shape)
    if missing or mismatched:
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(missing))
        if mismatched:
            parts.append("shape mismatch: " + ", ".join(
                f"{n} {source[n].shape} vs {target[n].shape}" for n in mismatched))
        raise CheckpointError("cannot transfer features; " + "; ".join(parts))
    for name, arr in target.items():
        arr[...] = source[name]
    return pianet
