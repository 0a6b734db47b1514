import numpy as np
import pytest

from pianet.checkpoint import Checkpoint
from pianet.errors import CheckpointError, ConfigError
from pianet.model import (
    PiaNetConfig, build_pianet, build_stage1_classifier, feature_tensors, source_pyramid, transfer_features,
)

# Layer output shapes of the reference configuration, rows 0-16, batch axis dropped.
TABLE1 = [
    (1, 128, 128, 128),
    (24, 64, 64, 64), (25, 64, 64, 64),
    (32, 32, 32, 32), (33, 32, 32, 32),
    (64, 16, 16, 16), (65, 16, 16, 16),
    (64, 8, 8, 8), (65, 8, 8, 8),
    (64, 8, 8, 8),
    (64, 8, 8, 8), (64, 16, 16, 16), (128, 32, 32, 32),
    ((4, 32, 32, 32), (2, 32, 32, 32)),
    ((12, 16, 16, 16), (6, 16, 16, 16)),
    ((20, 8, 8, 8), (10, 8, 8, 8)),
    ((47616, 4, 1, 1), (47616, 2, 1, 1)),
]


@pytest.fixture(scope="module")
def small():
    return PiaNetConfig().reduced(32, 4)


def test_probe_matches_table1():
    model = build_pianet()
    shapes = [tuple(s) for _, s in model.probe_shapes()]
    assert shapes == TABLE1


def test_config_anchor_total():
    cfg = PiaNetConfig()
    assert cfg.total_anchors == 47616 == 32 ** 3 * 1 + 16 ** 3 * 3 + 8 ** 3 * 5


@pytest.mark.parametrize("kwargs", [
    {"anchor_sides_mm": (4, 6, 8, 10, 12, 16, 20, 26)},
    {"anchor_sides_mm": (4, 8, 6, 10, 12, 16, 20, 26, 32)},
    {"contracting_widths": (24, 32, 64)},
    {"input_cube_side": 100},
])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        build_pianet(PiaNetConfig(**kwargs))


def test_config_dict_roundtrip(small):
    assert PiaNetConfig.from_dict(small.to_dict()) == small
    with pytest.raises(ConfigError, match="unknown model config keys: depth"):
        PiaNetConfig.from_dict(dict(small.to_dict(), depth=3))


def test_source_pyramid():
    cube = np.full((1, 1, 128, 128, 128), 3.5)
    levels = source_pyramid(cube, 128)
    assert [lv.shape for lv in levels] == [(1, 1, s, s, s) for s in (64, 32, 16, 8)]
    assert all(np.all(lv == 3.5) for lv in levels)
    spike = np.zeros((1, 1, 32, 32, 32))
    spike[0, 0, 5, 17, 9] = 1.0
    for k, lv in enumerate(source_pyramid(spike)):
        assert lv.sum() * 8 ** (k + 1) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ConfigError):
        source_pyramid(cube, 64)


def test_forward_rows_and_determinism(small, rng):
    model = build_pianet(small, 3)
    cube = rng.random((2, 1, 32, 32, 32))
    pred = model.forward(cube, train=False)
    assert pred.flat_boxes.shape == (2, small.total_anchors, 4)
    assert pred.flat_scores.shape == (2, small.total_anchors, 2)
    again = model.forward(cube, train=False)
    assert again.flat_boxes.tobytes() == pred.flat_boxes.tobytes()
    # batch entries are independent in inference mode
    single = model.forward(cube[1:], train=False)
    np.testing.assert_allclose(single.flat_scores[0], pred.flat_scores[1], rtol=0, atol=1e-12)


def test_flat_rows_follow_anchor_order(small):
    model = build_pianet(small, 0)
    pred = model.forward(np.random.default_rng(0).random((1, 1, 32, 32, 32)), train=False)
    # scale 1 (side 4, three sizes): row = offset + ((z * 4 + y) * 4 + x) * 3 + a
    s0 = small.prediction_scales[0][0] ** 3
    z, y, x, a = 1, 2, 3, 2
    row = s0 + ((z * 4 + y) * 4 + x) * 3 + a
    np.testing.assert_array_equal(pred.flat_boxes[0, row], pred.boxes[1][0, 4 * a:4 * a + 4, z, y, x])
    np.testing.assert_array_equal(pred.flat_scores[0, row], pred.scores[1][0, 2 * a:2 * a + 2, z, y, x])


def test_wrong_cube_side_rejected(small):
    with pytest.raises(ConfigError):
        build_pianet(small).forward(np.zeros((1, 1, 16, 16, 16)), train=False)


def test_classifier_outputs(small, rng):
    clf = build_stage1_classifier(small, 0)
    patch = rng.random((3, 1, 16, 16, 16))
    p = clf.predict_proba(patch)
    assert p.shape == (3, 2)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    same = clf.predict_proba(np.repeat(patch[:1], 2, axis=0))
    assert same[0].tobytes() == same[1].tobytes()
    with pytest.raises(ConfigError):
        clf.forward(np.zeros((1, 1, 32, 32, 32)))


def test_transfer_features(small):
    clf = build_stage1_classifier(small, 11)
    ckpt = Checkpoint({k: v.copy() for k, v in clf.state_dict().items()})
    det = build_pianet(small, 5)
    heads_before = {k: v.copy() for k, v in det.state_dict().items() if not k.startswith("features.")}
    transfer_features(ckpt, det)
    got = feature_tensors(det.state_dict())
    assert got and all(got[k].tobytes() == ckpt.tensors[k].tobytes() for k in got)
    after = det.state_dict()
    assert all(after[k].tobytes() == v.tobytes() for k, v in heads_before.items())
    once = {k: v.copy() for k, v in after.items()}
    transfer_features(ckpt, det)
    assert all(det.state_dict()[k].tobytes() == v.tobytes() for k, v in once.items())
    pred = det.forward(np.random.default_rng(1).random((1, 1, 32, 32, 32)), train=False)
    assert np.all(np.isfinite(pred.flat_boxes)) and np.all(np.isfinite(pred.flat_scores))


def test_transfer_reports_missing_and_mismatched(small):
    det = build_pianet(small, 0)
    tensors = feature_tensors({k: v.copy() for k, v in det.state_dict().items()})
    name = sorted(tensors)[0]
    del tensors[name]
    other = sorted(tensors)[-1]
    tensors[other] = np.zeros((1,))
    with pytest.raises(CheckpointError) as err:
        transfer_features(tensors, det)
    assert name in str(err.value) and other in str(err.value)
