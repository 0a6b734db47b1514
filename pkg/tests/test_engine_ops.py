import numpy as np
import pytest

from oracles import avgpool_scan, conv3d_loops, maxpool_scan
from pianet.engine import ops
from pianet.engine.init import fans, xavier_init
from pianet.engine.optim import sgd_step
from pianet.errors import ConfigError, DataError


def test_conv_single_element():
    x = np.full((1, 1, 1, 1, 1), 3.0)
    w = np.full((1, 1, 1, 1, 1), -2.0)
    assert ops.conv3d(x, w, np.array([0.5]))[0, 0, 0, 0, 0] == -5.5


def test_conv_sum_of_ones():
    out = ops.conv3d(np.ones((1, 1, 3, 3, 3)), np.ones((1, 1, 3, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1, 1) and out.item() == 27.0


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
def test_conv_matches_loop_oracle(rng, backend, stride, pad):
    x = rng.standard_normal((2, 3, 6, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3, 3))
    b = rng.standard_normal(4)
    assert np.max(np.abs(ops.conv3d(x, w, b, stride, pad) - conv3d_loops(x, w, b, stride, pad))) < 1e-10


def test_conv_errors_name_shapes():
    with pytest.raises(ConfigError, match=r"\(1, 2, 4, 4, 4\).*\(1, 3, 3, 3, 3\)"):
        ops.conv3d(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)))
    with pytest.raises(ConfigError, match="empty output"):
        ops.conv3d(np.zeros((1, 1, 2, 2, 2)), np.zeros((1, 1, 3, 3, 3)))


def test_deconv_is_conv_input_gradient(rng, backend):
    x = rng.standard_normal((2, 5, 4, 5, 3))
    w = rng.standard_normal((5, 3, 3, 3, 3))  # (in, out, k, k, k)
    y = ops.deconv3d(x, w, None, 1, 1)
    # conv with the same kernel maps 3 -> 5 channels; its input gradient at grad x is the deconv
    dx, _, _ = ops.conv3d_backward(x, np.zeros(y.shape), w, 1, 1)
    assert np.max(np.abs(y - dx)) < 1e-12


def test_deconv_pointwise_scaling():
    x = np.arange(8.0).reshape(1, 1, 2, 2, 2)
    y = ops.deconv3d(x, np.full((1, 1, 1, 1, 1), 2.0), np.array([1.0]), 1, 0)
    assert np.array_equal(y, 2 * x + 1)


def test_batchnorm_train_normalizes(rng):
    x = rng.standard_normal((2, 3, 4, 4, 4)) * 5 + 2
    rm, rv = np.zeros(3), np.ones(3)
    y, _ = ops.batchnorm3d(x, np.ones(3), np.zeros(3), rm, rv, train=True)
    assert np.allclose(y.mean(axis=(0, 2, 3, 4)), 0, atol=1e-12)
    assert np.allclose(y.var(axis=(0, 2, 3, 4)), 1, atol=1e-3)
    assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3, 4)))
    assert np.all(rv > 0)


def test_batchnorm_zero_scale_gives_shift(rng):
    x = rng.standard_normal((1, 2, 2, 2, 2))
    shift = np.array([0.5, -1.0])
    y, _ = ops.batchnorm3d(x, np.zeros(2), shift, np.zeros(2), np.ones(2), train=True)
    assert np.allclose(y, shift.reshape(1, 2, 1, 1, 1))


def test_batchnorm_infer_uses_running_stats(rng):
    x = rng.standard_normal((1, 2, 2, 2, 2))
    y, _ = ops.batchnorm3d(x, np.ones(2), np.zeros(2), np.array([1.0, -1.0]), np.array([4.0, 1.0]), train=False, eps=0.0)
    assert np.allclose(y[0, 0], (x[0, 0] - 1) / 2) and np.allclose(y[0, 1], x[0, 1] + 1)


def test_batchnorm_channel_mismatch():
    with pytest.raises(ConfigError):
        ops.batchnorm3d(np.zeros((1, 2, 2, 2, 2)), np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), True)


def test_relu_values_and_gradient():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 1, 3)
    assert ops.relu(x).ravel().tolist() == [0.0, 0.0, 2.0]
    assert ops.relu_backward(np.ones_like(x), x).ravel().tolist() == [0.0, 0.0, 1.0]
    neg = -np.ones((1, 1, 2, 2, 2))
    assert not ops.relu(neg).any() and not ops.relu_backward(np.ones_like(neg), neg).any()


def test_maxpool_window_and_ties(backend):
    x = np.arange(1.0, 9.0).reshape(1, 1, 2, 2, 2)
    out, idx = ops.maxpool3d(x)
    assert out.item() == 8 and idx.item() == 7
    out, idx = ops.maxpool3d(np.full((1, 1, 2, 2, 2), 3.0))
    assert out.item() == 3 and idx.item() == 0


def test_maxpool_matches_window_scan(rng, backend):
    x = rng.standard_normal((1, 2, 8, 8, 8))
    out, idx = ops.maxpool3d(x)
    ref, ref_idx = maxpool_scan(x)
    assert np.array_equal(out, ref) and np.array_equal(idx, ref_idx)


def test_maxpool_indices_inside_window(rng, backend):
    x = np.round(rng.standard_normal((1, 1, 4, 6, 8)))  # many ties
    _, idx = ops.maxpool3d(x)
    z, rem = np.divmod(idx, 6 * 8)
    y, xx = np.divmod(rem, 8)
    grid = np.indices(idx.shape[2:])
    assert np.all(z[0, 0] // 2 == grid[0]) and np.all(y[0, 0] // 2 == grid[1]) and np.all(xx[0, 0] // 2 == grid[2])


def test_maxpool_odd_extent_rejected():
    with pytest.raises(ConfigError):
        ops.maxpool3d(np.zeros((1, 1, 3, 4, 4)))


def test_avgpool_values(rng, backend):
    assert np.all(ops.avgpool3d(np.full((1, 1, 4, 4, 4), 2.5), 2, 2) == 2.5)
    assert ops.avgpool3d(np.arange(1.0, 9.0).reshape(1, 1, 2, 2, 2), 2, 2).item() == 4.5
    x = rng.standard_normal((1, 2, 6, 6, 6))
    for window, stride in [(2, 2), (3, 3), (2, 1)]:
        assert np.max(np.abs(ops.avgpool3d(x, window, stride) - avgpool_scan(x, window, stride))) < 1e-12


def test_avgpool_incompatible():
    with pytest.raises(ConfigError):
        ops.avgpool3d(np.zeros((1, 1, 5, 4, 4)), 2, 2)


def test_cascaded_avgpool_equals_single_pool(backend):
    x = np.random.default_rng(3).random((1, 1, 128, 128, 128))
    level = x
    for k in range(1, 5):
        level = ops.avgpool3d(level, 2, 2)
        direct = ops.avgpool3d(x, 2 ** k, 2 ** k)
        assert np.max(np.abs(level - direct)) < 1e-12


def test_unpool_roundtrip(rng, backend):
    x = rng.standard_normal((2, 3, 4, 4, 4))
    out, idx = ops.maxpool3d(x)
    up = ops.max_unpool3d(out, idx, x.shape)
    flat_up = up.reshape(2, 3, -1)
    for n in range(2):
        for c in range(3):
            assert np.array_equal(flat_up[n, c, idx[n, c].ravel()], out[n, c].ravel())
    assert np.count_nonzero(up) == out.size
    assert not ops.max_unpool3d(np.zeros_like(out), idx, x.shape).any()
    assert np.isclose(up.sum(), out.sum())
    # pooling the unpooled tensor gives back the pooled values
    again, _ = ops.maxpool3d(up + np.where(up == 0, -1e9, 0))
    assert np.array_equal(again, out)


def test_unpool_bad_index():
    with pytest.raises(DataError):
        ops.max_unpool3d(np.ones((1, 1, 1, 1, 1)), np.full((1, 1, 1, 1, 1), 99), (1, 1, 2, 2, 2))


def test_concat_channels():
    a, b = np.zeros((1, 24, 4, 4, 4)), np.ones((1, 1, 4, 4, 4))
    out = ops.concat_channels(a, b)
    assert out.shape == (1, 25, 4, 4, 4)
    assert np.array_equal(ops.concat_channels(a, np.zeros((1, 0, 4, 4, 4))), a)
    ga, gb = ops.concat_channels_backward(out, 24)
    assert np.array_equal(ga, a) and np.array_equal(gb, b)
    with pytest.raises(ConfigError):
        ops.concat_channels(a, np.zeros((1, 1, 2, 4, 4)))


def test_xavier_determinism_and_variance():
    p1 = xavier_init((8, 4, 3, 3, 3), 7)
    p2 = xavier_init((8, 4, 3, 3, 3), 7)
    assert np.array_equal(p1.weight, p2.weight) and not p1.bias.any()
    shape = (100, 40, 3, 3, 3)
    fan_in, fan_out = fans(shape)
    w = xavier_init(shape, 1).weight
    assert w.size >= 1e5
    assert abs(w.var() / (2.0 / (fan_in + fan_out)) - 1) < 0.05
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    assert np.all(np.abs(w) <= bound)


def test_sgd_rules():
    p = {"w": np.array([1.0, -2.0])}
    v = {}
    sgd_step(p, {"w": np.zeros(2)}, v, 0.1, momentum=0.9, weight_decay=0.0)
    assert np.array_equal(p["w"], [1.0, -2.0])
    sgd_step(p, {"w": np.array([1.0, 1.0])}, {}, 0.1, momentum=0.0, weight_decay=0.0)
    assert np.allclose(p["w"], [0.9, -2.1])
    with pytest.raises(ConfigError):
        sgd_step(p, {"w": np.zeros(3)}, {}, 0.1)


@pytest.mark.parametrize("lr,momentum", [(1e-3, 0.9), (0.1, 0.0)])
def test_sgd_quadratic_bowl_monotone(lr, momentum):
    # lr 1e-3 with momentum 0.9 is overdamped on f = |p|^2 (real eigenvalues), so no oscillation
    p = {"w": np.array([3.0, -4.0, 1.0])}
    v = {}
    losses = []
    for _ in range(100):
        losses.append(float(np.sum(p["w"] ** 2)))
        sgd_step(p, {"w": 2 * p["w"]}, v, lr, momentum=momentum)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


def test_ops_deterministic(rng):
    x = rng.standard_normal((2, 2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    assert np.array_equal(ops.conv3d(x, w, None, 1, 1), ops.conv3d(x.copy(), w.copy(), None, 1, 1))


def test_non_tensor5_rejected():
    with pytest.raises(ConfigError):
        ops.conv3d(np.zeros((1, 4, 4, 4)), np.zeros((1, 1, 3, 3, 3)))
