import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from virtualstain import engine as E
from virtualstain.engine import AdamConfig, Param, ShapeError, Tensor, grad_check

TOL = 1e-4
N_RANDOM = 20


def away_from_zero(a, gap=1e-2):
    """Push values off the kink at 0 so finite differences never straddle it."""
    a = np.where(np.abs(a) < gap, np.sign(a + 1e-12) * gap * 2, a)
    return a


def random_inputs(shape, seed):
    return np.random.default_rng(seed).uniform(-2, 2, size=shape)


# ---------------------------------------------------------------- conv2d


def test_conv_identity_kernel_single_channel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 7))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(E.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1))).data, x)


def test_conv_center_tap_sums_channels():
    x = np.random.default_rng(1).normal(size=(1, 3, 4, 4))
    k = np.zeros((1, 3, 3, 3))
    k[0, :, 1, 1] = 1
    out = E.conv2d(Tensor(x), Tensor(k)).data
    np.testing.assert_allclose(out[:, 0], x.sum(axis=1), atol=1e-12)


def test_conv_all_ones_counts_neighbours():
    out = E.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1))).data[0, 0]
    assert out[1, 1] == 9
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4
    assert out[0, 1] == 6


def test_conv_zero_input_gives_bias():
    b = np.array([0.5, -1.25])
    out = E.conv2d(Tensor(np.zeros((2, 3, 4, 6))), Tensor(np.ones((2, 3, 3, 3))), Tensor(b)).data
    assert out.shape == (2, 2, 4, 6)
    np.testing.assert_array_equal(out[:, 0], 0.5)
    np.testing.assert_array_equal(out[:, 1], -1.25)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        E.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_rejects_non_3x3_kernel():
    with pytest.raises(ShapeError):
        E.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 5))))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    x, k, b = rng.normal(size=(2, 2, 5, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 5, 4))
    for i in range(5):
        for j in range(4):
            ref[:, :, i, j] = np.einsum("ncuv,ocuv->no", xp[:, :, i : i + 3, j : j + 3], k) + b
    np.testing.assert_allclose(E.conv2d(Tensor(x), Tensor(k), Tensor(b)).data, ref, atol=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_conv_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(1, 2, 6, 5)), rng.normal(size=(1, 2, 6, 5))
    k = Tensor(rng.normal(size=(3, 2, 3, 3)))
    lhs = E.conv2d(Tensor(a * x + b * y), k).data
    rhs = a * E.conv2d(Tensor(x), k).data + b * E.conv2d(Tensor(y), k).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


# ---------------------------------------------------------------- leaky_relu


@pytest.mark.parametrize("v, expected", [(2.0, 2.0), (-1.0, -0.1), (0.0, 0.0)])
def test_leaky_relu_values(v, expected):
    out = E.leaky_relu(Tensor(np.full((1, 1, 1, 1), v))).data.item()
    assert out == pytest.approx(expected, abs=1e-15)


# ---------------------------------------------------------------- avg_pool2


def test_avg_pool_block_mean():
    x = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)
    assert E.avg_pool2(Tensor(x)).data.item() == 4.0


def test_avg_pool_constant():
    out = E.avg_pool2(Tensor(np.full((2, 3, 8, 6), 1.75))).data
    assert out.shape == (2, 3, 4, 3)
    np.testing.assert_array_equal(out, 1.75)


def test_avg_pool_rejects_odd():
    with pytest.raises(ShapeError):
        E.avg_pool2(Tensor(np.zeros((1, 1, 3, 4))))


@given(arrays(np.float64, (1, 2, 6, 8), elements=st.floats(-10, 10)))
def test_pool_then_nearest_keeps_block_means(x):
    pooled = E.avg_pool2(Tensor(x)).data
    up = pooled.repeat(2, axis=2).repeat(2, axis=3)
    blocks = lambda a: a.reshape(1, 2, 3, 2, 4, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(blocks(up), blocks(x), rtol=0, atol=1e-12)


# ---------------------------------------------------------------- bicubic_up2


def test_bicubic_shape_and_constant():
    out = E.bicubic_up2(Tensor(np.full((1, 3, 16, 16), 0.3))).data
    assert out.shape == (1, 3, 32, 32)
    np.testing.assert_allclose(out, 0.3, atol=1e-12)


def test_bicubic_reproduces_interior_ramp():
    w = 12
    x = np.tile(np.arange(w, dtype=np.float64) * 0.7 + 1.0, (1, 1, 5, 1))
    out = E.bicubic_up2(Tensor(x)).data[0, 0]
    # output column i samples source coordinate (i + 0.5) / 2 - 0.5
    cols = np.arange(2 * w)
    src = (cols + 0.5) / 2 - 0.5
    interior = (src >= 1) & (src <= w - 2)
    np.testing.assert_allclose(out[:, interior], np.broadcast_to(src[interior] * 0.7 + 1.0, (10, interior.sum())), atol=1e-6)


def test_bicubic_rows_of_matrix_sum_to_one():
    for n in (1, 2, 5, 16):
        np.testing.assert_allclose(E.bicubic_matrix(n).sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- dense


def test_dense_identity():
    x = np.array([[0.5, -2.0, 3.0]])
    np.testing.assert_array_equal(E.dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)


def test_dense_hand_product():
    out = E.dense(Tensor(np.array([1.0, 2.0])), Tensor(np.array([[1.0, 1.0]])), Tensor(np.array([0.5])))
    np.testing.assert_allclose(out.data, [3.5])


def test_dense_wrong_length():
    with pytest.raises(ShapeError):
        E.dense(Tensor(np.ones(3)), Tensor(np.ones((1, 2))))


# ---------------------------------------------------------------- sigmoid


def test_sigmoid_values():
    assert E.sigmoid(Tensor(np.array(0.0))).data == 0.5
    assert E.sigmoid(Tensor(np.array(math.log(3)))).data == pytest.approx(0.75, abs=1e-15)
    tiny = float(E.sigmoid(Tensor(np.array(-50.0))).data)
    assert 0 < tiny < 1e-20


@given(arrays(np.float64, 16, elements=st.floats(-800, 800)))
def test_sigmoid_open_interval_and_finite(x):
    s = E.sigmoid(Tensor(x)).data
    assert np.all(np.isfinite(s))
    assert np.all((s >= 0) & (s <= 1))
    small = np.abs(x) < 30
    assert np.all((s[small] > 0) & (s[small] < 1))


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient_keeps_value():
    p = Param(np.array([1.0, -2.0, 3.0]))
    p.grad = np.zeros(3)
    E.adam_step(p, AdamConfig(1e-3))
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])
    assert p.grad is None and p.step_count == 1


def test_adam_first_step_moves_by_lr():
    g = np.array([0.3, -5.0, 1e-2])
    p = Param(np.zeros(3))
    p.grad = g.copy()
    E.adam_step(p, AdamConfig(1e-4, eps=1e-12))
    np.testing.assert_allclose(p.data, -1e-4 * np.sign(g), rtol=1e-6)


def test_adam_first_step_scales_with_lr():
    steps = []
    for lr in (1e-4, 1e-5):
        p = Param(np.zeros(4))
        p.grad = np.array([1.0, -2.0, 0.5, 3.0])
        E.adam_step(p, AdamConfig(lr))
        steps.append(np.abs(p.data))
    np.testing.assert_allclose(steps[0] / steps[1], 10.0, rtol=1e-6)


def test_adam_matches_reference_over_several_steps():
    rng = np.random.default_rng(3)
    cfg = AdamConfig(1e-2)
    p = Param(rng.normal(size=5))
    theta, m, v = p.data.copy(), np.zeros(5), np.zeros(5)
    for t in range(1, 6):
        g = rng.normal(size=5)
        p.grad = g.copy()
        E.adam_step(p, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - cfg.lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + cfg.eps)
    np.testing.assert_allclose(p.data, theta, rtol=1e-12)
    assert np.all(p.m2 >= 0)


@given(arrays(np.float32, 6, elements=st.floats(-4, 4, width=32)), st.integers(1, 5))
def test_adam_is_deterministic(g, steps):
    a, b = Param(np.ones(6, np.float32)), Param(np.ones(6, np.float32))
    for _ in range(steps):
        a.grad, b.grad = g.copy(), g.copy()
        E.adam_step(a, AdamConfig(1e-4))
        E.adam_step(b, AdamConfig(1e-4))
    assert a.data.tobytes() == b.data.tobytes()
    assert a.m1.shape == a.m2.shape == a.data.shape


def test_adam_config_rejects_bad_values():
    with pytest.raises(ValueError):
        AdamConfig(0.0)
    with pytest.raises(ValueError):
        AdamConfig(1e-3, beta1=1.0)


# ---------------------------------------------------------------- gradient checks

GRAD_CASES = {
    "conv2d": (lambda x, k, b: E.conv2d(x, k, b), [(1, 2, 6, 6), (3, 2, 3, 3), (3,)]),
    "conv2d_batched": (lambda x, k: E.conv2d(x, k), [(2, 3, 4, 5), (2, 3, 3, 3)]),
    "leaky_relu": (E.leaky_relu, [(2, 2, 3, 3)]),
    "avg_pool2": (E.avg_pool2, [(2, 2, 4, 6)]),
    "bicubic_up2": (E.bicubic_up2, [(1, 2, 4, 5)]),
    "dense": (lambda x, w, b: E.dense(x, w, b), [(3, 5), (4, 5), (4,)]),
    "sigmoid": (E.sigmoid, [(3, 4)]),
    "square": (E.square, [(2, 5)]),
    "absolute": (E.absolute, [(2, 5)]),
    "mul": (E.mul, [(2, 3), (2, 3)]),
    "add_broadcast": (E.add, [(2, 3, 2, 2), (1, 3, 1, 1)]),
    "sub": (E.sub, [(4,), (4,)]),
    "mean": (E.mean, [(2, 2, 3, 3)]),
    "concat": (lambda a, b: E.concat([a, b], axis=1), [(1, 2, 3, 3), (1, 1, 3, 3)]),
    "slice_spatial": (lambda x: E.slice_spatial(x, slice(1, None), slice(None, -1)), [(1, 2, 4, 4)]),
    "flatten_dense": (lambda x, w: E.dense(E.flatten(x), w), [(2, 2, 2, 2), (3, 8)]),
}
KINKED = {"leaky_relu", "absolute"}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    op, shapes = GRAD_CASES[name]
    worst = 0.0
    for trial in range(N_RANDOM):
        inputs = [random_inputs(s, 1000 * trial + i) for i, s in enumerate(shapes)]
        if name in KINKED:
            inputs = [away_from_zero(a) for a in inputs]
        worst = max(worst, grad_check(op, *inputs, seed=trial))
    assert worst <= TOL, f"{name}: max relative error {worst:.2e}"


def test_grad_check_tight_for_piecewise_linear_ops():
    x = away_from_zero(random_inputs((1, 2, 4, 4), 7))
    assert grad_check(E.leaky_relu, x) <= 1e-6
    assert grad_check(E.avg_pool2, random_inputs((1, 2, 4, 4), 8)) <= 1e-6


def test_grad_check_reports_wrong_backward():
    def bad(x):
        out = Tensor(x.data * 2.0, requires_grad=True)
        out._parents = (x,)
        out._backward = lambda g: E._accum(x, g * 3.0)
        return out

    assert grad_check(bad, random_inputs((3,), 0)) > 0.1


@given(arrays(np.float64, (1, 2, 4, 4), elements=st.floats(-1e3, 1e3)))
def test_ops_keep_finite(x):
    k = Tensor(np.full((2, 2, 3, 3), 0.1))
    y = E.bicubic_up2(E.avg_pool2(E.leaky_relu(E.conv2d(Tensor(x), k))))
    assert np.all(np.isfinite(y.data))


def test_float32_graph_stays_float32():
    x = Tensor(np.ones((1, 2, 4, 4), np.float32))
    k = Tensor(np.ones((2, 2, 3, 3), np.float32), requires_grad=True)
    y = E.mean(E.square(E.sub(1.0, E.mul(E.leaky_relu(E.conv2d(x, k)), 0.5))))
    assert y.data.dtype == np.float32
    y.backward()
    assert k.grad.dtype == np.float32


# ---------------------------------------------------------------- freezing


def test_frozen_params_get_no_gradient_even_after_release():
    rng = np.random.default_rng(0)
    w, v = Param(rng.normal(size=(2, 1, 3, 3))), Param(rng.normal(size=(1, 2, 3, 3)))
    x = Tensor(rng.normal(size=(1, 1, 6, 6)))
    with E.frozen([v]):
        out = E.conv2d(E.conv2d(x, w), v)
    # backward after the block has exited, as in a GAN generator step
    E.mean(E.square(out)).backward()
    assert v.grad is None
    assert w.grad is not None and np.any(w.grad != 0)
    assert v.requires_grad
