import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repforge import layers
from repforge.gradcheck import (
    check_conv2d, check_dense, check_dropout, check_maxpool, check_relu, check_softmax,
)
from repforge.layers import ConvSpec
from repforge.tensor import ShapeError


def loop_conv(x, k, b, spec):
    """Direct six-loop cross-correlation used as the oracle."""
    h, w, c = x.shape
    kh, kw, _, f = k.shape
    sy, sx = spec.stride
    ho, wo = spec.output_hw(h, w)
    (pt, _), (pl, _) = spec.padding(h, w)
    out = np.zeros((ho, wo, f))
    for oy in range(ho):
        for ox in range(wo):
            for m in range(f):
                acc = b[m]
                for i in range(kh):
                    for j in range(kw):
                        for ch in range(c):
                            y, xx = oy * sy + i - pt, ox * sx + j - pl
                            if 0 <= y < h and 0 <= xx < w:
                                acc += x[y, xx, ch] * k[i, j, ch, m]
                out[oy, ox, m] = acc
    return out


def loop_pool(x, window, stride):
    h, w, f = x.shape
    kh, kw = window
    ho, wo = (h - kh) // stride[0] + 1, (w - kw) // stride[1] + 1
    out = np.empty((ho, wo, f))
    for y in range(ho):
        for xx in range(wo):
            for c in range(f):
                out[y, xx, c] = x[y * stride[0]:y * stride[0] + kh, xx * stride[1]:xx * stride[1] + kw, c].max()
    return out


# --------------------------------------------------------------------------
# convolution


def test_conv_all_ones_window_sums():
    spec = ConvSpec((3, 3), (1, 1), 1, 1, "same")
    out, _ = layers.conv2d_forward(np.ones((3, 3, 1)), np.ones((3, 3, 1, 1)), np.zeros(1), spec)
    assert out[:, :, 0].tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


@pytest.mark.parametrize("stride,expected", [((1, 1), (9, 784, 5)), ((3, 1), (3, 784, 5))])
def test_conv_rect_output_shapes(stride, expected):
    spec = ConvSpec((3, 3), stride, 1, 5)
    out, _ = layers.conv2d_forward(np.zeros((9, 784, 1)), np.zeros((3, 3, 1, 5)), np.zeros(5), spec)
    assert out.shape == expected


def test_disjoint_stride_keeps_feature_groups_apart():
    # with stride 3 along rows each output row only sees its own 3-row group
    x = np.zeros((9, 6, 1))
    x[3:6] = 1.0
    spec = ConvSpec((3, 3), (3, 1), 1, 1)
    out, _ = layers.conv2d_forward(x, np.ones((3, 3, 1, 1)), np.zeros(1), spec)
    # same padding total = (3-1)*3+3-9 = 0, so windows are rows 0-2, 3-5, 6-8
    assert np.all(out[0] == 0) and np.all(out[2] == 0) and np.all(out[1] > 0)


def test_conv_matches_loop_oracle_on_random_cases():
    rng = np.random.default_rng(2024)
    cases = 0
    for stride in [(1, 1), (3, 1), (2, 3)]:
        for mode in ("same", "valid"):
            for _ in range(10):
                kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 5))
                h, w = int(rng.integers(kh, 10)), int(rng.integers(kw, 12))
                c, f = int(rng.integers(1, 4)), int(rng.integers(1, 4))
                spec = ConvSpec((kh, kw), stride, c, f, mode)
                x = rng.standard_normal((h, w, c))
                k = rng.standard_normal((kh, kw, c, f))
                b = rng.standard_normal(f)
                got, _ = layers.conv2d_forward(x, k, b, spec)
                np.testing.assert_allclose(got, loop_conv(x, k, b, spec), rtol=0, atol=1e-10)
                cases += 1
    assert cases >= 50


def test_conv_batch_equals_stacked_singles():
    rng = np.random.default_rng(0)
    spec = ConvSpec((3, 3), (3, 1), 2, 3)
    x = rng.standard_normal((4, 9, 10, 2))
    k, b = rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3)
    batch, _ = layers.conv2d_forward(x, k, b, spec)
    for i in range(4):
        # BLAS blocking depends on row count, so allow rounding-level drift
        np.testing.assert_allclose(batch[i], layers.conv2d_forward(x[i], k, b, spec)[0], rtol=0, atol=1e-12)


@given(st.integers(1, 40), st.integers(1, 5), st.integers(1, 5))
def test_same_padding_output_extent_is_ceil(size, win, stride):
    spec = ConvSpec((win, 1), (stride, 1), 1, 1, "same")
    ho, _ = spec.output_hw(size, 1)
    (top, bottom), _ = spec.padding(size, 1)
    assert ho == math.ceil(size / stride)
    assert bottom - top in (0, 1)


def test_conv_spec_guards():
    with pytest.raises(ValueError):
        ConvSpec((0, 3), (1, 1), 1, 1)
    with pytest.raises(ValueError):
        ConvSpec((3, 3), (1, 1), 1, 1, "full")
    spec = ConvSpec((3, 3), (1, 1), 2, 1)
    with pytest.raises(ShapeError):
        layers.conv2d_forward(np.zeros((4, 4, 1)), np.zeros((3, 3, 2, 1)), np.zeros(1), spec)
    with pytest.raises(ShapeError):
        layers.conv2d_forward(np.zeros((2, 2, 1)), np.zeros((3, 3, 1, 1)), np.zeros(1), ConvSpec((3, 3), (1, 1), 1, 1, "valid"))


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(1)
    spec = ConvSpec((3, 3), (1, 1), 2, 4)
    out, cache = layers.conv2d_forward(rng.standard_normal((5, 8, 2)), rng.standard_normal((3, 3, 2, 4)), np.ones(4), spec)
    dx, dk, db = layers.conv2d_backward(np.zeros_like(out), cache)
    assert not dx.any() and not dk.any() and not db.any()


def test_conv_backward_one_by_one_valid():
    x = np.array([[[2.0, -3.0]]])
    spec = ConvSpec((1, 1), (1, 1), 2, 1, "valid")
    _, cache = layers.conv2d_forward(x, np.zeros((1, 1, 2, 1)), np.zeros(1), spec)
    _, dk, db = layers.conv2d_backward(np.ones((1, 1, 1)), cache)
    assert dk.reshape(-1).tolist() == [2.0, -3.0]
    assert db.tolist() == [1.0]


def test_conv_backward_skips_input_grad_on_request():
    spec = ConvSpec((3, 3), (1, 1), 1, 1)
    out, cache = layers.conv2d_forward(np.ones((4, 4, 1)), np.ones((3, 3, 1, 1)), np.zeros(1), spec)
    dx, dk, _ = layers.conv2d_backward(np.ones_like(out), cache, need_input_grad=False)
    assert dx is None and dk.shape == (3, 3, 1, 1)


@pytest.mark.parametrize("kw", [
    {},
    {"shape": (9, 7, 1), "maps": 3, "stride": (3, 1)},
    {"shape": (6, 9, 2), "maps": 2, "window": (2, 3), "stride": (2, 2), "mode": "valid"},
])
def test_conv_finite_differences(kw):
    assert check_conv2d(np.random.default_rng(5), **kw) < 1e-4


# --------------------------------------------------------------------------
# pooling


def test_pool_table_shapes():
    out, _ = layers.maxpool_forward(np.zeros((84, 84, 1)), (3, 3), (3, 3))
    assert out.shape == (28, 28, 1)
    out, _ = layers.maxpool_forward(np.zeros((3, 784, 2)), (2, 4), (1, 4))
    assert out.shape == (2, 196, 2)


def test_pool_matches_loop_oracle():
    rng = np.random.default_rng(8)
    for window, stride in [((2, 4), (1, 4)), ((3, 3), (3, 3)), ((3, 2), (1, 1)), ((1, 4), (1, 4))]:
        x = rng.standard_normal((7, 13, 3))
        got, _ = layers.maxpool_forward(x, window, stride)
        assert np.array_equal(got, loop_pool(x, window, stride))


def test_pool_ties_pick_first_index():
    out, cache = layers.maxpool_forward(np.full((4, 4, 1), 2.5), (2, 2), (2, 2))
    assert np.all(out == 2.5)
    # first element of every window in row-major H*W*C order
    assert cache.argmax_flat_indices()[0, :, :, 0].tolist() == [[0, 2], [8, 10]]


def test_pool_backward_one_per_window():
    x = np.random.default_rng(3).standard_normal((6, 8, 2))
    out, cache = layers.maxpool_forward(x, (2, 2), (2, 2))
    dx = layers.maxpool_backward(np.ones_like(out), cache)
    windows = dx.reshape(3, 2, 4, 2, 2).transpose(0, 2, 4, 1, 3).reshape(3, 4, 2, 4)
    assert np.all(windows.sum(axis=3) == 1) and np.all((dx == 0) | (dx == 1))


def test_pool_backward_accumulates_shared_maximum():
    x = np.zeros((1, 3, 1))
    x[0, 1, 0] = 5.0
    out, cache = layers.maxpool_forward(x, (1, 2), (1, 1))
    dx = layers.maxpool_backward(np.array([[[2.0], [3.0]]]), cache)
    assert dx[0, :, 0].tolist() == [0.0, 5.0, 0.0]


def test_pool_window_too_large():
    with pytest.raises(ShapeError):
        layers.maxpool_forward(np.zeros((1, 3, 1)), (1, 4), (1, 4))


@pytest.mark.parametrize("kw", [{}, {"shape": (6, 6, 2), "window": (3, 3), "stride": (3, 3)}])
def test_pool_finite_differences(kw):
    assert check_maxpool(np.random.default_rng(6), **kw) < 1e-4


@settings(max_examples=40)
@given(st.integers(0, 2**31))
def test_pool_argmax_points_at_the_maximum(seed):
    x = np.random.default_rng(seed).integers(-3, 3, (5, 9, 2)).astype(float)
    out, cache = layers.maxpool_forward(x, (2, 3), (1, 2))
    idx = cache.argmax_flat_indices()[0]
    assert np.array_equal(x.reshape(-1)[idx], out)
    assert idx.min() >= 0 and idx.max() < x.size


# --------------------------------------------------------------------------
# dense, relu, dropout


def test_dense_examples():
    x = np.array([1.5, -2.0, 3.0])
    out, _ = layers.dense_forward(x, np.eye(3), np.zeros(3))
    assert np.array_equal(out, x)
    out, _ = layers.dense_forward([1.0, 1.0], [[2.0], [3.0]], [1.0])
    assert out.tolist() == [6.0]


def test_dense_finite_differences():
    assert check_dense(np.random.default_rng(9)) < 1e-4


def test_relu_examples():
    out, mask = layers.relu([-1.0, 0.0, 2.0])
    assert out.tolist() == [0, 0, 2]
    assert layers.relu_backward([5.0, 5.0, 5.0], mask).tolist() == [0, 0, 5]
    assert check_relu(np.random.default_rng(10)) < 1e-4


def test_dropout_identity_cases():
    x = np.random.default_rng(0).standard_normal(100)
    assert np.array_equal(layers.dropout_apply(x, 1.0, np.random.default_rng(1), True)[0], x)
    assert np.array_equal(layers.dropout_apply(x, 0.5, None, False)[0], x)


def test_dropout_survivor_fraction():
    out, mask = layers.dropout_apply(np.ones(10**5), 0.5, np.random.default_rng(7), True)
    assert abs(np.mean(out != 0) - 0.5) <= 0.01
    assert set(np.unique(mask)) <= {0.0, 2.0}


def test_dropout_finite_differences():
    assert check_dropout(np.random.default_rng(11)) < 1e-4


# --------------------------------------------------------------------------
# softmax cross-entropy


def test_softmax_uniform_logits():
    loss, probs, _ = layers.softmax_cross_entropy(np.zeros(50), 3)
    assert loss == pytest.approx(math.log(50), abs=1e-12)
    np.testing.assert_allclose(probs, 0.02, rtol=0, atol=1e-15)


def test_softmax_large_logits_are_stable():
    loss, probs, grad = layers.softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(probs)) and np.all(np.isfinite(grad))


def test_softmax_finite_differences():
    assert check_softmax(np.random.default_rng(12)) < 1e-5


def test_softmax_bad_label():
    with pytest.raises(ValueError):
        layers.softmax_cross_entropy(np.zeros(3), 3)


def test_batched_loss_is_mean_of_singles():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((5, 6))
    y = np.array([0, 5, 2, 2, 1])
    loss, _, grad = layers.softmax_cross_entropy(z, y)
    singles = [layers.softmax_cross_entropy(z[i], int(y[i])) for i in range(5)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]), abs=1e-14)
    np.testing.assert_allclose(grad, np.array([s[2] for s in singles]) / 5, atol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=60), st.data())
def test_softmax_invariants(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    loss, probs, grad = layers.softmax_cross_entropy(np.array(logits), label)
    assert loss >= 0
    assert abs(probs.sum() - 1) <= 1e-12
    assert abs(grad.sum()) <= 1e-12
