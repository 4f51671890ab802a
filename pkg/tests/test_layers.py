import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from yieldnet.errors import ShapeError, StateError
from yieldnet.layers import (
    ConvLayer,
    DenseLayer,
    DropoutSpec,
    LSTMCell,
    conv_backward,
    conv_forward,
    conv_output_size,
    dense_backward,
    dense_forward,
    dropout_apply,
    lstm_backward_through_time,
    lstm_forward,
    lstm_step,
    lstm_step_backward,
)
from yieldnet.tensor import SeededRng, gradient_check, gradient_check_arrays

TOL = 1e-4


# dense ----------------------------------------------------------------------

def test_dense_examples():
    zero = DenseLayer(np.zeros((2, 3)), np.zeros(2))
    np.testing.assert_array_equal(dense_forward(zero, np.array([1.0, -4.0, 2.0]))[0], [0, 0])
    ident = DenseLayer(np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(dense_forward(ident, np.array([3.0, -1.0]))[0], [3.0, -1.0])
    lk = DenseLayer(np.array([[1.0, 1.0]]), np.array([1.0]), "leaky_relu", 0.01)
    np.testing.assert_allclose(dense_forward(lk, np.array([-2.0, -1.0]))[0], [-0.02])


def test_dense_backward_linear():
    layer = DenseLayer(np.array([[2.0]]), np.array([0.0]))
    out, cache = dense_forward(layer, np.array([3.0]))
    gW, gb, gx = dense_backward(layer, cache, np.array([1.0]))
    np.testing.assert_array_equal(gW, [[3.0]])
    np.testing.assert_array_equal(gb, [1.0])
    np.testing.assert_array_equal(gx, [2.0])
    gW, gb, gx = dense_backward(layer, cache, np.array([0.0]))
    assert not gW.any() and not gb.any() and not gx.any()


def test_dense_backward_needs_cache():
    layer = DenseLayer(np.eye(2), np.zeros(2))
    with pytest.raises(StateError):
        dense_backward(layer, None, np.ones(2))
    with pytest.raises(ShapeError):
        dense_forward(layer, np.ones(3))


@pytest.mark.parametrize("activation", ["identity", "leaky_relu"])
@pytest.mark.parametrize("batch", [(), (3,), (2, 4)])
def test_dense_gradient_check(activation, batch):
    rng = SeededRng(3)
    layer = DenseLayer.init(5, 4, rng, activation, dtype=np.float64)
    layer.b[:] = rng.normal(size=4)
    x = rng.normal(size=batch + (5,))
    w = rng.normal(size=batch + (4,))

    def f():
        return float(np.sum(dense_forward(layer, x)[0] * w))

    _, cache = dense_forward(layer, x)
    gW, gb, gx = dense_backward(layer, cache, w)
    assert gradient_check_arrays(f, [layer.W, layer.b, x], [gW, gb, gx]) < TOL


# conv -----------------------------------------------------------------------

def test_conv_zero_map():
    layer = ConvLayer(np.zeros((4, 3, 3, 2)), np.zeros(4))
    out, _ = conv_forward(layer, np.random.default_rng(0).normal(size=(9, 7, 2)))
    assert out.shape == (4, 3, 4)
    assert not out.any()


def test_conv_default_shape_chain():
    sizes = [300]
    for _ in range(5):
        sizes.append(conv_output_size(sizes[-1], 3, 2))
    assert sizes == [300, 149, 74, 36, 17, 8]
    assert sizes[-1] * sizes[-1] * 16 == 1024


@given(st.integers(3, 80), st.integers(1, 5), st.integers(1, 4))
def test_conv_output_formula(size, kernel, stride):
    if size < kernel:
        return
    layer = ConvLayer(np.zeros((1, kernel, kernel, 1)), np.zeros(1), stride=stride)
    out, _ = conv_forward(layer, np.zeros((size, size + 1, 1)))
    assert out.shape[:2] == ((size - kernel) // stride + 1, (size + 1 - kernel) // stride + 1)


def test_conv_input_smaller_than_kernel():
    layer = ConvLayer(np.zeros((1, 3, 3, 1)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv_forward(layer, np.zeros((2, 5, 1)))


def test_conv_single_window_is_dot_product():
    filt = np.arange(1.0, 19.0).reshape(1, 3, 3, 2) / 10.0
    layer = ConvLayer(filt, np.zeros(1), activation="identity")
    X = filt[0].copy()
    out, cache = conv_forward(layer, X)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == pytest.approx(np.sum(filt ** 2))
    gF, gb, gX = conv_backward(layer, cache, np.ones((1, 1, 1)))
    np.testing.assert_allclose(gF[0], X)
    np.testing.assert_allclose(gX, filt[0])
    gF, gb, gX = conv_backward(layer, cache, np.zeros((1, 1, 1)))
    assert not gF.any() and not gb.any() and not gX.any()


def test_conv_is_cross_correlation():
    # a filter with a single 1 at (0, 2) picks X[r*s, c*s + 2]
    filt = np.zeros((1, 3, 3, 1))
    filt[0, 0, 2, 0] = 1.0
    layer = ConvLayer(filt, np.zeros(1), stride=2, activation="identity")
    X = np.arange(49.0).reshape(7, 7, 1)
    out, _ = conv_forward(layer, X)
    np.testing.assert_array_equal(out[..., 0], X[0:5:2, 2:7:2, 0])


@pytest.mark.parametrize("shape,stride", [((5, 5, 2), 2), ((7, 6, 3), 2), ((6, 6, 2), 1), ((2, 7, 7, 2), 3)])
def test_conv_gradient_check(shape, stride):
    rng = SeededRng(5)
    layer = ConvLayer.init(shape[-1], 2, rng, kernel=3, stride=stride, dtype=np.float64)
    layer.bias[:] = rng.normal(size=2)
    X = rng.normal(size=shape)
    out, cache = conv_forward(layer, X)
    w = rng.normal(size=out.shape)

    def f():
        return float(np.sum(conv_forward(layer, X)[0] * w))

    gF, gb, gX = conv_backward(layer, cache, w)
    assert gradient_check_arrays(f, [layer.filters, layer.bias, X], [gF, gb, gX]) < TOL


def test_conv_backward_needs_cache():
    layer = ConvLayer(np.zeros((1, 3, 3, 1)), np.zeros(1))
    with pytest.raises(StateError):
        conv_backward(layer, None, np.zeros((1, 1, 1)))


# LSTM -----------------------------------------------------------------------

def _zero_cell(D, H):
    z = np.zeros((H, H + D))
    b = np.zeros(H)
    return LSTMCell(z, z.copy(), z.copy(), z.copy(), b, b.copy(), b.copy(), b.copy())


def test_lstm_zero_weights():
    cell = _zero_cell(3, 4)
    h, c, cache = lstm_step(cell, np.ones(3), np.zeros(4), np.zeros(4))
    assert not h.any() and not c.any()
    np.testing.assert_array_equal(cache.f, 0.5)
    np.testing.assert_array_equal(cache.i, 0.5)
    np.testing.assert_array_equal(cache.o, 0.5)
    np.testing.assert_array_equal(cache.g, 0.0)
    c_prev = np.array([1.0, -2.0, 0.3, 4.0])
    h, c, _ = lstm_step(cell, np.ones(3), np.zeros(4), c_prev)
    np.testing.assert_allclose(c, 0.5 * c_prev)
    np.testing.assert_allclose(h, 0.5 * np.tanh(0.5 * c_prev))


def test_lstm_forget_bias_init():
    cell = LSTMCell.init(3, 4, SeededRng(0))
    np.testing.assert_array_equal(cell.b_f, 1.0)
    for name in ("b_i", "b_c", "b_o"):
        assert not getattr(cell, name).any()


def test_lstm_shape_errors():
    cell = _zero_cell(3, 4)
    with pytest.raises(ShapeError):
        lstm_step(cell, np.ones(2), np.zeros(4), np.zeros(4))
    with pytest.raises(StateError):
        lstm_backward_through_time(cell, None, np.zeros((2, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20.0))
def test_lstm_hidden_bounded(seed, scale):
    rng = SeededRng(seed)
    cell = LSTMCell.init(3, 5, rng, dtype=np.float64)
    h, c, _ = lstm_step(cell, scale * rng.normal(size=3), rng.uniform(-1, 1, 5), scale * rng.normal(size=5))
    assert np.all(np.abs(h) <= 1.0)


def _random_cell(D, H, seed):
    rng = SeededRng(seed)
    cell = LSTMCell.init(D, H, rng, dtype=np.float64)
    for name in ("b_f", "b_i", "b_c", "b_o"):
        getattr(cell, name)[:] += 0.5 * rng.normal(size=H)
    return cell, rng


def test_lstm_step_gradient_check():
    cell, rng = _random_cell(3, 4, 11)
    x, h0, c0 = rng.normal(size=3), rng.normal(size=4) * 0.5, rng.normal(size=4)
    wh, wc = rng.normal(size=4), rng.normal(size=4)

    def f():
        h, c, _ = lstm_step(cell, x, h0, c0)
        return float(h @ wh + c @ wc)

    _, _, cache = lstm_step(cell, x, h0, c0)
    grads, dx, dh0, dc0 = lstm_step_backward(cell, cache, wh, wc)
    arrays = [arr for _, arr in cell.named_arrays()] + [x, h0, c0]
    analytic = [grads[name] for name, _ in cell.named_arrays()] + [dx, dh0, dc0]
    assert gradient_check_arrays(f, arrays, analytic) < TOL


@pytest.mark.parametrize("T,D,H,batch", [(1, 3, 4, None), (3, 2, 3, None), (5, 2, 3, 2)])
def test_lstm_bptt_gradient_check(T, D, H, batch):
    cell, rng = _random_cell(D, H, 17)
    shape = (T, D) if batch is None else (batch, T, D)
    X = rng.normal(size=shape)
    w = rng.normal(size=shape[:-1] + (H,))

    def f():
        return float(np.sum(lstm_forward(cell, X)[0] * w))

    _, cache = lstm_forward(cell, X)
    grads, dX = lstm_backward_through_time(cell, cache, w)
    arrays = [arr for _, arr in cell.named_arrays()] + [X]
    analytic = [grads[name] for name, _ in cell.named_arrays()] + [dX]
    assert gradient_check_arrays(f, arrays, analytic) < TOL


def test_lstm_single_step_sequence_matches_step():
    cell, rng = _random_cell(3, 4, 2)
    x = rng.normal(size=3)
    up = rng.normal(size=4)
    _, _, step_cache = lstm_step(cell, x, np.zeros(4), np.zeros(4))
    g_step, dx_step, _, _ = lstm_step_backward(cell, step_cache, up)
    _, seq_cache = lstm_forward(cell, x[None])
    g_seq, dx_seq = lstm_backward_through_time(cell, seq_cache, up[None])
    for name in g_step:
        np.testing.assert_allclose(g_seq[name], g_step[name], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(dx_seq[0], dx_step, rtol=1e-12, atol=1e-14)


def test_lstm_bptt_zero_upstream():
    cell, rng = _random_cell(2, 3, 4)
    _, cache = lstm_forward(cell, rng.normal(size=(4, 2)))
    grads, dX = lstm_backward_through_time(cell, cache, np.zeros((4, 3)))
    assert all(not g.any() for g in grads.values())
    assert not dX.any()


def test_lstm_forward_matches_repeated_steps():
    cell, rng = _random_cell(2, 3, 8)
    X = rng.normal(size=(4, 2))
    out, _ = lstm_forward(cell, X)
    h, c = np.zeros(3), np.zeros(3)
    for t in range(4):
        h, c, _ = lstm_step(cell, X[t], h, c)
        np.testing.assert_allclose(out[t], h, rtol=1e-12)


# dropout --------------------------------------------------------------------

def test_dropout_infer_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    y, mask = dropout_apply(DropoutSpec(0.75, "infer"), x)
    assert y is x or np.array_equal(y, x)
    np.testing.assert_array_equal(mask, 1.0)


def test_dropout_keep_one():
    x = np.arange(6.0)
    y, mask = dropout_apply(DropoutSpec(1.0, "train"), x, SeededRng(0))
    np.testing.assert_array_equal(y, x)
    np.testing.assert_array_equal(mask, 1.0)


def test_dropout_statistics():
    x = np.ones(10**6, dtype=np.float32)
    y, mask = dropout_apply(DropoutSpec(0.75, "train"), x, SeededRng(9))
    assert abs(mask.mean() - 0.75) < 0.005
    assert abs(y.mean() - 1.0) < 0.01
    kept = mask == 1
    np.testing.assert_allclose(y[kept], 1 / 0.75, rtol=1e-6)
    assert not y[~kept].any()


def test_dropout_reproducible():
    x = np.ones(100)
    a, _ = dropout_apply(DropoutSpec(), x, SeededRng(3))
    b, _ = dropout_apply(DropoutSpec(), x, SeededRng(3))
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("keep", [0.0, 1.5])
def test_dropout_rejects_bad_keep(keep):
    with pytest.raises(ValueError):
        DropoutSpec(keep)
