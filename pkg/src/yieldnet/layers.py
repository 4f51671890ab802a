"""Trainable layers with explicit forward and backward passes.

Every ``*_forward`` function returns ``(output, cache)``; the matching
``*_backward`` consumes that cache. Leading batch axes are supported
throughout: a dense layer accepts ``(..., in)``, a conv layer ``(H, W, D)``
or ``(N, H, W, D)``, an LSTM step ``(D,)`` or ``(N, D)``.
"""

from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, StateError
from .tensor import DEFAULT_DTYPE, DEFAULT_LEAKY_SLOPE, leaky_relu, leaky_relu_grad, sigmoid

ACTIVATIONS = ("leaky_relu", "identity")


def glorot_uniform(shape, fan_in, fan_out, rng, dtype=DEFAULT_DTYPE):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _activate(pre, activation, slope):
    if activation == "leaky_relu":
        return leaky_relu(pre, slope)
    if activation == "identity":
        return pre
    raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def _activate_grad(pre, activation, slope):
    if activation == "leaky_relu":
        return leaky_relu_grad(pre, slope)
    return np.ones_like(pre)


class _ParamMixin:
    """Uniform access to a layer's array fields in declaration order."""

    _array_fields = ()

    def named_arrays(self):
        return [(name, getattr(self, name)) for name in self._array_fields]

    def astype(self, dtype):
        kwargs = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in self._array_fields:
            kwargs[name] = np.array(kwargs[name], dtype=dtype)
        return type(self)(**kwargs)


# dense ---------------------------------------------------------------------

@dataclass
class DenseLayer(_ParamMixin):
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "identity"
    slope: float = DEFAULT_LEAKY_SLOPE

    _array_fields = ("W", "b")

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"dense weights {self.W.shape} and bias {self.b.shape} disagree")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_features(self):
        return self.W.shape[1]

    @property
    def out_features(self):
        return self.W.shape[0]

    @classmethod
    def init(cls, in_features, out_features, rng, activation="identity",
             slope=DEFAULT_LEAKY_SLOPE, dtype=DEFAULT_DTYPE):
        W = glorot_uniform((out_features, in_features), in_features, out_features, rng, dtype)
        return cls(W, np.zeros(out_features, dtype=dtype), activation, slope)


@dataclass
class DenseCache:
    x: np.ndarray
    pre: np.ndarray


def dense_forward(layer, x):
    """Compute ``f(b + W x)`` for every leading index of ``x``."""
    x = np.asarray(x)
    if x.shape[-1:] != (layer.in_features,):
        raise ShapeError(f"dense input shape {x.shape} does not end in {layer.in_features}")
    pre = x @ layer.W.T + layer.b
    return _activate(pre, layer.activation, layer.slope), DenseCache(x, pre)


def dense_backward(layer, cache, upstream):
    """Return ``(grad_W, grad_b, grad_x)`` for the forward pass in ``cache``."""
    if cache is None:
        raise StateError("dense_backward called without a forward cache")
    upstream = np.asarray(upstream)
    if upstream.shape != cache.pre.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match output {cache.pre.shape}")
    dpre = upstream * _activate_grad(cache.pre, layer.activation, layer.slope)
    d2 = dpre.reshape(-1, layer.out_features)
    x2 = cache.x.reshape(-1, layer.in_features)
    grad_W = d2.T @ x2
    grad_b = d2.sum(axis=0)
    grad_x = dpre @ layer.W
    return grad_W, grad_b, grad_x


# convolution ---------------------------------------------------------------

def conv_output_size(size, kernel, stride):
    """Valid-padding output length: ``floor((size - kernel) / stride) + 1``."""
    if size < kernel:
        raise ShapeError(f"input size {size} is smaller than kernel {kernel}")
    return (size - kernel) // stride + 1


@dataclass
class ConvLayer(_ParamMixin):
    filters: np.ndarray  # (F, k, k, D)
    bias: np.ndarray  # (F,)
    stride: int = 2
    slope: float = DEFAULT_LEAKY_SLOPE
    activation: str = "leaky_relu"

    _array_fields = ("filters", "bias")

    def __post_init__(self):
        f = self.filters
        if f.ndim != 4 or f.shape[1] != f.shape[2] or self.bias.shape != (f.shape[0],):
            raise ShapeError(f"conv filters {f.shape} and bias {self.bias.shape} disagree")
        if self.stride < 1:
            raise ValueError("stride must be positive")

    @property
    def kernel(self):
        return self.filters.shape[1]

    @property
    def n_filters(self):
        return self.filters.shape[0]

    @property
    def in_channels(self):
        return self.filters.shape[3]

    def output_shape(self, height, width):
        return (conv_output_size(height, self.kernel, self.stride),
                conv_output_size(width, self.kernel, self.stride), self.n_filters)

    @classmethod
    def init(cls, in_channels, n_filters, rng, kernel=3, stride=2,
             slope=DEFAULT_LEAKY_SLOPE, activation="leaky_relu", dtype=DEFAULT_DTYPE):
        shape = (n_filters, kernel, kernel, in_channels)
        filters = glorot_uniform(shape, kernel * kernel * in_channels,
                                 kernel * kernel * n_filters, rng, dtype)
        return cls(filters, np.zeros(n_filters, dtype=dtype), stride, slope, activation)


@dataclass
class ConvCache:
    input_shape: tuple
    cols: np.ndarray  # (N*H'*W', k*k*D)
    pre: np.ndarray  # (N, H', W', F)
    squeeze: bool


def conv_forward(layer, X):
    """Strided valid cross-correlation followed by the layer activation."""
    X = np.asarray(X)
    squeeze = X.ndim == 3
    if squeeze:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != layer.in_channels:
        raise ShapeError(f"conv input shape {X.shape} incompatible with filters {layer.filters.shape}")
    n, h, w, d = X.shape
    k, s = layer.kernel, layer.stride
    ho, wo, f = layer.output_shape(h, w)
    # windows: (N, H', W', D, k, k) -> (N, H', W', k, k, D)
    win = sliding_window_view(X, (k, k), axis=(1, 2))[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * d)
    pre = (cols @ layer.filters.reshape(f, -1).T + layer.bias).reshape(n, ho, wo, f)
    out = _activate(pre, layer.activation, layer.slope)
    cache = ConvCache(X.shape, cols, pre, squeeze)
    return (out[0] if squeeze else out), cache


def conv_backward(layer, cache, upstream):
    """Return ``(grad_filters, grad_bias, grad_X)``."""
    if cache is None:
        raise StateError("conv_backward called without a forward cache")
    upstream = np.asarray(upstream)
    if cache.squeeze:
        upstream = upstream[None]
    if upstream.shape != cache.pre.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match output {cache.pre.shape}")
    n, h, w, d = cache.input_shape
    _, ho, wo, f = cache.pre.shape
    k, s = layer.kernel, layer.stride
    dpre = (upstream * _activate_grad(cache.pre, layer.activation, layer.slope)).reshape(-1, f)
    grad_filters = (dpre.T @ cache.cols).reshape(layer.filters.shape)
    grad_bias = dpre.sum(axis=0)
    dcols = (dpre @ layer.filters.reshape(f, -1)).reshape(n, ho, wo, k, k, d)
    grad_X = np.zeros(cache.input_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            grad_X[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += dcols[:, :, :, i, j, :]
    return grad_filters, grad_bias, (grad_X[0] if cache.squeeze else grad_X)


# LSTM ----------------------------------------------------------------------

GATES = ("f", "i", "c", "o")


@dataclass
class LSTMCell(_ParamMixin):
    """Gate weights act on the concatenation ``[h_prev, x]``; no peepholes."""

    W_f: np.ndarray
    W_i: np.ndarray
    W_c: np.ndarray
    W_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    _array_fields = ("W_f", "W_i", "W_c", "W_o", "b_f", "b_i", "b_c", "b_o")

    def __post_init__(self):
        shape = self.W_f.shape
        if len(shape) != 2 or shape[1] <= shape[0]:
            raise ShapeError(f"gate weight shape {shape} is not H x (H + D)")
        for g in GATES:
            if getattr(self, "W_" + g).shape != shape:
                raise ShapeError("all gate weight tensors must share a shape")
            if getattr(self, "b_" + g).shape != (shape[0],):
                raise ShapeError(f"gate bias b_{g} must have shape ({shape[0]},)")

    @property
    def hidden(self):
        return self.W_f.shape[0]

    @property
    def input_dim(self):
        return self.W_f.shape[1] - self.W_f.shape[0]

    @classmethod
    def init(cls, input_dim, hidden, rng, forget_bias=1.0, dtype=DEFAULT_DTYPE):
        shape = (hidden, hidden + input_dim)
        W = {g: glorot_uniform(shape, hidden + input_dim, hidden, rng, dtype) for g in GATES}
        b = {g: np.zeros(hidden, dtype=dtype) for g in GATES}
        b["f"][:] = forget_bias
        return cls(*(W[g] for g in GATES), *(b[g] for g in GATES))

    def stacked(self):
        """Gate weights and biases stacked in f, i, c, o order: ``(4H, H+D)``, ``(4H,)``."""
        W = np.concatenate([self.W_f, self.W_i, self.W_c, self.W_o])
        b = np.concatenate([self.b_f, self.b_i, self.b_c, self.b_o])
        return W, b


@dataclass
class LSTMStepCache:
    z: np.ndarray  # [h_prev, x]
    c_prev: np.ndarray
    f: np.ndarray
    i: np.ndarray
    g: np.ndarray  # candidate cell state
    o: np.ndarray
    tanh_c: np.ndarray
    squeeze: bool


def _lstm_gates(W, b, hidden, h_prev, x, c_prev):
    z = np.concatenate([h_prev, x], axis=-1)
    a = z @ W.T + b
    H = hidden
    f = sigmoid(a[:, :H])
    i = sigmoid(a[:, H : 2 * H])
    g = np.tanh(a[:, 2 * H : 3 * H])
    o = sigmoid(a[:, 3 * H :])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, (z, f, i, g, o, tanh_c)


def lstm_step(cell, x_t, h_prev, c_prev):
    """One LSTM step; returns ``(h_t, c_t, cache)``."""
    x_t, h_prev, c_prev = np.asarray(x_t), np.asarray(h_prev), np.asarray(c_prev)
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t, h_prev, c_prev = x_t[None], h_prev[None], c_prev[None]
    H, D = cell.hidden, cell.input_dim
    if x_t.shape[-1] != D or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ShapeError(
            f"lstm_step shapes x={x_t.shape}, h={h_prev.shape}, c={c_prev.shape} "
            f"do not match cell (D={D}, H={H})")
    W, b = cell.stacked()
    h, c, (z, f, i, g, o, tanh_c) = _lstm_gates(W, b, H, h_prev, x_t, c_prev)
    cache = LSTMStepCache(z, c_prev, f, i, g, o, tanh_c, squeeze)
    if squeeze:
        return h[0], c[0], cache
    return h, c, cache


def _lstm_step_grads(cache, dh, dc_next):
    """Gradients w.r.t. the stacked pre-activations, the concat input and c_prev."""
    dc = dc_next + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    do = dh * cache.tanh_c
    df = dc * cache.c_prev
    di = dc * cache.g
    dg = dc * cache.i
    da = np.concatenate([
        df * cache.f * (1.0 - cache.f),
        di * cache.i * (1.0 - cache.i),
        dg * (1.0 - cache.g ** 2),
        do * cache.o * (1.0 - cache.o),
    ], axis=-1)
    return da, dc * cache.f


def _split_grads(dW, db, hidden):
    H = hidden
    out = {}
    for k, g in enumerate(GATES):
        out["W_" + g] = dW[k * H : (k + 1) * H]
    for k, g in enumerate(GATES):
        out["b_" + g] = db[k * H : (k + 1) * H]
    return out


def lstm_step_backward(cell, cache, dh, dc=None):
    """Backward through one step.

    Returns ``(param_grads, dx, dh_prev, dc_prev)``; ``param_grads`` maps
    field names (``W_f`` ... ``b_o``) to arrays.
    """
    if cache is None:
        raise StateError("lstm_step_backward called without a forward cache")
    dh = np.asarray(dh)
    if cache.squeeze:
        dh = dh[None]
        dc = None if dc is None else np.asarray(dc)[None]
    if dc is None:
        dc = np.zeros_like(dh)
    da, dc_prev = _lstm_step_grads(cache, dh, dc)
    W, _ = cell.stacked()
    dz = da @ W
    grads = _split_grads(da.T @ cache.z, da.sum(axis=0), cell.hidden)
    H = cell.hidden
    dh_prev, dx = dz[:, :H], dz[:, H:]
    if cache.squeeze:
        return grads, dx[0], dh_prev[0], dc_prev[0]
    return grads, dx, dh_prev, dc_prev


@dataclass
class LSTMSequenceCache:
    steps: list
    squeeze: bool


def lstm_forward(cell, inputs, h0=None, c0=None):
    """Run the cell over ``inputs`` of shape ``(T, D)`` or ``(N, T, D)``.

    Returns ``(hidden_states, cache)`` with hidden states shaped like the
    input but with ``H`` features. Initial states default to zero.
    """
    inputs = np.asarray(inputs)
    squeeze = inputs.ndim == 2
    if squeeze:
        inputs = inputs[None]
    if inputs.ndim != 3 or inputs.shape[-1] != cell.input_dim:
        raise ShapeError(f"lstm input shape {inputs.shape} does not match D={cell.input_dim}")
    n, T, _ = inputs.shape
    H = cell.hidden
    dtype = np.result_type(inputs, cell.W_f)
    h = np.zeros((n, H), dtype) if h0 is None else np.asarray(h0).reshape(n, H)
    c = np.zeros((n, H), dtype) if c0 is None else np.asarray(c0).reshape(n, H)
    W, b = cell.stacked()
    out = np.empty((n, T, H), dtype)
    steps = []
    for t in range(T):
        c_prev = c
        h, c, (z, f, i, g, o, tanh_c) = _lstm_gates(W, b, H, h, inputs[:, t], c_prev)
        steps.append(LSTMStepCache(z, c_prev, f, i, g, o, tanh_c, False))
        out[:, t] = h
    cache = LSTMSequenceCache(steps, squeeze)
    return (out[0] if squeeze else out), cache


def lstm_backward_through_time(cell, cache, upstream):
    """Backpropagate per-step hidden-state gradients through the whole sequence.

    ``upstream`` holds dLoss/dh_t for every step (same shape as the forward
    output). Returns ``(param_grads, input_grads)``.
    """
    if cache is None or not cache.steps:
        raise StateError("lstm_backward_through_time called without a forward cache")
    upstream = np.asarray(upstream)
    if cache.squeeze:
        upstream = upstream[None]
    n, T, H = upstream.shape
    if T != len(cache.steps) or H != cell.hidden:
        raise ShapeError(f"upstream {upstream.shape} does not match cached sequence of {len(cache.steps)} steps")
    W, _ = cell.stacked()
    dW = np.zeros_like(W, dtype=np.result_type(W, upstream))
    db = np.zeros(W.shape[0], dtype=dW.dtype)
    dx = np.empty((n, T, cell.input_dim), dtype=dW.dtype)
    dh_next = np.zeros((n, H), dtype=dW.dtype)
    dc_next = np.zeros((n, H), dtype=dW.dtype)
    for t in reversed(range(T)):
        step = cache.steps[t]
        da, dc_next = _lstm_step_grads(step, upstream[:, t] + dh_next, dc_next)
        dW += da.T @ step.z
        db += da.sum(axis=0)
        dz = da @ W
        dh_next = dz[:, :H]
        dx[:, t] = dz[:, H:]
    grads = _split_grads(dW, db, H)
    return grads, (dx[0] if cache.squeeze else dx)


# dropout -------------------------------------------------------------------

@dataclass
class DropoutSpec:
    keep_prob: float = 0.75
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        if self.mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {self.mode!r}")


def dropout_apply(spec, x, rng=None):
    """Inverted dropout. Returns ``(y, mask)`` where ``mask`` holds 0/1 keeps.

    In infer mode, or with ``keep_prob == 1``, ``y`` is ``x`` and no random
    numbers are drawn.
    """
    x = np.asarray(x)
    if spec.mode == "infer" or spec.keep_prob == 1.0:
        return x, np.ones_like(x)
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) < spec.keep_prob).astype(x.dtype)
    return x * mask * x.dtype.type(1.0 / spec.keep_prob), mask
