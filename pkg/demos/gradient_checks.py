"""Compare every backward pass against central finite differences.

Each layer is checked on its own, then the whole tiny CNN-LSTM model
(16x16x3 frames, 2 conv layers, 3 steps, hidden size 8). Layer lines show
the largest relative error over all coordinates. For the whole model some
gradients are around 1e-9, below the rounding noise of a finite difference,
so it reports relative error where |g| >= 1e-6 and absolute error elsewhere.

    python demos/gradient_checks.py
"""

import numpy as np

from yieldnet.layers import (
    ConvLayer,
    DenseLayer,
    LSTMCell,
    conv_backward,
    conv_forward,
    dense_backward,
    dense_forward,
    lstm_backward_through_time,
    lstm_forward,
)
from yieldnet.model import ModelConfig, Sample, batch_loss_and_grads, forward_batch, init_params
from yieldnet.tensor import SeededRng, gradient_check_arrays


def dense_error(rng):
    layer = DenseLayer.init(6, 4, rng, "leaky_relu", dtype=np.float64)
    layer.b[:] = rng.normal(size=4)
    x, w = rng.normal(size=(5, 6)), rng.normal(size=(5, 4))
    f = lambda: float(np.sum(dense_forward(layer, x)[0] * w))
    _, cache = dense_forward(layer, x)
    return gradient_check_arrays(f, [layer.W, layer.b, x], list(dense_backward(layer, cache, w)))


def conv_error(rng):
    layer = ConvLayer.init(3, 4, rng, kernel=3, stride=2, dtype=np.float64)
    layer.bias[:] = rng.normal(size=4)
    X = rng.normal(size=(11, 11, 3))
    out, cache = conv_forward(layer, X)
    w = rng.normal(size=out.shape)
    f = lambda: float(np.sum(conv_forward(layer, X)[0] * w))
    return gradient_check_arrays(f, [layer.filters, layer.bias, X], list(conv_backward(layer, cache, w)))


def bptt_error(rng, steps):
    cell = LSTMCell.init(3, 4, rng, dtype=np.float64)
    X, w = rng.normal(size=(steps, 3)), rng.normal(size=(steps, 4))
    f = lambda: float(np.sum(lstm_forward(cell, X)[0] * w))
    _, cache = lstm_forward(cell, X)
    grads, dX = lstm_backward_through_time(cell, cache, w)
    names = [n for n, _ in cell.named_arrays()]
    return gradient_check_arrays(f, [a for _, a in cell.named_arrays()] + [X], [grads[n] for n in names] + [dX])


def model_error(seed):
    """Whole-model check at a well-conditioned point.

    At a raw random init some finite differences straddle a leaky-ReLU kink
    and some gradients are so small (~1e-8) that rounding noise of the
    differences dominates. Shifting the leaky biases away from zero, damping
    the LSTM weights and putting the label just above the prediction avoids
    both without touching the code under test.
    """
    config = ModelConfig(input_height=16, input_width=16, bands=3, timesteps=3, conv_layers=2,
                         lstm_layers=1, lstm_hidden=8)
    params = init_params(config, SeededRng(seed), dtype=np.float64)
    rng = SeededRng(seed).child("point")
    for name, arr in params.named_arrays():
        if arr.ndim > 1:
            scale = 0.3 if name.startswith("lstm") else 1.0
            arr[...] = scale * rng.normal(size=arr.shape) / np.sqrt(arr[0].size)
        else:
            arr[...] = 0.3 * rng.normal(size=arr.shape)
    for layer in params.conv:
        layer.bias[...] = np.abs(layer.bias) + 3.0
    for layer in params.head[:-1]:
        layer.b[...] = np.abs(layer.b) + 1.0
    seq = rng.normal(size=(3, 16, 16, 3))
    z, _ = forward_batch(params, seq[None], "infer")
    sample = Sample("demo", seq, float(z.mean()) + 0.01)
    f = lambda: batch_loss_and_grads(params, [sample], "infer", None)[0]
    loss, grads = batch_loss_and_grads(params, [sample], "infer", None)
    h, rel, absolute = 1e-5, 0.0, 0.0
    for arr, grad in zip(params.arrays(), grads):
        flat, g = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            absolute = max(absolute, abs(numeric - g[i]))
            if abs(g[i]) >= 1e-6:
                rel = max(rel, abs(numeric - g[i]) / max(abs(numeric), abs(g[i])))
    noise = np.finfo(float).eps * abs(loss) / h
    return rel, absolute, noise


def main():
    rng = SeededRng(0)
    print(f"dense layer, leaky-ReLU        {dense_error(rng):.2e}")
    print(f"strided 3x3 convolution        {conv_error(rng):.2e}")
    for steps in (1, 3, 8):
        print(f"LSTM through {steps} step(s)         {bptt_error(rng, steps):.2e}")
    rel, absolute, noise = model_error(0)
    print(f"whole tiny model, |g| >= 1e-6  {rel:.2e}")
    print(f"whole tiny model, max |error|  {absolute:.1e} (difference rounding noise ~{noise:.0e})")


if __name__ == "__main__":
    main()
