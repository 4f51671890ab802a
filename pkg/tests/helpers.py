"""Builders shared by the unit and acceptance tests."""

import numpy as np

from yieldnet.model import ModelConfig, Sample, batch_loss_and_grads, forward_batch, init_params
from yieldnet.tensor import SeededRng, gradient_check_arrays

LSTM_SCALE = 0.3
CONV_SHIFT = 3.0
TINY = ModelConfig(input_height=16, input_width=16, bands=3, timesteps=3, conv_layers=2,
                   lstm_layers=1, lstm_hidden=8)


def kink_margin(params, seqs):
    """Smallest |pre-activation| over every leaky-ReLU unit in a forward pass."""
    _, cache = forward_batch(params, seqs, "infer")
    pres = [c.pre for c in cache.conv] + [c.pre for c in cache.head[:-1]]
    return min(float(np.abs(p).min()) for p in pres)


def gradient_point(config=TINY, seed=0, mode="infer"):
    """A float64 parameter point and one labelled sequence for an end-to-end check.

    Weights are N(0, 1/fan_in). Leaky units get biases shifted by +1 so that
    finite differences do not straddle a kink and upstream gradients are not
    squashed by the 0.01 slope; the label sits 0.01 above the season
    prediction so the loss (and its rounding noise) stays small.
    """
    params = init_params(config, SeededRng(seed), dtype=np.float64)
    rng = SeededRng(seed).child("gradient-point")
    for name, arr in params.named_arrays():
        if arr.ndim > 1:
            scale = LSTM_SCALE if name.startswith("lstm") else 1.0
            arr[...] = scale * rng.normal(size=arr.shape) / np.sqrt(arr[0].size)
        else:
            arr[...] = 0.3 * rng.normal(size=arr.shape)
    for layer in params.conv:
        layer.bias[...] = np.abs(layer.bias) + CONV_SHIFT
    for layer in params.head[:-1]:
        layer.b[...] = np.abs(layer.b) + 1.0
    seq = rng.normal(size=(1, config.timesteps, config.input_height, config.input_width, config.bands))
    z, _ = forward_batch(params, seq, "infer")
    label = float(z.mean()) * params.label_std + params.label_mean + 0.01
    return params, Sample("s0", seq[0], label)


def end_to_end_error(config=TINY, seed=0, mode="infer", max_coords=None, h=1e-5):
    """Max relative error of the model's analytic gradients against central differences."""
    params, sample = gradient_point(config, seed)
    drop = None if mode == "infer" else SeededRng(seed).child("drop")
    # a fresh child per call replays the same dropout masks on every evaluation
    stream = (lambda: None) if drop is None else (lambda: drop.child("x"))
    f = lambda: batch_loss_and_grads(params, [sample], mode, stream())[0]
    _, grads = batch_loss_and_grads(params, [sample], mode, stream())
    margin = kink_margin(params, sample.sequence[None])
    err = gradient_check_arrays(f, params.arrays(), grads, h=h, max_coords=max_coords,
                                rng=SeededRng(seed).child("coords"))
    return err, margin


# planted-signal training runs ----------------------------------------------------

def planted_run(seed, n_regions=96, image_size=16, bands=12, masked_signal=False, epochs=80,
                target_frac=None, hidden=64, log=None):
    """Synthesize a planted set, train on 2001-2009, select on 2010, hold out 2011.

    Returns a dict with the trained parameters, config, history, training
    label std, best validation RMSE and the normalized test samples.
    """
    from yieldnet.data import SyntheticSpec, apply_agri_mask, compute_norm_stats, synthesize, to_samples
    from yieldnet.model import TrainConfig, train

    spec = SyntheticSpec(n_regions=n_regions, image_size=image_size, timesteps=24,
                         masked_signal=masked_signal)
    entries = synthesize(spec, seed)
    if bands == 9:
        entries = [(rec, apply_agri_mask(seq)) for rec, seq in entries]
    split = [[e for e in entries if e[0].year in years] for years in (range(2001, 2010), [2010], [2011])]
    stats = compute_norm_stats(seq for _, seq in split[0])
    train_s, val_s, test_s = (to_samples(part, stats) for part in split)
    labels = np.array([s.label for s in train_s])
    n_conv = {16: 2, 32: 3, 64: 4}[image_size]
    config = ModelConfig(input_height=image_size, input_width=image_size, bands=bands, timesteps=24,
                         conv_layers=n_conv, lstm_layers=1, lstm_hidden=hidden)
    params = init_params(config, SeededRng(seed), labels.mean(), labels.std())
    target = None if target_frac is None else target_frac * labels.std()
    tcfg = TrainConfig(epochs=epochs, batch_size=8, learning_rate=3e-3, seed=seed, target_val_rmse=target)
    best, history = train(params, train_s, val_s, tcfg, log)
    return {"params": best, "config": config, "history": history, "label_std": float(labels.std()),
            "val_rmse": min(h["val_rmse"] for h in history), "test": test_s, "spec": spec}
