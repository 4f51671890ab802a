"""The CNN-LSTM yield regressor: assembly, training, prediction and checkpoints.

Each frame of a ``(T, H, W, B)`` sequence goes through a shared stack of
strided valid convolutions, the flattened features feed a stack of LSTM
layers (dropout on every layer output), and a small dense head maps each
step's top hidden state to a yield estimate. Training minimises the squared
error summed over every step against the single season label.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigMismatchError, DivergenceError, FormatError, InputError, ShapeError
from .layers import (
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
)
from .tensor import DEFAULT_DTYPE, SeededRng

CHECKPOINT_MAGIC = b"YCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_height: int = 300
    input_width: int = 300
    bands: int = 12
    timesteps: int = 24
    conv_layers: int = 5
    conv_filters: int = 16
    kernel: int = 3
    stride: int = 2
    lstm_layers: int = 3
    lstm_hidden: int = 512
    head_layers: int = 3
    head_widths: tuple = None
    dropout_keep: float = 0.75
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.head_widths is not None:
            object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
            if len(self.head_widths) != self.head_layers - 1:
                raise ValueError("head_widths needs head_layers - 1 entries")
        for name in ("input_height", "input_width", "bands", "timesteps", "conv_layers",
                     "conv_filters", "kernel", "stride", "lstm_layers", "lstm_hidden", "head_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError("dropout_keep must lie in (0, 1]")
        self.conv_shapes()  # raises ShapeError if the image is too small

    def conv_shapes(self):
        """Spatial shape after each convolution, starting with the input."""
        shapes = [(self.input_height, self.input_width, self.bands)]
        h, w = self.input_height, self.input_width
        for _ in range(self.conv_layers):
            h = conv_output_size(h, self.kernel, self.stride)
            w = conv_output_size(w, self.kernel, self.stride)
            shapes.append((h, w, self.conv_filters))
        return shapes

    @property
    def flatten_dim(self):
        h, w, f = self.conv_shapes()[-1]
        return h * w * f

    def head_dims(self):
        """Layer widths of the dense head, from the LSTM output to the scalar."""
        if self.head_widths is not None:
            hidden = list(self.head_widths)
        else:
            # geometric taper: H/2, then /4 per further layer (512 -> 256 -> 64)
            hidden = [max(1, self.lstm_hidden // 2 ** (2 * j + 1)) for j in range(self.head_layers - 1)]
        return [self.lstm_hidden, *hidden, 1]

    def to_dict(self):
        d = asdict(self)
        d["head_widths"] = None if self.head_widths is None else list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    clip_norm: float = 5.0
    checkpoint_path: str = None
    target_val_rmse: float = None  # stop early once validation RMSE reaches this value

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class ModelParams:
    config: ModelConfig
    conv: list
    lstm: list
    head: list
    label_mean: float = 0.0
    label_std: float = 1.0
    norm_stats: object = None

    def named_arrays(self):
        """``(name, array)`` pairs in declaration order: conv, LSTM, head."""
        out = []
        for group, layers in (("conv", self.conv), ("lstm", self.lstm), ("head", self.head)):
            for k, layer in enumerate(layers):
                out.extend((f"{group}{k}.{name}", arr) for name, arr in layer.named_arrays())
        return out

    def arrays(self):
        return [arr for _, arr in self.named_arrays()]

    def astype(self, dtype):
        return ModelParams(
            self.config,
            [layer.astype(dtype) for layer in self.conv],
            [layer.astype(dtype) for layer in self.lstm],
            [layer.astype(dtype) for layer in self.head],
            self.label_mean, self.label_std, self.norm_stats)

    def copy(self):
        return self.astype(self.conv[0].filters.dtype)

    @property
    def n_parameters(self):
        return sum(arr.size for arr in self.arrays())


def init_params(config, rng, label_mean=0.0, label_std=1.0, dtype=DEFAULT_DTYPE):
    """Random parameters for ``config``; ``label_mean``/``label_std`` set the output scale."""
    if label_std <= 0:
        raise ValueError("label_std must be positive")
    rng = rng.child("init") if isinstance(rng, SeededRng) else rng
    s = config.leaky_slope
    conv = []
    depth = config.bands
    for _ in range(config.conv_layers):
        conv.append(ConvLayer.init(depth, config.conv_filters, rng, config.kernel, config.stride, s, dtype=dtype))
        depth = config.conv_filters
    lstm = []
    d_in = config.flatten_dim
    for _ in range(config.lstm_layers):
        lstm.append(LSTMCell.init(d_in, config.lstm_hidden, rng, dtype=dtype))
        d_in = config.lstm_hidden
    dims = config.head_dims()
    head = []
    for j in range(len(dims) - 1):
        act = "leaky_relu" if j < len(dims) - 2 else "identity"
        head.append(DenseLayer.init(dims[j], dims[j + 1], rng, act, s, dtype=dtype))
    return ModelParams(config, conv, lstm, head, float(label_mean), float(label_std))


def zero_params(config, label_mean=0.0, label_std=1.0, dtype=DEFAULT_DTYPE):
    params = init_params(config, SeededRng(0), label_mean, label_std, dtype)
    for arr in params.arrays():
        arr[...] = 0
    return params


# forward / backward ----------------------------------------------------------

@dataclass
class _ForwardCache:
    batch_shape: tuple
    conv: list = field(default_factory=list)
    lstm: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    head: list = field(default_factory=list)


def _check_sequences(config, seqs):
    if seqs.ndim != 5:
        raise ShapeError(f"expected (N, T, H, W, B) sequences, got shape {seqs.shape}")
    _, T, H, W, B = seqs.shape
    if (H, W, B) != (config.input_height, config.input_width, config.bands):
        raise ShapeError(
            f"sequence frames are {H}x{W}x{B} but the model expects "
            f"{config.input_height}x{config.input_width}x{config.bands}")
    if not 1 <= T <= config.timesteps:
        raise ShapeError(f"sequence length {T} outside 1..{config.timesteps}")


def forward_batch(params, seqs, mode="infer", rng=None):
    """Standardized per-step predictions ``(N, T)`` plus the backward cache."""
    config = params.config
    seqs = np.asarray(seqs)
    _check_sequences(config, seqs)
    n, T = seqs.shape[:2]
    cache = _ForwardCache((n, T))
    x = seqs.reshape(n * T, *seqs.shape[2:])
    for layer in params.conv:
        x, c = conv_forward(layer, x)
        cache.conv.append(c)
    x = x.reshape(n, T, -1)
    spec = DropoutSpec(config.dropout_keep, mode)
    for k, cell in enumerate(params.lstm):
        x, c = lstm_forward(cell, x)
        cache.lstm.append(c)
        x, mask = dropout_apply(spec, x, None if rng is None else rng.child("dropout", k))
        dropped = mode == "train" and config.dropout_keep < 1.0
        cache.masks.append(mask * mask.dtype.type(1.0 / config.dropout_keep) if dropped else None)
    for layer in params.head:
        x, c = dense_forward(layer, x)
        cache.head.append(c)
    return x[..., 0], cache


def backward_batch(params, cache, upstream):
    """Gradients of every parameter array (declaration order) given dLoss/d(standardized preds)."""
    config = params.config
    n, T = cache.batch_shape
    grads_head = []
    g = np.asarray(upstream)[..., None]
    for layer, c in zip(reversed(params.head), reversed(cache.head)):
        gW, gb, g = dense_backward(layer, c, g)
        grads_head.append([gW, gb])
    grads_head.reverse()
    grads_lstm = []
    for cell, c, mask in zip(reversed(params.lstm), reversed(cache.lstm), reversed(cache.masks)):
        if mask is not None:
            g = g * mask
        pg, g = lstm_backward_through_time(cell, c, g)
        grads_lstm.append([pg[name] for name in cell._array_fields])
    grads_lstm.reverse()
    h, w, f = config.conv_shapes()[-1]
    g = g.reshape(n * T, h, w, f)
    grads_conv = []
    for layer, c in zip(reversed(params.conv), reversed(cache.conv)):
        gF, gb, g = conv_backward(layer, c, g)
        grads_conv.append([gF, gb])
    grads_conv.reverse()
    out = []
    for group in (grads_conv, grads_lstm, grads_head):
        for layer_grads in group:
            out.extend(layer_grads)
    return out


def _to_batch(seq):
    seq = np.asarray(seq)
    if seq.ndim == 4:
        return seq[None], True
    return seq, False


def forward_sequence(params, config, seq, mode="infer", rng=None):
    """Per-step yield estimates (kg/hectare) for one ``(T, H, W, B)`` sequence.

    A batch ``(N, T, H, W, B)`` gives ``(N, T)``. Train mode applies dropout
    with masks drawn from ``rng``; infer mode draws nothing.
    """
    if config != params.config:
        raise ShapeError("params were built for a different ModelConfig")
    if mode == "train" and rng is None and config.dropout_keep < 1.0:
        raise ValueError("train mode needs an rng for dropout")
    batch, squeeze = _to_batch(seq)
    z, _ = forward_batch(params, batch, mode, rng)
    preds = z.astype(np.float64) * params.label_std + params.label_mean
    return preds[0] if squeeze else preds


def loss_sequence(predictions, label):
    """Squared error summed over steps, against ``label`` repeated at every step."""
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.size < 1:
        raise InputError("need at least one prediction")
    return float(np.sum((predictions - label) ** 2))


def predict_early(params, config, seq_prefix, t=None):
    """Mean of the per-step estimates over the first ``t`` frames."""
    seq_prefix = np.asarray(seq_prefix)
    available = seq_prefix.shape[-4]
    if t is None:
        t = available
    if not 1 <= t <= config.timesteps or t > available:
        raise InputError(f"prefix length t={t} outside 1..{min(config.timesteps, available)}")
    preds = forward_sequence(params, config, seq_prefix[..., :t, :, :, :], "infer")
    out = prefix_means(preds)[..., -1]
    return float(out) if out.ndim == 0 else out


def predict_full(params, config, seq):
    """Season yield: mean of the per-step estimates over the whole sequence."""
    seq = np.asarray(seq)
    if seq.shape[-4] != config.timesteps:
        raise ShapeError(f"full prediction needs {config.timesteps} frames, got {seq.shape[-4]}")
    return predict_early(params, config, seq, config.timesteps)


def prefix_means(preds):
    """Running mean along the last axis: entry ``t-1`` averages steps ``1..t``."""
    preds = np.asarray(preds, dtype=np.float64)
    return np.cumsum(preds, axis=-1) / np.arange(1, preds.shape[-1] + 1)


def step_curve(params, seqs, batch_size=16):
    """Prefix-mean predictions for every prefix length: ``(N, T)`` in kg/hectare.

    Because the network is causal, one full pass yields every prefix.
    """
    seqs = np.asarray(seqs)
    out = []
    for start in range(0, len(seqs), batch_size):
        z, _ = forward_batch(params, seqs[start:start + batch_size], "infer")
        preds = z.astype(np.float64) * params.label_std + params.label_mean
        out.append(prefix_means(preds))
    return np.concatenate(out) if out else np.zeros((0, params.config.timesteps))


# training --------------------------------------------------------------------

@dataclass
class Sample:
    """One training/evaluation example: a normalized sequence and its label."""

    sample_id: str
    sequence: np.ndarray  # (T, H, W, B)
    label: float
    area: float = float("nan")
    state: str = ""


class Adam:
    def __init__(self, arrays, cfg):
        self.cfg = cfg
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        c = self.cfg
        self.t += 1
        lr_t = c.learning_rate * math.sqrt(1 - c.beta2 ** self.t) / (1 - c.beta1 ** self.t)
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * (g * g)
            a -= (lr_t * m / (np.sqrt(v) + c.eps)).astype(a.dtype)


def clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = [g * g.dtype.type(scale) for g in grads]
    return grads, total


def batch_loss_and_grads(params, samples, mode="train", rng=None):
    """Summed standardized loss over ``samples`` and its gradients.

    Samples are processed in sorted ``sample_id`` order so the result does
    not depend on how the batch was assembled.
    """
    samples = sorted(samples, key=lambda s: s.sample_id)
    seqs = np.stack([s.sequence for s in samples])
    dtype = params.conv[0].filters.dtype
    targets = np.array([(s.label - params.label_mean) / params.label_std for s in samples], dtype=dtype)
    z, cache = forward_batch(params, seqs.astype(dtype, copy=False), mode, rng)
    resid = z - targets[:, None]
    loss = float(np.sum(np.square(resid, dtype=np.float64)))
    grads = backward_batch(params, cache, 2.0 * resid)
    return loss, grads


def rmse(predicted, actual):
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise ShapeError(f"prediction shape {predicted.shape} != label shape {actual.shape}")
    if predicted.size == 0:
        raise InputError("RMSE of an empty set")
    return float(np.sqrt(np.mean((predicted - actual) ** 2)))


def predict_samples(params, samples, batch_size=16):
    """Full-season predictions for ``samples`` (kg/hectare)."""
    if not samples:
        return np.zeros(0)
    seqs = np.stack([s.sequence for s in samples])
    return step_curve(params, seqs, batch_size)[:, -1]


def train(params, train_set, val_set, train_cfg, log=None):
    """Minibatch Adam on the per-step squared loss.

    Returns ``(best_params, history)``; ``best_params`` is the snapshot with
    the lowest validation RMSE (training RMSE when ``val_set`` is empty) and
    ``history`` holds one dict per epoch with ``epoch``, ``train_loss``
    (mean per-sample loss in (kg/ha)^2) and ``val_rmse``. With
    ``target_val_rmse`` set, training stops after the first epoch whose
    validation RMSE is at or below it.
    """
    if not train_set:
        raise InputError("training set is empty")
    ids = {s.sample_id for s in train_set}
    if len(ids) != len(train_set):
        raise InputError("training sample ids must be unique")
    if val_set and ids & {s.sample_id for s in val_set}:
        raise InputError("training and validation sets overlap")
    if train_cfg.epochs == 0:
        return params, []

    params = params.copy()
    rng = SeededRng(train_cfg.seed)
    arrays = params.arrays()
    opt = Adam(arrays, train_cfg)
    ordered = sorted(train_set, key=lambda s: s.sample_id)
    select_on = val_set if val_set else ordered
    best, best_rmse, history = params.copy(), math.inf, []
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.child("shuffle", epoch).permutation(len(ordered))
        total = 0.0
        for b, start in enumerate(range(0, len(order), train_cfg.batch_size)):
            batch = [ordered[i] for i in order[start:start + train_cfg.batch_size]]
            loss, grads = batch_loss_and_grads(params, batch, "train", rng.child("dropout", epoch, b))
            if not math.isfinite(loss):
                raise DivergenceError(epoch)
            total += loss
            grads, _ = clip_global_norm(grads, train_cfg.clip_norm)
            opt.step(arrays, grads)
        train_loss = total * params.label_std ** 2 / len(ordered)
        preds = predict_samples(params, select_on)
        if not np.all(np.isfinite(preds)):
            raise DivergenceError(epoch)
        val_rmse = rmse(preds, [s.label for s in select_on])
        history.append({"epoch": epoch, "train_loss": train_loss, "val_rmse": val_rmse})
        if log is not None:
            log(epoch, train_loss, val_rmse)
        if val_rmse < best_rmse:
            best_rmse = val_rmse
            best = params.copy()
            if train_cfg.checkpoint_path:
                save_params(best, train_cfg.checkpoint_path)
        if train_cfg.target_val_rmse is not None and best_rmse <= train_cfg.target_val_rmse:
            break
    return best, history


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        fh.write("epoch,train_loss,val_rmse\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['train_loss']!r},{row['val_rmse']!r}\n")


# checkpoints -----------------------------------------------------------------

def save_params(params, path):
    """Write ``params`` (with config, label scale and norm stats) to a YCKP file."""
    meta = {
        "config": params.config.to_dict(),
        "label_mean": params.label_mean,
        "label_std": params.label_std,
        "norm_stats": None if params.norm_stats is None else params.norm_stats.to_dict(),
        "tensors": [name for name, _ in params.named_arrays()],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    named = params.named_arrays()
    parts.append(struct.pack("<I", len(named)))
    for _, arr in named:
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count, what))
        return vals[0] if count == 1 else vals


def load_params(path, expect_config=None):
    """Read a YCKP checkpoint.

    With ``expect_config`` given, a checkpoint built for another
    configuration raises :class:`ConfigMismatchError`.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    meta_len = r.u32("metadata length")
    at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
        config = ModelConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable checkpoint metadata: {exc}", at) from exc
    if expect_config is not None and expect_config != config:
        diff = sorted(k for k, v in config.to_dict().items() if expect_config.to_dict()[k] != v)
        raise ConfigMismatchError(f"checkpoint config differs from the run config in {diff}")
    params = init_params(config, SeededRng(0), meta["label_mean"], meta["label_std"])
    named = params.named_arrays()
    n = r.u32("tensor count")
    if n != len(named) or meta["tensors"] != [name for name, _ in named]:
        raise FormatError("tensor table does not match the configuration", r.pos)
    for name, arr in named:
        at = r.pos
        ndim = r.u32(f"{name} rank")
        shape = r.u32(f"{name} shape", ndim) if ndim else ()
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        if shape != arr.shape:
            raise FormatError(f"tensor {name} has shape {shape}, expected {arr.shape}", at)
        data = np.frombuffer(r.take(4 * arr.size, name), dtype="<f4")
        arr[...] = data.reshape(shape)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after the last tensor", r.pos)
    if meta.get("norm_stats") is not None:
        from .data import NormStats

        params.norm_stats = NormStats.from_dict(meta["norm_stats"])
    return params
