import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import TINY, end_to_end_error, gradient_point, kink_margin
from yieldnet.errors import ConfigMismatchError, DivergenceError, FormatError, InputError, ShapeError
from yieldnet.model import (
    ModelConfig,
    Sample,
    TrainConfig,
    batch_loss_and_grads,
    clip_global_norm,
    forward_batch,
    forward_sequence,
    init_params,
    load_params,
    loss_sequence,
    predict_early,
    predict_full,
    prefix_means,
    rmse,
    save_params,
    step_curve,
    train,
    write_history,
    zero_params,
)
from yieldnet.tensor import SeededRng

SMALL = ModelConfig(input_height=16, input_width=16, bands=3, timesteps=4, conv_layers=2,
                    lstm_layers=2, lstm_hidden=8, dropout_keep=0.75)


def _seqs(config, n, seed=0):
    rng = SeededRng(seed)
    return rng.normal(size=(n, config.timesteps, config.input_height, config.input_width,
                            config.bands)).astype(np.float32)


def _samples(config, n, seed=0):
    seqs = _seqs(config, n, seed)
    labels = SeededRng(seed).child("labels").normal(size=n, loc=2000.0, scale=300.0)
    return [Sample(f"r{i:02d}", seqs[i], float(labels[i])) for i in range(n)]


# configuration ----------------------------------------------------------------

def test_default_config_shape_chain():
    cfg = ModelConfig()
    assert [s[:2] for s in cfg.conv_shapes()] == [(300, 300), (149, 149), (74, 74), (36, 36),
                                                  (17, 17), (8, 8)]
    assert cfg.flatten_dim == 1024
    assert cfg.head_dims() == [512, 256, 64, 1]
    assert (cfg.conv_layers, cfg.conv_filters, cfg.lstm_layers, cfg.lstm_hidden) == (5, 16, 3, 512)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dropout_keep=0.0)
    with pytest.raises(ShapeError):
        ModelConfig(input_height=2, input_width=2, conv_layers=1)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL


def test_param_shapes_follow_config():
    p = init_params(SMALL, SeededRng(0))
    shapes = dict((n, a.shape) for n, a in p.named_arrays())
    assert shapes["conv0.filters"] == (16, 3, 3, 3)
    assert shapes["conv1.filters"] == (16, 3, 3, 16)
    assert shapes["lstm0.W_f"] == (8, 8 + SMALL.flatten_dim)
    assert shapes["lstm1.W_f"] == (8, 16)
    assert shapes["head0.W"] == (4, 8)
    assert shapes["head2.W"] == (1, 1)
    assert np.all(p.lstm[0].b_f == 1.0) and not p.lstm[0].b_i.any()


# forward ---------------------------------------------------------------------

@pytest.mark.slow
def test_default_config_forward_is_one_prediction_per_step():
    cfg = ModelConfig()
    params = init_params(cfg, SeededRng(0))
    seq = np.zeros((24, 300, 300, 12), np.float32)
    seq[..., 0] = 0.5
    _, cache = forward_batch(params, seq[None], "infer")
    assert cache.conv[-1].pre.shape == (24, 8, 8, 16)
    assert forward_sequence(params, cfg, seq).shape == (24,)


def test_zero_params_output_equals_final_bias():
    params = zero_params(SMALL)
    params.head[-1].b[...] = 2.5
    preds = forward_sequence(params, SMALL, _seqs(SMALL, 1)[0])
    np.testing.assert_array_equal(preds, np.full(SMALL.timesteps, 2.5))


def test_label_scale_applied_to_output():
    params = zero_params(SMALL, label_mean=1000.0, label_std=200.0)
    params.head[-1].b[...] = 0.5
    np.testing.assert_allclose(forward_sequence(params, SMALL, _seqs(SMALL, 1)[0]), 1100.0)


def test_shape_errors():
    params = init_params(SMALL, SeededRng(0))
    with pytest.raises(ShapeError):
        forward_sequence(params, SMALL, np.zeros((4, 15, 16, 3), np.float32))
    with pytest.raises(ShapeError):
        forward_sequence(params, SMALL, np.zeros((5, 16, 16, 3), np.float32))
    with pytest.raises(ShapeError):
        forward_sequence(params, TINY, np.zeros((3, 16, 16, 3), np.float32))


def test_train_mode_reproducible_and_infer_draws_nothing():
    params = init_params(SMALL, SeededRng(0))
    seq = _seqs(SMALL, 1)[0]
    a = forward_sequence(params, SMALL, seq, "train", SeededRng(5))
    b = forward_sequence(params, SMALL, seq, "train", SeededRng(5))
    c = forward_sequence(params, SMALL, seq, "train", SeededRng(6))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    np.testing.assert_array_equal(forward_sequence(params, SMALL, seq),
                                  forward_sequence(params, SMALL, seq, "infer", SeededRng(9)))
    with pytest.raises(ValueError):
        forward_sequence(params, SMALL, seq, "train")


def test_causal_prefix():
    # the prediction at step t only depends on frames 1..t
    params = init_params(SMALL, SeededRng(0))
    seq = _seqs(SMALL, 1)[0]
    full = forward_sequence(params, SMALL, seq)
    np.testing.assert_allclose(forward_sequence(params, SMALL, seq[:2]), full[:2], rtol=1e-6)


# loss and averaging ----------------------------------------------------------

def test_loss_examples():
    assert loss_sequence([3.0, 3.0, 3.0], 3.0) == 0.0
    assert loss_sequence([1.0, 3.0], 2.0) == 2.0
    with pytest.raises(InputError):
        loss_sequence([], 1.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=24), st.floats(-1e3, 1e3),
       st.floats(0.1, 10.0))
def test_loss_scales_quadratically(preds, label, k):
    preds = np.array(preds)
    scaled = label + k * (preds - label)
    base = loss_sequence(preds, label)
    assert loss_sequence(scaled, label) == pytest.approx(k * k * base, rel=1e-9, abs=1e-9)


def test_prefix_means():
    np.testing.assert_array_equal(prefix_means([2.0, 4.0, 6.0]), [2.0, 3.0, 4.0])
    assert prefix_means(np.arange(1.0, 25.0))[-1] == 12.5
    np.testing.assert_array_equal(prefix_means(np.full(24, 7.25)), np.full(24, 7.25))


def test_predict_early_and_full_agree():
    params = init_params(SMALL, SeededRng(1), 1500.0, 250.0)
    seqs = _seqs(SMALL, 3)
    for seq in seqs:
        steps = forward_sequence(params, SMALL, seq)
        assert predict_early(params, SMALL, seq, SMALL.timesteps) == predict_full(params, SMALL, seq)
        assert predict_early(params, SMALL, seq, 1) == pytest.approx(steps[0], rel=1e-6)
        assert predict_full(params, SMALL, seq) == pytest.approx(steps.mean(), rel=1e-12)
    curve = step_curve(params, seqs)
    np.testing.assert_allclose(curve[:, -1], [predict_full(params, SMALL, s) for s in seqs], rtol=1e-9)
    with pytest.raises(InputError):
        predict_early(params, SMALL, seqs[0], 0)
    with pytest.raises(InputError):
        predict_early(params, SMALL, seqs[0], SMALL.timesteps + 1)
    with pytest.raises(ShapeError):
        predict_full(params, SMALL, seqs[0][:2])


def test_batch_loss_invariant_to_sample_order():
    params = init_params(SMALL, SeededRng(0), 2000.0, 300.0)
    samples = _samples(SMALL, 4)
    l1, g1 = batch_loss_and_grads(params, samples, "train", SeededRng(3))
    l2, g2 = batch_loss_and_grads(params, samples[::-1], "train", SeededRng(3))
    assert l1 == l2
    for a, b in zip(g1, g2):
        np.testing.assert_array_equal(a, b)


def test_batch_loss_matches_per_sequence_loss():
    params = init_params(SMALL, SeededRng(0), 2000.0, 300.0)
    samples = _samples(SMALL, 3)
    loss, _ = batch_loss_and_grads(params, samples, "infer")
    direct = sum(loss_sequence(forward_sequence(params, SMALL, s.sequence), s.label) for s in samples)
    assert loss * 300.0 ** 2 == pytest.approx(direct, rel=1e-5)


def test_clip_global_norm():
    grads = [np.array([3.0]), np.array([[4.0]])]
    clipped, norm = clip_global_norm(grads, 1.0)
    assert norm == 5.0
    assert math.sqrt(sum(float(np.sum(g ** 2)) for g in clipped)) == pytest.approx(1.0)
    same, _ = clip_global_norm(grads, 10.0)
    assert same is grads


# gradients ---------------------------------------------------------------------

def test_end_to_end_gradient_tiny_model():
    err, margin = end_to_end_error(TINY, seed=0)
    assert margin > 1e-4
    assert err < 1e-4


@pytest.mark.parametrize("lstm_layers,mode", [(1, "train"), (2, "infer"), (2, "train")])
def test_end_to_end_gradient_sampled(lstm_layers, mode):
    # sampled coordinates; a few of them have |grad| ~ 1e-8 where central
    # differences carry ~1e-11 rounding noise, hence the looser bound
    cfg = ModelConfig(input_height=16, input_width=16, bands=3, timesteps=3, conv_layers=2,
                      lstm_layers=lstm_layers, lstm_hidden=8)
    err, _ = end_to_end_error(cfg, seed=0, mode=mode, max_coords=30)
    assert err < 1e-3


def test_gradient_point_avoids_kinks():
    params, sample = gradient_point(TINY, seed=0)
    assert kink_margin(params, sample.sequence[None]) > 1e-4


# training ----------------------------------------------------------------------

TRAIN_CFG = ModelConfig(input_height=8, input_width=8, bands=2, timesteps=3, conv_layers=1,
                        lstm_layers=1, lstm_hidden=8)


def _train_setup(n=6):
    samples = _samples(TRAIN_CFG, n + 2, seed=4)
    labels = np.array([s.label for s in samples[:n]])
    params = init_params(TRAIN_CFG, SeededRng(0), labels.mean(), labels.std())
    return params, samples[:n], samples[n:]


def test_train_zero_epochs_returns_initial_params():
    params, tr, va = _train_setup()
    best, history = train(params, tr, va, TrainConfig(epochs=0))
    assert best is params and history == []


def test_train_errors():
    params, tr, va = _train_setup()
    with pytest.raises(InputError):
        train(params, [], va, TrainConfig(epochs=1))
    with pytest.raises(InputError):
        train(params, tr, tr[:1], TrainConfig(epochs=1))


def test_train_is_deterministic_and_keeps_best(tmp_path):
    params, tr, va = _train_setup()
    cfg = TrainConfig(epochs=6, batch_size=2, seed=3, learning_rate=1e-2,
                      checkpoint_path=str(tmp_path / "best.yckp"))
    best1, h1 = train(params, tr, va, cfg)
    best2, h2 = train(params, tr, va, cfg)
    assert h1 == h2
    assert [h["epoch"] for h in h1] == list(range(1, 7))
    for a, b in zip(best1.arrays(), best2.arrays()):
        np.testing.assert_array_equal(a, b)
    # the returned parameters are the snapshot with the lowest validation RMSE
    val_rmse = rmse(step_curve(best1, np.stack([s.sequence for s in va]))[:, -1], [s.label for s in va])
    assert val_rmse == pytest.approx(min(h["val_rmse"] for h in h1), rel=1e-6)
    on_disk = load_params(cfg.checkpoint_path)
    for a, b in zip(best1.arrays(), on_disk.arrays()):
        np.testing.assert_array_equal(a, b)
    # training must not mutate the caller's parameters
    fresh, _, _ = _train_setup()
    for a, b in zip(params.arrays(), fresh.arrays()):
        np.testing.assert_array_equal(a, b)
    write_history(h1, tmp_path / "history.csv")
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_rmse" and len(lines) == 7


def test_train_reduces_training_loss():
    params, tr, va = _train_setup()
    _, history = train(params, tr, va, TrainConfig(epochs=30, batch_size=6, learning_rate=1e-2))
    assert history[-1]["train_loss"] < 0.5 * history[0]["train_loss"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch():
    params, tr, va = _train_setup()
    params.head[-1].b[...] = np.inf
    with pytest.raises(DivergenceError) as info:
        train(params, tr, va, TrainConfig(epochs=2))
    assert info.value.epoch == 1


# checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = init_params(SMALL, SeededRng(2), 1234.5, 67.25)
    path = tmp_path / "p.yckp"
    save_params(params, path)
    back = load_params(path, expect_config=SMALL)
    assert back.config == SMALL
    assert (back.label_mean, back.label_std) == (1234.5, 67.25)
    for (n1, a), (n2, b) in zip(params.named_arrays(), back.named_arrays()):
        assert n1 == n2 and a.dtype == b.dtype
        np.testing.assert_array_equal(a, b)
    save_params(back, tmp_path / "q.yckp")
    assert path.read_bytes() == (tmp_path / "q.yckp").read_bytes()


def test_checkpoint_errors(tmp_path):
    params = init_params(SMALL, SeededRng(2))
    path = tmp_path / "p.yckp"
    save_params(params, path)
    blob = path.read_bytes()
    (tmp_path / "magic.yckp").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        load_params(tmp_path / "magic.yckp")
    (tmp_path / "short.yckp").write_bytes(blob[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_params(tmp_path / "short.yckp")
    (tmp_path / "long.yckp").write_bytes(blob + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_params(tmp_path / "long.yckp")
    other = ModelConfig(**{**SMALL.to_dict(), "bands": 9})
    with pytest.raises(ConfigMismatchError, match="bands"):
        load_params(path, expect_config=other)
