"""Train a small CNN-LSTM on a planted-signal dataset and ask it what it learned.

The generator hides the yield signal in one band of one month. After
training we look at the early-prediction curve and at the noise-substitution
importance of every month and of every band in the top month; both should
point back at the planted cell.

    python demos/planted_signal.py --regions 48 --epochs 40

Takes a few minutes on one CPU core.
"""

import argparse
import time

import numpy as np

from yieldnet import analysis, data
from yieldnet.model import ModelConfig, TrainConfig, init_params, train
from yieldnet.tensor import SeededRng


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--regions", type=int, default=48)
    parser.add_argument("--epochs", type=int, default=40)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    spec = data.SyntheticSpec(n_regions=args.regions, image_size=16, timesteps=24)
    print(spec.ground_truth_text())
    entries = data.synthesize(spec, args.seed)
    train_e = [e for e in entries if e[0].year <= 2009]
    val_e = [e for e in entries if e[0].year == 2010]
    test_e = [e for e in entries if e[0].year == 2011]
    stats = data.compute_norm_stats(seq for _, seq in train_e)
    train_s, val_s, test_s = (data.to_samples(part, stats) for part in (train_e, val_e, test_e))
    labels = np.array([s.label for s in train_s])
    print(f"{len(train_s)} training, {len(val_s)} validation, {len(test_s)} test region-years; "
          f"label mean {labels.mean():.0f} kg/ha, std {labels.std():.0f} kg/ha")

    config = ModelConfig(input_height=16, input_width=16, bands=12, timesteps=24, conv_layers=2,
                         lstm_layers=1, lstm_hidden=64)
    params = init_params(config, SeededRng(args.seed), labels.mean(), labels.std())
    start = time.perf_counter()

    def log(epoch, train_loss, val_rmse):
        if epoch % 10 == 0 or epoch == args.epochs:
            print(f"  epoch {epoch:3d}  validation RMSE {val_rmse:7.1f} kg/ha "
                  f"({val_rmse / labels.std():.3f} std)  {time.perf_counter() - start:.0f}s")

    best, _ = train(params, train_s, val_s,
                    TrainConfig(epochs=args.epochs, batch_size=8, learning_rate=3e-3, seed=args.seed), log)

    report = analysis.evaluate(best, config, test_s)
    print(f"\ntest RMSE {report.rmse:.1f} kg/ha")
    curve = report.early_rmse
    print("early prediction, RMSE of the running mean after t frames:")
    for t in (1, 4, 8, 12, 16, 24):
        print(f"  t={t:2d}  {curve[t - 1]:7.1f}")

    months = analysis.month_importance(best, config, test_s, seed=args.seed)
    print("\nRMSE increase when a month is replaced by noise:")
    for m, d in sorted(months.month_delta.items()):
        print(f"  month {m}  {d:+8.1f}")
    top = max(months.month_delta, key=months.month_delta.get)
    bands = analysis.band_importance(best, config, test_s, seed=args.seed, months=[top])
    ranked = analysis.ranked_bands(bands, top)
    print(f"\nbands of month {top} by importance: {ranked[:5]} ...")
    print(f"planted: month {spec.month}, band {spec.band}")


if __name__ == "__main__":
    main()
