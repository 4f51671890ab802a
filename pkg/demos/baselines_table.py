"""Run the classical baselines on a synthetic state and print a comparison table.

The first table comes from a freshly generated planted dataset. The second
renders the published per-state RMSE figures that ship with the package as
a fixture, so the layout of both can be compared.

    python demos/baselines_table.py
"""

from yieldnet import baselines, data
from yieldnet.data import fixture_path


def main():
    spec = data.SyntheticSpec(n_regions=30, image_size=16, timesteps=24, noise=100.0)
    entries = data.synthesize(spec, 0)
    train = [e for e in entries if e[0].year <= 2009]
    val = [e for e in entries if e[0].year == 2010]
    test = [e for e in entries if e[0].year == 2011]

    rows = []
    for method in baselines.METHODS:
        for features in ("ndvi", "monthly"):
            if method == "stepwise" and features == "monthly":
                continue  # stepwise always works on VCI
            result = baselines.evaluate_baseline(method, train, val, test, seed=0, features=features)
            label = method if method == "stepwise" else f"{method}/{features}"
            rows.append((spec.state, label, result.rmse))
            print(f"{label:16s} RMSE {result.rmse:8.1f} kg/ha  (chosen setting {result.hyperparameter})")

    print("\nsynthetic state:")
    print(baselines.render_table(rows, methods=[label for _, label, _ in rows]))

    print("\npublished figures (fixture):")
    print(baselines.render_table(baselines.read_results(fixture_path("published_rmse.csv"))))


if __name__ == "__main__":
    main()
