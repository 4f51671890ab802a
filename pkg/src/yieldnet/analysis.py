"""Evaluation protocol: RMSE reports, early-prediction curves and noise-substitution importance."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import FRAMES_PER_MONTH, month_frames
from .errors import InputError, ShapeError
from .model import rmse, step_curve
from .tensor import SeededRng


@dataclass
class EvalRow:
    region_id: str
    actual: float
    predicted: float
    error: float
    area_ha: float


@dataclass
class EvalReport:
    rows: list
    rmse: float
    early_rmse: np.ndarray  # RMSE of the prefix-mean prediction for t = 1..T
    skipped: list = field(default_factory=list)
    header: dict = field(default_factory=dict)


def _check(params, config, samples):
    if config != params.config:
        raise ShapeError("params were built for a different ModelConfig")
    if not samples:
        raise InputError("evaluation set is empty")
    samples = sorted(samples, key=lambda s: s.sample_id)
    seqs = np.stack([s.sequence for s in samples])
    if seqs.shape[1:] != (config.timesteps, config.input_height, config.input_width, config.bands):
        raise ShapeError(f"test sequences {seqs.shape[1:]} do not match the model configuration")
    return samples, seqs


def _curve_rmse(curves, labels):
    return np.array([rmse(curves[:, t], labels) for t in range(curves.shape[1])])


def evaluate(params, config, samples, skipped=(), header=None):
    """Season predictions and RMSE over ``samples`` (sorted by id)."""
    samples, seqs = _check(params, config, samples)
    curves = step_curve(params, seqs)
    labels = np.array([s.label for s in samples])
    preds = curves[:, -1]
    rows = [EvalRow(s.sample_id, float(s.label), float(p), float(p - s.label), float(s.area))
            for s, p in zip(samples, preds)]
    return EvalReport(rows, rmse(preds, labels), _curve_rmse(curves, labels), list(skipped),
                      dict(header or {}))


def early_curve(params, config, samples):
    """RMSE of the prefix-mean prediction for every prefix length ``t = 1..T``."""
    samples, seqs = _check(params, config, samples)
    labels = np.array([s.label for s in samples])
    return _curve_rmse(step_curve(params, seqs), labels)


def cross_eval(params, config, samples, train_state, test_state):
    """Evaluate a model trained on one state against another state's samples."""
    if not samples:
        raise InputError(f"no samples for test state {test_state!r}")
    return evaluate(params, config, samples,
                    header={"train_state": train_state, "test_state": test_state,
                            "cross_state": train_state != test_state})


# importance --------------------------------------------------------------------

@dataclass
class ImportanceReport:
    baseline_rmse: float
    month_delta: dict = field(default_factory=dict)  # month -> dRMSE
    band_delta: dict = field(default_factory=dict)  # (month, band) -> dRMSE
    noise_seed: int = 0
    n_draws: int = 1


def gaussian_replacement(block, rng):
    return rng.normal(size=block.shape).astype(block.dtype)


def null_replacement(block, rng):
    """Hands back the original frames; a control that must leave RMSE unchanged."""
    return block


def _perturbed_rmse(params, seqs, labels, frames, band, seed, key, n_draws, replace):
    values = []
    for d in range(n_draws):
        rng = SeededRng(seed).child(*key, "draw", d)
        pert = seqs.copy()
        if band is None:
            pert[:, frames] = replace(seqs[:, frames], rng)
        else:
            pert[:, frames, :, :, band] = replace(seqs[:, frames, :, :, band], rng)
        values.append(rmse(step_curve(params, pert)[:, -1], labels))
    return float(np.mean(values))


def _setup(params, config, samples, n_draws):
    if n_draws < 1:
        raise InputError("n_draws must be at least 1")
    samples, seqs = _check(params, config, samples)
    labels = np.array([s.label for s in samples])
    baseline = rmse(step_curve(params, seqs)[:, -1], labels)
    n_months = config.timesteps // FRAMES_PER_MONTH
    return seqs, labels, baseline, n_months


def month_importance(params, config, samples, seed=0, n_draws=5, replace=gaussian_replacement):
    """RMSE increase when all bands of a month's four frames are replaced by noise."""
    seqs, labels, baseline, n_months = _setup(params, config, samples, n_draws)
    report = ImportanceReport(baseline, noise_seed=seed, n_draws=n_draws)
    for m in range(1, n_months + 1):
        frames = month_frames(m)
        perturbed = _perturbed_rmse(params, seqs, labels, frames, None, seed, ("month", m),
                                    n_draws, replace)
        report.month_delta[m] = perturbed - baseline
    return report


def band_importance(params, config, samples, seed=0, n_draws=5, replace=gaussian_replacement,
                    months=None):
    """RMSE increase when one band of one month is replaced by noise, for every pair."""
    seqs, labels, baseline, n_months = _setup(params, config, samples, n_draws)
    report = ImportanceReport(baseline, noise_seed=seed, n_draws=n_draws)
    for m in (range(1, n_months + 1) if months is None else months):
        frames = month_frames(m)
        for b in range(config.bands):
            perturbed = _perturbed_rmse(params, seqs, labels, frames, b, seed, ("band", m, b + 1),
                                        n_draws, replace)
            report.band_delta[(m, b + 1)] = perturbed - baseline
    return report


def ranked_bands(report, month):
    """Bands of ``month`` ordered by decreasing RMSE increase (ties: lower band first)."""
    cells = [(band, d) for (m, band), d in report.band_delta.items() if m == month]
    return [band for band, _ in sorted(cells, key=lambda c: (-c[1], c[0]))]


# CSV exports -------------------------------------------------------------------

def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(v):
    return repr(float(v))


def write_eval_rows(report, path):
    _write(path, ["region_id", "actual", "predicted", "error", "area_ha"],
           [[r.region_id, _f(r.actual), _f(r.predicted), _f(r.error), _f(r.area_ha)]
            for r in report.rows])


def write_curve(curve, path):
    _write(path, ["t", "rmse"], [[t + 1, _f(v)] for t, v in enumerate(curve)])


def write_month_importance(report, path):
    _write(path, ["month", "delta_rmse"], [[m, _f(d)] for m, d in sorted(report.month_delta.items())])


def write_band_importance(report, path):
    _write(path, ["month", "band", "delta_rmse"],
           [[m, b, _f(d)] for (m, b), d in sorted(report.band_delta.items())])


def write_cross_grid(cells, path):
    """``cells`` holds ``(train_state, test_state, rmse)`` triples."""
    _write(path, ["train_state", "test_state", "rmse"], [[a, b, _f(v)] for a, b, v in cells])


def rmse_from_rows_csv(path):
    """Recompute the aggregate RMSE from an exported per-region CSV."""
    with open(path, newline="") as fh:
        errors = [float(r["error"]) for r in csv.DictReader(fh)]
    return float(np.sqrt(np.mean(np.square(errors))))
