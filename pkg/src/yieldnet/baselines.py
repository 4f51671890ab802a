"""Classical yield baselines on vegetation-index features.

NDVI and VCI time series per region-year feed ridge regression, a
variance-reduction regression tree, a random forest of such trees, and
forward stepwise least squares.
"""

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import AGRI, CONTINUOUS, NIR, RED, monthly_means
from .errors import InputError
from .model import rmse
from .tensor import SeededRng

METHODS = ("ridge", "tree", "forest", "stepwise")
RIDGE_GRID = (0.0, 0.01, 0.1, 1.0, 10.0, 100.0)
DEPTH_GRID = (3, 5, 8, None)
TREES_GRID = (50, 200)


@dataclass
class FeatureVector:
    region_id: str
    year: int
    values: np.ndarray
    notes: tuple = ()


# vegetation indices ----------------------------------------------------------

def ndvi(seq):
    """Agriculture-masked mean NDVI per frame.

    Pixels with ``NIR + Red == 0`` are skipped; a frame without any valid
    agriculture pixel gets 0 and a note.
    """
    try:
        red = seq.band(RED).astype(np.float64)
        nir = seq.band(NIR).astype(np.float64)
        agri = seq.band(AGRI) > 0.5
    except InputError as exc:
        raise InputError(f"NDVI needs red, NIR and agriculture bands: {exc}") from exc
    values = np.zeros(seq.data.shape[0])
    notes = []
    for t in range(values.size):
        denom = nir[t] + red[t]
        valid = agri[t] & (denom != 0)
        if not valid.any():
            notes.append(f"frame {t + 1}: no valid agriculture pixels, NDVI set to 0")
            continue
        values[t] = np.mean((nir[t][valid] - red[t][valid]) / denom[valid])
    if notes:
        warnings.warn(f"{seq.region_id}/{seq.year}: " + "; ".join(notes), RuntimeWarning, stacklevel=2)
    return FeatureVector(seq.region_id, seq.year, values, tuple(notes))


def _values(v):
    return np.asarray(v.values if isinstance(v, FeatureVector) else v, dtype=np.float64)


def vci(ndvi_by_year, target_year, reference_years=None):
    """Vegetation condition index of ``target_year`` against a min/max envelope.

    ``VCI_t = 100 (NDVI_t - min_t) / (max_t - min_t)`` with the envelope taken
    over ``reference_years`` (default: every year in the map). A flat
    envelope gives 50.
    """
    if target_year not in ndvi_by_year:
        raise InputError(f"no NDVI series for target year {target_year}")
    years = sorted(ndvi_by_year) if reference_years is None else sorted(reference_years)
    missing = [y for y in years if y not in ndvi_by_year]
    if missing:
        raise InputError(f"region has no NDVI series for reference years {missing}")
    if len(years) < 2:
        raise InputError("VCI needs at least two reference years")
    ref = np.stack([_values(ndvi_by_year[y]) for y in years])
    target = _values(ndvi_by_year[target_year])
    lo, hi = ref.min(axis=0), ref.max(axis=0)
    span = hi - lo
    flat = span <= 0
    out = np.full(target.shape, 50.0)
    out[~flat] = 100.0 * (target[~flat] - lo[~flat]) / span[~flat]
    # rounding can push an in-envelope value a hair past 0 or 100
    inside = (target >= lo) & (target <= hi)
    out[inside] = np.clip(out[inside], 0.0, 100.0)
    notes = tuple(f"frame {t + 1}: flat NDVI envelope, VCI set to 50" for t in np.flatnonzero(flat))
    src = ndvi_by_year[target_year]
    rid = src.region_id if isinstance(src, FeatureVector) else ""
    return FeatureVector(rid, target_year, out, notes)


# ridge -----------------------------------------------------------------------

@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    rank_deficient: bool = False

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X @ self.weights + self.bias


def ridge_fit(X, y, lam=0.0):
    """Minimise ``|X w + b - y|^2 + lam |w|^2`` with an unpenalized bias.

    Features and labels are centered first so the bias drops out. At
    ``lam == 0`` a rank-deficient design is solved by minimum-norm least
    squares and flagged.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],) or X.shape[0] < 1:
        raise InputError(f"ridge_fit needs X (n x d) and y (n,), got {X.shape} and {y.shape}")
    if lam < 0:
        raise InputError("lam must be non-negative")
    x_mean, y_mean = X.mean(axis=0), y.mean()
    Xc, yc = X - x_mean, y - y_mean
    d = X.shape[1]
    flagged = False
    if lam > 0:
        w = np.linalg.solve(Xc.T @ Xc + lam * np.eye(d), Xc.T @ yc)
    else:
        w, _, rank, _ = np.linalg.lstsq(Xc, yc, rcond=None)
        flagged = rank < d
    return LinearModel(w, float(y_mean - x_mean @ w), flagged)


# trees -----------------------------------------------------------------------

@dataclass
class TreeNode:
    value: float
    n_samples: int
    feature: int = None
    threshold: float = None
    left: "TreeNode" = None
    right: "TreeNode" = None

    @property
    def is_leaf(self):
        return self.feature is None

    def depth(self):
        return 0 if self.is_leaf else 1 + max(self.left.depth(), self.right.depth())


def _best_split(X, y, idx, features, min_leaf):
    """Lowest child SSE over midpoints of consecutive unique values.

    Returns ``(sse, feature, threshold)`` or ``None``; ties keep the lowest
    feature index, then the lowest threshold.
    """
    best = None
    n = idx.size
    for j in features:
        xs = X[idx, j]
        order = np.argsort(xs, kind="stable")
        xs, ys = xs[order], y[idx][order]
        csum = np.cumsum(ys)
        csq = np.cumsum(ys * ys)
        n_left = np.arange(1, n)
        ok = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not ok.any():
            continue
        sl, ql = csum[:-1], csq[:-1]
        sr, qr = csum[-1] - sl, csq[-1] - ql
        sse = (ql - sl * sl / n_left) + (qr - sr * sr / (n - n_left))
        sse = np.where(ok, sse, np.inf)
        k = int(np.argmin(sse))
        if best is None or sse[k] < best[0]:
            best = (float(sse[k]), int(j), float((xs[k] + xs[k + 1]) / 2.0))
    return best


def _grow(X, y, idx, depth, max_depth, min_leaf, feature_sampler):
    ys = y[idx]
    node = TreeNode(float(ys.mean()), int(idx.size))
    if (max_depth is not None and depth >= max_depth) or idx.size < 2 * min_leaf or np.all(ys == ys[0]):
        return node
    features = feature_sampler() if feature_sampler else range(X.shape[1])
    split = _best_split(X, y, idx, features, min_leaf)
    if split is None:
        return node
    _, j, thr = split
    go_left = X[idx, j] <= thr
    node.feature, node.threshold = j, thr
    node.left = _grow(X, y, idx[go_left], depth + 1, max_depth, min_leaf, feature_sampler)
    node.right = _grow(X, y, idx[~go_left], depth + 1, max_depth, min_leaf, feature_sampler)
    return node


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InputError("tree fitting needs a non-empty (n x d) feature matrix")
    if y.shape != (X.shape[0],):
        raise InputError(f"labels shape {y.shape} does not match {X.shape[0]} rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InputError("features and labels must be finite")
    return X, y


def tree_fit(X, y, max_depth=None, min_leaf=1, _feature_sampler=None):
    """Greedy variance-reduction regression tree; ``max_depth=None`` is unlimited."""
    X, y = _check_xy(X, y)
    if min_leaf < 1 or X.shape[0] < min_leaf:
        raise InputError(f"need at least min_leaf={min_leaf} samples")
    return _grow(X, y, np.arange(X.shape[0]), 0, max_depth, min_leaf, _feature_sampler)


def tree_predict(node, x):
    while not node.is_leaf:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.value


def tree_predict_many(node, X):
    return np.array([tree_predict(node, row) for row in np.asarray(X, dtype=np.float64)])


@dataclass
class Forest:
    trees: list = field(default_factory=list)

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        return np.mean([tree_predict_many(t, X) for t in self.trees], axis=0)


def forest_fit(X, y, n_trees=100, seed=0, max_depth=None, min_leaf=1, bootstrap=True,
               max_features="sqrt"):
    """Bagged trees with per-split feature subsampling (``sqrt(d)`` by default)."""
    X, y = _check_xy(X, y)
    if n_trees < 1:
        raise InputError("n_trees must be at least 1")
    n, d = X.shape
    if max_features == "sqrt":
        m = max(1, int(math.sqrt(d)))
    elif max_features is None:
        m = d
    else:
        m = max(1, min(d, int(max_features)))
    root = SeededRng(seed)
    trees = []
    for k in range(n_trees):
        rng = root.child("tree", k)
        rows = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        sampler = None if m == d else (lambda rng=rng: sorted(rng.choice(d, m, replace=False).tolist()))
        trees.append(tree_fit(X[rows], y[rows], max_depth, min_leaf, sampler))
    return Forest(trees)


# stepwise --------------------------------------------------------------------

@dataclass
class StepwiseModel:
    selected: list
    model: LinearModel

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if not self.selected:
            return np.full(X.shape[0], self.model.bias)
        return self.model.predict(X[:, self.selected])


def stepwise_fit(X, y, val_X, val_y, tol=1e-9):
    """Forward selection on validation RMSE with least-squares refits.

    Starts from the bias-only model and adds, one at a time, the feature
    giving the lowest validation RMSE, while the improvement exceeds ``tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    val_X = np.asarray(val_X, dtype=np.float64)
    val_y = np.asarray(val_y, dtype=np.float64)
    if val_X.shape[0] == 0:
        raise InputError("stepwise selection needs a non-empty validation set")
    selected = []
    current = StepwiseModel([], LinearModel(np.zeros(0), float(y.mean())))
    current_rmse = rmse(current.predict(val_X), val_y)
    while len(selected) < X.shape[1]:
        best = None
        for j in range(X.shape[1]):
            if j in selected:
                continue
            cols = selected + [j]
            cand = StepwiseModel(cols, ridge_fit(X[:, cols], y, 0.0))
            err = rmse(cand.predict(val_X), val_y)
            if best is None or err < best[0]:
                best = (err, cand)
        if best is None or current_rmse - best[0] <= tol:
            break
        current_rmse, current = best
        selected = list(current.selected)
    return current


# evaluation ------------------------------------------------------------------

def ndvi_matrix(entries):
    """NDVI features for ``(record, sequence)`` entries: ``(X, y, records)``."""
    X = np.stack([ndvi(seq).values for _, seq in entries]) if entries else np.zeros((0, 0))
    y = np.array([rec.yield_kg_per_ha for rec, _ in entries])
    return X, y, [rec for rec, _ in entries]


def monthly_matrix(entries):
    """Agriculture-masked monthly means of every continuous band: ``(X, y, records)``."""
    rows = []
    for _, seq in entries:
        bands = [k + 1 for k, b in enumerate(seq.bands) if b.kind == CONTINUOUS]
        rows.append(np.concatenate([monthly_means(seq, b) for b in bands]))
    X = np.stack(rows) if rows else np.zeros((0, 0))
    return X, np.array([rec.yield_kg_per_ha for rec, _ in entries]), [rec for rec, _ in entries]


FEATURES = {"ndvi": ndvi_matrix, "monthly": monthly_matrix}


def vci_matrices(train, val, test):
    """VCI features per split, each region's envelope taken over its training years."""
    series = {}
    for rec, seq in [*train, *val, *test]:
        series.setdefault(rec.region_id, {})[rec.year] = ndvi(seq)
    ref_years = {}
    for rec, _ in train:
        ref_years.setdefault(rec.region_id, set()).add(rec.year)

    def build(entries):
        rows = []
        for rec, _ in entries:
            years = ref_years.get(rec.region_id)
            if not years:
                raise InputError(f"region {rec.region_id} has no training years for its VCI envelope")
            rows.append(vci(series[rec.region_id], rec.year, years).values)
        X = np.stack(rows) if rows else np.zeros((0, 0))
        return X, np.array([rec.yield_kg_per_ha for rec, _ in entries])

    return build(train), build(val), build(test)


@dataclass
class BaselineResult:
    method: str
    rmse: float
    hyperparameter: object
    records: list
    predictions: np.ndarray


def _fit_predict(method, h, Xtr, ytr, seed):
    if method == "ridge":
        m = ridge_fit(Xtr, ytr, h)
        return m.predict
    if method == "tree":
        node = tree_fit(Xtr, ytr, max_depth=h)
        return lambda X: tree_predict_many(node, X)
    if method == "forest":
        f = forest_fit(Xtr, ytr, n_trees=h, seed=seed)
        return f.predict
    raise InputError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")


def evaluate_baseline(method, train, val, test, seed=0, grid=None, features="ndvi"):
    """Fit ``method`` on ``train``, tune on ``val``, report RMSE on ``test``.

    Splits are lists of ``(RegionRecord, RasterSequence)`` with raw
    (unnormalized) bands. ``features`` picks per-frame NDVI (default) or
    masked monthly band means for ridge, tree and forest; stepwise always
    uses VCI.
    """
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    if features not in FEATURES:
        raise InputError(f"unknown feature set {features!r}; valid: {', '.join(FEATURES)}")
    matrix = FEATURES[features]
    if not test:
        raise InputError("test set is empty")
    if not train:
        raise InputError("training set is empty")
    if method == "stepwise":
        (Xtr, ytr), (Xv, yv), (Xte, yte) = vci_matrices(train, val, test)
        model = stepwise_fit(Xtr, ytr, Xv, yv)
        preds = model.predict(Xte)
        return BaselineResult(method, rmse(preds, yte), tuple(model.selected),
                              [r for r, _ in test], preds)
    Xtr, ytr, _ = matrix(train)
    Xte, yte, recs = matrix(test)
    if grid is None:
        grid = {"ridge": RIDGE_GRID, "tree": DEPTH_GRID, "forest": TREES_GRID}[method]
    best_h = grid[0]
    if val and len(grid) > 1:
        Xv, yv, _ = matrix(val)
        scores = [rmse(_fit_predict(method, h, Xtr, ytr, seed)(Xv), yv) for h in grid]
        best_h = grid[int(np.argmin(scores))]
    preds = _fit_predict(method, best_h, Xtr, ytr, seed)(Xte)
    return BaselineResult(method, rmse(preds, yte), best_h, recs, preds)


def write_results(rows, path):
    """Write ``(state, method, rmse)`` rows as ``state,method,rmse_kg_per_ha``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state", "method", "rmse_kg_per_ha"])
        for state, method, value in rows:
            w.writerow([state, method, repr(float(value))])


def write_features(X, records, path, prefix="ndvi"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "year", *[f"{prefix}_{t + 1}" for t in range(X.shape[1])]])
        for rec, row in zip(records, X):
            w.writerow([rec.region_id, rec.year, *[repr(float(v)) for v in row]])


TABLE_METHODS = ("Decision Forest (NDVI)", "Decision Tree (NDVI)", "Step Regression (VCI)",
                 "Ridge Regression (NDVI)", "LSTM + GP (Histogram)", "CNN-LSTM-9", "CNN-LSTM-12")


def read_results(path):
    with open(path, newline="") as fh:
        return [(r["state"], r["method"], float(r["rmse_kg_per_ha"])) for r in csv.DictReader(fh)]


def render_table(rows, methods=TABLE_METHODS):
    """Pivot ``(state, method, rmse)`` rows into one line per state.

    Returns CSV text with a ``State`` column followed by ``methods``; missing
    cells are left empty. States keep their first-seen order.
    """
    cells, states = {}, []
    for state, method, value in rows:
        if state not in cells:
            cells[state] = {}
            states.append(state)
        cells[state][method] = value
    lines = [",".join(["State", *methods])]
    for state in states:
        vals = []
        for m in methods:
            v = cells[state].get(m)
            vals.append("" if v is None else f"{v:g}")
        lines.append(",".join([state, *vals]))
    return "\n".join(lines) + "\n"
