"""Array helpers, seeded randomness and the finite-difference gradient checker.

Tensors are plain ``numpy.ndarray`` values in C (row-major) order. Model
weights and activations default to float32; the gradient checker works on
float64 copies.
"""

import hashlib

import numpy as np

from .errors import EvaluationError, ShapeError

DEFAULT_DTYPE = np.float32
DEFAULT_LEAKY_SLOPE = 0.01

ELEMENTWISE_OPS = ("add", "sub", "mul", "scale", "leaky_relu", "sigmoid", "tanh")


def as_tensor(values, dtype=DEFAULT_DTYPE):
    """Return a C-contiguous array of ``dtype`` holding ``values``."""
    return np.ascontiguousarray(values, dtype=dtype)


def _name_words(name):
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


class SeededRng:
    """Deterministic random stream backed by the counter-based Philox generator.

    Equal seeds give bit-identical draws on every platform numpy supports.
    Independent sub-streams are obtained with :meth:`child`, keyed by name.
    """

    def __init__(self, seed=0, _path=()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._path = tuple(_path)
        entropy = [seed & 0xFFFFFFFF, seed >> 32]
        for part in self._path:
            entropy.extend(_name_words(part))
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *names):
        """Independent stream derived from this stream's seed and ``names``."""
        return SeededRng(self.seed, self._path + tuple(str(n) for n in names))

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self._path!r})"


def matmul(a, b):
    """Matrix product of ``a`` (m x k) and ``b`` (k x n)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def sigmoid(v):
    v = np.asarray(v)
    # split by sign so exp never overflows
    out = np.empty_like(v, dtype=np.result_type(v, np.float32))
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def leaky_relu(v, slope=DEFAULT_LEAKY_SLOPE):
    v = np.asarray(v)
    return np.where(v >= 0, v, slope * v)


def leaky_relu_grad(v, slope=DEFAULT_LEAKY_SLOPE):
    v = np.asarray(v)
    return np.where(v >= 0, 1.0, slope).astype(v.dtype, copy=False)


def elementwise(op, a, b=None, *, factor=None, slope=DEFAULT_LEAKY_SLOPE):
    """Apply a named elementwise operation.

    Binary ops (``add``, ``sub``, ``mul``) need equal shapes; ``scale``
    multiplies ``a`` by the scalar ``factor``.
    """
    a = np.asarray(a)
    if op in ("add", "sub", "mul"):
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op](a, b)
    if op == "scale":
        if factor is None:
            raise ValueError("scale needs a factor")
        return a * factor
    if op == "leaky_relu":
        return leaky_relu(a, slope)
    if op == "sigmoid":
        return sigmoid(a)
    if op == "tanh":
        return np.tanh(a)
    raise ValueError(f"unknown elementwise op {op!r}; expected one of {ELEMENTWISE_OPS}")


def numerical_gradient(f, x, h=1e-5, indices=None):
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is perturbed in place and restored, so closures over ``x`` see
    the perturbation. Only coordinates in ``indices`` (flat) are computed
    when given; the rest are left at zero.
    """
    if x.dtype != np.float64:
        raise TypeError("numerical_gradient needs a float64 array")
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("x must be contiguous")
    grad = np.zeros_like(flat)
    coords = range(flat.size) if indices is None else indices
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(numeric, analytic, floor=1e-8):
    numeric = np.asarray(numeric, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if numeric.shape != analytic.shape:
        raise ShapeError(f"gradient shapes differ: {numeric.shape} vs {analytic.shape}")
    if numeric.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), floor)
    return float(np.max(np.abs(numeric - analytic) / denom))


def gradient_check(f, x, analytic_grad, h=1e-5, indices=None):
    """Max relative error between ``analytic_grad`` and central differences of ``f``.

    The per-coordinate error is ``|fd - an| / max(|fd|, |an|, 1e-8)``.
    """
    x = np.asarray(x)
    if x.dtype != np.float64:
        raise TypeError("gradient_check runs in float64; convert x first")
    if not np.isfinite(f(x)):
        raise EvaluationError("function is non-finite at x")
    numeric = numerical_gradient(f, x, h, indices)
    analytic = np.asarray(analytic_grad, dtype=np.float64).reshape(x.shape)
    if indices is not None:
        idx = np.asarray(list(indices), dtype=np.intp)
        return relative_error(numeric.reshape(-1)[idx], analytic.reshape(-1)[idx])
    return relative_error(numeric, analytic)


def gradient_check_arrays(f, arrays, grads, h=1e-5, max_coords=None, rng=None):
    """Worst :func:`gradient_check` error over several parameter arrays.

    ``f`` takes no arguments and reads ``arrays`` (float64) by closure.
    With ``max_coords`` set, each array is checked on at most that many
    randomly chosen coordinates.
    """
    worst = 0.0
    for arr, grad in zip(arrays, grads):
        idx = None
        if max_coords is not None and arr.size > max_coords:
            rng = rng or SeededRng(0)
            idx = sorted(rng.choice(arr.size, max_coords, replace=False).tolist())
        worst = max(worst, gradient_check(lambda _x: f(), arr, grad, h, idx))
    return worst
