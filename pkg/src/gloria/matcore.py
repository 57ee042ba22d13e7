"""Dense float64 linear algebra, seeded randomness, scalar nonlinearities,
and a finite-difference gradient oracle.

All matrices are 2-D C-contiguous float64 numpy arrays; shapes and
finiteness are validated at every public boundary. Randomness comes from
numpy's Philox generator, a counter-based PRNG whose draw sequence is
identical for a given seed on every platform.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf


class DimensionError(ValueError):
    """Shapes do not conform for the requested operation."""


class NumericError(ArithmeticError):
    """A numeric computation produced non-finite values or failed to converge."""


class InputError(ValueError):
    """Invalid or degenerate input outside of shape problems."""


class ConsistencyError(RuntimeError):
    """Paired objects (e.g. cache and model) do not belong together."""


# Exact-erf GeLU by default; flip to use the tanh approximation everywhere.
GELU_TANH_APPROX = False

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded counter-based generator (Philox); same seed, same stream."""
    return np.random.Generator(np.random.Philox(seed))


def check_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate a 2-D finite float64 array, converting if needed."""
    a = np.ascontiguousarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D array, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name}: contains non-finite entries")
    return a


def check_vector(v, name: str = "vector") -> np.ndarray:
    a = np.ascontiguousarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise DimensionError(f"{name}: expected 1-D array, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name}: contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit shape validation."""
    a = check_matrix(a, "a")
    b = check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape} do not conform")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericError("matmul: product overflowed to non-finite values")
    return out


def xavier_uniform(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform on [-b, b] with b = sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"xavier_uniform: dimensions must be >= 1, got {rows}x{cols}")
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def softplus(x):
    """ln(1 + e^x), overflow-safe for large x; strictly positive."""
    return np.logaddexp(0.0, x)


def sigmoid(x):
    # derivative of softplus
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def gelu(x):
    """GeLU; exact erf form unless GELU_TANH_APPROX is set."""
    x = np.asarray(x, dtype=np.float64)
    if GELU_TANH_APPROX:
        return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    """d/dx gelu(x) for the active form."""
    x = np.asarray(x, dtype=np.float64)
    if GELU_TANH_APPROX:
        c = math.sqrt(2.0 / math.pi)
        inner = c * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * c * (1.0 + 3 * 0.044715 * x**2)
    phi = np.exp(-0.5 * x**2) * _INV_SQRT_2PI
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi


def central_diff(f, x, h: float) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a vector.

    Component i is (f(x + h e_i) - f(x - h e_i)) / (2h).
    """
    if h <= 0:
        raise InputError(f"central_diff: h must be > 0, got {h}")
    x = check_vector(x, "x")
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"central_diff: non-finite f at component {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def save_matrix(m, path) -> None:
    """Text format: header `rows cols`, one row per line, 17 significant digits."""
    m = check_matrix(m, "matrix")
    with open(path, "w") as fh:
        fh.write(f"{m.shape[0]} {m.shape[1]}\n")
        for row in m:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_matrix(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise InputError(f"{path}: bad matrix header")
        rows, cols = int(header[0]), int(header[1])
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if data.shape != (rows, cols):
        raise DimensionError(f"{path}: header says {rows}x{cols}, body is {data.shape}")
    return check_matrix(data, str(path))


def save_vector(v, path) -> None:
    save_matrix(check_vector(v)[None, :], path)


def load_vector(path) -> np.ndarray:
    m = load_matrix(path)
    if m.shape[0] != 1:
        raise DimensionError(f"{path}: expected a single-row vector file")
    return m[0].copy()
