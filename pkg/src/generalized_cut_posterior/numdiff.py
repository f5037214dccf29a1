from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericalError

ScalarFn = Callable[[np.ndarray], float]
VectorFn = Callable[[np.ndarray], np.ndarray]

_EPS = float(np.finfo(np.float64).eps)
# Central differences: truncation O(h^2) vs roundoff O(eps/h) balance at cbrt(eps).
_H_FIRST = _EPS ** (1.0 / 3.0)
_H_SECOND = _EPS**0.25


def step_sizes(x: np.ndarray, base: float = _H_FIRST) -> np.ndarray:
    return base * np.maximum(1.0, np.abs(x))


def gradient(f: ScalarFn, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h = step_sizes(x)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        g[i] = (f(xp) - f(xm)) / (xp[i] - xm[i])
    return g


def jacobian(g: VectorFn, x: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian, rows = outputs of ``g``, columns = inputs."""
    x = np.asarray(x, dtype=np.float64)
    h = step_sizes(x)
    cols = []
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        cols.append((np.asarray(g(xp)) - np.asarray(g(xm))) / (xp[i] - xm[i]))
    return np.column_stack(cols) if cols else np.zeros((0, 0))


def hessian(f: ScalarFn, x: np.ndarray, grad: VectorFn | None = None) -> np.ndarray:
    """Symmetrized Hessian: differences of ``grad`` when given, else of ``f``."""
    x = np.asarray(x, dtype=np.float64)
    if grad is not None:
        H = jacobian(grad, x)
    else:
        n = x.size
        h = step_sizes(x, _H_SECOND)
        H = np.empty((n, n))
        for i in range(n):
            for j in range(i, n):
                vals = []
                for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    xx = x.copy()
                    xx[i] += si * h[i]
                    xx[j] += sj * h[j]
                    vals.append(f(xx))
                H[i, j] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * h[i] * h[j])
                H[j, i] = H[i, j]
    H = 0.5 * (H + H.T)
    if not np.all(np.isfinite(H)):
        raise NumericalError("non-finite second differences in Hessian")
    return H
