"""Shared test helpers: numeric differentiation oracle and error metrics."""

import numpy as np


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function at array x.

    f takes a float64 array of x's shape and returns a python float.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def rel_err(got, want):
    """Max absolute difference normalized by the max magnitude of `want`.

    A tiny floor keeps the all-zero case well defined (returns 0 when both
    sides vanish).
    """
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(np.abs(want).max(), 1e-12) if want.size else 1e-12
    return np.abs(got - want).max() / denom
