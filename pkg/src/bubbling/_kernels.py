"""Inner loops of the radial pipeline, compiled with numba when available.

Every kernel has a vectorized numpy twin with identical semantics.  Set
BUBBLING_DISABLE_NUMBA=1 to force the numpy versions (useful for debugging
and for the parity tests); the choice is made once at import time.
"""
from __future__ import annotations

import math
import os

import numpy as np

_SERIES_CUT = 0.05
_SERIES_TERMS = 24


def _numba_requested() -> bool:
    return os.environ.get("BUBBLING_DISABLE_NUMBA", "").strip().lower() not in ("1", "true", "yes")


try:  # pragma: no cover - exercised implicitly
    if not _numba_requested():
        raise ImportError("disabled by environment")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# remainder of the first-order expansion of (1 + x)^q

def remainder2_numpy(x, q: float):
    """(1+x)_+^q - 1 - q x, accurate for tiny |x| (series below |x| < 0.05)."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SERIES_CUT
    xs = np.where(small, x, 0.0)
    # Horner form of sum_{k>=2} binom(q, k) x^k
    acc = np.zeros_like(xs)
    coef = [1.0]
    for k in range(1, _SERIES_TERMS + 1):
        coef.append(coef[-1] * (q - k + 1) / k)
    for k in range(_SERIES_TERMS, 1, -1):
        acc = acc * xs + coef[k]
    series = acc * xs * xs
    base = np.maximum(1.0 + x, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = np.where(base > 0, base ** q, 0.0) - 1.0 - q * x
    return np.where(small, series, direct)


@njit(cache=True)
def _remainder2_loop(x, q, out):
    coef = np.empty(_SERIES_TERMS + 1)
    coef[0] = 1.0
    for k in range(1, _SERIES_TERMS + 1):
        coef[k] = coef[k - 1] * (q - k + 1) / k
    for i in range(x.size):
        xi = x[i]
        if abs(xi) < _SERIES_CUT:
            acc = 0.0
            for k in range(_SERIES_TERMS, 1, -1):
                acc = acc * xi + coef[k]
            out[i] = acc * xi * xi
        else:
            b = 1.0 + xi
            out[i] = (b ** q if b > 0.0 else 0.0) - 1.0 - q * xi
    return out


def remainder2(x, q: float):
    if not HAVE_NUMBA:
        return remainder2_numpy(x, q)
    x = np.ascontiguousarray(x, dtype=float)
    out = np.empty_like(x)
    _remainder2_loop(x.reshape(-1), float(q), out.reshape(-1))
    return out


# ---------------------------------------------------------------------------
# tridiagonal products

def tridiag_matvec_numpy(lower, diag, upper, x):
    """y = T x for T with sub-diagonal ``lower`` and super-diagonal ``upper``."""
    y = diag * x
    y[1:] += lower * x[:-1]
    y[:-1] += upper * x[1:]
    return y


@njit(cache=True)
def _tridiag_loop(lower, diag, upper, x, y):
    n = diag.size
    for i in range(n):
        s = diag[i] * x[i]
        if i > 0:
            s += lower[i - 1] * x[i - 1]
        if i < n - 1:
            s += upper[i] * x[i + 1]
        y[i] = s
    return y


def tridiag_matvec(lower, diag, upper, x):
    if not HAVE_NUMBA:
        return tridiag_matvec_numpy(lower, diag, upper, x)
    x = np.ascontiguousarray(x, dtype=float)
    return _tridiag_loop(np.ascontiguousarray(lower, dtype=float),
                         np.ascontiguousarray(diag, dtype=float),
                         np.ascontiguousarray(upper, dtype=float), x, np.empty_like(x))


# ---------------------------------------------------------------------------
# finite-volume stiffness on a radial grid

def stiffness_numpy(nodes, faces, n: int):
    """Off-diagonal and diagonal of the radial stiffness matrix.

    ``faces`` holds the len(nodes)-1 interior cell faces; the flux through
    face i+1/2 is faces[i]^{n-1} (x[i+1]-x[i]) / (nodes[i+1]-nodes[i]).
    Returns (off, diag) with off[i] the (i, i+1) entry.
    """
    k = faces ** (n - 1) / np.diff(nodes)
    diag = np.zeros(nodes.size)
    diag[:-1] += k
    diag[1:] += k
    return -k, diag


@njit(cache=True)
def _stiffness_loop(nodes, faces, n, off, diag):
    m = nodes.size
    for i in range(m):
        diag[i] = 0.0
    for i in range(m - 1):
        k = faces[i] ** (n - 1) / (nodes[i + 1] - nodes[i])
        off[i] = -k
        diag[i] += k
        diag[i + 1] += k
    return off, diag


def stiffness(nodes, faces, n: int):
    if not HAVE_NUMBA:
        return stiffness_numpy(nodes, faces, n)
    nodes = np.ascontiguousarray(nodes, dtype=float)
    faces = np.ascontiguousarray(faces, dtype=float)
    off = np.empty(nodes.size - 1)
    diag = np.empty(nodes.size)
    return _stiffness_loop(nodes, faces, int(n), off, diag)


# ---------------------------------------------------------------------------
# scaled power sums for L^q norms

def scaled_power_sum_numpy(weights, values, q: float):
    """(sum w |v|^q)^{1/q}, computed as max|v| * (sum w (|v|/max)^q)^{1/q}."""
    a = np.abs(values)
    m = a.max() if a.size else 0.0
    if m == 0.0:
        return 0.0
    return m * math.fsum(weights * (a / m) ** q) ** (1.0 / q)


@njit(cache=True)
def _scaled_power_loop(weights, values, q):
    m = 0.0
    for i in range(values.size):
        a = abs(values[i])
        if a > m:
            m = a
    if m == 0.0:
        return 0.0
    # Neumaier compensated summation
    s = 0.0
    c = 0.0
    for i in range(values.size):
        t = weights[i] * (abs(values[i]) / m) ** q
        u = s + t
        if abs(s) >= abs(t):
            c += (s - u) + t
        else:
            c += (t - u) + s
        s = u
    return m * (s + c) ** (1.0 / q)


def scaled_power_sum(weights, values, q: float):
    if not HAVE_NUMBA:
        return scaled_power_sum_numpy(weights, values, q)
    return float(_scaled_power_loop(np.ascontiguousarray(weights, dtype=float),
                                    np.ascontiguousarray(values, dtype=float), float(q)))


# ---------------------------------------------------------------------------
# inertia of symmetric tridiagonal pencils

def sturm_count_numpy(off, diag):
    """Number of negative eigenvalues of a symmetric tridiagonal matrix.

    Uses the LDL^T pivot recurrence; by Sylvester's law of inertia the count
    of negative pivots equals the count of negative eigenvalues.
    """
    count = 0
    d = 1.0
    tiny = np.finfo(float).tiny
    for i in range(len(diag)):
        e2 = off[i - 1] ** 2 if i > 0 else 0.0
        d = diag[i] - e2 / d
        if d == 0.0:
            d = -tiny
        if d < 0.0:
            count += 1
    return count


@njit(cache=True)
def _sturm_loop(off, diag):
    count = 0
    d = 1.0
    tiny = 2.2250738585072014e-308
    for i in range(diag.size):
        e2 = off[i - 1] * off[i - 1] if i > 0 else 0.0
        d = diag[i] - e2 / d
        if d == 0.0:
            d = -tiny
        if d < 0.0:
            count += 1
    return count


def sturm_count(off, diag):
    if not HAVE_NUMBA:
        return sturm_count_numpy(off, diag)
    return int(_sturm_loop(np.ascontiguousarray(off, dtype=float),
                           np.ascontiguousarray(diag, dtype=float)))
