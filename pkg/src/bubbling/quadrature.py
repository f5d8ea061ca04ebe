"""Integral constants of rational-decay integrands.

All integrals are of the family

    int_{R^n} |y|^s (1 + |y|^2)^{-q} dy

or its one-axis marginals.  The half-line integral is split into a core
handled by Gauss-Legendre panels in log r and two tails handled by their
exact binomial series, so no truncation error remains at double precision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi

from .bubble_core import sphere_area
from ._kernels import scaled_power_sum
from .errors import BubblingError, DivergentIntegralError


@dataclass(frozen=True)
class MomentSpec:
    n: int
    s: float
    q: float

    def __post_init__(self):
        if self.n < 1:
            raise BubblingError("moment dimension must be >= 1")
        if self.s < 0:
            raise BubblingError("moment power must be >= 0")
        if not (2.0 * self.q > self.n + self.s):
            raise DivergentIntegralError(
                f"|y|^{self.s} (1+|y|^2)^-{self.q} is not integrable on R^{self.n} (need 2q > n+s)")


@dataclass(frozen=True)
class QuadratureConfig:
    order: int = 24
    panels: int = 6
    split_low: float = 0.25
    split_high: float = 4.0
    series_terms: int = 80
    mc_samples: int = 1_000_000
    seed: int = 0


DEFAULT_CONFIG = QuadratureConfig()


@lru_cache(maxsize=16)
def _gauss(order: int):
    x, w = leggauss(order)
    return x, w


@lru_cache(maxsize=64)
def _jacobi(order: int, beta: float):
    x, w = roots_jacobi(order, 0.0, beta)
    return x, w


def _pairwise_sum(v: np.ndarray) -> float:
    # fixed reduction order, independent of how the caller chunks work
    v = np.asarray(v, dtype=float).ravel()
    while v.size > 1:
        if v.size % 2:
            v = np.append(v, 0.0)
        v = v[0::2] + v[1::2]
    return float(v[0]) if v.size else 0.0


def _binom_neg(q: float, terms: int) -> np.ndarray:
    """Coefficients of (1 + x)^{-q} = sum_k c_k x^k."""
    c = np.empty(terms)
    c[0] = 1.0
    for k in range(1, terms):
        c[k] = c[k - 1] * (-q - (k - 1)) / k
    return c


def _binom(k: float, terms: int) -> np.ndarray:
    """Coefficients of (1 + x)^k for real k."""
    c = np.empty(terms)
    c[0] = 1.0
    for j in range(1, terms):
        c[j] = c[j - 1] * (k - (j - 1)) / j
    return c


def _half_line(a: float, q: float, cfg: QuadratureConfig) -> float:
    """int_0^inf r^a (1 + r^2)^{-q} dr for a > -1, 2q > a + 1."""
    lo, hi = cfg.split_low, cfg.split_high
    c = _binom_neg(q, cfg.series_terms)
    k = np.arange(cfg.series_terms)
    low = np.sum(c * lo ** (a + 2 * k + 1) / (a + 2 * k + 1))
    high = np.sum(c * hi ** (a - 2 * q - 2 * k + 1) / (2 * q + 2 * k - a - 1))
    x, w = _gauss(cfg.order)
    edges = np.linspace(np.log(lo), np.log(hi), cfg.panels + 1)
    parts = []
    for left, right in zip(edges[:-1], edges[1:]):
        half = 0.5 * (right - left)
        t = left + half * (x + 1.0)
        r = np.exp(t)
        parts.append(half * np.sum(w * r ** (a + 1) * (1.0 + r * r) ** (-q)))
    return low + _pairwise_sum(np.array(parts)) + high


def radial_moment(spec: MomentSpec | None = None, *, n=None, s=None, q=None,
                  config: QuadratureConfig = DEFAULT_CONFIG) -> float:
    """int_{R^n} |y|^s (1 + |y|^2)^{-q} dy.

    Accepts a MomentSpec or the keywords n, s, q.
    """
    if spec is None:
        spec = MomentSpec(n=n, s=s, q=q)
    return sphere_area(spec.n) * _half_line(spec.s + spec.n - 1.0, spec.q, config)


def _check_gamma(n: int, gamma: float, shift: int):
    if shift not in (0, 2):
        raise BubblingError("shift must be 0 or 2")
    if gamma < 2.0:
        raise BubblingError("flatness order gamma must be >= 2")
    if gamma >= n:
        raise DivergentIntegralError(
            f"gamma = {gamma} >= n = {n}: the flatness integral diverges")


def flatness_constant(n: int, gamma: float, shift: int = 0, axis: int = 0,
                      config: QuadratureConfig = DEFAULT_CONFIG) -> float:
    """int_{R^n} |y_axis|^{gamma - shift} (1 + |y|^2)^{-n} dy.

    The transverse variables are integrated exactly, which leaves the 1-D
    moment int |t|^m (1 + t^2)^{-(n+1)/2} dt.
    """
    _check_gamma(n, gamma, shift)
    if not (0 <= axis < n):
        raise BubblingError(f"axis must be in 0..{n - 1}")
    m = gamma - shift
    return _transverse(n, config) * radial_moment(n=1, s=m, q=(n + 1) / 2.0, config=config)


def _transverse(n: int, config: QuadratureConfig) -> float:
    # int_{R^{n-1}} (1 + |z|^2)^{-n} dz
    return radial_moment(n=n - 1, s=0.0, q=float(n), config=config)


# ---------------------------------------------------------------------------
# shifted one-axis moments

def _tail_series(k: float, m: float, c: float, T: float, terms: int) -> float:
    """int_T^inf (y + c)^k (1 + y^2)^{-m} dy for T > 2|c|, T > 1."""
    bk = _binom(k, terms) * c ** np.arange(terms)
    bm = _binom_neg(m, terms)
    # coefficient of y^{-i} in (1 + c/y)^k (1 + y^-2)^-m
    e = np.zeros(terms)
    for l in range(0, (terms + 1) // 2):
        e[2 * l:] += bm[l] * bk[: terms - 2 * l]
    i = np.arange(terms)
    return float(np.sum(e * T ** (k - 2 * m - i + 1) / (2 * m + i - k - 1)))


def _kink_interval(k: float, m: float, kink: float, length: float, direction: float,
                   cfg: QuadratureConfig) -> float:
    """int_0^length u^k (1 + y^2)^{-m} du with y = kink + direction * u.

    Panels grow geometrically away from the kink; the innermost panel uses
    Gauss-Jacobi nodes carrying the u^k factor.
    """
    if length <= 0.0:
        return 0.0
    first = min(0.125, length)
    edges = [0.0, first]
    while edges[-1] < length:
        step = min(edges[-1], 0.5)
        edges.append(min(length, edges[-1] + step))
    parts = []
    xj, wj = _jacobi(cfg.order, float(k))
    h = edges[1]
    u = 0.5 * h * (xj + 1.0)
    y = kink + direction * u
    parts.append((0.5 * h) ** (k + 1) * np.sum(wj * (1.0 + y * y) ** (-m)))
    xg, wg = _gauss(cfg.order)
    for left, right in zip(edges[1:-1], edges[2:]):
        half = 0.5 * (right - left)
        u = left + half * (xg + 1.0)
        y = kink + direction * u
        parts.append(half * np.sum(wg * u ** k * (1.0 + y * y) ** (-m)))
    return _pairwise_sum(np.array(parts))


def line_moment(k: float, m: float, c: float = 0.0, odd: bool = False,
                config: QuadratureConfig = DEFAULT_CONFIG) -> float:
    """int_R sgn(y+c)^odd |y + c|^k (1 + y^2)^{-m} dy  (k >= 0, 2m > k + 1)."""
    if not (2.0 * m > k + 1.0):
        raise DivergentIntegralError("line moment is not integrable")
    if c == 0.0:
        if odd:
            return 0.0
        return radial_moment(n=1, s=k, q=m, config=config)
    T = 4.0 * max(1.0, abs(c))
    sign_left = -1.0 if odd else 1.0
    right_tail = _tail_series(k, m, c, T, config.series_terms)
    left_tail = _tail_series(k, m, -c, T, config.series_terms)
    kink = -c
    right_core = _kink_interval(k, m, kink, T - kink, 1.0, config)
    left_core = _kink_interval(k, m, kink, kink + T, -1.0, config)
    return right_tail + right_core + sign_left * (left_core + left_tail)


def axis_moment(n: int, k: float, c: float = 0.0, odd: bool = False,
                config: QuadratureConfig = DEFAULT_CONFIG) -> float:
    """int_{R^n} sgn(y_1+c)^odd |y_1 + c|^k (1 + |y|^2)^{-n} dy."""
    if k >= n:
        raise DivergentIntegralError(f"moment order {k} >= n = {n} diverges")
    return _transverse(n, config) * line_moment(k, (n + 1) / 2.0, c, odd, config)


def flatness_integral_tau(n: int, gamma: float, a, tau,
                          config: QuadratureConfig = DEFAULT_CONFIG) -> float:
    """sum_i a_i int_{R^n} |y_i + tau_i|^gamma (1 + |y|^2)^{-n} dy."""
    _check_gamma(n, gamma, 0)
    a = np.asarray(a, dtype=float).reshape(-1)
    tau = np.asarray(tau, dtype=float).reshape(-1)
    if a.size != n or tau.size != n:
        raise BubblingError("a and tau must have n components")
    terms = np.array([ai * axis_moment(n, gamma, ti, False, config) for ai, ti in zip(a, tau)])
    return _pairwise_sum(terms)


def flatness_integral_tau_mc(n: int, gamma: float, a, tau, samples: int = 1_000_000,
                             seed: int = 0, chunk: int = 100_000):
    """Importance-sampling estimate of flatness_integral_tau.

    Samples come from a multivariate Student-t law with n - gamma degrees of
    freedom, whose tails are heavy enough for the weights to have finite
    variance.  Returns (estimate, standard_error).
    """
    _check_gamma(n, gamma, 0)
    from scipy.special import gammaln

    a = np.asarray(a, dtype=float).reshape(-1)
    tau = np.asarray(tau, dtype=float).reshape(-1)
    nu = float(n - gamma)
    log_norm = gammaln((nu + n) / 2.0) - gammaln(nu / 2.0) - 0.5 * n * np.log(nu * np.pi)
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        z = rng.standard_normal((m, n))
        w = rng.chisquare(nu, m) / nu
        y = z / np.sqrt(w)[:, None]
        r2 = np.sum(y * y, axis=1)
        log_g = log_norm - 0.5 * (nu + n) * np.log1p(r2 / nu)
        f = np.exp(-n * np.log1p(r2) - log_g)
        vals = f * (np.abs(y + tau) ** gamma @ a)
        total += vals.sum()
        total_sq += (vals * vals).sum()
        done += m
    mean = total / samples
    var = max(total_sq / samples - mean * mean, 0.0)
    return mean, np.sqrt(var / samples)


# ---------------------------------------------------------------------------
# norms on radial grids

def gregory_weights(count: int, order: int = 5, left: bool = True, right: bool = True) -> np.ndarray:
    """Trapezoid weights on a uniform grid with Gregory end corrections.

    With ``order`` correction terms the rule integrates polynomials of
    degree <= order exactly (unit spacing).  ``right=False`` leaves the
    right end as plain trapezoid so another correction can be attached;
    ``left=False`` does the same at the left end.
    """
    coeffs = [1.0 / 12.0, 1.0 / 24.0, 19.0 / 720.0, 3.0 / 160.0, 863.0 / 60480.0,
              275.0 / 24192.0]
    if count < 2:
        raise BubblingError("need at least two nodes")
    left_end, right_end = left, right
    w = np.ones(count)
    w[0] = w[-1] = 0.5
    order = min(order, len(coeffs), count - 1)
    for k in range(1, order + 1):
        # forward difference at the left end, backward at the right end
        stencil = np.array([(-1.0) ** (k - j) * _comb(k, j) for j in range(k + 1)])
        g = coeffs[k - 1]
        left = np.zeros(count)
        if left_end:
            left[: k + 1] = stencil
        right = np.zeros(count)
        if right_end:
            right[count - k - 1:] = stencil
        if k % 2 == 1:
            w -= g * (right - left)
        else:
            w -= g * (right + left)
    return w


def exponential_end_corrections(h: float, rate: float, terms: int = 6) -> np.ndarray:
    """Right-end corrections for the trapezoid rule on integrands ~ e^{rate x} P(x).

    Returns c with c[i] the extra weight (in units of h) at the node i
    steps in from the right end, chosen so that trapezoid plus corrections
    integrates e^{rate t} t^k over t <= 0 exactly for k < terms.  With
    rate = 0 this reduces to a one-sided Gregory-type correction.
    """
    if h <= 0 or terms < 1:
        raise BubblingError("need a positive step and at least one term")
    t = -h * np.arange(terms)
    A = np.exp(rate * t)[None, :] * t[None, :] ** np.arange(terms)[:, None]
    if rate * h < 1e-3:
        raise BubblingError("rate * h too small for exponential fitting")
    # trapezoid sum over t = 0, -h, -2h, ... truncated where e^{rate t} < 1e-300
    nsum = int(math.ceil(700.0 / (rate * h))) + 1
    tt = -h * np.arange(nsum)
    e = np.exp(rate * tt)
    e[0] *= 0.5
    rhs = np.empty(terms)
    for k in range(terms):
        exact = (-1.0) ** k * math.factorial(k) / rate ** (k + 1)
        rhs[k] = exact - h * math.fsum(e * tt ** k)
    return np.linalg.solve(A, rhs) / h


def product_weights(x, density, stencil: int = 4, points: int = 12) -> np.ndarray:
    """Weights w with sum w f(x_i) ~ int f(x) density(x) dx over [x_0, x_last].

    On each panel f is replaced by its Lagrange interpolant through
    ``stencil`` neighbouring nodes (shifted inwards at the ends) and the
    product with the density is integrated by Gauss-Legendre with
    ``points`` nodes, which is exact when density is a polynomial of
    degree < 2 points - stencil + 1.
    """
    x = np.asarray(x, dtype=float)
    m = x.size
    if m < stencil:
        raise BubblingError(f"need at least {stencil} nodes")
    x_gl, w_gl = np.polynomial.legendre.leggauss(points)
    lo, hi = x[:-1], x[1:]
    half = 0.5 * (hi - lo)
    pts = 0.5 * (hi + lo)[:, None] + half[:, None] * x_gl[None, :]
    wq = half[:, None] * w_gl[None, :] * density(pts)
    first = np.clip(np.arange(m - 1) - (stencil // 2 - 1), 0, m - stencil)
    idx = first[:, None] + np.arange(stencil)[None, :]
    xs = x[idx]
    weights = np.zeros(m)
    for j in range(stencil):
        basis = np.ones_like(pts)
        for k in range(stencil):
            if k != j:
                basis *= (pts - xs[:, k:k + 1]) / (xs[:, j:j + 1] - xs[:, k:k + 1])
        np.add.at(weights, idx[:, j], np.sum(basis * wq, axis=1))
    return weights


def radial_product_weights(nodes, n: int, stencil: int = 4) -> np.ndarray:
    """Product rule for int f(r) r^{n-1} dr, exact for polynomial f of degree < stencil."""
    return product_weights(nodes, lambda r: r ** (n - 1), stencil, max(8, (n + stencil) // 2 + 1))


def _comb(k: int, j: int) -> float:
    from math import comb
    return float(comb(k, j))


def grid_lq_norm(field, q: float, n: int | None = None, grid=None) -> float:
    """(|S^{n-1}| int |field|^q r^{n-1} dr)^{1/q} on a radial grid.

    ``field`` is an array of samples (then ``grid`` must be a RadialGrid or a
    bare array of radii) or an object with ``values`` and ``grid`` attributes.
    RadialGrid objects supply weights matched to their grading; a bare radii
    array falls back to the trapezoid rule in r.
    """
    if grid is None and hasattr(field, "grid"):
        grid = field.grid
        field = field.values
    values = np.abs(np.asarray(field, dtype=float))
    if values.size == 0:
        raise BubblingError("empty grid")
    if q < 1.0:
        raise BubblingError("q must be >= 1")
    if hasattr(grid, "quadrature_weights"):
        n = grid.n if n is None else n
        weights = grid.quadrature_weights(n)
    else:
        r = np.asarray(grid, dtype=float)
        if r.size != values.size or r.size < 2:
            raise BubblingError("radii and samples must match and contain two nodes")
        dr = np.diff(r)
        weights = np.zeros_like(r)
        weights[:-1] += 0.5 * dr
        weights[1:] += 0.5 * dr
        weights = weights * r ** (n - 1)
    return sphere_area(n) ** (1.0 / q) * scaled_power_sum(weights, values, q)
