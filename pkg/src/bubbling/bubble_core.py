"""Closed-form bubbles, kernel fields, cutoffs and the ansatz families.

Everything here works in the flat model geometry: geodesic coordinates are
Euclidean coordinates and the conformal factor is identically one unless a
callable is supplied.

The standard bubble is

    U(x) = alpha_n (1 + |x|^2)^{-(n-2)/2},   alpha_n = [n(n-2)]^{(n-2)/4},

the positive solution of -Delta U = U^p with p = (n+2)/(n-2).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import numpy as np
from scipy.special import gamma as gamma_fn

from .errors import DimensionError, MissingInputError, BubblingError


# ---------------------------------------------------------------------------
# dimension constants

@dataclass(frozen=True)
class DimensionConstants:
    n: int
    p: Fraction
    c_n: Fraction
    alpha_n: float

    @property
    def pf(self) -> float:
        return float(self.p)

    @property
    def cf(self) -> float:
        return float(self.c_n)


def dim_constants(n: int) -> DimensionConstants:
    """Critical exponent, conformal-Laplacian constant and bubble amplitude."""
    if int(n) != n or n <= 2:
        raise DimensionError(f"dimension must be an integer >= 3, got {n}")
    n = int(n)
    p = Fraction(n + 2, n - 2)
    c_n = Fraction(n - 2, 4 * (n - 1))
    alpha_n = float(n * (n - 2)) ** ((n - 2) / 4.0)
    return DimensionConstants(n=n, p=p, c_n=c_n, alpha_n=alpha_n)


def sphere_area(n: int) -> float:
    """Area of the unit sphere S^{n-1} in R^n, i.e. 2 pi^{n/2} / Gamma(n/2)."""
    return 2.0 * np.pi ** (n / 2.0) / gamma_fn(n / 2.0)


# ---------------------------------------------------------------------------
# radial profiles (functions of r = |y|, unit scale)

def bubble_radial(r, n: int):
    d = dim_constants(n)
    r = np.asarray(r, dtype=float)
    return d.alpha_n * (1.0 + r * r) ** (-(n - 2) / 2.0)


def bubble_radial_derivatives(r, n: int):
    """Return U, U', U'' of the unit bubble as functions of the radius."""
    d = dim_constants(n)
    r = np.asarray(r, dtype=float)
    s = 1.0 + r * r
    u = d.alpha_n * s ** (-(n - 2) / 2.0)
    du = -d.alpha_n * (n - 2) * r * s ** (-n / 2.0)
    d2u = -d.alpha_n * (n - 2) * s ** (-(n + 2) / 2.0) * (1.0 - (n - 1) * r * r)
    return u, du, d2u


def kernel_z0_radial(r, n: int):
    """Dilation mode r U'(r) + (n-2)/2 U(r) in closed form."""
    d = dim_constants(n)
    r = np.asarray(r, dtype=float)
    s = 1.0 + r * r
    return 0.5 * d.alpha_n * (n - 2) * (1.0 - r * r) * s ** (-n / 2.0)


def kernel_z1_radial(r, n: int):
    """Radial profile U'(r) of the translation modes; Z_i = U'(r) y_i / r."""
    return bubble_radial_derivatives(r, n)[1]


# ---------------------------------------------------------------------------
# bubbles

@dataclass(frozen=True)
class BubbleParams:
    dims: DimensionConstants
    mu: float
    tau: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float).reshape(-1)
        if tau.size != self.dims.n:
            raise BubblingError(f"tau must have {self.dims.n} components")
        if not (self.mu > 0.0):
            raise BubblingError("mu must be positive")
        if not (self.lam > 0.0):
            raise BubblingError("lambda must be positive")
        object.__setattr__(self, "tau", tau)

    @classmethod
    def make(cls, n: int, mu: float, tau=None, lam: float = 1.0):
        tau = np.zeros(n) if tau is None else tau
        return cls(dims=dim_constants(n), mu=float(mu), tau=tau, lam=float(lam))


def _as_points(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != n:
        raise BubblingError(f"points must have trailing dimension {n}")
    return x


def eval_bubble(x, params: BubbleParams, scaled: bool = False):
    """mu^{-(n-2)/2} U(x/mu - tau), times lambda^{-(n-2)/2} if ``scaled``.

    ``x`` may be a single point or an array of points with trailing axis n.
    """
    n = params.dims.n
    x = _as_points(x, n)
    z = x / params.mu - params.tau
    rho = np.sqrt(np.sum(z * z, axis=-1))
    val = params.mu ** (-(n - 2) / 2.0) * bubble_radial(rho, n)
    if scaled:
        val = val * params.lam ** (-(n - 2) / 2.0)
    return val


def eval_kernel_Z(i: int, x, dims: DimensionConstants):
    """Kernel fields of the linearized bubble equation at unit scale.

    Z_0 = x . grad U + (n-2)/2 U (dilations), Z_i = d_i U (translations).
    """
    n = dims.n
    if not (0 <= int(i) <= n):
        raise BubblingError(f"kernel index must lie in 0..{n}, got {i}")
    x = _as_points(x, n)
    r2 = np.sum(x * x, axis=-1)
    if i == 0:
        return 0.5 * dims.alpha_n * (n - 2) * (1.0 - r2) * (1.0 + r2) ** (-n / 2.0)
    return -dims.alpha_n * (n - 2) * x[..., i - 1] * (1.0 + r2) ** (-n / 2.0)


# ---------------------------------------------------------------------------
# cutoff

@dataclass(frozen=True)
class CutoffSpec:
    r: float = 1.0
    degree: int = 5

    def __post_init__(self):
        if not (self.r > 0.0):
            raise BubblingError("cutoff radius must be positive")
        if self.degree != 5:
            raise BubblingError("only the quintic (C^2) smoothstep is implemented")


def eval_cutoff(s, spec: CutoffSpec = CutoffSpec(), derivative: int = 0):
    """Quintic smoothstep cutoff: 1 on [0, r/2], 0 on [r, inf).

    ``derivative`` selects chi, chi' or chi'' (with respect to s).
    An infinite radius gives chi == 1.
    """
    s = np.asarray(s, dtype=float)
    if np.isinf(spec.r):
        return np.ones_like(s) if derivative == 0 else np.zeros_like(s)
    half = 0.5 * spec.r
    x = np.clip((s - half) / half, 0.0, 1.0)
    inside = (s > half) & (s < spec.r)
    if derivative == 0:
        step = x ** 3 * (10.0 - 15.0 * x + 6.0 * x * x)
        return 1.0 - step
    if derivative == 1:
        d1 = 30.0 * x * x * (1.0 - x) ** 2 / half
        return np.where(inside, -d1, 0.0)
    if derivative == 2:
        d2 = 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x) / half ** 2
        return np.where(inside, -d2, 0.0)
    raise BubblingError("cutoff derivatives above order 2 are not available")


# ---------------------------------------------------------------------------
# correction field V and curvature data

@dataclass(frozen=True)
class CurvatureData:
    """Curvature at the concentration point in normal coordinates.

    riemann: (n, n, n, n) array R[i, a, b, j]; christoffel_lin: (n, n) array
    G[l, k] = sum_i d_l Gamma^k_ii, or the full (n, n, n) array
    [l, k, i] which is summed over i; scalar: R_g.
    """
    n: int
    riemann: np.ndarray
    christoffel_lin: np.ndarray
    scalar: float = 0.0

    def __post_init__(self):
        n = self.n
        R = np.asarray(self.riemann, dtype=float)
        G = np.asarray(self.christoffel_lin, dtype=float)
        if R.shape != (n, n, n, n):
            raise BubblingError("riemann must have shape (n, n, n, n)")
        if G.shape == (n, n, n):
            G = G.sum(axis=2)
        if G.shape != (n, n):
            raise BubblingError("christoffel_lin must have shape (n, n) or (n, n, n)")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(G)) and np.isfinite(self.scalar)):
            raise BubblingError("curvature entries must be finite")
        tol = 1e-12 * (1.0 + np.abs(R).max())
        if (np.abs(R + R.transpose(1, 0, 2, 3)).max() > tol
                or np.abs(R + R.transpose(0, 1, 3, 2)).max() > tol
                or np.abs(R - R.transpose(2, 3, 0, 1)).max() > tol):
            raise BubblingError("riemann does not have the curvature-tensor symmetries")
        object.__setattr__(self, "riemann", R)
        object.__setattr__(self, "christoffel_lin", G)

    @classmethod
    def flat(cls, n: int, scalar: float = 0.0):
        return cls(n=n, riemann=np.zeros((n, n, n, n)),
                   christoffel_lin=np.zeros((n, n)), scalar=scalar)

    def quadratic_forms(self):
        """Symmetric matrices Q, G with RHS = -(rU')(Q/3 + G):yhat yhat - c R U."""
        Q = np.einsum("iabi->ab", self.riemann)
        Q = 0.5 * (Q + Q.T)
        G = 0.5 * (self.christoffel_lin + self.christoffel_lin.T)
        return Q, G


@dataclass(frozen=True)
class SectorRHS:
    """Sector component: radial profile times an angular coefficient.

    For l = 0 the angular factor is 1; for l = 2 it is the trace-free
    symmetric matrix P with field(y) = profile(|y|) * P : yhat yhat.
    """
    ell: int
    profile: np.ndarray
    angular: Optional[np.ndarray] = None


def correction_rhs(curvature: CurvatureData, dims: DimensionConstants, radii,
                   sectors=(0, 1, 2)):
    """Sector decomposition of the right-hand side of the V equation.

    The source is -(1/3) R_iabj y_a y_b d_ij U - d_l Gamma^k_ii y_l d_k U
    - c(n) R_g U; the nu Z_0 term is left to the solver.  Antisymmetry of the
    curvature tensor removes the U'' part, so everything is a multiple of
    r U'(r) times a quadratic form in yhat, plus the scalar term.
    """
    n = dims.n
    if curvature.n != n:
        raise BubblingError("curvature dimension does not match")
    for ell in sectors:
        if ell not in (0, 1, 2):
            raise BubblingError(f"unsupported sector {ell}; only l = 0, 1, 2 are available")
    r = np.asarray(radii, dtype=float)
    u, du, _ = bubble_radial_derivatives(r, n)
    ru = r * du
    Q, G = curvature.quadratic_forms()
    A = Q / 3.0 + G
    trace = np.trace(A)
    out = {}
    if 0 in sectors:
        out[0] = SectorRHS(0, -ru * trace / n - dims.cf * curvature.scalar * u)
    if 1 in sectors:
        out[1] = SectorRHS(1, np.zeros_like(r), np.zeros(n))
    if 2 in sectors:
        P = A - trace / n * np.eye(n)
        if np.abs(P).max() == 0.0:
            out[2] = SectorRHS(2, np.zeros_like(r), P)
        else:
            out[2] = SectorRHS(2, -ru, P)
    return out


def correction_rhs_pointwise(curvature: CurvatureData, dims: DimensionConstants, y):
    """Full source evaluated at points y (used to cross-check the sector split)."""
    n = dims.n
    y = _as_points(y, n)
    r2 = np.sum(y * y, axis=-1)
    r = np.sqrt(r2)
    u, du, d2u = bubble_radial_derivatives(r, n)
    with np.errstate(invalid="ignore", divide="ignore"):
        yhat = np.where(r[..., None] > 0, y / r[..., None], 0.0)
        du_over_r = np.where(r > 0, du / np.where(r > 0, r, 1.0), d2u)
    eye = np.eye(n)
    hess = (d2u[..., None, None] * yhat[..., :, None] * yhat[..., None, :]
            + du_over_r[..., None, None] * (eye - yhat[..., :, None] * yhat[..., None, :]))
    grad = du[..., None] * yhat
    t1 = -np.einsum("iabj,...a,...b,...ij->...", curvature.riemann, y, y, hess) / 3.0
    t2 = -np.einsum("lk,...l,...k->...", curvature.christoffel_lin, y, grad)
    return t1 + t2 - dims.cf * curvature.scalar * u


@dataclass(frozen=True)
class CorrectionField:
    """Correction V stored per sector on a radial grid.

    sector_values[l] are radial samples; angular[l] is the angular
    coefficient (trace-free matrix for l = 2).  nu is the multiplier of Z_0.
    The solver fills in the fitted tail decay exponent and the largest
    relative discrete inner product with the kernel fields.
    """
    radii: np.ndarray
    sector_values: dict
    angular: dict
    nu: float
    decay_exponent: Optional[float] = None
    orthogonality: Optional[float] = None

    def evaluate(self, y):
        y = np.asarray(y, dtype=float)
        r = np.sqrt(np.sum(y * y, axis=-1))
        out = np.zeros_like(r)
        with np.errstate(invalid="ignore", divide="ignore"):
            yhat = np.where(r[..., None] > 0, y / np.where(r > 0, r, 1.0)[..., None], 0.0)
        for ell, vals in self.sector_values.items():
            radial = np.interp(r, self.radii, vals, right=0.0)
            if ell == 0:
                out = out + radial
            elif ell == 2:
                P = self.angular[2]
                out = out + radial * np.einsum("ab,...a,...b->...", P, yhat, yhat)
            elif ell == 1:
                out = out + radial * (yhat @ self.angular[1])
        return out


# ---------------------------------------------------------------------------
# ansatz families

def IDENTITY_FACTOR(x):
    """Conformal factor of the flat model (identically one)."""
    x = np.asarray(x, dtype=float)
    return np.ones(x.shape[:-1])


def eval_ansatz_W(x, params: BubbleParams, regime: str,
                  correction: Optional[CorrectionField] = None,
                  conformal_factor: Optional[Callable] = None,
                  cutoff: CutoffSpec = CutoffSpec()):
    """Blowing-up term W for the three multiplicity ansatz families.

    w1 = chi U_mu, w2 = chi (U_mu + mu^2 V_mu), w3 = chi Lambda U_mu, with
    U_mu(x) = mu^{-(n-2)/2} U(x/mu - tau) and V_mu likewise.  ``regime`` may
    be a RegimeSelection or one of 'w1', 'w2', 'w3'.
    """
    ansatz = getattr(regime, "ansatz", regime)
    n = params.dims.n
    x = _as_points(x, n)
    d = np.sqrt(np.sum(x * x, axis=-1))
    chi = eval_cutoff(d, cutoff)
    base = eval_bubble(x, params)
    if ansatz == "w1":
        return chi * base
    if ansatz == "w2":
        if correction is None:
            raise MissingInputError("the w2 ansatz needs a correction field V")
        z = x / params.mu - params.tau
        v = params.mu ** (-(n - 2) / 2.0) * correction.evaluate(z)
        return chi * (base + params.mu ** 2 * v)
    if ansatz == "w3":
        if conformal_factor is None:
            raise MissingInputError("the w3 ansatz needs a conformal factor (IDENTITY_FACTOR in the flat model)")
        return chi * conformal_factor(x) * base
    raise BubblingError(f"unknown ansatz {ansatz!r}")


def green_beta(n: int) -> float:
    """beta_n = (n-2) |S^{n-1}|, the normalization of the Green function."""
    return (n - 2) * sphere_area(n)


def flat_green(n: int, mass: float = 0.0):
    """Flat-model Green profile 1/(beta_n d^{n-2}) + mass."""
    b = green_beta(n)

    def g(d):
        d = np.asarray(d, dtype=float)
        with np.errstate(divide="ignore"):
            return 1.0 / (b * d ** (n - 2)) + mass
    return g


def eval_green_ansatz(x, params: BubbleParams, green_profile: Callable,
                      r: float = 1.0, r0: Optional[float] = None):
    """Green-type ansatz G(x) * What(x) of the positive case.

    What = beta_n lam^{-(n-2)/2} mu^{-(n-2)/2} d^{n-2} U(x/mu - tau) for
    d = |x| <= r and the constant cap with d = r and |x/mu| = r0/mu beyond.
    At the cap the offset tau is dropped, which keeps the cap independent
    of the direction of x.
    """
    n = params.dims.n
    r0 = r if r0 is None else r0
    x = _as_points(x, n)
    d = np.sqrt(np.sum(x * x, axis=-1))
    g = np.asarray(green_profile(d), dtype=float)
    if not np.all(np.isfinite(g)):
        raise BubblingError("green profile is undefined at some evaluation point")
    pref = green_beta(n) * (params.lam * params.mu) ** (-(n - 2) / 2.0)
    inner = pref * d ** (n - 2) * bubble_radial(
        np.sqrt(np.sum((x / params.mu - params.tau) ** 2, axis=-1)), n)
    cap = pref * r ** (n - 2) * bubble_radial(r0 / params.mu, n)
    return g * np.where(d <= r, inner, cap)


# ---------------------------------------------------------------------------
# elementary inequalities for powers (used to bound the error pieces)

def power_difference_ratio(q: float, a, b):
    """|((a+b)^+)^q - a^q| divided by the right-hand side of the first bound."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lhs = np.abs(np.maximum(a + b, 0.0) ** q - a ** q)
    ab = np.abs(b)
    if q < 1.0:
        rhs = np.minimum(ab ** q, a ** (q - 1.0) * ab)
    else:
        rhs = ab ** q + a ** (q - 1.0) * ab
    return lhs / rhs


def taylor_remainder_ratio(q: float, a, b):
    """|((a+b)^+)^{q+1} - a^{q+1} - (q+1) a^q b| over the second bound."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lhs = np.abs(np.maximum(a + b, 0.0) ** (q + 1.0) - a ** (q + 1.0) - (q + 1.0) * a ** q * b)
    ab = np.abs(b)
    if q < 1.0:
        rhs = np.minimum(ab ** (q + 1.0), a ** (q - 1.0) * b * b)
    else:
        rhs = ab ** (q + 1.0) + a ** (q - 1.0) * b * b
    return lhs / rhs


def sample_power_pairs(samples: int, seed: int):
    """Random (a, b) with a > 0 log-uniform and b/a spread over six decades, both signs."""
    rng = np.random.default_rng(seed)
    a = 10.0 ** rng.uniform(-3.0, 3.0, samples)
    ratio = 10.0 ** rng.uniform(-3.0, 3.0, samples)
    sign = np.where(rng.random(samples) < 0.5, -1.0, 1.0)
    return a, sign * ratio * a


@dataclass(frozen=True)
class PowerBoundCalibration:
    q: float
    c_first: float
    c_second: float
    samples: int
    seed: int


def calibrate_power_bounds(q: float, samples: int = 10_000, seed: int = 0,
                           margin: float = 1.01) -> PowerBoundCalibration:
    """Constant c(q) = margin * empirical sup of both ratios on a seeded sample."""
    a, b = sample_power_pairs(samples, seed)
    r1 = power_difference_ratio(q, a, b)
    r2 = taylor_remainder_ratio(q, a, b)
    if not (np.all(np.isfinite(r1)) and np.all(np.isfinite(r2))):
        raise BubblingError("non-finite ratio in the calibration sample")
    return PowerBoundCalibration(q=q, c_first=margin * float(r1.max()),
                                 c_second=margin * float(r2.max()),
                                 samples=samples, seed=seed)


def check_power_bounds(cal: PowerBoundCalibration, samples: int = 10_000, seed: int = 1):
    """Fraction of a fresh sample satisfying both bounds with the calibrated constants."""
    a, b = sample_power_pairs(samples, seed)
    ok1 = power_difference_ratio(cal.q, a, b) <= cal.c_first
    ok2 = taylor_remainder_ratio(cal.q, a, b) <= cal.c_second
    return float(np.mean(ok1)), float(np.mean(ok2))
