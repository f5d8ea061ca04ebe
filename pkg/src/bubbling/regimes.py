"""Concentration-rate regimes.

A regime fixes the ansatz, the law mu = t lambda^beta (or the logarithmic
law in dimension six), the admissible range of the flatness excess alpha,
and the lambda-powers of the error and of the reduced-energy deviation.

Exponents are exact rationals.  beta and the energy exponent are derived
by balancing the two leading terms of the energy expansion, each written
as mu^a / lambda^b; the closed-form expressions are kept separately for
cross-checking.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .errors import (AmbiguousGeometryError, BubblingError, InadmissibleAlphaError,
                     UnsupportedRegimeError)

PROBLEMS = ("multiplicity", "positive")


def as_fraction(x) -> Fraction:
    """Exact rational from an int, Fraction, decimal string or float (via its repr)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    if isinstance(x, str):
        return Fraction(x.strip())
    return Fraction(repr(float(x)))


def fraction_str(x: Fraction) -> str:
    x = Fraction(x)
    if x.denominator == 1:
        return str(x.numerator)
    return f"{x.numerator}/{x.denominator}"


# ---------------------------------------------------------------------------
# data

@dataclass(frozen=True)
class GeometryData:
    n: int
    R_g: float = 0.0
    weyl_sq: float = 0.0
    lcf: bool = False
    u0_at_xi: float = 0.0
    mass: Optional[float] = None

    def __post_init__(self):
        if self.n < 3:
            raise BubblingError("dimension must be >= 3")
        if self.weyl_sq < 0:
            raise BubblingError("weyl_sq must be >= 0")
        if self.lcf and self.weyl_sq > 0:
            raise AmbiguousGeometryError(
                "a locally conformally flat metric has vanishing Weyl tensor; got weyl_sq > 0")
        if self.u0_at_xi < 0:
            raise BubblingError("u0_at_xi must be >= 0")


@dataclass(frozen=True)
class FlatnessProfile:
    gamma: Fraction
    a: tuple

    def __post_init__(self):
        g = as_fraction(self.gamma)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        if g < 2:
            raise BubblingError("flatness order gamma must be >= 2")
        if any(v == 0.0 for v in self.a):
            raise BubblingError("all axis coefficients a_i must be nonzero")

    @classmethod
    def from_alpha(cls, alpha, a):
        return cls(gamma=as_fraction(alpha) + 2, a=tuple(a))

    @property
    def alpha(self) -> Fraction:
        return self.gamma - 2

    @property
    def sum_a(self) -> float:
        return float(sum(self.a))


@dataclass(frozen=True)
class Window:
    lo: Fraction
    hi: Fraction
    lo_closed: bool = False
    hi_closed: bool = False

    def contains(self, alpha: Fraction) -> bool:
        above = alpha >= self.lo if self.lo_closed else alpha > self.lo
        below = alpha <= self.hi if self.hi_closed else alpha < self.hi
        return above and below

    def describe(self) -> str:
        left = "[" if self.lo_closed else "("
        right = "]" if self.hi_closed else ")"
        return f"{left}{fraction_str(self.lo)}, {fraction_str(self.hi)}{right}"

    def lattice(self, steps: int = 8):
        """Rational interior points (and the closed endpoints) of the window."""
        pts = [self.lo + (self.hi - self.lo) * Fraction(k, steps) for k in range(1, steps)]
        if self.lo_closed:
            pts.insert(0, self.lo)
        if self.hi_closed:
            pts.append(self.hi)
        return pts


@dataclass(frozen=True)
class Term:
    """A reduced-energy contribution of size mu^mu_power / lambda^lam_power."""
    name: str
    mu_power: Fraction
    lam_power: Fraction

    def power(self, beta: Fraction) -> Fraction:
        return self.mu_power * beta - self.lam_power


def _terms(n: int, alpha: Fraction):
    n = Fraction(n)
    return {
        "weyl": Term("weyl", Fraction(4), n - 2),
        "u0": Term("u0", (n - 2) / 2, (n - 2) / 2),
        "mass": Term("mass", n - 2, n - 2),
        "flat": Term("flat", 2 + alpha, n),
    }


@dataclass(frozen=True)
class LogLawDeviation:
    """Two-term deviation of the logarithmic regime (no single power of lambda)."""
    weyl_term: str = "mu^4 |ln mu| / lambda^4"
    flat_term: str = "mu^(2+alpha) / lambda^6"


@dataclass(frozen=True)
class RegimeSelection:
    problem: str
    n: int
    alpha: Fraction
    ansatz: str
    law: str
    mu_exponent: Optional[Fraction]
    log_law: bool
    alpha_window: Window
    balanced: tuple
    discarded: tuple = ()
    error_slack: float = 0.0

    @property
    def beta(self):
        return self.mu_exponent

    @property
    def energy_branch(self) -> str:
        """Which reduced function applies: 'weyl', 'u0', 'mass' or 'log'."""
        if self.log_law:
            return "log"
        names = {t.name for t in self.balanced}
        for key in ("weyl", "u0", "mass"):
            if key in names:
                return key
        raise UnsupportedRegimeError("no leading term")

    def to_report(self) -> dict:
        ee = None
        if self.problem == "multiplicity":
            ee = fraction_str(error_exponent(self))
        en = energy_exponent(self)
        report = {
            "problem": self.problem,
            "n": self.n,
            "alpha": fraction_str(self.alpha),
            "ansatz": self.ansatz,
            "law": self.law,
            "beta": None if self.mu_exponent is None else fraction_str(self.mu_exponent),
            "alpha_window": [fraction_str(self.alpha_window.lo), fraction_str(self.alpha_window.hi)],
            "alpha_window_closed": [self.alpha_window.lo_closed, self.alpha_window.hi_closed],
            "error_exponent": ee,
            "error_slack": self.error_slack,
            "energy_exponent": None if isinstance(en, LogLawDeviation) else fraction_str(en),
            "log_law": self.log_law,
        }
        if isinstance(en, LogLawDeviation):
            report["energy_terms"] = [en.weyl_term, en.flat_term]
        else:
            printed = printed_energy_exponent(self)
            report["energy_exponent_printed"] = fraction_str(printed)
            report["energy_exponent_mismatch"] = printed != en
        return report


# ---------------------------------------------------------------------------
# classification

def _law_for(n: int, geometry: GeometryData, problem: str):
    """(law, ansatz, window, balanced names, discarded names) independent of alpha."""
    F = Fraction
    weyl = geometry.weyl_sq > 0
    if problem == "multiplicity":
        if 3 <= n <= 5:
            return "mu1", "w1", Window(F(0), F(n - 2), lo_closed=True), ("u0", "flat"), ("weyl",)
        if 6 <= n <= 9:
            hi = min(F(16, n - 2), F(n * n - 6 * n + 16, 2 * (n - 2)))
            return "mu9", "w2", Window(F(n - 6, 2), hi), ("u0", "flat"), ("weyl",)
        if weyl:
            return "mu2", "w2", Window(F(2), F(2 * n, n - 2)), ("weyl", "flat"), ("u0",)
        if geometry.lcf:
            return ("mu3", "w3", Window(F(n - 6, 2), F(n * n - 6 * n + 16, 2 * (n - 2))),
                    ("u0", "flat"), ())
        raise UnsupportedRegimeError(
            f"n = {n} needs either a non-vanishing Weyl tensor or a locally conformally flat metric")
    if problem == "positive":
        if n <= 5 or geometry.lcf:
            return "green", "green", Window(F(n - 4), F(n - 2)), ("mass", "flat"), ()
        if n == 6 and weyl:
            return "log", "w2", Window(F(2), F(4)), (), ()
        if n >= 7 and weyl:
            return "weyl", "w2", Window(F(2), F(n - 2)), ("weyl", "flat"), ()
        raise UnsupportedRegimeError(
            f"positive case with n = {n} needs Weyl != 0 or a locally conformally flat metric")
    raise BubblingError(f"unknown problem {problem!r}; expected one of {PROBLEMS}")


def balance_beta(t1: Term, t2: Term) -> Fraction:
    """beta making mu^a1/lambda^b1 and mu^a2/lambda^b2 equal under mu = lambda^beta."""
    if t1.mu_power == t2.mu_power:
        raise BubblingError("terms with equal mu-power cannot be balanced")
    return (t1.lam_power - t2.lam_power) / (t1.mu_power - t2.mu_power)


def classify_regime(geometry: GeometryData, profile: FlatnessProfile,
                    problem: str = "multiplicity", error_slack: float = 0.0) -> RegimeSelection:
    """Select ansatz, concentration law and exponents for (n, geometry, alpha)."""
    n = geometry.n
    if len(profile.a) != n:
        raise BubblingError(f"the flatness profile has {len(profile.a)} coefficients, expected {n}")
    if problem == "positive" and not geometry.R_g > 0:
        raise BubblingError("the positive-existence case needs R_g > 0")
    law, ansatz, window, bal, disc = _law_for(n, geometry, problem)
    alpha = profile.alpha
    if not window.contains(alpha):
        raise InadmissibleAlphaError(
            f"alpha = {fraction_str(alpha)} is outside the admissible window {window.describe()} "
            f"for the {law} law (n = {n})", window=window)
    terms = _terms(n, alpha)
    balanced = tuple(terms[k] for k in bal)
    discarded = tuple(terms[k] for k in disc)
    beta = None if law == "log" else balance_beta(*balanced)
    # the multiplicity laws need mu/lambda -> 0; the positive case only mu -> 0
    floor = 1 if problem == "multiplicity" else 0
    if beta is not None and beta <= floor:
        raise BubblingError(f"derived beta = {beta} is not > {floor}")
    return RegimeSelection(problem=problem, n=n, alpha=alpha, ansatz=ansatz, law=law,
                           mu_exponent=beta, log_law=(law == "log"), alpha_window=window,
                           balanced=balanced, discarded=discarded, error_slack=error_slack)


def regime_table(n: int):
    """All concentration laws available in dimension n, as report rows."""
    F = Fraction
    rows = []
    variants = [
        ("multiplicity", GeometryData(n=n, weyl_sq=1.0)),
        ("multiplicity", GeometryData(n=n, lcf=True)),
        ("positive", GeometryData(n=n, R_g=1.0, weyl_sq=1.0)),
        ("positive", GeometryData(n=n, R_g=1.0, lcf=True)),
    ]
    seen = set()
    for problem, geo in variants:
        try:
            law, ansatz, window, bal, _ = _law_for(n, geo, problem)
        except UnsupportedRegimeError:
            continue
        if (problem, law) in seen:
            continue
        seen.add((problem, law))
        rows.append({
            "problem": problem,
            "geometry": "lcf" if geo.lcf else "weyl!=0",
            "law": law,
            "ansatz": ansatz,
            "alpha_window": window.describe(),
            "beta": printed_beta_formula(law),
        })
    return rows


def printed_beta_formula(law: str) -> str:
    return {
        "mu1": "(n+2)/(2a-n+6)",
        "mu9": "(n+2)/(2a-n+6)",
        "mu3": "(n+2)/(2a-n+6)",
        "mu2": "2/(a-2)",
        "green": "2/(4+a-n)",
        "weyl": "2/(a-2)",
        "log": "t * ell^{-1}(lambda^2)",
    }[law]


def printed_mu_exponent(law: str, n: int, alpha: Fraction) -> Optional[Fraction]:
    """Closed-form beta as stated for each law."""
    alpha = as_fraction(alpha)
    if law in ("mu1", "mu9", "mu3"):
        return Fraction(n + 2) / (2 * alpha - n + 6)
    if law in ("mu2", "weyl"):
        return Fraction(2) / (alpha - 2)
    if law == "green":
        return Fraction(2) / (4 + alpha - n)
    return None


# ---------------------------------------------------------------------------
# laws

def mu_value(selection, t: float, lam: float, ell_orientation: str = "vanishing") -> float:
    """mu = t lambda^beta, or t ell^{-1}(lambda^2) in the logarithmic regime.

    ``selection`` may be a RegimeSelection or a bare exponent beta.
    """
    if t <= 0 or lam <= 0:
        raise BubblingError("t and lambda must be positive")
    if isinstance(selection, RegimeSelection) and selection.log_law:
        mu = t * invert_ell(lam * lam, selection.alpha, orientation=ell_orientation)
    else:
        positive = isinstance(selection, RegimeSelection) and selection.problem == "positive"
        beta = selection.mu_exponent if isinstance(selection, RegimeSelection) else selection
        beta = as_fraction(beta)
        if beta <= (0 if positive else 1):
            raise BubblingError(f"concentration exponent beta = {beta} must exceed 1")
        mu = t * lam ** float(beta)
        if beta <= 1:
            # positive Weyl branch with alpha >= 4: mu -> 0 but mu/lambda does not
            return mu
    if not mu < lam:
        raise BubblingError(f"mu/lambda = {mu / lam:.3g} >= 1: lambda is above the regime ceiling")
    return mu


def ell_function(mu, alpha, orientation: str = "vanishing"):
    """-mu^{alpha-2} ln mu (default) or the printed -mu^{2-alpha} ln mu."""
    k = float(alpha) - 2.0
    mu = np.asarray(mu, dtype=float)
    if orientation == "vanishing":
        return -mu ** k * np.log(mu)
    if orientation == "printed":
        return -mu ** (-k) * np.log(mu)
    raise BubblingError("orientation must be 'vanishing' or 'printed'")


def invert_ell(v: float, alpha, orientation: str = "vanishing") -> float:
    """Small-mu root of ell(mu) = v.

    In the default orientation ell increases on (0, exp(-1/(alpha-2))) and
    the root is taken there; the printed orientation decreases on (0, 1).
    """
    alpha_f = float(alpha)
    if not (2.0 < alpha_f < 4.0):
        raise BubblingError("the logarithmic law needs 2 < alpha < 4")
    if not v > 0:
        raise BubblingError("v must be positive")
    k = alpha_f - 2.0
    lv = np.log(v)
    if orientation == "vanishing":
        # in x = ln mu: ln(-x) + k x = ln v, increasing on x < -1/k
        top = -1.0 / k
        if lv > np.log(-top) + k * top:
            raise BubblingError(f"no root: v = {v} exceeds the maximum of ell on the small branch")
        F = lambda x: np.log(-x) + k * x - lv
    elif orientation == "printed":
        # ln(-x) - k x = ln v, decreasing on x < 0
        top = -1e-300
        F = lambda x: -(np.log(-x) - k * x - lv)
    else:
        raise BubblingError("orientation must be 'vanishing' or 'printed'")
    lo = min(-1.0, top) - 1.0
    while F(lo) > 0:
        lo *= 2.0
        if lo < -1e6:
            raise BubblingError("no root in bracket")
    if F(top) < 0:
        raise BubblingError("no root in bracket")
    x = brentq(F, lo, top, xtol=1e-15, rtol=1e-15, maxiter=500)
    return float(np.exp(x))


def error_exponent(selection: RegimeSelection) -> Fraction:
    """lambda-power of the L^{2n/(n+2)} error bound (slack reported separately)."""
    if selection.problem != "multiplicity":
        raise UnsupportedRegimeError("the error estimate covers the multiplicity regimes only")
    n, a = Fraction(selection.n), selection.alpha
    if selection.law == "mu2":
        return (2 * (n + 2) - a * (n - 2)) / 2
    return ((n - 2 - a) * (n - 2)) / (2 * (2 * a - n + 6))


def energy_exponent(selection: RegimeSelection):
    """lambda-power of the reduced-energy deviation from the balanced terms.

    For the logarithmic law the deviation is the two-term expression in
    LogLawDeviation.
    """
    if selection.log_law:
        return LogLawDeviation()
    powers = [t.power(selection.mu_exponent) for t in selection.balanced]
    if powers[0] != powers[1]:
        raise BubblingError("balanced terms do not balance")
    return min(powers + [t.power(selection.mu_exponent) for t in selection.discarded])


def printed_energy_exponent(selection: RegimeSelection) -> Fraction:
    """Closed-form deviation exponent as stated for each branch.

    For the mass branch of the positive case the stated exponent
    (n-6-alpha)(n-2)/(4+alpha-n) differs from the balance value; it is
    returned here so callers can report the mismatch.
    """
    n, a = Fraction(selection.n), selection.alpha
    law = selection.law
    if law in ("mu2", "weyl"):
        return (2 * (n + 2) - a * (n - 2)) / (a - 2)
    if law in ("mu1", "mu9", "mu3"):
        return (n - 2 - a) * (n - 2) / (2 * a - n + 6)
    if law == "green":
        return (n - 6 - a) * (n - 2) / (4 + a - n)
    raise UnsupportedRegimeError("the logarithmic law has no single exponent")


def regime_report_json(selection: RegimeSelection) -> str:
    return json.dumps(selection.to_report(), sort_keys=True, indent=2)
