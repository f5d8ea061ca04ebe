"""Finite-dimensional reduced problem.

The model reduced function is

    Theta(t, tau) = t^beta - t^gamma sum_i a_i int |y_i + tau_i|^gamma f(y) dy,
    f(y) = A (1 + |y|^2)^{-n},

whose explicit critical point (t0, 0) drives the existence argument.
Gradient and Hessian are obtained by differentiating under the integral,
which needs the shifted axis moments of orders gamma, gamma-1 and gamma-2.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .bubble_core import dim_constants
from .errors import (BubblingError, DegenerateSpecError, MissingInputError,
                     NoCriticalPointError, NumericalDiagnostic)
from .quadrature import axis_moment, flatness_constant, flatness_integral_tau, radial_moment
from .regimes import (FlatnessProfile, GeometryData, RegimeSelection, energy_exponent,
                      mu_value)


# ---------------------------------------------------------------------------
# Theta

@dataclass(frozen=True)
class ThetaSpec:
    n: int
    beta: float
    gamma: float
    a: np.ndarray
    weight_amplitude: float = 1.0
    c1: float = field(default=0.0, init=False)
    c2: float = field(default=0.0, init=False)

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(-1)
        if a.size != self.n:
            raise BubblingError(f"a must have {self.n} components")
        if not self.beta > 0:
            raise BubblingError("beta must be positive")
        if self.gamma < 2:
            raise BubblingError("gamma < 2: the Hessian integral diverges at the kink")
        if not self.weight_amplitude > 0:
            raise BubblingError("weight amplitude must be positive")
        object.__setattr__(self, "a", a)
        A = self.weight_amplitude
        object.__setattr__(self, "c1", A * flatness_constant(self.n, self.gamma, 0))
        object.__setattr__(self, "c2", A * flatness_constant(self.n, self.gamma, 2))


@dataclass(frozen=True)
class ThetaEval:
    value: float
    grad: np.ndarray
    hess: np.ndarray


def _moments(spec: ThetaSpec, tau: np.ndarray):
    """Per-axis integrals of |y+c|^g, sgn|y+c|^{g-1} g, |y+c|^{g-2} g(g-1) against f."""
    n, g, A = spec.n, spec.gamma, spec.weight_amplitude
    if g == 2.0:
        m0 = axis_moment(n, 0.0)
        m2 = axis_moment(n, 2.0)
        s = A * (m2 + tau * tau * m0)
        d1 = A * 2.0 * tau * m0
        d2 = np.full_like(tau, A * 2.0 * m0)
        return s, d1, d2
    s = np.array([A * axis_moment(n, g, c) for c in tau])
    d1 = np.array([A * g * axis_moment(n, g - 1.0, c, odd=True) for c in tau])
    d2 = np.array([A * g * (g - 1.0) * axis_moment(n, g - 2.0, c) for c in tau])
    return s, d1, d2


def theta_eval_grad_hess(spec: ThetaSpec, t: float, tau) -> ThetaEval:
    """Value, gradient in (t, tau_1..tau_n) and Hessian of Theta."""
    if not t > 0:
        raise BubblingError("t must be positive")
    tau = np.asarray(tau, dtype=float).reshape(-1)
    if tau.size != spec.n:
        raise BubblingError(f"tau must have {spec.n} components")
    b, g, a = spec.beta, spec.gamma, spec.a
    s, d1, d2 = _moments(spec, tau)
    S = float(np.dot(a, s))
    value = t ** b - t ** g * S
    grad = np.empty(spec.n + 1)
    grad[0] = b * t ** (b - 1) - g * t ** (g - 1) * S
    grad[1:] = -t ** g * a * d1
    hess = np.zeros((spec.n + 1, spec.n + 1))
    hess[0, 0] = b * (b - 1) * t ** (b - 2) - g * (g - 1) * t ** (g - 2) * S
    hess[0, 1:] = hess[1:, 0] = -g * t ** (g - 1) * a * d1
    hess[1:, 1:] = np.diag(-t ** g * a * d2)
    return ThetaEval(value=value, grad=grad, hess=hess)


def is_nondegenerate(beta: float, gamma: float, a) -> bool:
    """The critical point (t0, 0) is nondegenerate iff beta != gamma and all a_i != 0."""
    return bool(beta != gamma and np.all(np.asarray(a, dtype=float) != 0.0))


@dataclass(frozen=True)
class CriticalPoint:
    t0: float
    tau0: np.ndarray
    hessian: np.ndarray
    nondegenerate: bool

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.hessian)

    @property
    def kind(self) -> str:
        ev = self.eigenvalues
        if not self.nondegenerate:
            return "degenerate"
        if np.all(ev < 0):
            return "local max"
        if np.all(ev > 0):
            return "local min"
        return "saddle"


def theta_critical_point(spec: ThetaSpec) -> CriticalPoint:
    """Closed-form critical point t0 = (beta/(c1 gamma sum a))^{1/(gamma-beta)}, tau = 0."""
    sum_a = float(spec.a.sum())
    if not sum_a > 0:
        raise NoCriticalPointError("sum of a_i must be positive for a critical point with t > 0")
    if spec.beta == spec.gamma:
        raise DegenerateSpecError("beta == gamma: the t-direction of the Hessian vanishes")
    t0 = (spec.beta / (spec.c1 * spec.gamma * sum_a)) ** (1.0 / (spec.gamma - spec.beta))
    ev = theta_eval_grad_hess(spec, t0, np.zeros(spec.n))
    return CriticalPoint(t0=t0, tau0=np.zeros(spec.n), hessian=ev.hess,
                         nondegenerate=is_nondegenerate(spec.beta, spec.gamma, spec.a))


def theta_hessian_formula(spec: ThetaSpec, t0: float) -> np.ndarray:
    """Diagonal Hessian at (t0, 0) from the closed form."""
    b, g = spec.beta, spec.gamma
    diag = np.concatenate([[b * (b - g) * t0 ** (b - 2)], -g * (g - 1) * spec.c2 * t0 ** g * spec.a])
    return np.diag(diag)


def theta_newton(spec: ThetaSpec, t: float, tau, tol: float = 1e-12, max_iter: int = 60):
    """Damped Newton iteration on grad Theta = 0 from (t, tau).

    Returns (t, tau, converged); keeps t positive by step halving.
    """
    x = np.concatenate([[t], np.asarray(tau, dtype=float)])
    for _ in range(max_iter):
        ev = theta_eval_grad_hess(spec, x[0], x[1:])
        gnorm = np.linalg.norm(ev.grad)
        if gnorm < tol * (1.0 + abs(ev.value)):
            return x[0], x[1:], True
        try:
            step = np.linalg.solve(ev.hess, -ev.grad)
        except np.linalg.LinAlgError:
            return x[0], x[1:], False
        damp = 1.0
        while x[0] + damp * step[0] <= 0 and damp > 1e-8:
            damp *= 0.5
        x = x + damp * step
    ev = theta_eval_grad_hess(spec, x[0], x[1:])
    return x[0], x[1:], bool(np.linalg.norm(ev.grad) < 1e3 * tol * (1.0 + abs(ev.value)))


def landscape_rows(spec: ThetaSpec, t_values, tau_offsets):
    """Theta on the grid {t} x {tau = s e_i}: rows of (t, tau, theta, |grad|, eig_min, eig_max)."""
    rows = []
    taus = [np.zeros(spec.n)]
    for i in range(spec.n):
        for s in tau_offsets:
            if s == 0:
                continue
            v = np.zeros(spec.n)
            v[i] = s
            taus.append(v)
    for t in t_values:
        for tau in taus:
            ev = theta_eval_grad_hess(spec, float(t), tau)
            eig = np.linalg.eigvalsh(ev.hess)
            rows.append((float(t), tau.copy(), ev.value, float(np.linalg.norm(ev.grad)),
                         float(eig[0]), float(eig[-1])))
    return rows


# ---------------------------------------------------------------------------
# expansion constants

@dataclass(frozen=True)
class BackgroundIntegrals:
    """Integrals of the unperturbed solution u0 entering A0.

    quadratic = int (|grad u0|^2 + c(n) R_g u0^2) / 2
    power = int u0^{p+1},  h_power = int h u0^{p+1}
    """
    quadratic: float = 0.0
    power: float = 0.0
    h_power: float = 0.0

    @classmethod
    def zero(cls):
        return cls()


@dataclass(frozen=True)
class ExpansionConstants:
    n: int
    A0: float
    A1: Optional[float]
    A2: float
    A3: float
    bubble_energy: float
    background_energy: float

    def reference_energy(self, lam: float) -> float:
        """Energy of u0 plus the lambda-scaled bubble: background + lam^{-(n-2)} bubble energy."""
        return self.background_energy + lam ** (-(self.n - 2)) * self.bubble_energy


def bubble_energy(n: int) -> float:
    """int (|grad U|^2/2 - U^{p+1}/(p+1)) over R^n, equal to (1/n) int U^{p+1}."""
    d = dim_constants(n)
    return d.alpha_n ** (d.pf + 1.0) * radial_moment(n=n, s=0.0, q=float(n)) / n


def expansion_constants(n: int, u0_data: Optional[BackgroundIntegrals] = None,
                        lam: float = 0.0, A1: Optional[float] = None,
                        require_A1: bool = False) -> ExpansionConstants:
    """A0..A3 of the reduced-energy expansion.

    A2 = alpha_n^{p+1}/(p+1), A3 = alpha_n^p int (1+|y|^2)^{-(n+2)/2}; A0 adds
    the energy of u0 (with the lambda^2 term) to the Euclidean bubble energy.
    A1 is an external constant and must be supplied for the Weyl branches.
    """
    d = dim_constants(n)
    p = d.pf
    if require_A1 and A1 is None:
        raise MissingInputError("the Weyl branch needs the constant A1 as an input")
    A2 = d.alpha_n ** (p + 1.0) / (p + 1.0)
    A3 = d.alpha_n ** p * radial_moment(n=n, s=0.0, q=(n + 2) / 2.0)
    u0_data = BackgroundIntegrals.zero() if u0_data is None else u0_data
    # the energy whose critical points solve the equation carries -(lam^2 + h) F(u)
    background = (u0_data.quadratic - lam * lam * u0_data.power / (p + 1.0)
                  - u0_data.h_power / (p + 1.0))
    eb = bubble_energy(n)
    return ExpansionConstants(n=n, A0=background + eb, A1=A1, A2=A2, A3=A3,
                              bubble_energy=eb, background_energy=background)


# ---------------------------------------------------------------------------
# expansions

@dataclass(frozen=True)
class EnergyExpansion:
    value: float
    deviation: float
    theta: Optional[float]
    exponent: Optional[Fraction]
    branch: str
    theta_alt: Optional[float] = None
    log_terms: Optional[tuple] = None


def _leading_coefficient(branch: str, constants: ExpansionConstants, geometry: GeometryData):
    if branch == "weyl":
        if constants.A1 is None:
            raise MissingInputError("the Weyl branch needs the constant A1")
        return constants.A1 * geometry.weyl_sq
    if branch == "u0":
        return constants.A3 * geometry.u0_at_xi
    if branch == "mass":
        if geometry.mass is None:
            raise MissingInputError("the mass branch needs the mass m(xi)")
        return constants.A3 * geometry.mass
    raise BubblingError(f"no power-law coefficient for branch {branch}")


def _branch_beta(branch: str, n: int) -> float:
    return {"weyl": 4.0, "u0": (n - 2) / 2.0, "mass": float(n - 2)}[branch]


def reduced_energy_expansion(selection: RegimeSelection, constants: ExpansionConstants,
                             geometry: GeometryData, profile: FlatnessProfile,
                             t: float, tau, lam: float) -> EnergyExpansion:
    """A0 - lambda^e Theta(t, tau) for the branch selected by the regime.

    For the Weyl branch the alternative orientation of the A1 term is
    returned in ``theta_alt``; the logarithmic branch returns its two terms.
    """
    n = selection.n
    if constants.n != n or geometry.n != n:
        raise BubblingError("dimension mismatch between regime, constants and geometry")
    gamma = float(profile.gamma)
    flat = flatness_integral_tau(n, gamma, profile.a, tau)
    branch = selection.energy_branch
    if branch == "log":
        if constants.A1 is None:
            raise MissingInputError("the logarithmic branch needs the constant A1")
        mu = mu_value(selection, t, lam)
        weyl_term = -constants.A1 * geometry.weyl_sq * mu ** 4 * np.log(mu) / lam ** 4
        flat_term = -constants.A2 * mu ** (2.0 + float(selection.alpha)) / lam ** 6 * flat
        dev = weyl_term + flat_term
        return EnergyExpansion(value=constants.A0 - dev, deviation=dev, theta=None,
                               exponent=None, branch=branch, log_terms=(weyl_term, flat_term))
    coef = _leading_coefficient(branch, constants, geometry)
    b = _branch_beta(branch, n)
    flat_part = constants.A2 * t ** gamma * flat
    theta = coef * t ** b - flat_part
    theta_alt = -coef * t ** b - flat_part if branch == "weyl" else None
    e = energy_exponent(selection)
    dev = lam ** float(e) * theta
    return EnergyExpansion(value=constants.A0 - dev, deviation=dev, theta=theta, exponent=e,
                           branch=branch, theta_alt=theta_alt)


def theta_spec_for(selection: RegimeSelection, constants: ExpansionConstants,
                   geometry: GeometryData, profile: FlatnessProfile) -> tuple:
    """Normalized ThetaSpec of the regime plus the factor k with Theta_branch = k Theta_spec."""
    branch = selection.energy_branch
    if branch == "log":
        raise BubblingError("the logarithmic branch has no power-law reduced function")
    coef = _leading_coefficient(branch, constants, geometry)
    if not coef > 0:
        raise NoCriticalPointError(
            f"leading coefficient of the {branch} branch must be positive (got {coef})")
    spec = ThetaSpec(n=selection.n, beta=_branch_beta(branch, selection.n),
                     gamma=float(profile.gamma), a=np.array(profile.a),
                     weight_amplitude=constants.A2 / coef)
    return spec, coef
