"""Radial model of the reduction scheme.

The model geometry is the flat ball of radius R_max around the concentration
point, with constant scalar curvature R_g entering only through c(n) R_g and
a radial prescribed function h(r) = -abar r^gamma.  All fields are radial
samples on a sinh-graded grid that resolves the bubble scale mu and the
unit scale of the cutoff at the same time.

Discretization is a vertex-centred finite-volume scheme: the matrix of
-Delta + q is A = S + M diag(q) with S the r^{n-1}-weighted stiffness and M
the cell volumes.  A is symmetric, so M^{-1} A is self-adjoint for the
r^{n-1} dr inner product.  Constraints are enforced with bordered solves.

Large quantities are never formed by subtracting nearly equal numbers: the
error pieces and the energy deviation are assembled from closed forms and
stable power increments (see _kernels.remainder2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.integrate import quad
from scipy.linalg import eigh_tridiagonal, solve_banded
from scipy.sparse.linalg import splu

from . import _kernels as K
from .bubble_core import (CorrectionField, CurvatureData, CutoffSpec, DimensionConstants,
                          bubble_radial, bubble_radial_derivatives, correction_rhs,
                          dim_constants, eval_cutoff, kernel_z0_radial, kernel_z1_radial,
                          sphere_area)
from .errors import (BubblingError, DimensionError, NumericalDiagnostic,
                     UnsupportedRegimeError)
from .quadrature import (exponential_end_corrections, flatness_constant, gregory_weights,
                         grid_lq_norm, product_weights, radial_moment)
from .reduced_energy import bubble_energy, expansion_constants
from .regimes import (FlatnessProfile, GeometryData, RegimeSelection, energy_exponent,
                      error_exponent, mu_value)

MIN_PANELS_PER_DECADE = 12


# ---------------------------------------------------------------------------
# grid

@dataclass(frozen=True)
class RadialGrid:
    """Nodes r_i = r_c sinh(i delta), i = 0..count, with r_count = R_max.

    Near 0 the spacing is r_c delta; beyond r_c the nodes are geometric with
    ratio exp(delta), so every decade of radius carries ln(10)/delta nodes.
    """
    n: int
    r_c: float
    delta: float
    count: int
    R_max: float
    mu: float
    nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        s = np.arange(self.count + 1) * self.delta
        nodes = self.r_c * np.sinh(s)
        nodes[-1] = self.R_max
        object.__setattr__(self, "nodes", nodes)

    @property
    def size(self) -> int:
        return self.count + 1

    @property
    def faces(self) -> np.ndarray:
        """Interior cell faces r_c sinh((i + 1/2) delta), i = 0..count-1."""
        return self.r_c * np.sinh((np.arange(self.count) + 0.5) * self.delta)

    @property
    def max_spacing(self) -> float:
        return float(np.diff(self.nodes).max())

    @property
    def nodes_per_decade(self) -> float:
        return math.log(10.0) / self.delta

    def cell_volumes(self) -> np.ndarray:
        """int r^{n-1} dr over each dual cell (without the sphere area)."""
        edges = np.concatenate([[0.0], self.faces, [self.R_max]])
        hi = edges[1:] ** self.n
        lo = edges[:-1] ** self.n
        return (hi - lo) / self.n

    def quadrature_weights(self, n: Optional[int] = None, scale: float = 1.0) -> np.ndarray:
        """Weights for int f(r) (r/scale)^{n-1} d(r/scale).

        ``scale`` lets bubble-scale integrals be summed in the variable r/mu,
        where neither weights nor integrands leave the floating-point range.

        In the mapped variable s (r = r_c sinh s) the integrand of a
        bubble-scale field is analytic in a strip, so the trapezoid rule is
        spectrally accurate in the interior.  For odd n a smooth radial
        integrand is even in s, so the trapezoid stays spectral at s = 0;
        for even n it is odd there and gets Gregory corrections.  At R_max
        the density grows like e^{ns}, faster than finite differences on
        this step can follow, so the right end gets corrections fitted to
        e^{ns} times a polynomial.
        """
        n = self.n if n is None else n
        s = np.arange(self.count + 1) * self.delta
        rc = self.r_c / scale
        density = (rc * np.sinh(s)) ** (n - 1) * rc * np.cosh(s)
        if self.count < 16:
            return product_weights(s, lambda x: (rc * np.sinh(x)) ** (n - 1) * rc * np.cosh(x),
                                   stencil=6, points=12)
        w = gregory_weights(self.count + 1, left=(n % 2 == 0), right=False)
        c = exponential_end_corrections(self.delta, float(n), terms=8)
        w[-c.size:] += c[::-1]
        return w * self.delta * density

    def refine(self) -> "RadialGrid":
        """Nested grid with half the mapped spacing."""
        return RadialGrid(n=self.n, r_c=self.r_c, delta=0.5 * self.delta,
                          count=2 * self.count, R_max=self.R_max, mu=self.mu)

    def metadata(self) -> dict:
        return {"n": self.n, "nodes": self.size, "r_c": self.r_c, "delta": self.delta,
                "R_max": self.R_max, "mu": self.mu, "first_node": float(self.nodes[1]),
                "max_spacing": self.max_spacing}


def build_grid(R_max: float, mu: float, n: int, panels_per_decade: int = 24,
               min_nodes: int = 0) -> RadialGrid:
    """Graded grid on [0, R_max] resolving the scale mu.

    The sinh scale is r_c = mu/4, so the first node sits near mu delta / 4
    and the bubble core is sampled at roughly mu/10 for the default budget.
    """
    if not (R_max > 0 and mu > 0):
        raise BubblingError("R_max and mu must be positive")
    if R_max < mu:
        raise BubblingError(f"R_max = {R_max} is smaller than the bubble scale mu = {mu}")
    if panels_per_decade < MIN_PANELS_PER_DECADE:
        raise BubblingError(f"panel budget too small: need at least {MIN_PANELS_PER_DECADE} "
                            f"panels per decade, got {panels_per_decade}")
    delta0 = math.log(10.0) / panels_per_decade
    r_c = 0.25 * mu
    span = math.asinh(R_max / r_c)
    count = max(int(math.ceil(span / delta0)), int(min_nodes) - 1, 8)
    return RadialGrid(n=n, r_c=r_c, delta=span / count, count=count, R_max=float(R_max),
                      mu=float(mu))


# ---------------------------------------------------------------------------
# model problem

@dataclass(frozen=True)
class ModelProblem:
    """Flat-ball model: geometry scalars, radialized h and background mode.

    h(r) = -h_scale * abar * r^gamma with abar = sum(a) c1 / int |y|^gamma (1+|y|^2)^{-n},
    which reproduces the flatness integral exactly.  For gamma = 2 with
    equal a_i this is the exact axis sum; otherwise it is a radial surrogate
    (``h_exact`` is False).  The background u0 is zero when R_g >= 0 and is
    computed by Newton's method when R_g < 0.
    """
    geometry: GeometryData
    profile: Optional[FlatnessProfile]
    R_max: float = 2.0
    cutoff: CutoffSpec = CutoffSpec()
    h_scale: float = 1.0
    panels_per_decade: int = 24
    min_nodes: int = 0

    def __post_init__(self):
        if self.profile is not None and len(self.profile.a) != self.geometry.n:
            raise BubblingError("flatness profile does not match the dimension")
        if not self.R_max > 0:
            raise BubblingError("R_max must be positive")
        if self.h_scale < 0:
            raise BubblingError("h_scale must be >= 0")

    @property
    def n(self) -> int:
        return self.geometry.n

    @property
    def dims(self) -> DimensionConstants:
        return dim_constants(self.n)

    @property
    def gamma(self) -> float:
        return 2.0 if self.profile is None else float(self.profile.gamma)

    @property
    def h_amplitude(self) -> float:
        if self.profile is None or self.h_scale == 0.0:
            return 0.0
        g = self.gamma
        c1 = flatness_constant(self.n, g, 0)
        return self.h_scale * self.profile.sum_a * c1 / radial_moment(n=self.n, s=g, q=float(self.n))

    @property
    def h_exact(self) -> bool:
        if self.profile is None:
            return True
        a = np.array(self.profile.a)
        return bool(self.gamma == 2.0 and np.all(a == a[0]))

    def h(self, r):
        r = np.asarray(r, dtype=float)
        return -self.h_amplitude * r ** self.gamma

    @property
    def background_zero(self) -> bool:
        return not self.geometry.R_g < 0

    def grid_for(self, mu: float) -> RadialGrid:
        return build_grid(self.R_max, mu, self.n, self.panels_per_decade, self.min_nodes)


# ---------------------------------------------------------------------------
# tridiagonal helpers

def _banded_solve(off, diag, rhs):
    """Solve a symmetric tridiagonal system after symmetric diagonal equilibration."""
    d = 1.0 / np.sqrt(np.abs(diag))
    ab = np.zeros((3, diag.size))
    ab[0, 1:] = off * d[:-1] * d[1:]
    ab[1] = diag * d * d
    ab[2, :-1] = off * d[:-1] * d[1:]
    y = solve_banded((1, 1), ab, rhs * d, check_finite=False)
    return y * d


def _equilibrated_inertia(off, diag) -> int:
    d = 1.0 / np.sqrt(np.abs(diag))
    return K.sturm_count(off * d[:-1] * d[1:], diag * d * d)


# ---------------------------------------------------------------------------
# background solution

@dataclass(frozen=True)
class Background:
    """Positive solution of -Delta u + c R_g u = (lam^2 + h) u^p, Neumann at R_max."""
    values: np.ndarray
    lam: float
    iterations: int
    residual: float

    @property
    def at_center(self) -> float:
        return float(self.values[0])


def solve_background(model: ModelProblem, grid: RadialGrid, lam: float = 0.0,
                     h_values=None, tol: float = 1e-13, max_iter: int = 100) -> Background:
    """Damped Newton iteration from a positive constant start."""
    if model.background_zero:
        return Background(values=np.zeros(grid.size), lam=lam, iterations=0, residual=0.0)
    d = model.dims
    p, cR = d.pf, d.cf * model.geometry.R_g
    h = model.h(grid.nodes) if h_values is None else np.asarray(h_values, dtype=float)
    g = lam * lam + h
    M = grid.cell_volumes()
    off, stiff = K.stiffness(grid.nodes, grid.faces, model.n)
    gbar = float(np.sum(M * g) / np.sum(M))
    if not gbar < 0:
        raise NumericalDiagnostic("lam^2 + h must be negative on average for a positive background")
    u = np.full(grid.size, (cR / gbar) ** (1.0 / (p - 1.0)))

    def residual(v):
        return K.tridiag_matvec(off, stiff, off, v) + M * (cR * v - g * v ** p)

    scale = 1.0 / np.sqrt(stiff + M)
    F = residual(u)
    fnorm = np.linalg.norm(F * scale)
    for it in range(1, max_iter + 1):
        jd = stiff + M * (cR - p * g * u ** (p - 1.0))
        step = _banded_solve(off, jd, -F)
        damp = 1.0
        while True:
            trial = u + damp * step
            if np.all(trial > 0):
                Ft = residual(trial)
                tn = np.linalg.norm(Ft * scale)
                if tn <= fnorm or damp < 1e-3:
                    break
            damp *= 0.5
            if damp < 1e-6:
                raise NumericalDiagnostic("background Newton iteration diverged")
        u, F, fnorm = trial, Ft, tn
        if np.max(np.abs(damp * step)) <= tol * np.max(np.abs(u)):
            return Background(values=u, lam=lam, iterations=it, residual=float(fnorm))
    raise NumericalDiagnostic(f"background Newton iteration did not converge in {max_iter} steps")


@dataclass(frozen=True)
class U0Eigen:
    u0: Background
    lambda_1: float
    eigenvector: np.ndarray
    grid: RadialGrid
    iterations: int


def u0_solve_and_eigen(model: ModelProblem, grid: Optional[RadialGrid] = None,
                       h_values=None, tol: float = 1e-10, max_iter: int = 500,
                       degeneracy_tol: float = 1e-8) -> U0Eigen:
    """Background u0 and the smallest eigenvalue of -Delta + c R_g - p h u0^{p-1}.

    Neumann conditions at R_max.  The eigenvalue comes from inverse power
    iteration on the pencil (A, M); positive definiteness of A is checked
    first through the inertia of its LDL^T factorization, so the iteration
    cannot lock onto an interior eigenvalue.
    """
    if not model.geometry.R_g < 0:
        raise BubblingError("the nondegeneracy model needs R_g < 0")
    if grid is None:
        grid = build_grid(model.R_max, model.R_max, model.n, model.panels_per_decade,
                          max(model.min_nodes, 200))
    h = model.h(grid.nodes) if h_values is None else np.asarray(h_values, dtype=float)
    if np.any(h > 0) or not np.any(h < 0):
        raise BubblingError("need h <= 0 and h not identically zero")
    bg = solve_background(model, grid, 0.0, h_values=h)
    d = model.dims
    p, cR = d.pf, d.cf * model.geometry.R_g
    M = grid.cell_volumes()
    off, stiff = K.stiffness(grid.nodes, grid.faces, model.n)
    diag = stiff + M * (cR - p * h * bg.values ** (p - 1.0))
    if _equilibrated_inertia(off, diag) > 0:
        raise NumericalDiagnostic("linearized operator at u0 is not positive definite (degenerate u0)")
    x = np.ones(grid.size)
    rho = None
    for it in range(1, max_iter + 1):
        y = _banded_solve(off, diag, M * x)
        x = y / math.sqrt(float(np.sum(M * y * y)))
        new = float(x @ K.tridiag_matvec(off, diag, off, x))
        if rho is not None and abs(new - rho) <= tol * abs(new):
            rho = new
            break
        rho = new
    else:
        raise NumericalDiagnostic("inverse power iteration did not converge")
    if rho <= degeneracy_tol:
        raise NumericalDiagnostic(f"smallest eigenvalue {rho:.3e} is not positive: u0 is degenerate")
    return U0Eigen(u0=bg, lambda_1=rho, eigenvector=x, grid=grid, iterations=it)


# ---------------------------------------------------------------------------
# sector operators

@dataclass(frozen=True)
class SectorOperator:
    """A = S + M diag(q + l(l+n-2)/r^2) on all nodes, with the solved block ``active``."""
    ell: int
    grid: RadialGrid
    potential: np.ndarray
    off: np.ndarray
    diag: np.ndarray
    mass: np.ndarray
    active: slice

    def apply(self, x) -> np.ndarray:
        """Full-length product A x (rows outside ``active`` included)."""
        return K.tridiag_matvec(self.off, self.diag, self.off, np.asarray(x, dtype=float))

    def pointwise(self, x) -> np.ndarray:
        """(A x)_i / M_i on the active rows: the discrete value of (-Delta + q) x."""
        a = self.active
        return self.apply(x)[a] / self.mass[a]

    def block(self):
        a = self.active
        m = self.diag[a].size
        return self.off[a.start:a.start + m - 1], self.diag[a]

    def to_sparse(self):
        off, diag = self.block()
        return sparse.diags([off, diag, off], [-1, 0, 1], format="csc")


def _sector_operator(grid: RadialGrid, ell: int, q, dirichlet: bool = True) -> SectorOperator:
    if ell < 0:
        raise BubblingError("sector index must be >= 0")
    off, stiff = K.stiffness(grid.nodes, grid.faces, grid.n)
    M = grid.cell_volumes()
    q = np.asarray(q, dtype=float)
    cent = np.zeros(grid.size)
    if ell > 0:
        # cell integral of r^{n-3} weighted by (r/r_i)^l, exact for the r^l
        # behaviour at the origin and second order elsewhere
        edges = np.concatenate([[0.0], grid.faces, [grid.R_max]])
        k = grid.n - 2 + ell
        r = grid.nodes[1:]
        cent[1:] = (ell * (ell + grid.n - 2) * (edges[2:] ** k - edges[1:-1] ** k)
                    / (k * r ** ell))
    diag = stiff + M * q + cent
    start = 0 if ell == 0 else 1
    stop = grid.size - 1 if dirichlet else grid.size
    return SectorOperator(ell=ell, grid=grid, potential=q, off=off, diag=diag, mass=M,
                          active=slice(start, stop))


def bubble_sector_operator(grid: RadialGrid, ell: int, mu: float = 1.0) -> SectorOperator:
    """-Delta - p U_mu^{p-1} in sector ell (no curvature, h, background or lambda)."""
    d = dim_constants(grid.n)
    q = -d.pf * _bubble_pot(grid.nodes, mu, grid.n)
    return _sector_operator(grid, ell, q)


def _bubble_pot(r, mu, n):
    d = dim_constants(n)
    return mu ** -2.0 * bubble_radial(r / mu, n) ** (d.pf - 1.0)


def kernel_profile(grid: RadialGrid, ell: int, mu: float = 1.0) -> np.ndarray:
    """Radial profile of the kernel fields at scale mu: Z0(r/mu) for l = 0, U'(r/mu) for l = 1."""
    if ell == 0:
        return kernel_z0_radial(grid.nodes / mu, grid.n)
    if ell == 1:
        return kernel_z1_radial(grid.nodes / mu, grid.n)
    raise BubblingError("kernel fields live in sectors 0 and 1 only")


def kernel_residual(grid: RadialGrid, ell: int, mu: float = 1.0, norm: str = "l2") -> float:
    """Relative residual of -Delta - pU^{p-1} applied to the sampled kernel profile z.

    ``norm='l2'`` uses the cell-volume weighted L^2 norm, in which the
    scheme is second order up to the origin; ``norm='max'`` is the
    pointwise maximum, first order in the first cells next to r = 0 for l >= 1.
    """
    op = bubble_sector_operator(grid, ell, mu)
    z = kernel_profile(grid, ell, mu)
    res = op.pointwise(z)
    ref = (op.potential * z)[op.active]
    if norm == "max":
        return float(np.max(np.abs(res)) / np.max(np.abs(ref)))
    if norm == "l2":
        m = op.mass[op.active]
        return float(np.sqrt(np.sum(m * res * res) / np.sum(m * ref * ref)))
    raise BubblingError("norm must be 'l2' or 'max'")


def sector_spectrum(op: SectorOperator, weight) -> np.ndarray:
    """Eigenvalues of the pencil A x = sigma diag(M w) x on the active block."""
    a = op.active
    off, diag = op.block()
    W = (op.mass * np.asarray(weight, dtype=float))[a]
    s = 1.0 / np.sqrt(W)
    return eigh_tridiagonal(diag * s * s, off * s[:-1] * s[1:], eigvals_only=True)


def kernel_eigen_counts(grid: RadialGrid, mu: float = 1.0, ells=(0, 1, 2),
                        threshold: Optional[float] = None):
    """Count near-zero eigenvalues of -Delta - pU^{p-1} relative to the weight U^{p-1}.

    With this weight the continuous spectrum is discrete (stereographic
    projection), with sigma = 0 exactly for the n+1 kernel fields.  Returns
    ({ell: count}, {ell: eigenvalues sorted by magnitude}).
    """
    thr = 10.0 * grid.delta ** 2 if threshold is None else threshold
    w = _bubble_pot(grid.nodes, mu, grid.n)
    counts, spectra = {}, {}
    for ell in ells:
        ev = sector_spectrum(bubble_sector_operator(grid, ell, mu), w)
        ev = ev[np.argsort(np.abs(ev))]
        counts[ell] = int(np.sum(np.abs(ev) < thr))
        spectra[ell] = ev
    return counts, spectra


# ---------------------------------------------------------------------------
# bordered solves

class BorderedSolver:
    """Sparse LU of [[A, -M Z], [(M Z)^T, 0]] on the active block.

    Solves A phi = M (rhs + sum_j c_j Z_j) with sum_i M_i Z_j phi_i = 0.
    Rows and columns are equilibrated before factorization and one step of
    iterative refinement is applied to every solve.
    """

    def __init__(self, op: SectorOperator, kernel_fields=()):
        self.op = op
        a = op.active
        off, diag = op.block()
        m = diag.size
        self.m = m
        self.d = 1.0 / np.sqrt(np.abs(diag))
        A = sparse.diags([off * self.d[:-1] * self.d[1:], diag * self.d * self.d,
                          off * self.d[:-1] * self.d[1:]], [-1, 0, 1], format="csc")
        cols = [(op.mass * np.asarray(z, dtype=float))[a] for z in kernel_fields]
        self.k = len(cols)
        if self.k:
            B = np.column_stack(cols) * self.d[:, None]
            self.cscale = 1.0 / np.linalg.norm(B, axis=0)
            if not np.all(np.isfinite(self.cscale)):
                raise BubblingError("kernel field vanishes on the active nodes")
            B = B * self.cscale
            self.B = np.column_stack(cols)
            Bs = sparse.csc_matrix(B)
            self.K = sparse.bmat([[A, -Bs], [Bs.T, None]], format="csc")
        else:
            self.B = np.zeros((m, 0))
            self.cscale = np.zeros(0)
            self.K = A
        try:
            self.lu = splu(self.K)
        except RuntimeError as exc:
            raise NumericalDiagnostic(
                "singular bordered matrix: grid too coarse to separate the near-kernel") from exc

    def solve(self, rhs):
        op = self.op
        a = op.active
        b = np.zeros(self.m + self.k)
        b[: self.m] = (op.mass * np.asarray(rhs, dtype=float))[a] * self.d
        y = self.lu.solve(b)
        y = y + self.lu.solve(b - self.K @ y)
        if not np.all(np.isfinite(y)):
            raise NumericalDiagnostic("bordered solve produced non-finite values")
        phi = np.zeros(op.grid.size)
        phi[a] = y[: self.m] * self.d
        c = y[self.m:] * self.cscale
        return phi, c

    def orthogonality(self, phi) -> float:
        """max_j |<phi, Z_j>_M| / (||M Z_j|| ||phi||)."""
        if self.k == 0:
            return 0.0
        v = np.asarray(phi)[self.op.active]
        if not np.any(v):
            return 0.0
        v = _unit(v)
        return float(max(abs(_unit(self.B[:, j]) @ v) for j in range(self.k)))


def _unit(v):
    """v / ||v|| with pre-scaling so tiny or huge entries do not under/overflow."""
    m = np.max(np.abs(v))
    if m == 0.0:
        return v
    w = v / m
    return w / np.linalg.norm(w)


def projected_linear_solve(op: SectorOperator, rhs, kernel_fields=()):
    """phi, c with L phi = rhs + sum c_j Z_j and <phi, Z_j> = 0 (L^2 pairing)."""
    solver = BorderedSolver(op, kernel_fields)
    return solver.solve(rhs)


def h1_norm(phi, grid: RadialGrid) -> float:
    """Discrete H^1 norm sqrt(|S^{n-1}| (phi^T S phi + phi^T M phi))."""
    off, stiff = K.stiffness(grid.nodes, grid.faces, grid.n)
    M = grid.cell_volumes()
    phi = np.asarray(phi, dtype=float)
    val = phi @ K.tridiag_matvec(off, stiff, off, phi) + np.sum(M * phi * phi)
    return math.sqrt(sphere_area(grid.n) * max(val, 0.0))


# ---------------------------------------------------------------------------
# ansatz and error field

@dataclass(frozen=True)
class AnsatzFields:
    """Samples of the blow-up term and background on a grid.

    W = chi U_mu (the correction V and the conformal factor are trivial in
    the flat model), s = lam^{(n-2)/2} u_b, and the full approximate
    solution is lam^{-(n-2)/2} (W + s).
    """
    grid: RadialGrid
    mu: float
    lam: float
    W: np.ndarray
    s: np.ndarray
    bubble: np.ndarray
    dbubble: np.ndarray
    chi: np.ndarray
    dchi: np.ndarray
    d2chi: np.ndarray
    h: np.ndarray
    background: Background

    @property
    def prefactor(self) -> float:
        return self.lam ** (-(self.grid.n - 2) / 2.0)

    @property
    def total(self) -> np.ndarray:
        return self.prefactor * (self.W + self.s)

    def nonlinear_weight(self) -> np.ndarray:
        """(lam^2 + h) p U^{p-1}, evaluated as p (1 + h/lam^2) (W + s)^{p-1}."""
        p = dim_constants(self.grid.n).pf
        return p * (1.0 + self.h / self.lam ** 2) * (self.W + self.s) ** (p - 1.0)


def _check_ansatz(model: ModelProblem, selection: RegimeSelection):
    if selection.problem != "multiplicity" or selection.ansatz not in ("w1", "w2", "w3"):
        raise UnsupportedRegimeError("the radial pipeline covers the multiplicity ansatz families")
    if selection.n != model.n:
        raise BubblingError("selection and model dimensions differ")
    if np.isfinite(model.cutoff.r) and model.cutoff.r > model.R_max:
        raise BubblingError(f"cutoff radius {model.cutoff.r} exceeds R_max = {model.R_max}")


def ansatz_fields(model: ModelProblem, grid: RadialGrid, mu: float, lam: float,
                  background: Optional[Background] = None) -> AnsatzFields:
    n = model.n
    r = grid.nodes
    u, du, _ = bubble_radial_derivatives(r / mu, n)
    bub = mu ** (-(n - 2) / 2.0) * u
    dbub = mu ** (-n / 2.0) * du
    chi = eval_cutoff(r, model.cutoff)
    dchi = eval_cutoff(r, model.cutoff, 1)
    d2chi = eval_cutoff(r, model.cutoff, 2)
    bg = solve_background(model, grid, lam) if background is None else background
    s = lam ** ((n - 2) / 2.0) * bg.values
    return AnsatzFields(grid=grid, mu=mu, lam=lam, W=chi * bub, s=s, bubble=bub, dbubble=dbub,
                        chi=chi, dchi=dchi, d2chi=d2chi, h=model.h(r), background=bg)


@dataclass(frozen=True)
class ErrorField:
    grid: RadialGrid
    mu: float
    lam: float
    E1: np.ndarray
    E2: np.ndarray
    E3: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.E1 + self.E2 + self.E3

    @property
    def exponent_q(self) -> float:
        n = self.grid.n
        return 2.0 * n / (n + 2.0)

    def norm(self, part: Optional[str] = None) -> float:
        """L^{2n/(n+2)} norm of E (or of one of 'E1', 'E2', 'E3')."""
        values = self.total if part is None else getattr(self, part)
        return grid_lq_norm(values, self.exponent_q, self.grid.n, self.grid)


def _increment_over(x, q):
    """(1+x)^q - 1 for x >= 0, without cancellation for small x."""
    return np.expm1(q * np.log1p(x))


def error_pieces(fields: AnsatzFields, model: ModelProblem):
    """E1, E2, E3 from closed forms and stable power increments.

    E1 = lam^{-(n-2)/2} [-Delta W + c R_g W - W^p] expanded through the
    cutoff identity, so the exact bubble equation cancels analytically;
    E2 = -lam^{-(n-2)/2} [(W+s)^p - W^p - s^p];
    E3 = -lam^{-(n+2)/2} h [(W+s)^p - s^p].
    """
    n = model.n
    d = model.dims
    p, cR = d.pf, d.cf * model.geometry.R_g
    r = fields.grid.nodes
    lam = fields.lam
    U, dU, chi = fields.bubble, fields.dbubble, fields.chi
    with np.errstate(divide="ignore", invalid="ignore"):
        lap_chi = fields.d2chi + np.where(r > 0, (n - 1) * fields.dchi / np.where(r > 0, r, 1.0), 0.0)
    pre = fields.prefactor
    E1 = pre * ((chi - chi ** p) * U ** p - 2.0 * fields.dchi * dU - U * lap_chi + cR * chi * U)
    W, s = fields.W, fields.s
    big = np.maximum(W, s)
    small = np.minimum(W, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(big > 0, small / np.where(big > 0, big, 1.0), 0.0)
    mixed = big ** p * (_increment_over(x, p) - x ** p)
    E2 = -pre * mixed
    # (W+s)^p - s^p: increment over s when s dominates, otherwise W^p ((1+y)^p - y^p)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(W > 0, s / np.where(W > 0, W, 1.0), 0.0)
        xs = np.where(s > 0, W / np.where(s > 0, s, 1.0), 0.0)
    inc = np.where(s >= W, s ** p * _increment_over(xs, p), W ** p * ((1.0 + y) ** p - y ** p))
    inc = np.where(W > 0, inc, 0.0)
    E3 = -(lam ** (-(n + 2) / 2.0) * fields.h) * inc
    return E1, E2, E3


def assemble_error_field(model: ModelProblem, selection: RegimeSelection, t: float, lam: float,
                         grid: Optional[RadialGrid] = None,
                         background: Optional[Background] = None) -> ErrorField:
    _check_ansatz(model, selection)
    mu = mu_value(selection, t, lam)
    grid = model.grid_for(mu) if grid is None else grid
    fields = ansatz_fields(model, grid, mu, lam, background)
    E1, E2, E3 = error_pieces(fields, model)
    for part in (E1, E2, E3):
        if not np.all(np.isfinite(part)):
            raise NumericalDiagnostic("non-finite error field on the grid")
    return ErrorField(grid=grid, mu=mu, lam=lam, E1=E1, E2=E2, E3=E3)


@dataclass(frozen=True)
class SweepResult:
    lambdas: np.ndarray
    mus: np.ndarray
    norms: np.ndarray
    slope: Optional[float]
    intercept: Optional[float]
    theoretical: float
    slack: Optional[float]


def fit_loglog_slope(x, y):
    """Least-squares slope and intercept of log y against log x."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    A = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    return float(slope), float(intercept)


def error_scaling_sweep(model: ModelProblem, selection: RegimeSelection, t: float,
                        lambdas) -> SweepResult:
    """Norms of E along the concentration law and their log-log slope."""
    lams = np.sort(np.asarray(lambdas, dtype=float))
    if lams.size < 5 or math.log10(lams[-1] / lams[0]) < 1.5 - 1e-12:
        raise BubblingError("the sweep needs at least 5 lambda values spanning 1.5 decades")
    mus, norms = [], []
    for lam in lams:
        ef = assemble_error_field(model, selection, t, lam)
        mus.append(ef.mu)
        norms.append(ef.norm())
    norms = np.array(norms)
    theo = float(error_exponent(selection))
    if np.all(norms == 0.0):
        return SweepResult(lams, np.array(mus), norms, None, None, theo, None)
    if np.any(norms <= 0.0) or np.any(np.diff(norms) < 0.0):
        raise NumericalDiagnostic("error norms are not monotone in lambda: grid under-resolved")
    slope, icpt = fit_loglog_slope(lams, norms)
    return SweepResult(lams, np.array(mus), norms, slope, icpt, theo, slope - theo)


# ---------------------------------------------------------------------------
# linear theory and contraction

def pipeline_operator(model: ModelProblem, fields: AnsatzFields) -> SectorOperator:
    """L = -Delta + c R_g - (lam^2 + h) p U^{p-1} in the radial sector, Dirichlet at R_max."""
    d = model.dims
    q = d.cf * model.geometry.R_g - fields.nonlinear_weight()
    return _sector_operator(fields.grid, 0, q)


def assemble_sector_operator(model: ModelProblem, ell: int, t: float, lam: float,
                             selection: RegimeSelection, grid: Optional[RadialGrid] = None,
                             background: Optional[Background] = None) -> SectorOperator:
    _check_ansatz(model, selection)
    mu = mu_value(selection, t, lam)
    grid = model.grid_for(mu) if grid is None else grid
    fields = ansatz_fields(model, grid, mu, lam, background)
    d = model.dims
    q = d.cf * model.geometry.R_g - fields.nonlinear_weight()
    return _sector_operator(grid, ell, q)


def smooth_test_load(r, center: float = 0.4, width: float = 0.2) -> np.ndarray:
    """C^infinity bump supported in (center - width, center + width)."""
    x = (np.asarray(r, dtype=float) - center) / width
    out = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - x[inside] ** 2))
    return out


def linear_stability_constant(model: ModelProblem, selection: RegimeSelection, t: float,
                              lam: float, load=None) -> float:
    """C = ||phi||_{H^1} / ||load||_{L^{2n/(n+2)}} for the projected solve of a fixed load."""
    _check_ansatz(model, selection)
    mu = mu_value(selection, t, lam)
    grid = model.grid_for(mu)
    fields = ansatz_fields(model, grid, mu, lam)
    op = pipeline_operator(model, fields)
    rhs = smooth_test_load(grid.nodes) if load is None else load(grid.nodes)
    phi, _ = projected_linear_solve(op, rhs, [kernel_profile(grid, 0, mu)])
    q = 2.0 * model.n / (model.n + 2.0)
    return h1_norm(phi, grid) / grid_lq_norm(rhs, q, model.n, grid)


@dataclass
class ReductionState:
    grid: RadialGrid
    t: float
    lam: float
    mu: float
    phi: np.ndarray
    c: np.ndarray
    iterations: int
    contraction_ratio: float
    ratios: list
    norm_phi: float
    norm_E: float
    eta: Optional[float]
    min_u: float
    orthogonality: float
    fixed_point_residual: float
    converged: bool
    error: ErrorField
    fields: AnsatzFields

    def diagnostics(self) -> dict:
        return {
            "grid": self.grid.metadata(),
            "t": self.t, "lambda": self.lam, "mu": self.mu,
            "iterations": self.iterations,
            "contraction_ratio": self.contraction_ratio,
            "ratios": [float(v) for v in self.ratios],
            "norm_phi_h1": self.norm_phi,
            "norm_E": self.norm_E,
            "norm_E_parts": {k: self.error.norm(k) for k in ("E1", "E2", "E3")},
            "eta": self.eta,
            "min_u": self.min_u,
            "orthogonality": self.orthogonality,
            "fixed_point_residual": self.fixed_point_residual,
            "background_at_center": self.fields.background.at_center,
            "background_newton_iterations": self.fields.background.iterations,
        }


def _taylor_term(fields: AnsatzFields, phi) -> np.ndarray:
    """(lam^2 + h) N(phi) with N(phi) = f(U+phi) - f(U) - f'(U) phi, f(u) = (u^+)^p."""
    n = fields.grid.n
    p = dim_constants(n).pf
    lam = fields.lam
    ws = fields.W + fields.s
    g = lam * lam + fields.h
    out = np.zeros_like(phi)
    pos = ws > 0
    Ubig = fields.prefactor * ws[pos]
    x = phi[pos] / Ubig
    out[pos] = g[pos] * (lam ** (-(n + 2) / 2.0) * ws[pos] ** p) * K.remainder2(x, p)
    zero = ~pos
    out[zero] = g[zero] * np.maximum(phi[zero], 0.0) ** p
    return out


def nonlinear_reduction_solve(model: ModelProblem, selection: RegimeSelection, t: float,
                              lam: float, tol: float = 1e-12, max_iter: int = 50) -> ReductionState:
    """Fixed point phi = T(-E + (lam^2 + h) N(phi)) in the radial sector.

    T is the projected solve orthogonal to Z0 at scale mu; the translation
    sectors carry no load when tau = 0, so their multipliers vanish.  The
    reported contraction ratio is the largest ratio of successive H^1
    increments.
    """
    _check_ansatz(model, selection)
    mu = mu_value(selection, t, lam)
    grid = model.grid_for(mu)
    fields = ansatz_fields(model, grid, mu, lam)
    err = assemble_error_field(model, selection, t, lam, grid=grid, background=fields.background)
    E = err.total
    op = pipeline_operator(model, fields)
    Z = kernel_profile(grid, 0, mu)
    solver = BorderedSolver(op, [Z])
    phi = np.zeros(grid.size)
    c0 = 0.0
    prev_diff = None
    ratios = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        rhs = -E + _taylor_term(fields, phi)
        new, c = solver.solve(rhs)
        diff = h1_norm(new - phi, grid)
        size = h1_norm(new, grid)
        if prev_diff is not None and prev_diff > 0:
            ratios.append(diff / prev_diff)
        phi, c0 = new, float(c[0])
        prev_diff = diff
        if diff <= tol * size or diff == 0.0:
            converged = True
            break
    if not converged:
        raise NumericalDiagnostic(f"no contraction within {max_iter} iterations")
    # residual of L phi = -E + (lam^2+h) N(phi) + c Z, projected off Z
    a = op.active
    res = (op.apply(phi) - op.mass * (-E + _taylor_term(fields, phi) + c0 * Z))[a]
    BZ = _unit((op.mass * Z)[a])
    res = res - BZ * (BZ @ res)
    ref = np.linalg.norm((op.mass * E)[a])
    fp_res = float(np.linalg.norm(res) / ref) if ref > 0 else float(np.linalg.norm(res))
    u = fields.total + phi
    support = (fields.W + fields.s) > 0
    min_u = float(np.min(u[support]))
    if min_u <= 0.0:
        raise NumericalDiagnostic(f"final u is not positive on the ansatz support (min {min_u:.3e})")
    norm_E = err.norm()
    norm_phi = h1_norm(phi, grid)
    cvec = np.zeros(model.n + 1)
    cvec[0] = c0
    return ReductionState(
        grid=grid, t=t, lam=lam, mu=mu, phi=phi, c=cvec, iterations=it,
        contraction_ratio=float(max(ratios)) if ratios else 0.0, ratios=ratios,
        norm_phi=norm_phi, norm_E=norm_E, eta=(norm_phi / norm_E) if norm_E > 0 else None,
        min_u=min_u, orthogonality=solver.orthogonality(phi), fixed_point_residual=fp_res,
        converged=converged, error=err, fields=fields)


# ---------------------------------------------------------------------------
# energy

@dataclass(frozen=True)
class EnergyResult:
    """J_lam(U + phi) = reference + deviation.

    reference = J_lam(u_b) + lam^{-(n-2)} E_bubble; the deviation is
    assembled from pointwise integrands, so its size (far below the
    rounding level of J itself) is resolved.
    """
    J: float
    reference: float
    deviation: float
    deviation_without_phi: float
    phi_part: float
    cutoff_part: float
    background_energy: float
    bubble_energy: float


def _mixed_power(a, b, q):
    """(a+b)^q - a^q - q a^{q-1} b - b^q for a, b >= 0 (stable)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.zeros_like(a)
    both = (a > 0) & (b > 0)
    A, B = a[both], b[both]
    first = B <= A
    x = np.where(first, B / A, A / B)
    val_a = A ** q * (K.remainder2(x, q) - x ** q)
    val_b = B ** q * (np.expm1(q * np.log1p(x)) - q * x ** (q - 1.0) - x ** q)
    out[both] = np.where(first, val_a, val_b)
    return out


def _cutoff_energy_correction(model: ModelProblem, mu: float) -> float:
    """int (|grad(chi U_mu)|^2 - |grad U_mu|^2)/2 - ((chi U_mu)^{p+1} - U_mu^{p+1})/(p+1) over R^n."""
    if not np.isfinite(model.cutoff.r):
        return 0.0
    n = model.n
    p = model.dims.pf
    rc = model.cutoff.r

    def integrand(r):
        u, du, _ = bubble_radial_derivatives(r / mu, n)
        U = mu ** (-(n - 2) / 2.0) * u
        dU = mu ** (-n / 2.0) * du
        chi = float(eval_cutoff(r, model.cutoff))
        dchi = float(eval_cutoff(r, model.cutoff, 1))
        grad = dchi * U + chi * dU
        val = 0.5 * (grad * grad - dU * dU) - ((chi * U) ** (p + 1.0) - U ** (p + 1.0)) / (p + 1.0)
        return val * r ** (n - 1)

    inner = quad(integrand, 0.5 * rc, rc, epsabs=0.0, epsrel=1e-12, limit=200)[0]
    outer = quad(integrand, rc, np.inf, epsabs=0.0, epsrel=1e-12, limit=200)[0]
    return sphere_area(n) * (inner + outer)


def reduced_energy_numeric(model: ModelProblem, selection: RegimeSelection, t: float, lam: float,
                           state: ReductionState) -> EnergyResult:
    """Energy of U + phi split into its lam-independent reference and the deviation.

    Uses J(u) = int |grad u|^2/2 + c R_g u^2/2 - (lam^2 + h) F(u) with
    F(u) = (u^+)^{p+1}/(p+1).  With v = lam^{-(n-2)/2} W, the cross term
    int grad u_b . grad v cancels against the background equation, leaving
    pointwise integrands; the phi contribution uses J'(U) phi = <E, phi>.
    """
    if not state.converged:
        raise BubblingError("the reduction state has not converged")
    if abs(state.lam - lam) > 0 or abs(state.t - t) > 0:
        raise BubblingError("state was computed for a different (t, lambda)")
    n = model.n
    d = model.dims
    p, cR = d.pf, d.cf * model.geometry.R_g
    area = sphere_area(n)
    grid = state.grid
    f = state.fields
    ub = f.background.values
    g = lam * lam + f.h
    v = f.prefactor * f.W
    # bubble-scale sums in x = r/mu: v^{p+1} r^{n-1} dr is scale invariant, so
    # the powers of mu and lam come out analytically instead of under/overflowing
    mu = state.mu
    ws = grid.quadrature_weights(n, scale=mu)
    bw = f.W * mu ** ((n - 2) / 2.0)
    self_term = 0.5 * cR * lam ** (-(n - 2)) * mu ** 2 * np.sum(ws * bw * bw)
    flat_term = lam ** (-n) * np.sum(ws * f.h * bw ** (p + 1.0)) / (p + 1.0)
    mixed = 0.0
    if np.any(ub):
        mixed = mu ** n * np.sum(ws * g * _mixed_power(ub, v, p + 1.0)) / (p + 1.0)
    D1 = area * (self_term - mixed - flat_term)
    cut = lam ** (-(n - 2)) * _cutoff_energy_correction(model, state.mu)
    # phi part
    M = grid.cell_volumes()
    off, stiff = K.stiffness(grid.nodes, grid.faces, n)
    phi = state.phi
    U = f.total
    pos = U > 0
    Hterm = np.zeros_like(phi)
    x = phi[pos] / U[pos]
    Hterm[pos] = U[pos] ** (p + 1.0) * K.remainder2(x, p + 1.0)
    Hterm[~pos] = np.maximum(phi[~pos], 0.0) ** (p + 1.0)
    D2 = area * (np.sum(M * state.error.total * phi)
                 + 0.5 * phi @ K.tridiag_matvec(off, stiff, off, phi)
                 + 0.5 * cR * np.sum(M * phi * phi)
                 - np.sum(M * g * Hterm) / (p + 1.0))
    Jb = area * (0.5 * ub @ K.tridiag_matvec(off, stiff, off, ub) + 0.5 * cR * np.sum(M * ub * ub)
                 - np.sum(M * g * ub ** (p + 1.0)) / (p + 1.0))
    eb = lam ** (-(n - 2)) * bubble_energy(n)
    reference = Jb + eb
    deviation = D1 + cut + D2
    return EnergyResult(J=reference + deviation, reference=reference, deviation=deviation,
                        deviation_without_phi=D1 + cut, phi_part=D2, cutoff_part=cut,
                        background_energy=Jb, bubble_energy=eb)


def model_theta(model: ModelProblem, selection: RegimeSelection, t: float,
                u0_center: float) -> float:
    """Reduced function of the model at tau = 0 from its balanced terms.

    The model carries no Weyl curvature, so the Weyl term is zero; the u0
    term uses the computed background at the centre and the flatness term
    the model's h.
    """
    n = model.n
    const = expansion_constants(n)
    names = {term.name for term in selection.balanced}
    val = 0.0
    if "u0" in names:
        val += const.A3 * u0_center * t ** ((n - 2) / 2.0)
    if "mass" in names:
        raise UnsupportedRegimeError("the flat model has no mass term")
    g = model.gamma
    flat = model.h_amplitude * radial_moment(n=n, s=g, q=float(n))
    return val - const.A2 * t ** g * flat


# ---------------------------------------------------------------------------
# correction field V

def correction_V_solve(curvature: CurvatureData, dims: DimensionConstants,
                       grid: Optional[RadialGrid] = None, tail_window=(10.0, 1000.0)) -> CorrectionField:
    """Solve -Delta V - p U^{p-1} V = RHS + nu Z0 sector by sector with <V, Z_i> = 0.

    nu comes from the solvability condition nu = -<f0, Z0>/<Z0, Z0> by
    quadrature; the multiplier of the bordered solve is not used for it,
    because on a truncated ball the spectrum of the radial operator reaches
    down to zero and does not isolate the dilation mode.  Sector 0 is then a
    bordered solve with Z0, sector 1 carries no load, sector 2 has no
    kernel and is solved directly.  Dirichlet conditions at the outer radius.
    """
    n = dims.n
    if n <= 4:
        raise DimensionError("the correction field needs n >= 5 (decay bound degenerate for n <= 4)")
    if grid is None:
        grid = build_grid(1e6, 1.0, n, 96)
    if grid.n != n:
        raise BubblingError("grid dimension does not match")
    rhs = correction_rhs(curvature, dims, grid.nodes)
    values, angular = {}, {}
    op0 = bubble_sector_operator(grid, 0)
    z0 = kernel_profile(grid, 0)
    w = grid.quadrature_weights(n)
    f0 = rhs[0].profile
    nu = -float(np.sum(w * f0 * z0) / np.sum(w * z0 * z0))
    solver = BorderedSolver(op0, [z0])
    v0, c = solver.solve(f0 + nu * z0)
    values[0] = v0
    angular[0] = None
    values[1] = np.zeros(grid.size)
    angular[1] = np.zeros(n)
    orth = solver.orthogonality(v0) if np.any(v0) else 0.0
    if np.any(rhs[2].profile):
        v2, _ = BorderedSolver(bubble_sector_operator(grid, 2)).solve(rhs[2].profile)
    else:
        v2 = np.zeros(grid.size)
    values[2] = v2
    angular[2] = rhs[2].angular
    decay = _tail_decay(grid.nodes, [v0, v2], tail_window)
    return CorrectionField(radii=grid.nodes.copy(), sector_values=values, angular=angular, nu=nu,
                           decay_exponent=decay, orthogonality=orth)


def _tail_decay(r, fields, window) -> Optional[float]:
    """Smallest fitted decay exponent -d log|V| / d log r over the window."""
    sel = (r >= window[0]) & (r <= window[1])
    exps = []
    for v in fields:
        a = np.abs(v[sel])
        if a.size < 3 or np.all(a == 0.0):
            continue
        if np.any(a == 0.0):
            return 0.0
        slope, _ = fit_loglog_slope(r[sel], a)
        exps.append(-slope)
    return min(exps) if exps else None
