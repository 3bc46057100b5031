"""Explicit finite-difference Fokker-Planck solvers.

All problems share one 2D drift-diffusion stepper for

    d rho/dt = -d(v1 rho)/dx - d(v2 rho)/dy
               + (1/2) [D11 rho_xx + 2 D12 rho_xy + D22 rho_yy]

with forward Euler in time, central differences in space, the 4-point
cross-derivative stencil, and Dirichlet-zero edges.  The drift term can be
differenced in flux form (``"conservative"``, the default) or after the
product-rule expansion ``-div(v) rho - v . grad(rho)`` (``"expanded"``).  The
two agree for smooth drifts; near the 1/z singularity of the oscillator
drift only the flux form is stable (see ``tests/test_fokker_planck.py``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .wavefunction import V_MAX, QuantumState, _hermite_pair, drift_divergence, born_density

log = logging.getLogger(__name__)

FORMS = ("conservative", "expanded")
KINDS = ("bohmian_1d", "complex_2d", "duffing")
# dt <= SAFETY * h^2 / max D_ii and dt <= SAFETY * h / max|v|
SAFETY = 0.2
# undershoot below -UNDERSHOOT_REL * max(rho) counts toward the rejection rule
UNDERSHOOT_REL = 1e-6
MAX_UNDERSHOOT_FRACTION = 1e-3
GROWTH_LIMIT = 10.0
MASS_TOLERANCE = 0.05


class FpInstabilityError(ArithmeticError):
    """The explicit scheme diverged or was configured outside its stability bound."""


class UnderResolvedError(FpInstabilityError):
    """Too many cells needed clipping in a single step."""


# --------------------------------------------------------------------------
# fields and grids


def _axis(lo: float, hi: float, n: int) -> np.ndarray:
    # built around the midpoint so symmetric ranges give exactly antisymmetric nodes
    mid = 0.5 * (lo + hi)
    step = (hi - lo) / (n - 1)
    return mid + (np.arange(n) - 0.5 * (n - 1)) * step


@dataclass
class Field1D:
    x_min: float
    x_max: float
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or len(self.values) < 3:
            raise ValueError("1D field needs at least 3 nodes")

    @property
    def nx(self) -> int:
        return len(self.values)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def x(self) -> np.ndarray:
        return _axis(self.x_min, self.x_max, self.nx)

    def with_values(self, values) -> "Field1D":
        return replace(self, values=values)


@dataclass
class Field2D:
    """Density sampled on a uniform grid; ``values[i, j]`` sits at (x_i, y_j)."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or min(self.values.shape) < 3:
            raise ValueError("2D field needs at least 3x3 nodes")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("empty grid range")

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / (self.ny - 1)

    @property
    def x(self) -> np.ndarray:
        return _axis(self.x_min, self.x_max, self.nx)

    @property
    def y(self) -> np.ndarray:
        return _axis(self.y_min, self.y_max, self.ny)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, indexing="ij")

    def with_values(self, values) -> "Field2D":
        return replace(self, values=values)


@dataclass(frozen=True)
class Grid:
    """Grid geometry without values.  ``ny == 0`` marks a 1D grid."""

    x_min: float
    x_max: float
    nx: int
    y_min: float = 0.0
    y_max: float = 0.0
    ny: int = 0

    @classmethod
    def offset(cls, half_width: float, spacing: float, dims: int = 2) -> "Grid":
        """Symmetric grid with nodes at +-(k + 1/2) * spacing, never at 0.

        The outermost nodes sit half a cell inside ``+-half_width`` and carry
        the Dirichlet-zero condition.
        """
        n = 2 * int(round(half_width / spacing))
        edge = (0.5 * n - 0.5) * spacing
        if dims == 1:
            return cls(-edge, edge, n)
        return cls(-edge, edge, n, -edge, edge, n)

    @classmethod
    def square(cls, half_width: float, n: int) -> "Grid":
        return cls(-half_width, half_width, n, -half_width, half_width, n)

    @property
    def dims(self) -> int:
        return 1 if self.ny == 0 else 2

    def field(self, values) -> Field1D | Field2D:
        if self.dims == 1:
            return Field1D(self.x_min, self.x_max, values)
        return Field2D(self.x_min, self.x_max, self.y_min, self.y_max, values)

    def zeros(self) -> Field1D | Field2D:
        shape = (self.nx,) if self.dims == 1 else (self.nx, self.ny)
        return self.field(np.zeros(shape))


def node_aligned_spacing(state: QuantumState, target: float) -> float:
    """Spacing near ``target`` that puts the outermost node of ``state`` on a cell corner.

    On an offset grid the corners sit at integer multiples of the spacing, so
    the origin is always one.  For n <= 3 every node then lies on a corner and
    no grid point comes closer than half a diagonal to a drift singularity.
    """
    nodes = state.nodes()
    if nodes.size == 0 or nodes[-1] <= 0:
        return float(target)
    a = float(nodes[-1])
    return a / max(1, round(a / target))


def field_mass(field: Field1D | Field2D) -> float:
    """Trapezoid-rule integral of the field over its grid."""
    if isinstance(field, Field1D):
        return float(np.trapezoid(field.values, field.x))
    return float(np.trapezoid(np.trapezoid(field.values, field.y, axis=1), field.x))


def _apply_dirichlet(v: np.ndarray) -> np.ndarray:
    v[0] = 0.0
    v[-1] = 0.0
    if v.ndim == 2:
        v[:, 0] = 0.0
        v[:, -1] = 0.0
    return v


def normalized(field):
    m = field_mass(field)
    if not m > 0:
        raise ValueError("cannot normalize a field with zero mass")
    return field.with_values(field.values / m)


# --------------------------------------------------------------------------
# stencil kernels


@numba.njit(cache=True)
def _kernel_2d(r, out, v1, v2, div, d11, d12, d22, dt, hx, hy, conservative, neg_tol):
    nx, ny = r.shape
    cx = 1.0 / (2.0 * hx)
    cy = 1.0 / (2.0 * hy)
    cxx = 0.5 * d11 / (hx * hx)
    cyy = 0.5 * d22 / (hy * hy)
    cxy = d12 / (4.0 * hx * hy)
    n_neg = 0
    n_bad = 0
    peak = 0.0
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            c = r[i, j]
            if conservative:
                adv = -(v1[i + 1, j] * r[i + 1, j] - v1[i - 1, j] * r[i - 1, j]) * cx
                adv -= (v2[i, j + 1] * r[i, j + 1] - v2[i, j - 1] * r[i, j - 1]) * cy
            else:
                adv = -div[i, j] * c
                adv -= v1[i, j] * (r[i + 1, j] - r[i - 1, j]) * cx
                adv -= v2[i, j] * (r[i, j + 1] - r[i, j - 1]) * cy
            dif = cxx * (r[i + 1, j] - 2.0 * c + r[i - 1, j])
            dif += cyy * (r[i, j + 1] - 2.0 * c + r[i, j - 1])
            dif += cxy * (r[i + 1, j + 1] - r[i + 1, j - 1] - r[i - 1, j + 1] + r[i - 1, j - 1])
            val = c + dt * (adv + dif)
            if val < 0.0:
                n_neg += 1
                if val < -neg_tol:
                    n_bad += 1
                val = 0.0
            if val > peak:
                peak = val
            out[i, j] = val
    for i in range(nx):
        out[i, 0] = 0.0
        out[i, ny - 1] = 0.0
    for j in range(ny):
        out[0, j] = 0.0
        out[nx - 1, j] = 0.0
    return n_neg, n_bad, peak


@numba.njit(cache=True)
def _kernel_1d(r, out, v, div, d, dt, h, conservative, neg_tol):
    n = r.shape[0]
    c1 = 1.0 / (2.0 * h)
    c2 = 0.5 * d / (h * h)
    n_neg = 0
    n_bad = 0
    peak = 0.0
    for i in range(1, n - 1):
        c = r[i]
        if conservative:
            adv = -(v[i + 1] * r[i + 1] - v[i - 1] * r[i - 1]) * c1
        else:
            adv = -div[i] * c - v[i] * (r[i + 1] - r[i - 1]) * c1
        val = c + dt * (adv + c2 * (r[i + 1] - 2.0 * c + r[i - 1]))
        if val < 0.0:
            n_neg += 1
            if val < -neg_tol:
                n_bad += 1
            val = 0.0
        if val > peak:
            peak = val
        out[i] = val
    out[0] = 0.0
    out[n - 1] = 0.0
    return n_neg, n_bad, peak


# --------------------------------------------------------------------------
# operators


@dataclass
class ClipStats:
    steps: int = 0
    clipped: int = 0
    significant: int = 0
    worst_step_fraction: float = 0.0

    def record(self, n_neg: int, n_bad: int, n_cells: int) -> None:
        self.steps += 1
        self.clipped += n_neg
        self.significant += n_bad
        self.worst_step_fraction = max(self.worst_step_fraction, n_bad / n_cells)


@dataclass
class DriftDiffusion:
    """Coefficient arrays of a drift-diffusion operator on a fixed grid.

    ``diffusion`` is the constant matrix D = sigma sigma^T (1x1 in 1D, 2x2 in
    2D); the PDE carries D/2.  ``divergence`` is only used by the expanded form.
    """

    grid: Grid
    drift: tuple
    diffusion: np.ndarray
    divergence: np.ndarray | None = None
    form: str = "conservative"

    def __post_init__(self) -> None:
        if self.form not in FORMS:
            raise ValueError(f"form must be one of {FORMS}")
        self.drift = tuple(np.ascontiguousarray(v, dtype=float) for v in self.drift)
        self.diffusion = np.atleast_2d(np.asarray(self.diffusion, dtype=float))
        if self.form == "expanded" and self.divergence is None:
            self.divergence = _numerical_divergence(self.grid, self.drift)
        if self.divergence is not None:
            self.divergence = np.ascontiguousarray(self.divergence, dtype=float)

    def max_stable_dt(self) -> float:
        g = self.grid
        h = g.nx and (g.x_max - g.x_min) / (g.nx - 1)
        if g.dims == 2:
            h = min(h, (g.y_max - g.y_min) / (g.ny - 1))
        d = float(np.max(np.diag(self.diffusion)))
        vmax = max(float(np.max(np.abs(v))) for v in self.drift)
        bounds = [math.inf]
        if d > 0:
            bounds.append(SAFETY * h * h / d)
        if vmax > 0:
            bounds.append(SAFETY * h / vmax)
        return min(bounds)

    def check_dt(self, dt: float) -> None:
        limit = self.max_stable_dt()
        if dt > limit:
            raise FpInstabilityError(f"dt={dt:g} exceeds the explicit stability bound {limit:.3g}")

    def apply(self, values: np.ndarray, dt: float, out: np.ndarray | None = None, stats: ClipStats | None = None):
        if out is None:
            out = np.empty_like(values)
        neg_tol = UNDERSHOOT_REL * float(np.max(values)) if values.size else 0.0
        neg_tol = max(neg_tol, 1e-300)
        conservative = self.form == "conservative"
        g = self.grid
        if g.dims == 1:
            div = self.divergence if self.divergence is not None else self.drift[0]
            n_neg, n_bad, peak = _kernel_1d(
                values, out, self.drift[0], div, float(self.diffusion[0, 0]), dt,
                (g.x_max - g.x_min) / (g.nx - 1), conservative, neg_tol,
            )
        else:
            div = self.divergence if self.divergence is not None else self.drift[0]
            d = self.diffusion
            n_neg, n_bad, peak = _kernel_2d(
                values, out, self.drift[0], self.drift[1], div,
                float(d[0, 0]), float(0.5 * (d[0, 1] + d[1, 0])), float(d[1, 1]), dt,
                (g.x_max - g.x_min) / (g.nx - 1), (g.y_max - g.y_min) / (g.ny - 1),
                conservative, neg_tol,
            )
        if stats is not None:
            stats.record(n_neg, n_bad, values.size)
        return out, n_bad, peak


def _numerical_divergence(grid: Grid, drift) -> np.ndarray:
    f = grid.zeros()
    if grid.dims == 1:
        return np.gradient(drift[0], f.x)
    return np.gradient(drift[0], f.x, axis=0) + np.gradient(drift[1], f.y, axis=1)


def _clamp_planar(vx, vy, v_max):
    mag = np.hypot(vx, vy)
    scale = np.where(mag > v_max, v_max / np.where(mag > 0, mag, 1.0), 1.0)
    return vx * scale, vy * scale


def complex_operator(state: QuantumState, grid: Grid, form: str = "conservative", v_max: float = V_MAX) -> DriftDiffusion:
    """Planar FP operator of the complex SDE: drift (Re u*, Im u*), noise (-D, D), D^2 = 1/2."""
    f = grid.zeros()
    X, Y = f.mesh()
    z = X + 1j * Y
    h, h_prev = _hermite_pair(state.n, z)
    u = -1j * (2.0 * state.n * h_prev / h - z)
    vx, vy = _clamp_planar(u.real, u.imag, v_max)
    d2 = 0.5
    diffusion = np.array([[d2, -d2], [-d2, d2]])
    div = drift_divergence(state, z) if form == "expanded" else None
    return DriftDiffusion(grid, (vx, vy), diffusion, div, form)


def bohmian_operator(state: QuantumState, grid: Grid, form: str = "conservative", v_max: float = V_MAX) -> DriftDiffusion:
    """1D FP operator of dx = v_B dt + dw (unit diffusion, so D/2 = 1/2)."""
    x = grid.zeros().x
    n = state.n
    h, h1 = _hermite_pair(n, x)
    h2 = _hermite_pair(n - 2, x)[0] if n >= 2 else np.zeros_like(x)
    r1 = 2.0 * n * h1 / h
    v = np.clip(r1 - x, -v_max, v_max)
    # v' = H''/H - (H'/H)^2 - 1
    dv = 4.0 * n * (n - 1) * h2 / h - r1 * r1 - 1.0
    return DriftDiffusion(grid, (v,), np.array([[1.0]]), dv if form == "expanded" else None, form)


@dataclass(frozen=True)
class DuffingParams:
    alpha: float = 0.25
    beta: float = -1.0
    gamma: float = 0.2
    sigma: float = 1.0


def duffing_operator(params: DuffingParams, grid: Grid, form: str = "conservative") -> DriftDiffusion:
    """Phase-space FP operator of Y' = -2 alpha Y - beta X - gamma X^3 + sigma W, X' = Y."""
    f = grid.zeros()
    X, Y = f.mesh()
    vx = Y.copy()
    vy = -(2.0 * params.alpha * Y + params.beta * X + params.gamma * X**3)
    diffusion = np.array([[0.0, 0.0], [0.0, params.sigma**2]])
    div = np.full_like(X, -2.0 * params.alpha)
    return DriftDiffusion(grid, (vx, vy), diffusion, div, form)


def _grid_of(field) -> Grid:
    if isinstance(field, Field1D):
        return Grid(field.x_min, field.x_max, field.nx)
    return Grid(field.x_min, field.x_max, field.nx, field.y_min, field.y_max, field.ny)


def fp_step_1d(rho: Field1D, dt: float, state: QuantumState = QuantumState(1), form: str = "conservative",
               operator: DriftDiffusion | None = None) -> Field1D:
    """One explicit step of d rho/dt = -d(v_B rho)/dx + (1/2) rho_xx."""
    op = operator or bohmian_operator(state, _grid_of(rho), form)
    out, _, peak = op.apply(_apply_dirichlet(rho.values.copy()), dt)
    _guard_growth(peak, float(np.max(rho.values)))
    return rho.with_values(out)


def fp_step_2d(rho: Field2D, drift, dt: float, *, diffusion=((0.5, -0.5), (-0.5, 0.5)), divergence=None,
               form: str = "conservative") -> Field2D:
    """One explicit step of the planar drift-diffusion equation.

    ``drift`` is the pair of arrays (v_R, v_I) on the field's grid; the
    default diffusion matrix is that of the complex SDE, D^2 [[1, -1], [-1, 1]]
    with D^2 = 1/2.
    """
    op = DriftDiffusion(_grid_of(rho), tuple(drift), np.asarray(diffusion), divergence, form)
    out, _, peak = op.apply(_apply_dirichlet(rho.values.copy()), dt)
    _guard_growth(peak, float(np.max(rho.values)))
    return rho.with_values(out)


def duffing_step(rho: Field2D, params: DuffingParams, dt: float, form: str = "conservative") -> Field2D:
    """One explicit step of d rho/dt = d[(2aY + bX + gX^3) rho]/dY - Y rho_X + (s^2/2) rho_YY."""
    op = duffing_operator(params, _grid_of(rho), form)
    out, _, peak = op.apply(_apply_dirichlet(rho.values.copy()), dt)
    _guard_growth(peak, float(np.max(rho.values)))
    return rho.with_values(out)


def _guard_growth(peak: float, reference: float) -> None:
    if not math.isfinite(peak) or (reference > 0 and peak > GROWTH_LIMIT * reference):
        raise FpInstabilityError(
            f"max density grew from {reference:.3g} to {peak:.3g}; reduce dt or refine the grid (CFL)"
        )


# --------------------------------------------------------------------------
# analytic densities and initial conditions


def duffing_exact(params: DuffingParams, X, Y):
    """Unnormalized stationary Duffing density exp{-(2a/s^2)(Y^2 + bX^2 + (g/2)X^4)}."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    k = 2.0 * params.alpha / params.sigma**2
    return np.exp(-k * (Y * Y + params.beta * X * X + 0.5 * params.gamma * X**4))


def duffing_exact_field(params: DuffingParams, grid: Grid) -> Field2D:
    """Stationary Duffing density sampled on ``grid`` with unit trapezoid mass."""
    if params.gamma <= 0:
        raise ValueError("gamma must be positive for a normalizable density")
    f = grid.zeros()
    X, Y = f.mesh()
    return normalized(f.with_values(duffing_exact(params, X, Y)))


def gaussian_initial(mu1: float, mu2: float, theta1: float, theta2: float, grid: Grid) -> Field2D:
    """exp[-((X - mu1)/(2 theta1))^2 - ((Y - mu2)/(2 theta2))^2] / (2 pi theta1 theta2), renormalized."""
    if not (theta1 > 0 and theta2 > 0):
        raise ValueError("Gaussian widths must be positive")
    f = grid.zeros()
    X, Y = f.mesh()
    vals = np.exp(-(((X - mu1) / (2 * theta1)) ** 2) - ((Y - mu2) / (2 * theta2)) ** 2) / (2 * math.pi * theta1 * theta2)
    return normalized(f.with_values(_apply_dirichlet(vals)))


def planar_initial(state: QuantumState, grid: Grid) -> Field2D:
    """|Psi_n(x)|^2 exp(-y^2) + |Psi_n(y)|^2 exp(-x^2), renormalized on the grid.

    For n = 1 this is 2(x^2 + y^2) exp(-(x^2 + y^2)) / sqrt(pi) up to scale.
    """
    f = grid.zeros()
    X, Y = f.mesh()
    vals = born_density(state, X) * np.exp(-Y * Y) + born_density(state, Y) * np.exp(-X * X)
    return normalized(f.with_values(_apply_dirichlet(vals)))


def radial_initial(grid: Grid) -> Field2D:
    """2(x^2 + y^2) exp(-(x^2 + y^2)) / sqrt(pi), renormalized on the grid."""
    f = grid.zeros()
    X, Y = f.mesh()
    r2 = X * X + Y * Y
    return normalized(f.with_values(_apply_dirichlet(2.0 * r2 * np.exp(-r2) / math.sqrt(math.pi))))


def born_initial(state: QuantumState, grid: Grid) -> Field1D:
    f = grid.zeros()
    return normalized(f.with_values(_apply_dirichlet(born_density(state, f.x))))


# --------------------------------------------------------------------------
# problems and the solver


@dataclass
class FpProblem:
    """A complete solve: equation, grid, time stepping and output cadence.

    ``initial`` selects the starting density: ``"born"`` (1D, |Psi_n|^2),
    ``"planar"`` (2D, see :func:`planar_initial`), ``"radial"`` (2D,
    2|z|^2 exp(-|z|^2)/sqrt(pi)) or ``"gaussian"`` (Duffing, using ``gaussian``).  Stepping stops at ``t_final`` or as soon as the
    max-norm change per unit time drops below ``stationary_tol``.
    """

    kind: str
    grid: Grid
    dt: float
    t_final: float
    n: int = 1
    duffing: DuffingParams = field(default_factory=DuffingParams)
    initial: str = ""
    gaussian: tuple = (-2.0, -1.8, 0.1, 0.1)
    snapshot_every: float = 1.0
    stationary_tol: float = 1e-6
    check_every: int = 1000
    form: str = "conservative"
    v_max: float = V_MAX

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "bohmian_1d" and self.grid.dims != 1:
            raise ValueError("bohmian_1d needs a 1D grid")
        if self.kind != "bohmian_1d" and self.grid.dims != 2:
            raise ValueError(f"{self.kind} needs a 2D grid")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_final < 0:
            raise ValueError("t_final must be non-negative")
        if not self.initial:
            self.initial = {"bohmian_1d": "born", "complex_2d": "planar", "duffing": "gaussian"}[self.kind]

    @property
    def state(self) -> QuantumState:
        return QuantumState(self.n)

    def operator(self) -> DriftDiffusion:
        if self.kind == "bohmian_1d":
            return bohmian_operator(self.state, self.grid, self.form, self.v_max)
        if self.kind == "complex_2d":
            return complex_operator(self.state, self.grid, self.form, self.v_max)
        return duffing_operator(self.duffing, self.grid, self.form)

    def initial_field(self):
        if self.initial == "born":
            if self.grid.dims != 1:
                raise ValueError("born initial condition is 1D")
            return born_initial(self.state, self.grid)
        if self.initial == "planar":
            return planar_initial(self.state, self.grid)
        if self.initial == "radial":
            return radial_initial(self.grid)
        if self.initial == "gaussian":
            return gaussian_initial(*self.gaussian, self.grid)
        raise ValueError(f"unknown initial condition {self.initial!r}")


@dataclass
class FpSolution:
    problem: FpProblem
    times: list[float]
    snapshots: list
    masses: list[float]
    clip: ClipStats
    stationary: bool = False
    mass_flag: bool = False

    @property
    def final(self):
        return self.snapshots[-1]

    @property
    def t_end(self) -> float:
        return self.times[-1]


def solve_fp(problem: FpProblem, check_stability: bool = True) -> FpSolution:
    """Step ``problem`` from its initial density to ``t_final`` (or stationarity)."""
    op = problem.operator()
    if check_stability:
        op.check_dt(problem.dt)
    f0 = problem.initial_field()
    cur = f0.values.copy()
    nxt = np.empty_like(cur)
    ref_peak = float(np.max(cur))
    n_steps = int(round(problem.t_final / problem.dt))
    snap_stride = max(1, int(round(problem.snapshot_every / problem.dt)))
    check = max(1, problem.check_every)
    clip = ClipStats()
    times, snaps, masses = [0.0], [f0], [field_mass(f0)]
    last_check = cur.copy()
    stationary = False
    step = 0
    while step < n_steps:
        nxt, n_bad, peak = op.apply(cur, problem.dt, nxt, clip)
        cur, nxt = nxt, cur
        step += 1
        if n_bad > MAX_UNDERSHOOT_FRACTION * cur.size:
            raise UnderResolvedError(
                f"{n_bad} cells undershot at step {step}; grid too coarse for this drift"
            )
        if step % check == 0 or step == n_steps:
            _guard_growth(peak, ref_peak)
            elapsed = (step % check or check) * problem.dt
            rate = float(np.max(np.abs(cur - last_check))) / elapsed
            last_check[...] = cur
            if rate < problem.stationary_tol:
                stationary = True
        if step % snap_stride == 0 or step == n_steps or stationary:
            snap = f0.with_values(cur.copy())
            times.append(step * problem.dt)
            snaps.append(snap)
            masses.append(field_mass(snap))
        if stationary:
            log.info("stationary at t=%g", step * problem.dt)
            break
    mass_flag = any(abs(m - masses[0]) > MASS_TOLERANCE for m in masses)
    if mass_flag:
        log.warning("mass drifted by more than %.0f%% (boundary leakage)", 100 * MASS_TOLERANCE)
    return FpSolution(problem, times, snaps, masses, clip, stationary, mass_flag)


def relative_l2(a: Field2D, b: Field2D, margin: int = 5) -> float:
    """||a - b|| / ||b|| over the interior, ``margin`` cells away from every edge."""
    s = (slice(margin, -margin), slice(margin, -margin)) if a.values.ndim == 2 else slice(margin, -margin)
    diff = a.values[s] - b.values[s]
    return float(np.sqrt(np.sum(diff * diff) / np.sum(b.values[s] ** 2)))
