"""Harmonic-oscillator eigenstates on the real axis and in the complex plane.

Everything is dimensionless (hbar = m = omega = 1).  Functions accept scalars
or numpy arrays; complex inputs are promoted to ``complex128``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# |H_n(z)| below this is treated as sitting on a node
NODE_EPS = 1e-12
# magnitude cap for the complex drift velocity
V_MAX = 1e3
# largest safe argument of exp() in float64
_EXP_LIMIT = math.log(np.finfo(float).max) - 1.0


class NodeProximityError(ValueError):
    """Raised when a quantity singular at a wavefunction node is requested there."""


class WavefunctionOverflowError(OverflowError):
    """Raised when exp(-z**2/2) leaves the float64 range (large |Im z|)."""


@dataclass(frozen=True)
class QuantumState:
    """Stationary state ``n`` of the dimensionless harmonic oscillator."""

    n: int
    norm_const: float = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if int(self.n) != self.n or self.n < 0:
            raise ValueError(f"quantum number must be a non-negative integer, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))
        # (2^n n! sqrt(pi))^(-1/2), via logs so large n stays finite
        log_c = -0.5 * (self.n * math.log(2.0) + math.lgamma(self.n + 1) + 0.5 * math.log(math.pi))
        object.__setattr__(self, "norm_const", math.exp(log_c))

    @property
    def energy(self) -> float:
        return self.n + 0.5

    @property
    def amplitude(self) -> float:
        """Classical turning point sqrt(2n + 1)."""
        return math.sqrt(2 * self.n + 1)

    def nodes(self) -> np.ndarray:
        """Real zeros of H_n, sorted."""
        if self.n == 0:
            return np.empty(0)
        roots, _ = np.polynomial.hermite.hermgauss(self.n)
        return np.sort(roots)


def _hermite_pair(n: int, z):
    """Return (H_n(z), H_{n-1}(z)) by upward recurrence; H_{-1} is taken as 0."""
    z = np.asarray(z)
    h_prev = np.zeros_like(z, dtype=np.result_type(z, float))
    h = np.ones_like(h_prev)
    for k in range(n):
        h_prev, h = h, 2.0 * z * h - 2.0 * k * h_prev
    return h, h_prev


def hermite(n: int, z):
    """Physicists' Hermite polynomial H_n(z), evaluated by the three-term recurrence."""
    if n < 0:
        raise ValueError("n must be non-negative")
    h, _ = _hermite_pair(n, z)
    return h[()] if np.ndim(h) == 0 else h


def _check_exponent(z) -> None:
    # |exp(-z^2/2)| = exp((y^2 - x^2)/2)
    z = np.asarray(z)
    expo = 0.5 * (z.imag**2 - z.real**2)
    if np.any(expo > _EXP_LIMIT):
        raise WavefunctionOverflowError("exp(-z^2/2) overflows; |Im z| too large")


def eigenstate(state: QuantumState, t: float, z):
    """Psi_n(t, z) = C_n H_n(z) exp(-z^2/2) exp(-i(n + 1/2)t)."""
    z = np.asarray(z, dtype=complex)
    _check_exponent(z)
    h = hermite(state.n, z)
    with np.errstate(over="raise", invalid="raise"):
        try:
            psi = state.norm_const * h * np.exp(-0.5 * z * z) * np.exp(-1j * state.energy * t)
        except FloatingPointError as exc:
            raise WavefunctionOverflowError(str(exc)) from exc
    return psi


def _log_derivative_raw(n: int, z):
    h, h_prev = _hermite_pair(n, z)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = 2.0 * n * h_prev / h - z
    return f, h


def log_derivative(state: QuantumState, z, eps_node: float = NODE_EPS):
    """d(ln Psi_n)/dz = 2n H_{n-1}(z)/H_n(z) - z.

    The time-dependent phase drops out.  Raises :class:`NodeProximityError`
    if any ``|H_n(z)| < eps_node``.
    """
    z = np.asarray(z, dtype=complex)
    f, h = _log_derivative_raw(state.n, z)
    if np.any(np.abs(h) < eps_node):
        raise NodeProximityError(f"|H_{state.n}(z)| < {eps_node:g}: z is at a node")
    return f[()] if f.ndim == 0 else f


def clamp_magnitude(u, v_max: float = V_MAX):
    """Scale entries of ``u`` down to ``|u| <= v_max``.

    Returns ``(clamped, mask)``; non-finite entries are set to zero and
    flagged as clamped.
    """
    u = np.array(u, dtype=complex, copy=True, ndmin=1)
    mag = np.abs(u)
    bad = ~np.isfinite(mag)
    over = (mag > v_max) & ~bad
    u[over] *= v_max / mag[over]
    u[bad] = 0.0
    return u, over | bad


def drift_velocity(state: QuantumState, z, v_max: float = V_MAX):
    """Clamped complex drift ``-i d(ln Psi)/dz`` without node checks.

    This is the integrator's entry point: trajectories may wander arbitrarily
    close to nodes, where the clamp keeps the step bounded.  Returns
    ``(u, clamped_mask)`` as 1-d arrays.
    """
    f, _ = _log_derivative_raw(state.n, np.asarray(z, dtype=complex))
    return clamp_magnitude(-1j * f, v_max)


def complex_drift(state: QuantumState, z, v_max: float = V_MAX, eps_node: float = NODE_EPS):
    """Optimal guidance velocity u* = -i d(ln Psi_n)/dz, magnitude-clamped to ``v_max``."""
    f = log_derivative(state, z, eps_node=eps_node)
    u, _ = clamp_magnitude(-1j * np.asarray(f), v_max)
    return u[0] if np.ndim(f) == 0 else u.reshape(np.shape(f))


def drift_divergence(state: QuantumState, z):
    """Divergence of the planar drift field (Re u*, Im u*) at z = x + iy.

    u* is analytic, so div = 2 Re(du*/dz) = 2 Im(f'(z)) with
    f' = H_n''/H_n - (H_n'/H_n)^2 - 1.
    """
    z = np.asarray(z, dtype=complex)
    n = state.n
    h, h1 = _hermite_pair(n, z)
    h2 = _hermite_pair(n - 2, z)[0] if n >= 2 else np.zeros_like(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio1 = 2.0 * n * h1 / h
        ratio2 = 4.0 * n * (n - 1) * h2 / h
        fprime = ratio2 - ratio1 * ratio1 - 1.0
    return 2.0 * fprime.imag


def magnitude_squared_complex(state: QuantumState, z):
    """|Psi_n(t, z)|^2, which does not depend on t."""
    z = np.asarray(z, dtype=complex)
    _check_exponent(z)
    h = hermite(state.n, z) * state.norm_const
    with np.errstate(over="raise"):
        try:
            out = (h.real * h.real + h.imag * h.imag) * np.exp(z.imag**2 - z.real**2)
        except FloatingPointError as exc:
            raise WavefunctionOverflowError(str(exc)) from exc
    return out


def born_density(state: QuantumState, x):
    """Born-rule density [C_n H_n(x)]^2 exp(-x^2) on the real axis."""
    return magnitude_squared_complex(state, np.asarray(x, dtype=float) + 0j)


def classical_density(state: QuantumState, x):
    """Arcsine law of a classical oscillator with energy n + 1/2.

    1 / (pi sqrt(A^2 - x^2)) inside the turning points A = sqrt(2n + 1), zero
    on and outside them.
    """
    x = np.asarray(x, dtype=float)
    a2 = 2.0 * state.n + 1.0
    inside = np.abs(x) < math.sqrt(a2)
    gap = np.where(inside, a2 - x * x, 1.0)
    out = np.where(inside, 1.0 / (math.pi * np.sqrt(gap)), 0.0)
    return out[()] if out.ndim == 0 else out


def complex_action(state: QuantumState, t: float, z):
    """Complex action S = -i ln Psi_n(t, z), principal branch.

    Re S is the phase of Psi wrapped to (-pi, pi]; Im S = -ln|Psi|.  The
    logarithm is assembled from its factors so that large |z| does not
    overflow.  The branch cut runs where the phase crosses pi.
    """
    z = np.asarray(z, dtype=complex)
    h = np.asarray(hermite(state.n, z), dtype=complex)
    if np.any(h == 0):
        raise NodeProximityError("Psi vanishes at a node; ln Psi undefined")
    log_mag = math.log(state.norm_const) + np.log(np.abs(h)) - 0.5 * (z * z).real
    phase = np.angle(h) - 0.5 * (z * z).imag - state.energy * t
    phase = np.pi - np.mod(np.pi - phase, 2.0 * np.pi)
    out = phase - 1j * log_mag
    return out[()] if out.ndim == 0 else out
