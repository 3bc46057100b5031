"""Complex-plane quantum random trajectories of the harmonic oscillator.

Simulates the complex, Bohmian and Nelson stochastic equations, turns the
resulting ensembles into point-set densities, and cross-checks them against
explicit finite-difference Fokker-Planck solutions.
"""

from .wavefunction import (
    NodeProximityError,
    QuantumState,
    WavefunctionOverflowError,
    born_density,
    classical_density,
    complex_action,
    complex_drift,
    eigenstate,
    hermite,
    log_derivative,
    magnitude_squared_complex,
)

__all__ = [
    "NodeProximityError",
    "QuantumState",
    "WavefunctionOverflowError",
    "born_density",
    "classical_density",
    "complex_action",
    "complex_drift",
    "eigenstate",
    "hermite",
    "log_derivative",
    "magnitude_squared_complex",
]

__version__ = "0.1.0"
