"""Euler-Maruyama integration of the complex, Bohmian and Nelson SDEs.

The complex equation moves z = x + iy with drift u* = -i d(ln Psi_n)/dz and a
single real Wiener increment along the fixed direction (-1 + i)/sqrt(2); the
Bohmian equation moves x on the real axis with unit diffusion.

Ensembles are reproducible: trajectory ``k`` draws its noise from a PCG64
stream seeded by ``SeedSequence(master_seed, spawn_key=(k,))``, so results do
not depend on batching or on the number of worker processes.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from .stats import HistogramAccumulator, crossing_abscissae
from .wavefunction import (
    NODE_EPS,
    V_MAX,
    NodeProximityError,
    born_density,
    QuantumState,
    _hermite_pair,
    clamp_magnitude,
    drift_velocity,
    hermite,
    log_derivative,
)

log = logging.getLogger(__name__)

NOISE_DIRECTION = (-1.0 + 1.0j) / math.sqrt(2.0)
KINDS = ("complex", "bohmian")
# share of trajectories allowed to abort before the whole run fails
MAX_ABORT_FRACTION = 1e-3
CHUNK_STEPS = 512
BATCH_SIZE = 4096


class TrajectoryAbort(ArithmeticError):
    """A trajectory produced a non-finite position."""


class EnsembleFailure(RuntimeError):
    """Too many trajectories of an ensemble aborted."""


# --------------------------------------------------------------------------
# drifts and single steps


def bohmian_drift(state: QuantumState, x, eps_node: float = NODE_EPS):
    """v_B = dS_B/dx + (1/2) d ln(R_B^2)/dx on the real axis.

    Stationary eigenstates have a real H_n on the real axis, so dS_B/dx is
    zero and the drift is the osmotic term rho'/(2 rho), with rho = R_B^2 and
    rho' computed from the product rule.
    """
    x = np.asarray(x, dtype=float)
    n = state.n
    h, h_prev = _hermite_pair(n, x)
    if np.any(np.abs(h) < eps_node):
        raise NodeProximityError(f"x is at a node of state n={n}")
    dh = 2.0 * n * h_prev
    gauss = np.exp(-x * x)
    rho = h * h * gauss
    drho = (2.0 * h * dh - 2.0 * x * h * h) * gauss
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.where(rho > 0, drho / (2.0 * rho), dh / h - x)
    return v[()] if v.ndim == 0 else v


def nelson_drift(state: QuantumState, x, eps_node: float = NODE_EPS):
    """Mean forward velocity b+ = dS_N/dx + dR_N/dx with Psi = exp(R_N + i S_N).

    ln Psi = R_N + i S_N, so both derivatives come from the complex log
    derivative evaluated on the real axis.
    """
    f = np.asarray(log_derivative(state, np.asarray(x, dtype=float) + 0j, eps_node=eps_node))
    b = f.imag + f.real
    return b[()] if b.ndim == 0 else b


def step_complex(state: QuantumState, z, dt: float, xi, v_max: float = V_MAX):
    """One Euler-Maruyama step of the complex SDE.

    x' = x + Im(f) dt - xi sqrt(dt/2),  y' = y - Re(f) dt + xi sqrt(dt/2)
    with f = d(ln Psi)/dz; the drift is clamped to ``v_max``.
    """
    scalar = np.ndim(z) == 0
    z1, _ = _complex_update(state.n, np.atleast_1d(np.asarray(z, dtype=complex)), dt, np.atleast_1d(xi), v_max)
    if not np.all(np.isfinite(z1)):
        raise TrajectoryAbort("non-finite position after complex step")
    return z1[0] if scalar else z1


def step_bohmian(state: QuantumState, x, dt: float, xi, v_max: float = V_MAX):
    """One Euler-Maruyama step of dx = v_B dt + dw (unit diffusion)."""
    scalar = np.ndim(x) == 0
    x1, _ = _bohmian_update(state.n, np.atleast_1d(np.asarray(x, dtype=float)), dt, np.atleast_1d(xi), v_max)
    if not np.all(np.isfinite(x1)):
        raise TrajectoryAbort("non-finite position after Bohmian step")
    return x1[0] if scalar else x1


def _complex_update(n, z, dt, xi, v_max):
    u, clamped = drift_velocity(_state(n), z, v_max)
    noise = NOISE_DIRECTION * (np.asarray(xi, dtype=float) * math.sqrt(dt))
    return z + u * dt + noise, clamped


def _bohmian_update(n, x, dt, xi, v_max):
    h, h_prev = _hermite_pair(n, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = 2.0 * n * h_prev / h - x
    bad = ~np.isfinite(v)
    over = (np.abs(v) > v_max) & ~bad
    v = np.where(over, np.sign(v) * v_max, np.where(bad, 0.0, v))
    return x + v * dt + np.asarray(xi, dtype=float) * math.sqrt(dt), over | bad


@lru_cache(maxsize=None)
def _state(n: int) -> QuantumState:
    return QuantumState(n)


# --------------------------------------------------------------------------
# configuration and results


class ComplexSample(NamedTuple):
    t: float
    x: float
    y: float


@dataclass(frozen=True)
class SdeConfig:
    """Parameters of one ensemble run.

    ``initial_positions`` are assigned round-robin: trajectory ``k`` starts at
    ``initial_positions[k % len(initial_positions)]``.
    """

    state: QuantumState
    dt: float = 1e-3
    n_steps: int = 10_000
    initial_positions: tuple = (0.95 + 0j, -0.95 + 0j)
    n_trajectories: int = 1
    master_seed: int = 0
    burn_in_time: float = 1.0
    record_stride: int = 1
    kind: str = "complex"
    v_max: float = V_MAX

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ValueError("n_steps must be a non-negative integer")
        if self.n_trajectories < 1:
            raise ValueError("n_trajectories must be >= 1")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")
        if self.burn_in_time < 0:
            raise ValueError("burn_in_time must be non-negative")
        if self.n_steps > 0 and not self.burn_in_time < self.n_steps * self.dt:
            raise ValueError("burn_in_time must be shorter than the run")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must fit in 64 bits")
        pos = tuple(complex(p) for p in np.atleast_1d(self.initial_positions))
        if not pos:
            raise ValueError("at least one initial position required")
        if self.kind == "bohmian" and any(p.imag != 0 for p in pos):
            raise ValueError("Bohmian trajectories start on the real axis")
        h = np.atleast_1d(hermite(self.state.n, np.array(pos)))
        if np.any(np.abs(h) < NODE_EPS) or not np.all(np.isfinite(pos)):
            raise ValueError("initial positions must be finite and away from nodes")
        object.__setattr__(self, "initial_positions", pos)

    @classmethod
    def for_duration(cls, state: QuantumState, total_time: float, dt: float = 1e-3, **kw) -> "SdeConfig":
        return cls(state=state, dt=dt, n_steps=int(round(total_time / dt)), **kw)

    @property
    def total_time(self) -> float:
        return self.n_steps * self.dt

    @property
    def first_record_step(self) -> int:
        """Smallest step j >= 1 that is recorded: stride multiple with j*dt >= burn-in."""
        j = max(1, math.ceil(self.burn_in_time / self.dt * (1 - 1e-12)))
        return -(-j // self.record_stride) * self.record_stride

    def seed_sequence(self, index: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.master_seed, spawn_key=(index,))

    def start(self, index: int) -> complex:
        return self.initial_positions[index % len(self.initial_positions)]


class AbortRecord(NamedTuple):
    trajectory_index: int
    step: int
    cause: str


@dataclass
class Trajectory:
    index: int
    t: np.ndarray
    z: np.ndarray
    clamp_count: int = 0
    seed: tuple = ()
    abort: AbortRecord | None = None

    @property
    def x(self) -> np.ndarray:
        return self.z.real

    @property
    def y(self) -> np.ndarray:
        return self.z.imag

    @property
    def samples(self) -> list[ComplexSample]:
        return [ComplexSample(float(t), float(z.real), float(z.imag)) for t, z in zip(self.t, self.z)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y"])
            for t, z in zip(self.t, self.z):
                w.writerow([repr(float(t)), repr(float(z.real)), repr(float(z.imag))])


@dataclass
class HistogramSpec:
    lo: float = -5.0
    hi: float = 5.0
    n_bins: int = 100

    def accumulator(self) -> HistogramAccumulator:
        return HistogramAccumulator(self.lo, self.hi, self.n_bins)


@dataclass
class EnsembleRun:
    """Outcome of :func:`simulate_ensemble`.

    ``point_set_a`` and ``point_set_b`` are streamed counts (crossing
    abscissae and all real parts); ``trajectories`` is filled only when
    requested.
    """

    config: SdeConfig
    trajectories: list[Trajectory] | None = None
    point_set_a: HistogramAccumulator | None = None
    point_set_b: HistogramAccumulator | None = None
    clamp_count: int = 0
    aborted: list[AbortRecord] = field(default_factory=list)
    n_samples: int = 0
    n_crossings: int = 0

    @property
    def n_trajectories(self) -> int:
        return self.config.n_trajectories


# --------------------------------------------------------------------------
# batch kernel


@dataclass
class _BatchResult:
    start: int
    trajectories: list[Trajectory] | None
    point_set_a: HistogramAccumulator | None
    point_set_b: HistogramAccumulator | None
    clamp_count: int
    aborted: list[AbortRecord]
    n_samples: int
    n_crossings: int


def _run_batch(config: SdeConfig, start: int, stop: int, keep: bool, hist: HistogramSpec | None) -> _BatchResult:
    idx = np.arange(start, stop)
    b = len(idx)
    gens = [np.random.Generator(np.random.PCG64(config.seed_sequence(int(k)))) for k in idx]
    z = np.array([config.start(int(k)) for k in idx], dtype=complex)
    alive = np.ones(b, dtype=bool)
    clamps = np.zeros(b, dtype=np.int64)
    aborted: list[AbortRecord] = []
    acc_a = hist.accumulator() if hist and config.kind == "complex" else None
    acc_b = hist.accumulator() if hist else None
    rec_t: list[np.ndarray] = []
    rec_z: list[np.ndarray] = []
    prev_x = prev_y = None
    n_samples = n_crossings = 0
    first = config.first_record_step
    stride = config.record_stride
    sqdt = math.sqrt(config.dt)
    n = config.state.n
    update = _complex_update if config.kind == "complex" else _bohmian_update
    noise = np.empty((b, 0))

    j0 = 1
    while j0 <= config.n_steps:
        j1 = min(config.n_steps, j0 + CHUNK_STEPS - 1)
        width = j1 - j0 + 1
        noise = np.stack([g.standard_normal(width) for g in gens])
        steps = np.arange(j0, j1 + 1)
        recorded = (steps >= first) & (steps % stride == 0)
        buf = np.empty((b, int(recorded.sum())), dtype=complex)
        col = 0
        for c in range(width):
            j = j0 + c
            if config.kind == "complex":
                z_new, cl = update(n, z, config.dt, noise[:, c], config.v_max)
            else:
                x_new, cl = update(n, z.real, config.dt, noise[:, c], config.v_max)
                z_new = x_new.astype(complex)
            clamps += cl & alive
            bad = ~np.isfinite(z_new) & alive
            if bad.any():
                for k in np.flatnonzero(bad):
                    aborted.append(AbortRecord(int(idx[k]), j, "non-finite position"))
                    log.warning("trajectory %d aborted at step %d", idx[k], j)
                alive &= ~bad
            z = np.where(alive, z_new, z)
            if recorded[c]:
                buf[:, col] = z
                col += 1
        if buf.shape[1]:
            t_chunk = steps[recorded] * config.dt
            if keep:
                rec_t.append(t_chunk)
                rec_z.append(buf.copy())
            live = buf[alive]
            n_samples += live.size
            if acc_b is not None:
                acc_b.add(live.real)
            if acc_a is not None:
                px = None if prev_x is None else prev_x[alive]
                py = None if prev_y is None else prev_y[alive]
                xs = crossing_abscissae(live.real, live.imag, px, py)
                n_crossings += xs.size
                acc_a.add(xs)
            prev_x, prev_y = buf[:, -1].real.copy(), buf[:, -1].imag.copy()
        j0 = j1 + 1

    trajectories = None
    if keep:
        t_all = np.concatenate(rec_t) if rec_t else np.empty(0)
        z_all = np.concatenate(rec_z, axis=1) if rec_z else np.empty((b, 0), dtype=complex)
        abort_of = {a.trajectory_index: a for a in aborted}
        trajectories = []
        for row, k in enumerate(idx):
            a = abort_of.get(int(k))
            t_k, z_k = t_all, z_all[row]
            if a is not None:
                keep_cols = t_all < a.step * config.dt
                t_k, z_k = t_all[keep_cols], z_k[keep_cols]
            trajectories.append(
                Trajectory(int(k), t_k.copy(), z_k.copy(), int(clamps[row]), (config.master_seed, int(k)), a)
            )
    return _BatchResult(start, trajectories, acc_a, acc_b, int(clamps.sum()), aborted, n_samples, n_crossings)


# --------------------------------------------------------------------------
# public drivers


def simulate_trajectory(config: SdeConfig, index: int) -> Trajectory:
    """Integrate trajectory ``index`` of the ensemble described by ``config``.

    Samples after every ``record_stride``-th step with t >= burn-in are kept;
    the starting point itself is not recorded.
    """
    if not 0 <= index < config.n_trajectories:
        raise IndexError(f"trajectory index {index} outside [0, {config.n_trajectories})")
    res = _run_batch(config, index, index + 1, keep=True, hist=None)
    traj = res.trajectories[0]
    if traj.abort is not None:
        log.warning("trajectory %d aborted: %s", index, traj.abort)
    return traj


def simulate_ensemble(
    config: SdeConfig,
    *,
    workers: int = 1,
    keep_trajectories: bool = False,
    histogram: HistogramSpec | None = None,
    batch_size: int = BATCH_SIZE,
) -> EnsembleRun:
    """Run ``config.n_trajectories`` independent trajectories.

    Work is split into fixed batches of trajectory indices; batches may run in
    separate processes.  Streamed histograms hold integer counts, so merged
    results are identical for any ``workers``.
    """
    bounds = [(s, min(s + batch_size, config.n_trajectories)) for s in range(0, config.n_trajectories, batch_size)]
    if workers > 1 and len(bounds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_batch, config, s, e, keep_trajectories, histogram) for s, e in bounds]
            results = [f.result() for f in futures]
    else:
        results = [_run_batch(config, s, e, keep_trajectories, histogram) for s, e in bounds]

    run = EnsembleRun(config, [] if keep_trajectories else None)
    if histogram is not None:
        run.point_set_b = histogram.accumulator()
        if config.kind == "complex":
            run.point_set_a = histogram.accumulator()
    for res in sorted(results, key=lambda r: r.start):
        if keep_trajectories:
            run.trajectories.extend(res.trajectories)
        if res.point_set_a is not None:
            run.point_set_a.merge(res.point_set_a)
        if res.point_set_b is not None:
            run.point_set_b.merge(res.point_set_b)
        run.clamp_count += res.clamp_count
        run.aborted.extend(res.aborted)
        run.n_samples += res.n_samples
        run.n_crossings += res.n_crossings

    if len(run.aborted) > MAX_ABORT_FRACTION * config.n_trajectories:
        raise EnsembleFailure(
            f"{len(run.aborted)} of {config.n_trajectories} trajectories aborted; first: {run.aborted[0]}"
        )
    return run


def with_seed(config: SdeConfig, seed: int) -> SdeConfig:
    return replace(config, master_seed=seed)


def sample_planar_initial(state: QuantumState, n_points: int, seed: int) -> tuple:
    """Draw starts from |Psi_n(x)|^2 exp(-y^2) + |Psi_n(y)|^2 exp(-x^2) over the plane.

    The density is an equal mixture of (x ~ |Psi_n|^2, y ~ N(0, 1/2)) and the
    same with x and y swapped.  |Psi_n|^2 is sampled by inverting its
    cumulative distribution on a fine grid.  Used to start ensembles from the
    state the 2D Fokker-Planck runs begin with.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    a = state.amplitude + 8.0
    grid = np.linspace(-a, a, 200_001)
    pdf = np.asarray(born_density(state, grid))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    q = np.interp(rng.uniform(size=n_points), cdf, grid)
    g = rng.standard_normal(n_points) * math.sqrt(0.5)
    swap = rng.uniform(size=n_points) < 0.5
    x, y = np.where(swap, g, q), np.where(swap, q, g)
    return tuple(complex(v) for v in x + 1j * y)
