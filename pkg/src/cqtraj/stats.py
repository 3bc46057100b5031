"""Point sets, histograms and correlation measures built from trajectory ensembles.

Three ways of counting trajectory points give three densities:

* point set A -- abscissae where a trajectory crosses the real axis;
* point set B -- real parts of every recorded sample;
* the planar density itself, which comes from the 2D Fokker-Planck solver and
  is reduced to a 1D marginal by :func:`marginal_y`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np


class EmptyHistogramError(ValueError):
    """No samples fell inside the histogram range."""


class ZeroVarianceError(ValueError):
    """A Pearson correlation was requested for a constant vector."""


@dataclass
class DensityHistogram:
    """Binned probability density with unit integral."""

    bin_edges: np.ndarray
    densities: np.ndarray
    total_samples: int
    out_of_range: int = 0

    def __post_init__(self) -> None:
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.densities = np.asarray(self.densities, dtype=float)
        if self.bin_edges.ndim != 1 or len(self.bin_edges) < 3:
            raise ValueError("need at least two bins")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if self.densities.shape != (len(self.bin_edges) - 1,):
            raise ValueError("one density per bin required")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    def integral(self) -> float:
        return float(np.sum(self.densities * self.widths))

    def to_csv(self, path) -> None:
        write_columns(path, {"bin_center": self.centers, "density": self.densities})


@dataclass
class HistogramAccumulator:
    """Integer bin counts on a uniform grid; merging is exact and order-free."""

    lo: float
    hi: float
    n_bins: int
    counts: np.ndarray = field(default=None, repr=False)
    out_of_range: int = 0

    def __post_init__(self) -> None:
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if not self.lo < self.hi:
            raise ValueError("range lower bound must be below upper bound")
        if self.counts is None:
            self.counts = np.zeros(self.n_bins, dtype=np.int64)

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_bins + 1)

    def add(self, values) -> None:
        v = np.asarray(values, dtype=float).ravel()
        if v.size == 0:
            return
        inside = (v >= self.lo) & (v <= self.hi)
        self.out_of_range += int(v.size - np.count_nonzero(inside))
        idx = ((v[inside] - self.lo) * (self.n_bins / (self.hi - self.lo))).astype(np.int64)
        np.minimum(idx, self.n_bins - 1, out=idx)
        self.counts += np.bincount(idx, minlength=self.n_bins)

    def merge(self, other: "HistogramAccumulator") -> "HistogramAccumulator":
        if (other.lo, other.hi, other.n_bins) != (self.lo, self.hi, self.n_bins):
            raise ValueError("cannot merge histograms with different binning")
        self.counts += other.counts
        self.out_of_range += other.out_of_range
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_histogram(self) -> DensityHistogram:
        n = self.total
        if n == 0:
            raise EmptyHistogramError("no in-range samples")
        edges = self.edges
        dens = self.counts / (n * np.diff(edges))
        return DensityHistogram(edges, dens, n, self.out_of_range)


def build_histogram(samples, n_bins: int, range: tuple[float, float]) -> DensityHistogram:
    """Uniform-bin density estimate normalized over the in-range samples."""
    acc = HistogramAccumulator(float(range[0]), float(range[1]), int(n_bins))
    acc.add(samples)
    return acc.to_histogram()


class CrossingRecord(NamedTuple):
    x: float
    t: float
    trajectory_index: int


def crossing_abscissae(x, y, x_prev=None, y_prev=None) -> np.ndarray:
    """Real-axis intersections of piecewise-linear paths.

    ``x`` and ``y`` hold consecutive samples along the last axis (one row per
    trajectory).  ``x_prev``/``y_prev`` optionally give the sample preceding
    the first column, so long runs can be scanned chunk by chunk.  A strict
    sign change of y between neighbours yields the linearly interpolated
    abscissa; a sample with y == 0 yields its own x.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x_prev is not None:
        x = np.concatenate([np.reshape(x_prev, (-1, 1)), x], axis=1)
        y = np.concatenate([np.reshape(y_prev, (-1, 1)), y], axis=1)
        exact = y[:, 1:] == 0
        exact_x = x[:, 1:][exact]
    else:
        exact_x = x[y == 0]
    y0, y1 = y[:, :-1], y[:, 1:]
    sign = y0 * y1 < 0
    x0, x1 = x[:, :-1][sign], x[:, 1:][sign]
    ya, yb = y0[sign], y1[sign]
    interp = x0 + (x1 - x0) * (-ya) / (yb - ya)
    return np.concatenate([interp, exact_x])


def detect_crossings(trajectory) -> list[CrossingRecord]:
    """Point-set-A contributions of one trajectory, in time order."""
    t = np.asarray(trajectory.t, dtype=float)
    z = np.asarray(trajectory.z, dtype=complex)
    x, y = z.real, z.imag
    index = trajectory.index
    out: list[tuple[float, CrossingRecord]] = []
    for j in np.flatnonzero(y == 0):
        out.append((t[j], CrossingRecord(float(x[j]), float(t[j]), index)))
    for j in np.flatnonzero(y[:-1] * y[1:] < 0):
        frac = -y[j] / (y[j + 1] - y[j])
        xc = x[j] + (x[j + 1] - x[j]) * frac
        tc = t[j] + (t[j + 1] - t[j]) * frac
        out.append((tc, CrossingRecord(float(xc), float(tc), index)))
    out.sort(key=lambda item: item[0])
    return [rec for _, rec in out]


def project_real(trajectory) -> np.ndarray:
    """Point set B: every recorded real part, whatever the imaginary part."""
    return np.asarray(trajectory.z).real.copy()


def pearson_correlation(hist: DensityHistogram, reference, window: tuple[float, float] | None = None) -> float:
    """Pearson coefficient between bin densities and a reference at bin centers.

    ``reference`` is a callable of x or an array aligned with the bins.
    ``window`` restricts the comparison to centers inside ``[lo, hi]``.
    """
    centers = hist.centers
    ref = np.asarray(reference(centers) if callable(reference) else reference, dtype=float)
    dens = hist.densities
    if window is not None:
        keep = (centers >= window[0]) & (centers <= window[1])
        centers, ref, dens = centers[keep], ref[keep], dens[keep]
    if len(dens) < 3:
        raise ValueError("need at least 3 bins to correlate")
    return correlation(dens, ref)


def correlation(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if na == 0 or nb == 0:
        raise ZeroVarianceError("correlation undefined for a constant vector")
    r = float(np.dot(da, db) / (na * nb))
    return min(1.0, max(-1.0, r))


def marginal_y(field, mass_tolerance: float = 0.05) -> DensityHistogram:
    """Integrate a planar density over y and renormalize over x.

    Each grid column becomes a bin of width dx centred on its node; the
    trapezoid rule is used along y.
    """
    values = np.asarray(field.values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("field contains non-finite values")
    from .fokker_planck import field_mass

    mass = field_mass(field)
    if abs(mass - 1.0) > mass_tolerance:
        raise ValueError(f"field mass {mass:.4f} is not within {mass_tolerance:.0%} of 1")
    col = np.trapezoid(values, field.y, axis=1)
    x = field.x
    half = 0.5 * field.dx
    edges = np.concatenate([x - half, [x[-1] + half]])
    total = np.sum(col) * field.dx
    return DensityHistogram(edges, col / total, int(values.size))


def write_columns(path, columns: dict[str, Sequence[float]]) -> None:
    """CSV writer shared by all artifacts: header row, then repr-precision floats."""
    names = list(columns)
    cols = [np.asarray(columns[k]) for k in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def reference_on_bins(hist: DensityHistogram, func: Callable) -> np.ndarray:
    return np.asarray(func(hist.centers), dtype=float)
