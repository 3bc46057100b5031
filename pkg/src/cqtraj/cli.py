"""Batch experiment runner.

``cqtraj run <config.json | preset>`` executes one experiment, writes its CSV
artifacts plus ``summary.json`` into the output directory, and exits with

    0  success
    2  config error (nothing is written)
    3  numerical instability
    4  statistics or acceptance failure

``summary.json`` depends only on the resolved config, so two runs with equal
seeds give byte-identical files whatever ``--threads`` is.  Wall time and
thread count go to ``runtime.json`` next to it.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .fokker_planck import (
    DuffingParams,
    FpInstabilityError,
    FpProblem,
    Grid,
    duffing_exact_field,
    node_aligned_spacing,
    relative_l2,
    solve_fp,
)
from .sde import EnsembleFailure, HistogramSpec, SdeConfig, TrajectoryAbort, sample_planar_initial, simulate_ensemble
from .stats import (
    DensityHistogram,
    EmptyHistogramError,
    ZeroVarianceError,
    correlation,
    marginal_y,
    pearson_correlation,
    write_columns,
)
from .wavefunction import (
    V_MAX,
    QuantumState,
    WavefunctionOverflowError,
    born_density,
    classical_density,
    magnitude_squared_complex,
)

log = logging.getLogger("cqtraj")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INSTABILITY = 3
EXIT_STATISTICS = 4


class ConfigError(ValueError):
    """The experiment config is missing, malformed or inconsistent."""


class MissingArtifactError(FileNotFoundError):
    """A plot file was requested before the artifact it is built from exists."""


# --------------------------------------------------------------------------
# defaults

_SDE = {
    "n": 1,
    "dt": 1e-3,
    "t_total": 10.0,
    "burn_in_time": 1.0,
    "record_stride": 1,
    "initial_positions": [0.95, -0.95],
    "n_trajectories": 10_000,
    "v_max": V_MAX,
}
_HIST = {"range": [-5.0, 5.0], "n_bins": 100, "window": None, "range_scale": None, "window_scale": None}
_GRID = {"half_width": 6.0, "spacing": 0.05, "offset": True, "align_nodes": True}
_FP = {
    "n": 1,
    "grid": _GRID,
    "dt": 1e-4,
    "t_final": 5.0,
    "snapshot_every": 1.0,
    "stationary_tol": 1e-6,
    "check_every": 1000,
    "form": "conservative",
    "initial": "",
    "write_snapshots": "final",
}

DEFAULTS: dict[str, dict] = {
    "bohmian_hist": {
        "sde": dict(_SDE),
        "histogram": dict(_HIST),
        "acceptance": {"min_gamma": 0.99},
    },
    "pointset_a": {
        "sde": dict(_SDE),
        "histogram": dict(_HIST),
        "acceptance": {"min_gamma": 0.99},
    },
    "pointset_b": {
        "sde": dict(_SDE),
        "histogram": dict(_HIST),
        "acceptance": {"min_gamma_classical": None, "classical_beats_born": False, "positive_at_nodes": True},
    },
    "fp1d": {
        "fp": {**_FP, "grid": {**_GRID, "half_width": 5.0, "spacing": 0.025}, "dt": 5e-5},
        "acceptance": {"max_error": 0.01, "error_window": 4.0, "mass_tolerance": 0.05},
    },
    "fp2d": {
        "fp": dict(_FP),
        "crossval": {"enabled": False, "n_trajectories": 100_000, "dt": 1e-3},
        "acceptance": {
            "min_node_ratio": 0.1,
            "max_symmetry_error": 1e-10,
            "mass_tolerance": 0.05,
            "min_crossval_gamma": 0.95,
        },
    },
    "duffing": {
        "fp": {
            **_FP,
            "grid": {"half_width": 5.0, "spacing": 0.05, "offset": False, "align_nodes": False},
            "t_final": 40.0,
            "snapshot_every": 5.0,
        },
        "duffing": {"alpha": 0.25, "beta": -1.0, "gamma": 0.2, "sigma": 1.0},
        "gaussian": {"mu1": -2.0, "mu2": -1.8, "theta1": 0.1, "theta2": 0.1},
        "acceptance": {"max_rel_l2": 0.05, "margin": 5, "mass_tolerance": 0.05},
    },
    "psi_magnitude": {
        "psi": {"n": 1, "half_width": 4.0, "n_points": 161},
        "acceptance": {},
    },
}
EXPERIMENTS = tuple(DEFAULTS)


# --------------------------------------------------------------------------
# config handling


def _merge(defaults: dict, user: dict, where: str) -> dict:
    if not isinstance(user, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{key}")
        if isinstance(defaults[key], dict) and key != "initial_positions":
            out[key] = _merge(defaults[key], val, f"{where}.{key}" if where else key)
        else:
            out[key] = val
    return out


def preset_names() -> list[str]:
    files = resources.files("cqtraj").joinpath("presets").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".json"))


def load_config(source: str) -> dict:
    """Read a config from a JSON file path or a shipped preset name."""
    path = Path(source)
    try:
        if path.is_file():
            text = path.read_text()
        elif source in preset_names():
            text = resources.files("cqtraj").joinpath("presets", source + ".json").read_text()
        else:
            raise ConfigError(f"no config file or preset named {source!r}")
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {source}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read {source}: {exc}") from exc
    if not isinstance(raw, dict) or not raw:
        raise ConfigError("config must be a non-empty JSON object")
    return raw


def resolve_config(raw: dict, seed: int | None = None) -> dict:
    """Fill defaults, reject unknown keys, apply a seed override."""
    raw = dict(raw)
    name = raw.pop("experiment", None)
    if name not in DEFAULTS:
        raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}; got {name!r}")
    base = {"seed": 0, "output_dir": f"out/{name}", **DEFAULTS[name]}
    cfg = _merge(base, raw, "")
    if seed is not None:
        cfg["seed"] = seed
    s = cfg["seed"]
    if isinstance(s, bool) or not isinstance(s, int) or not 0 <= s < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return {"experiment": name, **cfg}


def _positions(values) -> tuple:
    out = []
    for v in values:
        if isinstance(v, (list, tuple)) and len(v) == 2:
            out.append(complex(float(v[0]), float(v[1])))
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            out.append(complex(float(v), 0.0))
        else:
            raise ConfigError(f"initial position {v!r} must be a number or a [re, im] pair")
    return tuple(out)


def _sde_config(sec: dict, seed: int, kind: str) -> SdeConfig:
    state = QuantumState(sec["n"])
    return SdeConfig.for_duration(
        state,
        float(sec["t_total"]),
        dt=float(sec["dt"]),
        initial_positions=_positions(sec["initial_positions"]),
        n_trajectories=int(sec["n_trajectories"]),
        master_seed=seed,
        burn_in_time=float(sec["burn_in_time"]),
        record_stride=int(sec["record_stride"]),
        kind=kind,
        v_max=float(sec["v_max"]),
    )


def _hist_spec(sec: dict, n: int) -> tuple[HistogramSpec, tuple | None]:
    amp = QuantumState(n).amplitude
    if sec["range_scale"] is not None:
        lo, hi = -sec["range_scale"] * amp, sec["range_scale"] * amp
    else:
        lo, hi = (float(v) for v in sec["range"])
    window = None
    if sec["window_scale"] is not None:
        window = (-sec["window_scale"] * amp, sec["window_scale"] * amp)
    elif sec["window"] is not None:
        window = tuple(float(v) for v in sec["window"])
    spec = HistogramSpec(float(lo), float(hi), int(sec["n_bins"]))
    spec.accumulator()  # validates the binning
    return spec, window


def _grid(sec: dict, n: int, dims: int) -> Grid:
    hw, h = float(sec["half_width"]), float(sec["spacing"])
    if not (hw > 0 and 0 < h < hw):
        raise ConfigError("grid needs 0 < spacing < half_width")
    if sec["align_nodes"]:
        h = node_aligned_spacing(QuantumState(n), h)
    if sec["offset"]:
        return Grid.offset(hw, h, dims)
    m = int(round(2 * hw / h)) + 1
    return Grid(-hw, hw, m) if dims == 1 else Grid.square(hw, m)


def _fp_problem(cfg: dict, kind: str) -> FpProblem:
    sec = cfg["fp"]
    dims = 1 if kind == "bohmian_1d" else 2
    kw = {}
    if kind == "duffing":
        kw["duffing"] = DuffingParams(**{k: float(v) for k, v in cfg["duffing"].items()})
        g = cfg["gaussian"]
        kw["gaussian"] = (float(g["mu1"]), float(g["mu2"]), float(g["theta1"]), float(g["theta2"]))
    if sec["write_snapshots"] not in ("final", "all"):
        raise ConfigError("fp.write_snapshots must be 'final' or 'all'")
    return FpProblem(
        kind=kind,
        grid=_grid(sec["grid"], int(sec["n"]), dims),
        dt=float(sec["dt"]),
        t_final=float(sec["t_final"]),
        n=int(sec["n"]),
        initial=sec["initial"],
        snapshot_every=float(sec["snapshot_every"]),
        stationary_tol=float(sec["stationary_tol"]),
        check_every=int(sec["check_every"]),
        form=sec["form"],
        **kw,
    )


@dataclass
class Plan:
    """A validated experiment: resolved config plus the objects built from it."""

    config: dict
    objects: dict = field(default_factory=dict)

    @property
    def experiment(self) -> str:
        return self.config["experiment"]


def prepare(cfg: dict) -> Plan:
    """Build every module object a run needs; raises :class:`ConfigError`."""
    name = cfg["experiment"]
    obj: dict = {}
    try:
        if name in ("bohmian_hist", "pointset_a", "pointset_b"):
            kind = "bohmian" if name == "bohmian_hist" else "complex"
            obj["sde"] = _sde_config(cfg["sde"], cfg["seed"], kind)
            obj["hist"], obj["window"] = _hist_spec(cfg["histogram"], obj["sde"].state.n)
        elif name in ("fp1d", "fp2d", "duffing"):
            kind = {"fp1d": "bohmian_1d", "fp2d": "complex_2d", "duffing": "duffing"}[name]
            prob = _fp_problem(cfg, kind)
            if prob.stationary_tol < 0:
                raise ConfigError("stationary_tol must be non-negative")
            prob.operator().check_dt(prob.dt)
            obj["problem"] = prob
            if name == "fp2d" and cfg["crossval"]["enabled"]:
                cv = cfg["crossval"]
                if int(cv["n_trajectories"]) < 1 or not float(cv["dt"]) > 0:
                    raise ConfigError("crossval needs n_trajectories >= 1 and dt > 0")
        else:
            p = cfg["psi"]
            QuantumState(p["n"])
            if not (float(p["half_width"]) > 0 and int(p["n_points"]) >= 3):
                raise ConfigError("psi grid needs half_width > 0 and n_points >= 3")
    except ConfigError:
        raise
    except FpInstabilityError as exc:
        raise ConfigError(f"invalid time step: {exc}") from exc
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid {name} config: {exc}") from exc
    _check_writable(Path(cfg["output_dir"]))
    return Plan(cfg, obj)


def _check_writable(path: Path) -> None:
    p = path.resolve()
    while not p.exists():
        p = p.parent
    if not p.is_dir() or not os.access(p, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")


# --------------------------------------------------------------------------
# summaries


@dataclass
class RunSummary:
    experiment: str
    seed: int
    config: dict
    metrics: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    status: str = "ok"
    error: str | None = None

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())

    def check(self, name: str, value, threshold, passed: bool) -> None:
        self.checks[name] = {"value": value, "threshold": threshold, "passed": bool(passed)}

    def to_dict(self) -> dict:
        return {
            "version": __version__,
            "experiment": self.experiment,
            "status": self.status,
            "error": self.error,
            "seed": self.seed,
            "metrics": self.metrics,
            "checks": self.checks,
            "artifacts": sorted(self.artifacts),
            "config": self.config,
        }

    def write(self, out: Path) -> None:
        text = json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True, allow_nan=True)
        (out / "summary.json").write_text(text + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _csv(summary: RunSummary, out: Path, name: str, columns: dict) -> None:
    write_columns(out / name, columns)
    if name not in summary.artifacts:
        summary.artifacts.append(name)


def _read_csv(out: Path, name: str) -> dict[str, np.ndarray]:
    path = out / name
    if not path.is_file():
        raise MissingArtifactError(f"{path} is missing; run the experiment first")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {h: data[:, i] for i, h in enumerate(header)}


# --------------------------------------------------------------------------
# experiments


def _run_ensemble_hist(plan: Plan, summary: RunSummary, out: Path, threads: int, point_set: str):
    cfg = plan.objects["sde"]
    run = simulate_ensemble(cfg, workers=threads, histogram=plan.objects["hist"])
    acc = run.point_set_a if point_set == "A" else run.point_set_b
    hist = acc.to_histogram()
    summary.metrics.update(
        n_trajectories=cfg.n_trajectories,
        n_samples=run.n_samples,
        n_crossings=run.n_crossings,
        n_histogram_points=hist.total_samples,
        out_of_range=hist.out_of_range,
        clamp_count=run.clamp_count,
        aborted_trajectories=len(run.aborted),
    )
    _csv(summary, out, "histogram.csv", {"bin_center": hist.centers, "density": hist.densities})
    return hist


def _gamma(hist: DensityHistogram, ref, window):
    try:
        return pearson_correlation(hist, ref, window)
    except ZeroVarianceError:
        return float("nan")


def run_bohmian_hist(plan, summary, out, threads):
    hist = _run_ensemble_hist(plan, summary, out, threads, "B")
    state = plan.objects["sde"].state
    g = _gamma(hist, lambda x: born_density(state, x), plan.objects["window"])
    summary.metrics["gamma_born"] = g
    thr = plan.config["acceptance"]["min_gamma"]
    if thr is not None:
        summary.check("gamma_born", g, thr, g >= thr)


def run_pointset_a(plan, summary, out, threads):
    hist = _run_ensemble_hist(plan, summary, out, threads, "A")
    state = plan.objects["sde"].state
    g = _gamma(hist, lambda x: born_density(state, x), plan.objects["window"])
    summary.metrics["gamma_born"] = g
    thr = plan.config["acceptance"]["min_gamma"]
    if thr is not None:
        summary.check("gamma_born", g, thr, g >= thr)


def run_pointset_b(plan, summary, out, threads):
    hist = _run_ensemble_hist(plan, summary, out, threads, "B")
    state = plan.objects["sde"].state
    window = plan.objects["window"]
    g_cl = _gamma(hist, lambda x: classical_density(state, x), window)
    g_born = _gamma(hist, lambda x: born_density(state, x), window)
    nodes = state.nodes()
    at_nodes = np.interp(nodes, hist.centers, hist.densities) if nodes.size else np.empty(0)
    summary.metrics.update(gamma_classical=g_cl, gamma_born=g_born, density_at_nodes=at_nodes.tolist())
    acc = plan.config["acceptance"]
    if acc["min_gamma_classical"] is not None:
        summary.check("gamma_classical", g_cl, acc["min_gamma_classical"], g_cl >= acc["min_gamma_classical"])
    if acc["classical_beats_born"]:
        summary.check("classical_beats_born", g_cl - g_born, 0.0, g_cl > g_born)
    if acc["positive_at_nodes"] and nodes.size:
        lo = float(at_nodes.min())
        summary.check("positive_at_nodes", lo, 0.0, lo > 0)


def _snapshot_columns(snap) -> dict:
    if snap.values.ndim == 1:
        return {"x": snap.x, "rho": snap.values}
    X, Y = snap.mesh()
    return {"x": X.ravel(), "y": Y.ravel(), "rho": snap.values.ravel()}


def _write_fp(plan, summary, out, sol) -> None:
    every = plan.config["fp"]["write_snapshots"] == "all"
    idx = range(len(sol.snapshots)) if every else [len(sol.snapshots) - 1]
    for k in idx:
        _csv(summary, out, f"snapshot_{k:03d}.csv", _snapshot_columns(sol.snapshots[k]))
    _csv(summary, out, "mass.csv", {"t": np.array(sol.times), "mass": np.array(sol.masses)})
    summary.metrics.update(
        t_end=sol.t_end,
        stationary=sol.stationary,
        mass_trace=list(sol.masses),
        final_snapshot=f"snapshot_{len(sol.snapshots) - 1:03d}.csv",
        clipped_cells=sol.clip.clipped,
        significant_undershoots=sol.clip.significant,
        worst_undershoot_fraction=sol.clip.worst_step_fraction,
    )


def _mass_check(plan, summary, sol) -> None:
    tol = plan.config["acceptance"]["mass_tolerance"]
    dev = max(abs(m - 1.0) for m in sol.masses)
    summary.metrics["max_mass_deviation"] = dev
    if tol is not None:
        summary.check("mass", dev, tol, dev <= tol)


def run_fp1d(plan, summary, out, threads):
    prob = plan.objects["problem"]
    sol = solve_fp(prob)
    _write_fp(plan, summary, out, sol)
    f = sol.final
    acc = plan.config["acceptance"]
    inside = np.abs(f.x) <= acc["error_window"]
    err = float(np.max(np.abs(f.values - born_density(prob.state, f.x))[inside]))
    summary.metrics["max_error_born"] = err
    _mass_check(plan, summary, sol)
    if acc["max_error"] is not None:
        summary.check("max_error_born", err, acc["max_error"], err <= acc["max_error"])


def run_fp2d(plan, summary, out, threads):
    prob = plan.objects["problem"]
    sol = solve_fp(prob)
    _write_fp(plan, summary, out, sol)
    acc = plan.config["acceptance"]
    sym = max(float(np.max(np.abs(s.values - s.values[::-1, ::-1]))) for s in sol.snapshots)
    marg = marginal_y(sol.final, mass_tolerance=1.0)
    _csv(summary, out, "marginal.csv", {"bin_center": marg.centers, "density": marg.densities})
    nodes = prob.state.nodes()
    at_nodes = np.interp(nodes, marg.centers, marg.densities)
    peak = float(marg.densities.max())
    summary.metrics.update(
        symmetry_error=sym,
        marginal_peak=peak,
        marginal_at_nodes=at_nodes.tolist(),
        node_ratios=(at_nodes / peak).tolist(),
        grid_spacing=sol.final.dx,
        grid_points=[sol.final.nx, sol.final.ny],
    )
    _mass_check(plan, summary, sol)
    if acc["max_symmetry_error"] is not None:
        summary.check("symmetry", sym, acc["max_symmetry_error"], sym <= acc["max_symmetry_error"])
    if nodes.size and acc["min_node_ratio"] is not None:
        r = float(np.min(at_nodes / peak))
        summary.check("node_ratio", r, acc["min_node_ratio"], r >= acc["min_node_ratio"] and at_nodes.min() > 0)
    cv = plan.config["crossval"]
    if cv["enabled"]:
        g = _crossval(plan, summary, out, threads, sol, marg)
        if acc["min_crossval_gamma"] is not None:
            summary.check("crossval_gamma", g, acc["min_crossval_gamma"], g >= acc["min_crossval_gamma"])


def _crossval(plan, summary, out, threads, sol, marg: DensityHistogram) -> float:
    """Point set B of an ensemble started from the same density, at the final time."""
    cv = plan.config["crossval"]
    prob = plan.objects["problem"]
    dt = float(cv["dt"])
    n_steps = int(round(sol.t_end / dt))
    starts = sample_planar_initial(prob.state, int(cv["n_trajectories"]), plan.config["seed"])
    cfg = SdeConfig(
        prob.state,
        dt=dt,
        n_steps=n_steps,
        initial_positions=starts,
        n_trajectories=len(starts),
        master_seed=plan.config["seed"],
        burn_in_time=0.0,
        record_stride=n_steps,
    )
    edges = marg.bin_edges
    run = simulate_ensemble(cfg, workers=threads, histogram=HistogramSpec(float(edges[0]), float(edges[-1]), len(edges) - 1))
    hist = run.point_set_b.to_histogram()
    _csv(summary, out, "crossval_histogram.csv", {"bin_center": hist.centers, "density": hist.densities})
    g = correlation(hist.densities, marg.densities)
    summary.metrics.update(
        crossval_gamma=g,
        crossval_trajectories=cfg.n_trajectories,
        crossval_clamp_count=run.clamp_count,
        crossval_aborted=len(run.aborted),
        crossval_out_of_range=hist.out_of_range,
    )
    return g


def run_duffing(plan, summary, out, threads):
    prob = plan.objects["problem"]
    sol = solve_fp(prob)
    _write_fp(plan, summary, out, sol)
    acc = plan.config["acceptance"]
    exact = duffing_exact_field(prob.duffing, prob.grid)
    _csv(summary, out, "exact.csv", _snapshot_columns(exact))
    err = relative_l2(sol.final, exact, margin=int(acc["margin"]))
    summary.metrics["rel_l2"] = err
    _mass_check(plan, summary, sol)
    if acc["max_rel_l2"] is not None:
        summary.check("rel_l2", err, acc["max_rel_l2"], err <= acc["max_rel_l2"])


def run_psi_magnitude(plan, summary, out, threads):
    p = plan.config["psi"]
    state = QuantumState(p["n"])
    s = np.linspace(-float(p["half_width"]), float(p["half_width"]), int(p["n_points"]))
    X, Y = np.meshgrid(s, s, indexing="ij")
    vals = magnitude_squared_complex(state, X + 1j * Y)
    _csv(summary, out, "psi_magnitude.csv", {"x": X.ravel(), "y": Y.ravel(), "psi2": vals.ravel()})
    along_y = magnitude_squared_complex(state, 1j * s)
    along_x = magnitude_squared_complex(state, s + 0j)
    far = np.abs(s) >= 2
    grows = bool(np.all(np.diff(along_y[s >= 2]) > 0) and np.all(np.diff(along_y[s <= -2]) < 0))
    summary.metrics.update(
        imag_axis_growth=grows,
        max_on_imag_axis=float(along_y.max()),
        max_on_real_axis_far=float(along_x[far].max()),
        real_axis_integral=float(np.trapezoid(along_x, s)),
    )
    summary.check("imag_axis_growth", grows, True, grows)


RUNNERS = {
    "bohmian_hist": run_bohmian_hist,
    "pointset_a": run_pointset_a,
    "pointset_b": run_pointset_b,
    "fp1d": run_fp1d,
    "fp2d": run_fp2d,
    "duffing": run_duffing,
    "psi_magnitude": run_psi_magnitude,
}


# --------------------------------------------------------------------------
# plot data


def emit_plot_data(summary: RunSummary, out) -> list[str]:
    """Write ``plot.csv`` pairing each empirical curve with its analytic reference."""
    out = Path(out)
    cfg = summary.config
    name = summary.experiment
    if name in ("bohmian_hist", "pointset_a", "pointset_b"):
        h = _read_csv(out, "histogram.csv")
        state = QuantumState(cfg["sde"]["n"])
        cols = {"bin_center": h["bin_center"], "empirical": h["density"]}
        if name == "pointset_b":
            cols["classical"] = classical_density(state, h["bin_center"])
        cols["born"] = born_density(state, h["bin_center"])
    elif name == "fp1d":
        s = _read_csv(out, summary.metrics["final_snapshot"])
        cols = {"x": s["x"], "rho": s["rho"], "born": born_density(QuantumState(cfg["fp"]["n"]), s["x"])}
    elif name == "fp2d":
        m = _read_csv(out, "marginal.csv")
        cols = {"bin_center": m["bin_center"], "fp_marginal": m["density"]}
        cols["born"] = born_density(QuantumState(cfg["fp"]["n"]), m["bin_center"])
        if cfg["crossval"]["enabled"]:
            cols["point_set_b"] = _read_csv(out, "crossval_histogram.csv")["density"]
    elif name == "duffing":
        s = _read_csv(out, summary.metrics["final_snapshot"])
        e = _read_csv(out, "exact.csv")
        cols = {"x": s["x"], "y": s["y"], "rho": s["rho"], "exact": e["rho"]}
    else:
        g = _read_csv(out, "psi_magnitude.csv")
        s = np.unique(g["x"])
        state = QuantumState(cfg["psi"]["n"])
        cols = {
            "s": s,
            "psi2_real_axis": magnitude_squared_complex(state, s + 0j),
            "psi2_imag_axis": magnitude_squared_complex(state, 1j * s),
        }
    _csv(summary, out, "plot.csv", cols)
    return ["plot.csv"]


# --------------------------------------------------------------------------
# driver


def run(cfg: dict, out: str | Path | None = None, threads: int = 1) -> RunSummary:
    """Run a resolved config.  Config errors are raised before anything is written."""
    if out is not None:
        cfg = {**cfg, "output_dir": str(out)}
    if isinstance(threads, bool) or not isinstance(threads, int) or threads < 1:
        raise ConfigError("threads must be a positive integer")
    plan = prepare(cfg)
    out = Path(cfg["output_dir"])
    summary = RunSummary(plan.experiment, cfg["seed"], {k: v for k, v in cfg.items() if k != "output_dir"})
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        RUNNERS[plan.experiment](plan, summary, out, threads)
        emit_plot_data(summary, out)
        summary.status = "ok" if summary.passed else "acceptance_failed"
    except (FpInstabilityError, EnsembleFailure, TrajectoryAbort, WavefunctionOverflowError, FloatingPointError) as exc:
        summary.status, summary.error = "instability", f"{type(exc).__name__}: {exc}"
    except (EmptyHistogramError, ZeroVarianceError, MissingArtifactError) as exc:
        summary.status, summary.error = "statistics_failed", f"{type(exc).__name__}: {exc}"
    summary.write(out)
    runtime = {"wall_time_s": time.perf_counter() - t0, "threads": threads}
    (out / "runtime.json").write_text(json.dumps(runtime, indent=2) + "\n")
    return summary


def exit_code(summary: RunSummary) -> int:
    return {"ok": EXIT_OK, "instability": EXIT_INSTABILITY}.get(summary.status, EXIT_STATISTICS)


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cqtraj", description="Complex quantum random trajectory experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment from a JSON config or preset name")
    r.add_argument("config", help="path to a JSON config, or the name of a shipped preset")
    r.add_argument("--out", help="output directory (overrides output_dir in the config)")
    r.add_argument("--seed", type=_seed, help="master seed (overrides the config)")
    r.add_argument("--threads", type=int, default=1, help="worker processes; never changes results")
    sub.add_parser("presets", help="list shipped presets")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "presets":
        for name in preset_names():
            print(name)
        return EXIT_OK
    try:
        cfg = resolve_config(load_config(args.config), seed=args.seed)
        summary = run(cfg, out=args.out, threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code = exit_code(summary)
    for k, c in summary.checks.items():
        print(f"{'PASS' if c['passed'] else 'FAIL'} {k}: {c['value']} (threshold {c['threshold']})")
    if summary.error:
        print(f"{summary.status}: {summary.error}", file=sys.stderr)
    print(f"{summary.experiment}: {summary.status} -> {args.out or cfg['output_dir']}")
    return code
