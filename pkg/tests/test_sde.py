import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import hermite as H

from cqtraj.sde import (
    EnsembleFailure,
    HistogramSpec,
    SdeConfig,
    TrajectoryAbort,
    bohmian_drift,
    nelson_drift,
    sample_planar_initial,
    simulate_ensemble,
    simulate_trajectory,
    step_bohmian,
    step_complex,
)
from cqtraj.wavefunction import NodeProximityError, QuantumState, born_density, complex_drift


def poly_drift(n, x):
    # v_B = H_n'/H_n - x from numpy's Hermite derivative, independent of the recurrence
    c = [0] * n + [1]
    return H.hermval(x, H.hermder(c)) / H.hermval(x, c) - x


def non_node_points(n, count=100, seed=3):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-4, 4, 4 * count)
    nodes = QuantumState(n).nodes()
    if nodes.size:
        x = x[np.min(np.abs(x[:, None] - nodes), axis=1) > 1e-3]
    return x[:count]


class TestDrifts:
    def test_bohmian_examples(self):
        s1 = QuantumState(1)
        assert bohmian_drift(s1, 1.0) == 0
        assert bohmian_drift(s1, 2.0) == pytest.approx(-1.5)
        x = np.array([-2.3, 0.4, 1.7])
        assert np.allclose(bohmian_drift(QuantumState(0), x), -x)

    def test_nelson_examples(self):
        s1 = QuantumState(1)
        assert nelson_drift(s1, 1.0) == pytest.approx(0, abs=1e-15)
        assert nelson_drift(s1, 0.5) == pytest.approx(1.5)

    def test_node_errors(self):
        with pytest.raises(NodeProximityError):
            bohmian_drift(QuantumState(1), 0.0)
        with pytest.raises(NodeProximityError):
            nelson_drift(QuantumState(1), 0.0)

    @pytest.mark.parametrize("n", [0, 1, 2, 3])
    def test_drift_identity(self, n):
        s = QuantumState(n)
        x = non_node_points(n)
        assert x.size == 100
        vb = bohmian_drift(s, x)
        assert np.max(np.abs(vb - nelson_drift(s, x))) <= 1e-12
        u = complex_drift(s, x + 0j)
        assert np.max(np.abs(vb - (u.real - u.imag))) <= 1e-12
        assert np.allclose(vb, poly_drift(n, x), rtol=1e-10, atol=1e-10)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 3), st.floats(-5, 5, allow_nan=False))
    def test_drift_identity_property(self, n, x):
        s = QuantumState(n)
        if abs(H.hermval(x, [0] * n + [1])) < 1e-3:
            return
        vb = bohmian_drift(s, x)
        u = complex_drift(s, complex(x, 0.0))
        tol = 1e-12 * max(1.0, abs(vb))
        assert abs(vb - nelson_drift(s, x)) <= tol
        assert abs(vb - (u.real - u.imag)) <= tol


class TestSteps:
    def test_equilibrium(self):
        assert step_complex(QuantumState(1), 1 + 0j, 1e-3, 0.0) == 1 + 0j

    def test_drift_only(self):
        dt = 1e-3
        z = step_complex(QuantumState(1), 1j, dt, 0.0)
        assert z.real == pytest.approx(-2 * dt, abs=1e-15)
        assert z.imag == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 4), st.floats(-3, 3), st.floats(-2, 2), st.floats(-4, 4), st.floats(1e-5, 1e-1))
    def test_noise_anticorrelated(self, n, x, y, xi, dt):
        s = QuantumState(n)
        z = complex(x, y)
        if abs(H.hermval(z, [0] * n + [1])) < 1e-3:
            return
        dz = step_complex(s, z, dt, xi) - step_complex(s, z, dt, 0.0)
        assert dz.real == pytest.approx(-xi * math.sqrt(dt / 2), abs=1e-12)
        assert dz.imag == pytest.approx(xi * math.sqrt(dt / 2), abs=1e-12)

    @given(st.floats(-6, 6), st.floats(1e-6, 1.0))
    def test_noise_exactly_opposite(self, xi, dt):
        # the ground state has zero drift at the origin, so the step is pure noise
        dz = step_complex(QuantumState(0), 0j, dt, xi)
        assert dz.real == -dz.imag

    def test_bohmian_step(self):
        s = QuantumState(1)
        assert step_bohmian(s, 1.0, 0.01, 0.0) == 1.0
        assert step_bohmian(s, 0.5, 0.01, 0.0) == pytest.approx(0.515)
        xi = np.random.default_rng(1).standard_normal(200_000)
        steps = step_bohmian(QuantumState(0), np.zeros_like(xi), 0.01, xi)
        assert np.var(steps) == pytest.approx(0.01, rel=0.02)

    def test_non_finite_aborts(self):
        with pytest.raises(TrajectoryAbort):
            step_complex(QuantumState(1), complex(np.inf, 0), 1e-3, 0.0)

    @pytest.mark.xfail(strict=True, reason="the equilibria z = +-1 are centers: linearized drift 2i(z - 1)")
    def test_zero_noise_converges_to_equilibria(self):
        s = QuantumState(1)
        for z0, target in ((0.8 + 0.1j, 1.0), (1.3 - 0.2j, 1.0), (-0.9 + 0.15j, -1.0)):
            z, gaps = z0, []
            for _ in range(5000):
                z = step_complex(s, z, 1e-3, 0.0)
                gaps.append(abs(z - target))
            assert gaps[-1] < 0.5 * abs(z0 - target)
            assert np.all(np.diff(gaps[::500]) < 0)

    def test_zero_noise_orbits_equilibria(self):
        # pure drift circles +-1 with period ~pi near the fixed point and neither
        # escapes nor collapses; the orbit returns close to its start
        s = QuantumState(1)
        dt = 1e-4
        for z0, target in ((1.05 + 0.02j, 1.0), (-0.97 - 0.03j, -1.0)):
            z, gaps = z0, []
            for _ in range(int(round(math.pi / dt))):
                z = step_complex(s, z, dt, 0.0)
                gaps.append(abs(z - target))
            d0 = abs(z0 - target)
            assert 0.5 * d0 < min(gaps) and max(gaps) < 2 * d0
            assert abs(z - z0) < 0.1 * d0


class TestConfig:
    def test_validation(self):
        s = QuantumState(1)
        with pytest.raises(ValueError):
            SdeConfig(s, dt=0.0)
        with pytest.raises(ValueError):
            SdeConfig(s, n_steps=100, dt=1e-3, burn_in_time=0.1)
        with pytest.raises(ValueError):
            SdeConfig(s, initial_positions=(0j,))
        with pytest.raises(ValueError):
            SdeConfig(s, n_trajectories=0)
        with pytest.raises(ValueError):
            SdeConfig(s, kind="bohmian", initial_positions=(1 + 1j,))

    def test_round_robin_start(self):
        cfg = SdeConfig(QuantumState(1), initial_positions=(0.5, -0.5, 2.0), n_trajectories=5)
        assert [cfg.start(k) for k in range(5)] == [0.5, -0.5, 2.0, 0.5, -0.5]


def small_config(**kw):
    base = dict(dt=1e-3, n_steps=600, n_trajectories=6, master_seed=11, burn_in_time=0.1, record_stride=3)
    base.update(kw)
    return SdeConfig(QuantumState(1), **base)


class TestTrajectories:
    def test_zero_steps(self):
        cfg = SdeConfig(QuantumState(1), n_steps=0, burn_in_time=0.0)
        assert simulate_trajectory(cfg, 0).samples == []

    def test_sampling_grid(self):
        cfg = small_config()
        tr = simulate_trajectory(cfg, 2)
        dt = np.diff(tr.t)
        assert np.all(dt > 0) and np.allclose(dt, 3e-3)
        assert tr.t[0] >= 0.1 and tr.t[-1] == pytest.approx(0.6)
        assert np.all(np.isfinite(tr.z))

    def test_deterministic(self):
        cfg = small_config()
        a, b = simulate_trajectory(cfg, 4), simulate_trajectory(cfg, 4)
        assert np.array_equal(a.z, b.z) and a.seed == b.seed
        assert not np.array_equal(a.z, simulate_trajectory(cfg, 5).z)

    def test_matches_manual_stepping(self):
        cfg = small_config(record_stride=1, burn_in_time=0.0, n_steps=50)
        tr = simulate_trajectory(cfg, 1)
        rng = np.random.Generator(np.random.PCG64(cfg.seed_sequence(1)))
        xi = rng.standard_normal(50)
        z = cfg.start(1)
        for j in range(50):
            z = step_complex(cfg.state, z, cfg.dt, xi[j])
            assert tr.z[j] == z

    def test_csv(self, tmp_path):
        tr = simulate_trajectory(small_config(), 0)
        tr.to_csv(tmp_path / "t.csv")
        data = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1)
        assert (tmp_path / "t.csv").read_text().splitlines()[0] == "t,x,y"
        assert np.array_equal(data[:, 1], tr.x) and np.array_equal(data[:, 2], tr.y)

    def test_confinement(self):
        cfg = SdeConfig.for_duration(QuantumState(1), 10.0, n_trajectories=20, master_seed=5, record_stride=10)
        run = simulate_ensemble(cfg, keep_trajectories=True)
        r = np.abs(np.concatenate([t.z for t in run.trajectories]))
        assert np.mean(r > 6) < 0.01


class TestEnsemble:
    def test_single_wraps_trajectory(self):
        cfg = small_config(n_trajectories=1)
        run = simulate_ensemble(cfg, keep_trajectories=True)
        assert np.array_equal(run.trajectories[0].z, simulate_trajectory(cfg, 0).z)

    def test_batching_and_workers_do_not_matter(self):
        cfg = small_config(n_trajectories=9)
        spec = HistogramSpec(-4, 4, 40)
        a = simulate_ensemble(cfg, keep_trajectories=True, histogram=spec, batch_size=9)
        b = simulate_ensemble(cfg, keep_trajectories=True, histogram=spec, batch_size=2, workers=2)
        for ta, tb in zip(a.trajectories, b.trajectories):
            assert np.array_equal(ta.z, tb.z)
        assert np.array_equal(a.point_set_a.counts, b.point_set_a.counts)
        assert np.array_equal(a.point_set_b.counts, b.point_set_b.counts)
        assert len(a.trajectories) == cfg.n_trajectories

    def test_streamed_matches_retained(self):
        from cqtraj.stats import detect_crossings, project_real

        cfg = small_config(n_trajectories=7)
        spec = HistogramSpec(-4, 4, 40)
        run = simulate_ensemble(cfg, keep_trajectories=True, histogram=spec, batch_size=3)
        acc_a, acc_b = spec.accumulator(), spec.accumulator()
        for tr in run.trajectories:
            acc_a.add([c.x for c in detect_crossings(tr)])
            acc_b.add(project_real(tr))
        assert np.array_equal(acc_a.counts, run.point_set_a.counts)
        assert np.array_equal(acc_b.counts, run.point_set_b.counts)

    def test_bohmian_stays_on_axis_side(self):
        cfg = SdeConfig.for_duration(QuantumState(1), 2.0, kind="bohmian", n_trajectories=10, master_seed=2,
                                     burn_in_time=0.0)
        run = simulate_ensemble(cfg, keep_trajectories=True)
        for tr in run.trajectories:
            assert np.all(tr.y == 0)
            assert np.all(np.sign(tr.x) == np.sign(cfg.start(tr.index).real))

    def test_abort_threshold(self, monkeypatch):
        import cqtraj.sde as sde

        def broken(n, z, dt, xi, v_max):
            return z * np.nan, np.zeros(z.shape, bool)

        monkeypatch.setattr(sde, "_complex_update", broken)
        with pytest.raises(EnsembleFailure):
            simulate_ensemble(small_config())


def test_planar_samples_n1():
    z = np.array(sample_planar_initial(QuantumState(1), 50_000, 4))
    r2 = np.abs(z) ** 2
    # for n = 1 the density is radial and |z|^2 ~ Gamma(2, 1): mean 2, variance 2
    assert r2.mean() == pytest.approx(2.0, rel=0.02)
    assert r2.var() == pytest.approx(2.0, rel=0.05)
    assert abs(np.mean(np.exp(1j * np.angle(z)))) < 0.02


def test_planar_samples_marginal_n3():
    s = QuantumState(3)
    z = np.array(sample_planar_initial(s, 100_000, 9))
    edges = np.linspace(-4, 4, 41)
    counts, _ = np.histogram(z.real, edges)
    c = 0.5 * (edges[1:] + edges[:-1])
    # x-marginal of |Psi(x)|^2 e^{-y^2} + |Psi(y)|^2 e^{-x^2}, normalized
    expected = 0.5 * (born_density(s, c) + np.exp(-c * c) / math.sqrt(math.pi)) * 0.2 * len(z)
    assert np.max(np.abs(counts - expected) / np.sqrt(expected + 1)) < 5
