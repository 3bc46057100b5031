import math

import numpy as np
import pytest

import cqtraj.fokker_planck as fp
from cqtraj.fokker_planck import (
    DuffingParams,
    Field1D,
    Field2D,
    FpInstabilityError,
    FpProblem,
    Grid,
    UnderResolvedError,
    bohmian_operator,
    born_initial,
    complex_operator,
    duffing_exact,
    duffing_exact_field,
    duffing_operator,
    duffing_step,
    field_mass,
    fp_step_1d,
    fp_step_2d,
    gaussian_initial,
    node_aligned_spacing,
    planar_initial,
    radial_initial,
    relative_l2,
    solve_fp,
)
from cqtraj.wavefunction import QuantumState, born_density


class TestGrids:
    def test_offset_avoids_origin(self):
        g = Grid.offset(5, 0.05)
        f = g.zeros()
        assert g.nx == 200 and np.min(np.abs(f.x)) == pytest.approx(0.025)
        assert np.array_equal(f.x, -f.x[::-1]) and np.array_equal(f.y, -f.y[::-1])
        assert f.dx == pytest.approx(0.05)

    def test_node_aligned(self):
        s = QuantumState(3)
        h = node_aligned_spacing(s, 0.05)
        x = Grid.offset(6, h, dims=1).zeros().x
        for node in s.nodes():
            d = np.sort(np.abs(x - node))[:2]
            assert d == pytest.approx([h / 2, h / 2])
        assert node_aligned_spacing(QuantumState(1), 0.05) == 0.05
        assert node_aligned_spacing(QuantumState(0), 0.1) == 0.1

    def test_field_mass(self):
        f = Field2D(0, 1, 0, 1, np.ones((11, 11)))
        assert field_mass(f) == pytest.approx(1.0)
        assert field_mass(Field1D(-1, 1, np.ones(5))) == pytest.approx(2.0)

    def test_field_validation(self):
        with pytest.raises(ValueError):
            Field2D(0, 1, 0, 1, np.ones((2, 5)))
        with pytest.raises(ValueError):
            Field2D(1, 0, 0, 1, np.ones((4, 4)))


class TestInitialAndExact:
    def test_gaussian(self):
        g = Grid.square(5, 201)
        f = gaussian_initial(-2, -1.8, 0.1, 0.1, g)
        i, j = np.unravel_index(np.argmax(f.values), f.values.shape)
        assert (f.x[i], f.y[j]) == pytest.approx((-2.0, -1.8))
        assert field_mass(f) == pytest.approx(1.0, abs=1e-10)
        with pytest.raises(ValueError):
            gaussian_initial(0, 0, 0.0, 0.1, g)

    def test_radial_and_born(self):
        g = Grid.offset(6, 0.1)
        assert field_mass(radial_initial(g)) == pytest.approx(1.0, abs=1e-10)
        b = born_initial(QuantumState(1), Grid.offset(5, 0.025, dims=1))
        assert np.allclose(b.values[1:-1], born_density(QuantumState(1), b.x[1:-1]), rtol=1e-8)

    def test_planar_matches_closed_forms(self):
        g = Grid.offset(5, 0.1)
        X, Y = g.zeros().mesh()
        r2 = X * X + Y * Y
        assert np.allclose(planar_initial(QuantumState(1), g).values, radial_initial(g).values, rtol=1e-12, atol=1e-15)
        n3 = np.exp(-r2) * (4 * (X**6 + Y**6) - 12 * (X**4 + Y**4) + 9 * r2)
        f = planar_initial(QuantumState(3), g)
        inner = (slice(1, -1), slice(1, -1))
        ratio = f.values[inner] / n3[inner]
        assert np.allclose(ratio, ratio.flat[0], rtol=1e-12)

    def test_duffing_exact(self):
        p = DuffingParams()
        assert duffing_exact(p, 0.0, 0.0) == 1.0
        X = np.linspace(-4, 4, 17)
        assert np.array_equal(duffing_exact(p, X, 0.7), duffing_exact(p, -X, 0.7))
        g = Grid.square(5, 201)
        f = duffing_exact_field(p, g)
        i, j = np.unravel_index(np.argmax(f.values), f.values.shape)
        assert abs(f.x[i]) == pytest.approx(math.sqrt(5), abs=0.03) and f.y[j] == pytest.approx(0, abs=1e-12)
        with pytest.raises(ValueError):
            duffing_exact_field(DuffingParams(gamma=-0.1), g)


class TestSteps:
    def test_zero_fields(self):
        g1, g2 = Grid.offset(5, 0.05, dims=1), Grid.offset(3, 0.1)
        assert not fp_step_1d(g1.zeros(), 1e-5).values.any()
        z2 = g2.zeros()
        op = complex_operator(QuantumState(1), g2)
        assert not fp_step_2d(z2, op.drift, 1e-5).values.any()
        assert not duffing_step(Grid.square(5, 101).zeros(), DuffingParams(), 1e-4).values.any()

    def test_expanded_divergence_coefficient(self):
        # the expanded form carries -div(v) rho; for n = 1 div(v) = 4xy/(x^2+y^2)^2
        g = Grid(0.5, 1.5, 3, 0.5, 1.5, 3)
        op = complex_operator(QuantumState(1), g, form="expanded")
        assert op.divergence[1, 1] == pytest.approx(1.0)

    @staticmethod
    def _residual_1d(h):
        s = QuantumState(1)
        g = Grid.offset(6, h, dims=1)
        rho = born_initial(s, g)
        dt = 1e-7
        out = fp_step_1d(rho, dt)
        inner = np.abs(rho.x) < 4
        return np.max(np.abs(out.values - rho.values)[inner]) / dt

    def test_born_density_is_stationary_1d(self):
        r1, r2 = self._residual_1d(0.04), self._residual_1d(0.02)
        assert r1 < 0.02
        assert 3.0 < r1 / r2 < 5.0

    @staticmethod
    def _residual_duffing(h):
        p = DuffingParams()
        g = Grid.square(5, int(round(10 / h)) + 1)
        rho = duffing_exact_field(p, g)
        dt = 1e-7
        out = duffing_step(rho, p, dt)
        s = (slice(10, -10), slice(10, -10))
        return np.max(np.abs(out.values - rho.values)[s]) / dt

    def test_duffing_exact_is_stationary(self):
        r1, r2 = self._residual_duffing(0.1), self._residual_duffing(0.05)
        # ||L rho|| <= C (dx^2 + dy^2): halving h cuts the residual four-fold
        assert 3.5 < r1 / r2 < 4.5
        assert r2 < 0.01

    def test_forms_agree_for_smooth_drift(self):
        p = DuffingParams()
        g = Grid.square(5, 101)
        rho = gaussian_initial(0.5, -0.3, 0.6, 0.5, g)
        a = duffing_step(rho, p, 1e-4, form="conservative").values
        b = duffing_step(rho, p, 1e-4, form="expanded").values
        assert np.max(np.abs(a - b)) < 1e-4 * 1e-4 * np.max(rho.values) * 50

    def test_symmetry_preserved(self):
        g = Grid.offset(3, 0.1)
        op = complex_operator(QuantumState(1), g)
        rho = radial_initial(g)
        for _ in range(200):
            rho = fp_step_2d(rho, op.drift, 2e-4)
            assert np.max(np.abs(rho.values - rho.values[::-1, ::-1])) <= 1e-10

    def test_growth_detector(self):
        g = Grid.offset(5, 0.05, dims=1)
        with pytest.raises(FpInstabilityError):
            rho = born_initial(QuantumState(1), g)
            for _ in range(50):
                rho = fp_step_1d(rho, 0.05)


class TestOperators:
    def test_stability_guard(self):
        g = Grid.square(5, 201)
        op = duffing_operator(DuffingParams(), g)
        limit = op.max_stable_dt()
        assert limit == pytest.approx(min(0.2 * 0.05**2 / 1.0, 0.2 * 0.05 / np.max(np.abs(op.drift[1]))))
        op.check_dt(1e-4)
        with pytest.raises(FpInstabilityError):
            op.check_dt(2 * limit)

    def test_bohmian_operator_drift(self):
        g = Grid.offset(5, 0.05, dims=1)
        op = bohmian_operator(QuantumState(1), g)
        x = g.zeros().x
        assert np.allclose(op.drift[0], np.clip((1 - x * x) / x, -1e3, 1e3))

    def test_complex_operator_clamped(self):
        g = Grid.offset(1, 0.002)
        op = complex_operator(QuantumState(1), g, v_max=100.0)
        assert np.max(np.hypot(*op.drift)) <= 100.0 * (1 + 1e-12)


class TestSolve:
    def test_t_final_zero(self):
        prob = FpProblem("bohmian_1d", Grid.offset(5, 0.05, dims=1), dt=1e-4, t_final=0.0)
        sol = solve_fp(prob)
        assert sol.times == [0.0] and np.array_equal(sol.final.values, prob.initial_field().values)

    def test_problem_validation(self):
        with pytest.raises(ValueError):
            FpProblem("bohmian_1d", Grid.offset(5, 0.1), dt=1e-4, t_final=1)
        with pytest.raises(ValueError):
            FpProblem("complex_2d", Grid.offset(5, 0.1), dt=0.0, t_final=1)
        with pytest.raises(ValueError):
            FpProblem("heat", Grid.offset(5, 0.1), dt=1e-4, t_final=1)

    def test_rejects_unstable_dt(self):
        prob = FpProblem("complex_2d", Grid.offset(4, 0.1), dt=5e-3, t_final=1.0)
        with pytest.raises(FpInstabilityError):
            solve_fp(prob)

    def test_snapshots_and_mass(self):
        prob = FpProblem("complex_2d", Grid.offset(6, 0.1), dt=2e-4, t_final=1.0, snapshot_every=0.25)
        sol = solve_fp(prob)
        assert sol.times == pytest.approx([0, 0.25, 0.5, 0.75, 1.0])
        assert all(abs(m - 1) < 0.05 for m in sol.masses) and not sol.mass_flag
        assert max(np.max(np.abs(s.values - s.values[::-1, ::-1])) for s in sol.snapshots) <= 1e-10

    def test_stationarity_stops_early(self):
        prob = FpProblem("bohmian_1d", Grid.offset(5, 0.05, dims=1), dt=1e-4, t_final=5.0, check_every=500)
        sol = solve_fp(prob)
        assert sol.stationary and sol.t_end < 5.0

    def test_under_resolved_rejected(self, monkeypatch):
        monkeypatch.setattr(fp, "MAX_UNDERSHOOT_FRACTION", 0.0)
        monkeypatch.setattr(fp, "UNDERSHOOT_REL", 0.0)
        prob = FpProblem("complex_2d", Grid.offset(4, 0.1), dt=2e-4, t_final=0.5)
        with pytest.raises(UnderResolvedError):
            solve_fp(prob)

    def test_expanded_form_unstable_near_node(self):
        # -div(v) rho is about +4/h^2 next to the origin and central advection has
        # no compensating diagonal term, so the expanded form grows without bound
        prob = FpProblem("complex_2d", Grid.offset(3, 0.1), dt=2e-4, t_final=2.0, form="expanded")
        with pytest.raises(FpInstabilityError):
            solve_fp(prob)

    def test_relative_l2(self):
        g = Grid.square(1, 21)
        a = g.field(np.ones((21, 21)))
        assert relative_l2(a, a) == 0
        assert relative_l2(a.with_values(2 * a.values), a) == pytest.approx(1.0)
