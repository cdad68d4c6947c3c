"""Tests for the interior / exterior cycle problems, the gauges and the beta = 0 reference"""

import numpy as np
import pytest
from scipy.integrate import simpson

from dirichlet_solvers import (GaugeKind, ProblemSet, _face_particular, barrier_certificate, exterior_gauge,
                               face_line_error, interior_gauge, kernel_I, one_d_refinement, refinement_study,
                               regularization_gap, solve_1d_reference, solve_exterior, solve_exterior_nonhom,
                               solve_face_plus, solve_interior, solve_interior_nonhom, truncation_convergence)
from grid_fd import Face, Field3, Level, Region, SolverOptions, SurfaceField, build_grid, build_yz_grid, trace
from model_core import boundary_basket

TOL = 1e-10


def _make_random_surface(grid, level, seed):
    rng = np.random.default_rng(seed)
    shape = (grid.xs.size, grid.zs.size)
    return SurfaceField(level, grid.xs, grid.zs, rng.uniform(-2, 2, shape), rng.uniform(-2, 2, shape))


def _mirror(values: np.ndarray) -> np.ndarray:
    """(x, y, z) -> (-x, -y, -z) on a symmetric grid"""
    return values[::-1, ::-1, ::-1]


@pytest.fixture(scope="module")
def problems(small_grid, params, levels, neumann):
    return ProblemSet(small_grid, params, levels, neumann)


# -- interior -------------------------------------------------------------------

class TestInterior:

    def test_constants_are_preserved(self, small_grid, params, levels, neumann, problems):
        phi = SurfaceField.constant(small_grid, Level.GAMMA1, 1.5)
        sol = solve_interior(phi, small_grid, params, levels, neumann, problems)
        np.testing.assert_allclose(sol.eta.values, 1.5, rtol=1e-9)
        np.testing.assert_allclose(sol.beta_plus.values, 1.5, rtol=1e-9)

    def test_maximum_principle(self, small_grid, params, levels, neumann, problems):
        phi = _make_random_surface(small_grid, Level.GAMMA1, 1)
        sol = solve_interior(phi, small_grid, params, levels, neumann, problems)
        assert sol.eta.max_abs() <= phi.max_abs() * (1 + TOL)
        back = trace(sol.eta, Level.GAMMA1)
        np.testing.assert_array_equal(back.upper, phi.upper)
        np.testing.assert_array_equal(back.lower, phi.lower)

    def test_point_symmetry(self, small_grid, params, levels, neumann, problems):
        # upper-sheet indicator: u(s) + u(-s) = 1
        phi = SurfaceField.from_function(small_grid, Level.GAMMA1, lambda x, y, z: (y > 0) + 0.0 * x)
        eta = solve_interior(phi, small_grid, params, levels, neumann, problems).eta.values
        np.testing.assert_allclose(eta + _mirror(eta), 1.0, atol=1e-9)
        nx, ny, nz = eta.shape
        assert eta[nx // 2, ny // 2, nz // 2] == pytest.approx(0.5, abs=1e-9)

    def test_face_traces_match_the_volume(self, small_grid, params, levels, neumann, problems):
        phi = _make_random_surface(small_grid, Level.GAMMA1, 2)
        sol = solve_interior(phi, small_grid, params, levels, neumann, problems)
        np.testing.assert_array_equal(sol.beta_plus.values, sol.eta.values[:, :, -1])
        np.testing.assert_array_equal(sol.beta_minus.values, sol.eta.values[:, :, 0])
        assert sol.corner_nodes.size == 2 * small_grid.xs.size

    def test_data_must_live_on_gamma1(self, small_grid, params, levels, neumann):
        with pytest.raises(ValueError):
            solve_interior(SurfaceField.constant(small_grid, Level.GAMMA, 1.0), small_grid, params, levels, neumann)

    def test_sor_agrees_with_direct(self, params, levels):
        grid = build_grid(params, levels, nx=3, ny_per_band=1, nz=3, y_max=2.0)
        phi = _make_random_surface(grid, Level.GAMMA1, 3)
        direct = solve_interior(phi, grid, params, levels, SolverOptions(tol=1e-12))
        sor = solve_interior(phi, grid, params, levels, SolverOptions(tol=1e-12, method="sor", max_iter=50000))
        np.testing.assert_allclose(sor.eta.values, direct.eta.values, atol=1e-9)
        assert sor.iterations > 1


# -- exterior -------------------------------------------------------------------

class TestExterior:

    def test_constants_are_preserved_with_reflection(self, small_grid, params, levels, neumann, problems):
        h = SurfaceField.constant(small_grid, Level.GAMMA, -0.75)
        sol = solve_exterior(h, small_grid, params, levels, neumann, problems)
        np.testing.assert_allclose(sol.zeta.values, -0.75, rtol=1e-9)

    def test_truncation_data_pulls_towards_zero(self, small_grid, params, levels):
        opts = SolverOptions(y_closure="dirichlet", truncation_value=0.0)
        sol = solve_exterior(SurfaceField.constant(small_grid, Level.GAMMA, 1.0), small_grid, params, levels, opts)
        assert sol.zeta.values.min() >= -TOL
        assert sol.zeta.values.max() <= 1.0 + TOL
        up = sol.zeta.restrict(Region.EXTERIOR_UP).values
        np.testing.assert_array_equal(up[:, -1, :], 0.0)
        np.testing.assert_array_equal(up[:, 0, :], 1.0)

    def test_march_matches_coupled(self, small_grid, params, levels, neumann, problems):
        h = _make_random_surface(small_grid, Level.GAMMA, 4)
        march = solve_exterior(h, small_grid, params, levels, neumann, problems, method="march")
        coupled = solve_exterior(h, small_grid, params, levels, neumann, problems, method="coupled")
        assert (march.method, coupled.method) == ("march", "coupled")
        np.testing.assert_allclose(march.zeta.values, coupled.zeta.values, atol=1e-9)

    def test_viscosity_forces_the_coupled_solve(self, small_grid, params, levels):
        opts = SolverOptions(y_closure="neumann", epsilon_z=1e-3)
        h = SurfaceField.constant(small_grid, Level.GAMMA, 1.0)
        assert solve_exterior(h, small_grid, params, levels, opts).method == "coupled"

    def test_data_must_live_on_gamma(self, small_grid, params, levels, neumann):
        with pytest.raises(ValueError):
            solve_exterior(SurfaceField.constant(small_grid, Level.GAMMA1, 1.0), small_grid, params, levels, neumann)

    @pytest.mark.parametrize("method", ["march", "coupled"])
    def test_reflected_face_carries_the_corner_value(self, params_1d, levels, neumann, method):
        # the only exit of the z = Y face strip is its corner on Gamma
        grid = build_grid(params_1d, levels, nx=3, ny_per_band=2, nz=5, y_max=3.0)
        h = SurfaceField.from_function(grid, Level.GAMMA, lambda x, y, z: np.sin(z) + 0.3 * y + 0.0 * x)
        sol = solve_exterior(h, grid, params_1d, levels, neumann, method=method)
        Y = params_1d.Y
        np.testing.assert_allclose(sol.zeta_plus.values, np.sin(Y) + 0.3 * levels.ybar, atol=1e-9)
        np.testing.assert_allclose(sol.zeta_minus.values, np.sin(-Y) - 0.3 * levels.ybar, atol=1e-9)


class TestFaces:

    def test_strip_with_equal_ends_is_constant(self, small_grid, params, levels, neumann, problems):
        face = solve_face_plus(2.0, 2.0, Face.PLUS, "interior", small_grid, params, neumann, levels, problems)
        np.testing.assert_allclose(face.values, 2.0, rtol=1e-9)
        assert face.ys[0] == 0.0
        assert face.ys[-1] == levels.ybar1

    def test_strip_values_stay_between_the_ends(self, small_grid, params, levels, neumann, problems):
        face = solve_face_plus(1.0, 0.0, Face.MINUS, "exterior", small_grid, params, neumann, levels, problems)
        assert face.values.min() >= -TOL
        assert face.values.max() <= 1.0 + TOL

    def test_kernel(self, params, levels):
        assert kernel_I(0.0, levels.ybar1, params, levels) == pytest.approx(1.0, rel=1e-12)
        split = kernel_I(-0.4, 0.2, params, levels) + kernel_I(0.2, 0.9, params, levels)
        assert split == pytest.approx(kernel_I(-0.4, 0.9, params, levels), rel=1e-10)
        with pytest.raises(ValueError):
            kernel_I(0.5, 1.5, params, levels)

    def test_kernel_matches_simpson(self, params, levels):
        weight = lambda s: np.exp(params.c0 * s * s + 2.0 * params.k * params.Y * s)
        half = np.linspace(0.0, 0.5 * levels.ybar1, 2001)
        full = np.linspace(0.0, levels.ybar1, 4001)
        expected = simpson(weight(half), x=half) / simpson(weight(full), x=full)
        assert kernel_I(0.0, 0.5 * levels.ybar1, params, levels) == pytest.approx(expected, rel=1e-9)


# -- sources and gauges -----------------------------------------------------------

class TestSources:

    def test_interior_exit_time_is_positive_and_bounded(self, small_grid, params, levels, neumann, problems):
        f = Field3.from_function(small_grid, Region.FULL, lambda x, y, z: np.ones_like(x))
        sol = solve_interior_nonhom(f, small_grid, params, levels, neumann, problems)
        inner = sol.eta.values[:, 1:-1, :]
        assert inner.min() > 0.0
        assert sol.eta.max_abs() <= sol.gauge.bound
        np.testing.assert_array_equal(sol.eta.values[:, [0, -1], :], 0.0)

    def test_superposition(self, small_grid, params, levels, neumann, problems):
        f = Field3.from_function(small_grid, Region.FULL, lambda x, y, z: np.tanh(y) * z)
        phi = _make_random_surface(small_grid, Level.GAMMA1, 5)
        both = solve_interior_nonhom(f, small_grid, params, levels, neumann, problems, boundary=phi)
        source_only = solve_interior_nonhom(f, small_grid, params, levels, neumann, problems)
        data_only = solve_interior(phi, small_grid, params, levels, neumann, problems)
        np.testing.assert_allclose(both.eta.values, source_only.eta.values + data_only.eta.values, atol=1e-9)

    def test_exterior_source_sign(self, small_grid, params, levels, neumann, problems):
        f = Field3.from_function(small_grid, Region.FULL, lambda x, y, z: np.ones_like(x))
        sol = solve_exterior_nonhom(f, small_grid, params, levels, neumann, problems)
        assert sol.zeta.values.min() >= -TOL
        assert sol.gauge.kind is GaugeKind.PSI_EXTERIOR

    def test_interior_gauge_minimum(self, params, levels):
        gauge = interior_gauge(0.5, params, levels)
        assert gauge.lam == pytest.approx(1.0 + (params.k * params.Y + params.beta * params.L) ** 2 / params.c0)
        assert interior_gauge(10.0, params, levels).lam == pytest.approx(20.0)
        with pytest.raises(ValueError):
            interior_gauge(0.5, params, levels, lam=1.0)

    def test_exterior_gauge(self, params, levels):
        gauge = exterior_gauge(1.5, params, levels)
        assert gauge.gamma_scale == pytest.approx(3.0)
        assert float(gauge.evaluate(0.0, levels.ybar, 0.0)) == pytest.approx(3.0)
        assert float(gauge.evaluate(0.0, -2.0, 0.0)) > 3.0
        # ybar = 0.5 is far below 2 (kY + beta L) / c0
        assert not gauge.hypothesis_holds
        with pytest.raises(ValueError):
            exterior_gauge(1.5, params, levels, gamma=1.0)

    def test_exterior_bound_holds_without_the_gauge_hypothesis(self, small_grid, params, levels, neumann, problems):
        f = Field3.from_function(small_grid, Region.FULL, lambda x, y, z: np.tanh(y) + 0.0 * x)
        sol = solve_exterior_nonhom(f, small_grid, params, levels, neumann, problems)
        assert not sol.gauge.hypothesis_holds
        X, Yv, Z = small_grid.mesh(Region.EXTERIOR)
        psi = sol.gauge.evaluate(X, Yv, Z)
        assert np.max(np.abs(sol.zeta.values) - psi) <= TOL

    def test_certificate_reports_rows(self, params, levels, neumann, problems):
        cert = barrier_certificate(problems, interior_gauge(1.0, params, levels))
        assert cert["rows"] == problems.interior_system().unknown.size
        assert np.isfinite(cert["margin"])


# -- truncation and regularization ---------------------------------------------------

class TestLimits:

    def test_values_increase_with_the_truncation_level(self, params, levels):
        opts = SolverOptions(y_closure="dirichlet", truncation_value=0.0)
        records = truncation_convergence(lambda x, y, z: 1.0 + 0.0 * x, params, levels, 3, 1, 3,
                                         [4.0, 2.0, 3.0], opts)
        assert [r["y_max"] for r in records] == [2.0, 3.0, 4.0]
        assert np.isnan(records[0]["sup_diff"])
        assert all(r["increasing"] for r in records)
        assert records[2]["sup_diff"] < records[1]["sup_diff"]

    def test_small_viscosity_changes_little(self, small_grid, params, levels, neumann):
        phi = _make_random_surface(small_grid, Level.GAMMA1, 6)
        assert regularization_gap(phi, small_grid, params, levels, neumann, 1e-6) < 1e-3

    def test_refinement_study_records_every_problem(self, small_grid, params, levels, neumann):
        basket = boundary_basket(params, levels)
        basket['constant'] = lambda x, y, z: np.full(np.broadcast(x, y, z).shape, 2.0)
        records = refinement_study(small_grid, params, levels, neumann, basket,
                                   source=lambda x, y, z: np.ones(np.broadcast(x, y, z).shape))
        assert len(records) == 2 * (len(basket) + 1)
        assert {r['problem'] for r in records} == {'interior', 'exterior'}
        by_key = {(r['problem'], r['data']): r for r in records}
        assert by_key[('interior', 'constant')]['delta'] <= 1e-9
        assert by_key[('exterior', 'constant')]['delta'] <= 1e-9
        assert all(np.isfinite(r['relative']) and r['relative'] >= 0.0 for r in records)
        assert by_key[('interior', 'source')]['delta'] > 0.0


class TestOneDReference:

    def test_constant_data_is_reproduced(self, params_1d, levels, neumann):
        grid2d = build_yz_grid(params_1d, levels, ny_per_band=2, nz=5, y_max=4.0)
        ones = np.ones(5)
        ref = solve_1d_reference(ones, ones, grid2d, params_1d, levels, neumann)
        np.testing.assert_allclose(ref.values, 1.0, atol=1e-9)
        assert ref.eta_Y == pytest.approx(1.0, abs=1e-9)
        assert ref.discrepancy <= 1e-9

    def test_shapes(self, params_1d, levels, neumann):
        grid2d = build_yz_grid(params_1d, levels, ny_per_band=2, nz=5, y_max=4.0)
        zs = grid2d.zs
        ref = solve_1d_reference(zs, -zs, grid2d, params_1d, levels, neumann)
        assert ref.values.shape == (ref.ys.size, zs.size)
        assert ref.ys[[0, -1]].tolist() == [-1.0, 1.0]
        assert ref.discrete.shape == ref.values.shape

    def test_needs_decoupled_excitation(self, params, levels, neumann):
        grid2d = build_yz_grid(params, levels, ny_per_band=2, nz=5, y_max=4.0)
        with pytest.raises(ValueError):
            solve_1d_reference(np.ones(5), np.ones(5), grid2d, params, levels, neumann)

    def test_minus_face_line_has_the_closed_form(self, params_1d, levels, neumann):
        grid2d = build_yz_grid(params_1d, levels, ny_per_band=2, nz=5, y_max=4.0)
        zs = grid2d.zs
        upper, lower = np.sin(zs) + 0.3, np.cos(zs) - 0.2 * zs
        ref = solve_1d_reference(upper, lower, grid2d, params_1d, levels, neumann)
        for y, value in zip(ref.ys, ref.values[:, 0]):
            if y > 0.0:
                continue
            expected = (ref.eta_minus_Y * kernel_I(-y, levels.ybar1, params_1d, levels)
                        + lower[0] * kernel_I(0.0, -y, params_1d, levels))
            assert value == pytest.approx(expected, abs=1e-6)
        assert face_line_error(ref, upper, lower, params_1d, levels) <= 1e-9

    def test_mirrored_data_gives_equal_corner_values(self, params_1d, levels, neumann):
        grid2d = build_yz_grid(params_1d, levels, ny_per_band=2, nz=5, y_max=4.0)
        upper = np.sin(grid2d.zs) + 0.3
        ref = solve_1d_reference(upper, upper[::-1], grid2d, params_1d, levels, neumann)
        assert ref.eta_minus_Y == pytest.approx(ref.eta_Y, abs=1e-9)
        np.testing.assert_allclose(ref.values, ref.values[::-1, ::-1], atol=1e-9)

    def test_face_particular_solves_the_face_ode(self, params_1d, levels):
        p, c = params_1d, levels
        ys = np.linspace(0.0, c.ybar1, 101)
        u = _face_particular(lambda s: 1.0, ys, p, c)
        assert u[0] == pytest.approx(0.0, abs=1e-10)
        assert u[-1] == pytest.approx(0.0, abs=1e-10)
        assert u[1:-1].min() > 0.0
        h = ys[1] - ys[0]
        inner = ys[1:-1]
        d2 = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / h ** 2
        d1 = (u[2:] - u[:-2]) / (2.0 * h)
        residual = 0.5 * d2 - (p.c0 * inner + p.k * p.Y) * d1 + 1.0
        assert np.max(np.abs(residual)) < 5e-3
        np.testing.assert_array_equal(_face_particular(None, ys, p, c), 0.0)

    def test_source_reference_converges(self, params_1d, levels, neumann):
        one = lambda y, z: np.ones(np.broadcast(y, z).shape)
        gaps = []
        for per_band, nz in ((2, 5), (4, 9), (8, 17)):
            grid2d = build_yz_grid(params_1d, levels, ny_per_band=per_band, nz=nz, y_max=3.0)
            zero = np.zeros(nz)
            ref = solve_1d_reference(zero, zero, grid2d, params_1d, levels, neumann, source=one)
            assert ref.values[1:-1].min() > 0.0
            gaps.append(ref.discrepancy)
        assert gaps[0] > gaps[1] > gaps[2]


class TestOneDRefinement:

    def test_x_slice_converges_at_first_order(self, params_1d, levels, neumann):
        data = lambda x, y, z: np.sin(z) + 0.3 * y + 0.0 * x
        records = one_d_refinement(data, params_1d, levels, 3, 2, 5, neumann, levels=3)
        gaps = [r['gap'] for r in records]
        assert all(a > b for a, b in zip(gaps[:-1], gaps[1:]))
        assert records[-1]['ratio'] >= 1.8
        assert max(r['face_line_error'] for r in records) <= 1e-6
        assert records[-1]['h_y'] == pytest.approx(records[0]['h_y'] / 8)

    def test_needs_zero_coupling(self, params, levels, neumann):
        with pytest.raises(ValueError):
            one_d_refinement(lambda x, y, z: z, params, levels, 3, 2, 5, neumann)
