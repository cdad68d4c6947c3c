"""Tests for the invariant checks and cross-route oracles"""

import numpy as np
import pytest

from ergodic import CycleContext
from grid_fd import build_grid
from oracle_suite import DISCRETIZATION_C, MIN_DISCRETIZATION_C, OracleSuite
from report_generator import RunReport
from svi_sim import McOptions

TANH_Y = lambda x, y, z: np.tanh(y) + 0.0 * x
LINEAR_Z = lambda x, y, z: z + 0.0 * y


def _make_suite(ctx, gamma=None) -> OracleSuite:
    suite = OracleSuite(ctx, RunReport("validate", "", seed=0), TANH_Y, LINEAR_Z,
                        McOptions(n_paths=100, horizon=20.0, burn_in=2.0, seed=1))
    suite._gamma = gamma
    return suite


def _results(suite, stage=None):
    return {c.name: c.passed for c in suite.report.checks if stage is None or c.stage == stage}


class TestBudget:

    def test_scales_with_coarsest_step(self, ctx):
        suite = _make_suite(ctx)
        # x and z steps (0.5) dominate the y step (0.25)
        assert suite.h == pytest.approx(0.5)
        assert suite.budget(0.2) == pytest.approx(DISCRETIZATION_C * 0.5)
        assert suite.budget(-4.0) == pytest.approx(DISCRETIZATION_C * 0.5 * 4.0)

    def test_calibration_replaces_the_default_constant(self, ctx):
        suite = _make_suite(ctx)
        C = suite.calibrate()
        assert np.isfinite(C)
        assert C >= MIN_DISCRETIZATION_C
        assert suite.C == C
        assert suite.budget(0.2) == pytest.approx(C * 0.5)
        assert _results(suite, 'oracle-suite') == {'discretization constant from refinement': True}


class TestValidateChecks:

    def test_generator(self, ctx):
        suite = _make_suite(ctx)
        suite.check_generator()
        assert _results(suite) == {'generator rows sum to zero': True, 'generator off-diagonal nonnegative': True,
                                   'generator diagonal nonpositive': True}

    def test_maximum_principle(self, ctx):
        suite = _make_suite(ctx)
        suite.check_maximum_principle(trials=8)
        assert all(_results(suite).values())

    def test_cycle_operators(self, ctx):
        suite = _make_suite(ctx)
        suite.check_cycle_operators()
        assert all(_results(suite).values())

    def test_nu_and_density(self, ctx, gamma_star):
        suite = _make_suite(ctx, gamma_star)
        suite.check_nu()
        suite.check_density()
        results = _results(suite)
        assert results['nu(1) = 1']
        assert results['plastic density zero on wrong-sign faces']
        assert results['stationarity residual of a constant']
        assert all(results.values())

    def test_refinement(self, ctx):
        suite = _make_suite(ctx)
        suite.check_refinement()
        assert _results(suite) == {'generator consistency ratio under h -> h/2': True,
                                   'stationarity residual decreases under refinement': True}

    def test_exterior_bound_is_checked_without_the_gauge_hypothesis(self, ctx):
        suite = _make_suite(ctx)
        suite.check_barriers()
        results = _results(suite)
        assert results['exterior barrier bound']
        assert 'exterior barrier certificate' not in results
        assert all(results.values())
        assert any('certificate not checked' in w for w in suite.report.warnings)

    def test_complete_problem(self, ctx, gamma_star):
        suite = _make_suite(ctx, gamma_star)
        suite.check_complete_problem()
        assert _results(suite) == {'complete problem with f = 1 is not solvable': True,
                                   'complete problem residual': True, 'interior/exterior glue': True}

    def test_failed_check_is_recorded(self, ctx):
        suite = _make_suite(ctx)
        assert not suite.check('always fails', False, 1.0, 0.0)
        assert not suite.report.all_passed


class TestOracles:

    def test_truncation_monotonicity(self, ctx):
        suite = _make_suite(ctx)
        suite.check_truncation()
        assert _results(suite, 'oracle-suite') == {'truncation: Gamma1 values increase with y_max': True}

    def test_one_d_reduction_needs_zero_coupling(self, ctx):
        suite = _make_suite(ctx)
        suite.check_one_d_reduction()
        assert suite.report.checks == []

    def test_one_d_reduction(self, params_1d, levels, neumann):
        grid = build_grid(params_1d, levels, nx=3, ny_per_band=2, nz=5, y_max=3.0)
        suite = _make_suite(CycleContext(grid, params_1d, levels, neumann))
        suite.check_one_d_reduction(levels=3)
        assert _results(suite, 'oracle-suite') == {'beta = 0 x-slice vs 1d reference: gap ratio under h -> h/2': True,
                                                   '1d reference face lines match the closed form': True}

    @pytest.mark.slow
    def test_boundary_basket_against_monte_carlo(self, ctx):
        suite = OracleSuite(ctx, RunReport("oracle-suite", "", seed=0), TANH_Y, LINEAR_Z,
                            McOptions(n_paths=400, horizon=50.0, burn_in=2.0, seed=3))
        suite.check_boundary_mc()
        results = _results(suite, 'oracle-suite')
        # five data sets and the exit time, at three interior and three exterior starts
        assert len(results) == 6 * 6
        assert sum('exit time' in name for name in results) == 6
        assert all(results.values())
