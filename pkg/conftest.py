"""
Shared fixtures: a small reflecting grid on which every cycle computation
runs in well under a second
"""

import pytest

from ergodic import CycleContext, boundary_invariant_measure
from grid_fd import SolverOptions, build_grid
from model_core import CycleLevels, ModelParams

SMALL_GRID = dict(nx=5, ny_per_band=2, nz=5, y_max=4.0)


@pytest.fixture(scope="session")
def params():
    return ModelParams(alpha=1.0, beta=0.2, c0=1.0, k=1.0, Y=1.0, L=1.0)


@pytest.fixture(scope="session")
def params_1d():
    return ModelParams(alpha=1.0, beta=0.0, c0=1.0, k=1.0, Y=1.0, L=1.0)


@pytest.fixture(scope="session")
def levels():
    return CycleLevels(ybar=0.5, ybar1=1.0)


@pytest.fixture(scope="session")
def neumann():
    return SolverOptions(y_closure="neumann")


@pytest.fixture(scope="session")
def small_grid(params, levels):
    return build_grid(params, levels, **SMALL_GRID)


@pytest.fixture(scope="session")
def ctx(small_grid, params, levels, neumann):
    return CycleContext(small_grid, params, levels, neumann)


@pytest.fixture(scope="session")
def gamma_star(ctx):
    gamma, _ = boundary_invariant_measure(ctx, "matrix")
    return gamma
