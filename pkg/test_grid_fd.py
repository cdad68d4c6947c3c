"""Tests for the snapped grid, the upwind generator and the linear solves"""

import numpy as np
import pytest
import scipy.linalg

from errors import InvalidResolution, InvalidTruncation
from grid_fd import (Face, Field3, Level, Region, RowKind, SolverOptions, SurfaceField, assemble_generator,
                     build_grid, build_yz_grid, coarse_nodes, consistency_study, embed, mark_dirichlet, refine_grid,
                     solve_linear, trace, transpose_generator)
from model_core import CycleLevels, ModelParams, check_test_function, quadratic_function

P = ModelParams(alpha=1.0, beta=0.2, c0=1.0, k=1.0, Y=1.0, L=1.0)
C = CycleLevels(ybar=0.5, ybar1=1.0)
TOL = 1e-12


def _make_tiny_grid():
    return build_grid(P, C, nx=3, ny_per_band=1, nz=3, y_max=2.0)


def _nodal(grid, fn) -> np.ndarray:
    X, Yv, Z = grid.mesh()
    return np.broadcast_to(fn(X, Yv, Z), X.shape).astype(float).ravel()


# -- grid -----------------------------------------------------------------------

class TestGrid:

    def test_levels_are_grid_nodes(self, small_grid):
        for y in (0.0, 0.5, -0.5, 1.0, -1.0, 4.0, -4.0):
            assert small_grid.ys[small_grid.j_of(y)] == y

    def test_y_axis_is_symmetric(self, small_grid):
        np.testing.assert_array_equal(small_grid.ys, -small_grid.ys[::-1])

    def test_band_spacing(self, small_grid):
        # h = min(0.5, 0.5) / 2 in every band
        np.testing.assert_allclose(np.diff(small_grid.ys), 0.25, rtol=1e-12)
        assert small_grid.shape == (5, 33, 5)

    def test_regions(self, small_grid):
        g = small_grid
        assert g.ys[g.region_js(Region.INTERIOR)][[0, -1]].tolist() == [-1.0, 1.0]
        assert g.ys[g.region_js(Region.EXTERIOR_UP)][0] == 0.5
        assert g.region_js(Region.EXTERIOR).size == 2 * g.region_js(Region.EXTERIOR_UP).size

    def test_unknown_level_is_rejected(self, small_grid):
        with pytest.raises(KeyError):
            small_grid.j_of(0.3)

    def test_resolution_and_truncation_checks(self):
        with pytest.raises(InvalidResolution):
            build_grid(P, C, nx=2, ny_per_band=2, nz=5, y_max=4.0)
        with pytest.raises(InvalidTruncation):
            build_grid(P, C, nx=5, ny_per_band=2, nz=5, y_max=1.0)

    def test_yz_grid_has_one_x_node(self):
        g = build_yz_grid(P, C, ny_per_band=2, nz=5, y_max=3.0)
        assert g.shape[0] == 1
        assert g.weights()[0].tolist() == [1.0]

    def test_dual_widths_cover_the_box(self, small_grid):
        wx, wy, wz = small_grid.weights()
        assert wx.sum() == pytest.approx(2 * P.L)
        assert wy.sum() == pytest.approx(2 * 4.0)
        assert wz.sum() == pytest.approx(2 * P.Y)


# -- generator --------------------------------------------------------------------

class TestGenerator:

    def test_rows_sum_to_zero(self, small_grid, neumann):
        op = assemble_generator(small_grid, P, neumann)
        Q = op.matrix
        scale = float(abs(Q).sum(axis=1).max())
        assert np.abs(np.asarray(Q.sum(axis=1))).max() <= TOL * scale

    def test_sign_pattern(self, small_grid, neumann):
        Q = assemble_generator(small_grid, P, neumann).matrix.tocoo()
        off = Q.data[Q.row != Q.col]
        assert off.min() > 0.0
        assert Q.diagonal().max() < 0.0

    def test_face_rows_have_no_z_coupling(self, small_grid, neumann):
        op = assemble_generator(small_grid, P, neumann)
        nz = small_grid.zs.size
        faces = np.flatnonzero(np.isin(op.row_kind, [RowKind.FACE_PLUS, RowKind.FACE_MINUS]))
        # one row per (x, y) with the matching sign of y
        assert faces.size == 2 * small_grid.xs.size * 16
        for i in faces:
            k = i % nz
            assert all(j % nz == k for j, _ in op.row(i))

    def test_linear_y_reproduces_the_drift(self, small_grid, neumann):
        op = assemble_generator(small_grid, P, neumann)
        X, Yv, Z = small_grid.mesh()
        applied = (op.matrix @ _nodal(small_grid, lambda x, y, z: y)).reshape(small_grid.shape)
        expected = -(P.beta * X + P.c0 * Yv + P.k * Z)
        np.testing.assert_allclose(applied[:, 1:-1], expected[:, 1:-1], atol=1e-11)

    def test_linear_z_sees_transport_only_when_elastic(self, small_grid, neumann):
        op = assemble_generator(small_grid, P, neumann)
        _, Yv, _ = small_grid.mesh()
        applied = (op.matrix @ _nodal(small_grid, lambda x, y, z: z)).reshape(small_grid.shape)
        up = Yv[:, :, :-1] > 0
        np.testing.assert_allclose(applied[:, :, :-1][up], Yv[:, :, :-1][up], atol=1e-12)
        np.testing.assert_allclose(applied[:, Yv[0, :, 0] > 0, -1], 0.0, atol=1e-12)
        np.testing.assert_allclose(applied[:, Yv[0, :, 0] < 0, 0], 0.0, atol=1e-12)

    def test_viscosity_couples_the_z_direction(self, small_grid):
        base = assemble_generator(small_grid, P, SolverOptions())
        viscous = assemble_generator(small_grid, P, SolverOptions(epsilon_z=0.1))
        assert viscous.matrix.nnz > base.matrix.nnz

    def test_mark_dirichlet(self, small_grid, neumann):
        op = assemble_generator(small_grid, P, neumann)
        tagged = mark_dirichlet(op, np.array([0, 7]))
        assert [(j, v) for j, v in tagged.row(7) if v != 0.0] == [(7, 1.0)]
        assert not tagged.generator_rows()[[0, 7]].any()
        assert tagged.generator_rows().sum() == op.n - 2

    def test_transpose_tags_follow_node_geometry(self, small_grid, neumann):
        op = assemble_generator(small_grid, P, neumann)
        t = transpose_generator(op)
        np.testing.assert_array_equal(t.row_kind, op.row_kind)
        assert (t.matrix - op.matrix.T).nnz == 0

    def test_transpose_drops_dirichlet_tags(self, small_grid, neumann):
        op = assemble_generator(small_grid, P, neumann)
        faces = np.flatnonzero(op.row_kind == RowKind.FACE_PLUS)[:2]
        marked = mark_dirichlet(op, np.concatenate([[0], faces]))
        t = transpose_generator(marked)
        assert not np.any(t.row_kind == RowKind.DIRICHLET)
        np.testing.assert_array_equal(t.row_kind, op.row_kind)
        assert (transpose_generator(t).matrix - marked.matrix).nnz == 0

    def test_wrong_sign_face_rows_stay_elastic_in_transpose(self, small_grid, neumann):
        t = transpose_generator(assemble_generator(small_grid, P, neumann))
        nz = small_grid.zs.size
        for y, k in ((-0.5, nz - 1), (0.0, nz - 1), (0.5, 0), (0.0, 0)):
            node = np.ravel_multi_index((2, small_grid.j_of(y), k), small_grid.shape)
            assert t.row_kind[node] == RowKind.INTERIOR_A

    def test_adjoint_identity(self, small_grid, neumann):
        op = assemble_generator(small_grid, P, neumann)
        t = transpose_generator(op)
        rng = np.random.default_rng(3)
        u, v = rng.normal(size=op.n), rng.normal(size=op.n)
        assert np.dot(op.matrix @ u, v) == pytest.approx(np.dot(u, t.matrix @ v), rel=1e-12)


# -- fields ------------------------------------------------------------------------

class TestFields:

    def test_surface_vector_orders_lower_sheet_first(self, small_grid):
        phi = SurfaceField.from_function(small_grid, Level.GAMMA1, lambda x, y, z: y + 0 * x)
        vec = phi.vector()
        half = vec.size // 2
        np.testing.assert_array_equal(vec[:half], -1.0)
        np.testing.assert_array_equal(vec[half:], 1.0)
        back = SurfaceField.from_vector(Level.GAMMA1, small_grid.xs, small_grid.zs, vec)
        np.testing.assert_array_equal(back.upper, phi.upper)

    def test_embed_then_trace(self, small_grid):
        rng = np.random.default_rng(3)
        shape = (small_grid.xs.size, small_grid.zs.size)
        h = SurfaceField(Level.GAMMA, small_grid.xs, small_grid.zs, rng.random(shape), rng.random(shape))
        field = embed(h, small_grid, Region.EXTERIOR, fill=-1.0)
        back = trace(field, Level.GAMMA)
        np.testing.assert_array_equal(back.upper, h.upper)
        np.testing.assert_array_equal(back.lower, h.lower)
        assert field.values.min() == -1.0

    def test_trace_needs_the_sheet(self, small_grid):
        with pytest.raises(ValueError):
            trace(Field3.zeros(small_grid, Region.EXTERIOR_UP), Level.GAMMA1)

    def test_face_trace(self, small_grid):
        field = Field3.from_function(small_grid, Region.INTERIOR, lambda x, y, z: x + 10 * z)
        face = trace(field, Face.PLUS)
        assert face.values.shape == (small_grid.xs.size, field.ys.size)
        np.testing.assert_allclose(face.values, small_grid.xs[:, None] + 10.0)

    def test_restrict(self, small_grid):
        full = Field3.from_function(small_grid, Region.FULL, lambda x, y, z: y)
        inner = full.restrict(Region.INTERIOR)
        np.testing.assert_array_equal(inner.values[0, :, 0], inner.ys)
        with pytest.raises(ValueError):
            inner.restrict(Region.FULL)


# -- linear solves -------------------------------------------------------------------

class TestSolve:

    def _interior_problem(self, grid, opts, data: float):
        op = assemble_generator(grid, P, opts)
        rhs = Field3.zeros(grid, Region.INTERIOR)
        ys = rhs.ys
        mask = np.zeros(rhs.values.shape, dtype=bool)
        mask[:, [0, ys.size - 1], :] = True
        return solve_linear(op, rhs, (mask, np.where(mask, data, 0.0)), opts)

    def test_constant_data_gives_constant_solution(self, small_grid, neumann):
        u = self._interior_problem(small_grid, neumann, 3.0)
        np.testing.assert_allclose(u.values, 3.0, rtol=1e-9)

    def test_empty_mask_is_singular(self, small_grid, neumann):
        op = assemble_generator(small_grid, P, neumann)
        rhs = Field3.zeros(small_grid, Region.FULL)
        with pytest.raises(ValueError):
            solve_linear(op, rhs, (np.zeros(rhs.values.shape, dtype=bool), rhs.values), neumann)

    def test_sor_matches_direct(self):
        grid = _make_tiny_grid()
        direct = SolverOptions(tol=1e-12)
        sor = SolverOptions(tol=1e-12, method="sor", max_iter=50000)
        op = assemble_generator(grid, P, direct)
        f = Field3.from_function(grid, Region.INTERIOR, lambda x, y, z: 1.0 + 0.5 * np.sin(3 * y) * z)
        mask = np.zeros(f.values.shape, dtype=bool)
        mask[:, [0, -1], :] = True
        values = np.where(mask, 0.25, 0.0)
        a = solve_linear(op, f, (mask, values), direct)
        b = solve_linear(op, f, (mask, values), sor)
        np.testing.assert_allclose(a.values, b.values, atol=1e-9)

    @pytest.mark.parametrize("method", ["direct", "sor"])
    def test_matches_dense_lu(self, method):
        grid = _make_tiny_grid()
        opts = SolverOptions(tol=1e-12, method=method, max_iter=50000)
        op = assemble_generator(grid, P, opts)
        rng = np.random.default_rng(11)
        f = Field3(grid, Region.INTERIOR, rng.uniform(-1.0, 1.0, (grid.xs.size, grid.region_js(Region.INTERIOR).size,
                                                                  grid.zs.size)))
        mask = np.zeros(f.values.shape, dtype=bool)
        mask[:, [0, -1], :] = True
        values = np.where(mask, rng.uniform(-2.0, 2.0, f.values.shape), 0.0)
        u = solve_linear(op, f, (mask, values), opts)

        nodes = grid.node_indices(Region.INTERIOR)
        free, fixed = nodes[~mask.ravel()], nodes[mask.ravel()]
        dense = op.matrix.toarray()
        b = f.flat()[~mask.ravel()] - dense[np.ix_(free, fixed)] @ values.ravel()[mask.ravel()]
        expected = scipy.linalg.lu_solve(scipy.linalg.lu_factor(dense[np.ix_(free, free)]), b)
        np.testing.assert_allclose(u.values.ravel()[~mask.ravel()], expected, atol=1e-9)
        np.testing.assert_array_equal(u.values[mask], values[mask])


# -- refinement ------------------------------------------------------------------------

class TestRefinement:

    def test_midpoint_refinement_nests_the_grid(self, small_grid):
        fine = refine_grid(small_grid)
        assert fine.shape == tuple(2 * n - 1 for n in small_grid.shape)
        for y in (0.0, 0.5, -0.5, 1.0, -1.0, 4.0, -4.0):
            assert fine.ys[fine.j_of(y)] == y
            assert fine.j_of(y) == 2 * small_grid.j_of(y)
        assert fine.h_y == pytest.approx(0.5 * small_grid.h_y)
        X, Yv, Z = small_grid.mesh()
        Xf, Yf, Zf = fine.mesh()
        shared = coarse_nodes(small_grid, fine)
        np.testing.assert_array_equal(Yf.ravel()[shared], Yv.ravel())
        np.testing.assert_allclose(Xf.ravel()[shared], X.ravel())
        np.testing.assert_allclose(Zf.ravel()[shared], Z.ravel())

    def test_refinement_can_keep_x(self):
        g = build_yz_grid(P, C, ny_per_band=2, nz=5, y_max=3.0)
        fine = refine_grid(g, refine_x=False)
        assert fine.xs.size == 1
        assert fine.zs.size == 9
        assert coarse_nodes(g, fine).size == g.n_nodes

    def test_unrelated_grids_are_rejected(self, small_grid):
        other = build_grid(P, C, nx=5, ny_per_band=3, nz=5, y_max=4.0)
        with pytest.raises(ValueError):
            coarse_nodes(small_grid, other)

    def test_quadratic_has_exact_derivatives(self):
        points = np.array([[0.3, -0.7, 0.2], [-0.9, 1.5, -1.0], [0.0, 0.1, 0.9]])
        assert check_test_function(quadratic_function(P), points) < 1e-5

    def test_generator_consistency_is_first_order(self, small_grid):
        records = consistency_study(small_grid, P, quadratic_function(P), levels=2)
        errors = [r['error'] for r in records]
        assert errors[0] > 0.0
        # upwind error (h/2)|b| f'' is exact for quadratics, so it halves at every node
        for r in records[1:]:
            assert r['ratio'] == pytest.approx(2.0, rel=1e-6)

    def test_consistency_study_needs_x_nodes(self):
        with pytest.raises(InvalidResolution):
            consistency_study(build_yz_grid(P, C, ny_per_band=2, nz=5, y_max=3.0), P, quadratic_function(P))
