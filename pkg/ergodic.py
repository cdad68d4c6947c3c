"""
Plastokh - Ergodic Analysis
Cycle operators P and T, the boundary invariant measure, the invariant
measure of the process and the complete problem with its solvability test
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu
from sklearn.linear_model import LinearRegression
from sklearn.metrics import r2_score

from dirichlet_solvers import ProblemSet
from errors import (DegenerateDenominator, NegativeDensity, NoConvergence, NotSolvable, NotStochastic,
                    NullspaceDimension)
from grid_fd import (Face, FaceField, Field3, Grid3, Level, Region, SolverOptions, SurfaceField,
                     build_grid, mark_dirichlet, refine_grid, transpose_generator)
from model_core import CycleLevels, ModelParams, State, TestFunction, generator_apply_nodes, phase_codes
from svi_sim import McOptions, cycle_chain

logger = logging.getLogger(__name__)

Source = Union[Field3, Callable]


class ErgodicOptions(BaseModel):
    """Tolerances of the boundary measure, its diagnostics and the complete problem"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    gamma_tol: float = Field(default=1e-13, gt=0)
    gamma_max_iter: int = Field(default=100000, ge=1)
    probe_steps: int = Field(default=40, ge=6)
    probe_burn_in: int = Field(default=2, ge=0)
    column_chunk: int = Field(default=64, ge=1)
    series_tol: Optional[float] = Field(default=None, gt=0)
    max_terms: int = Field(default=2000, ge=1)
    solvability_tol: Optional[float] = Field(default=None, gt=0)
    mc_cycles: int = Field(default=60, ge=2)
    mc_burn_cycles: int = Field(default=10, ge=0)


@dataclass
class BoundaryMeasure:
    """Probability weights on the Gamma1 nodes, sheets of shape (nx, nz)"""
    xs: np.ndarray
    zs: np.ndarray
    weights_upper: np.ndarray
    weights_lower: np.ndarray
    level: Level = Level.GAMMA1

    @classmethod
    def from_vector(cls, xs: np.ndarray, zs: np.ndarray, vector: np.ndarray) -> 'BoundaryMeasure':
        n = xs.size * zs.size
        return cls(xs, zs, vector[n:].reshape(xs.size, zs.size).copy(), vector[:n].reshape(xs.size, zs.size).copy())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.weights_lower.ravel(), self.weights_upper.ravel()])

    def mass(self) -> float:
        return float(self.weights_upper.sum() + self.weights_lower.sum())

    def as_surface(self) -> SurfaceField:
        return SurfaceField(self.level, self.xs, self.zs, self.weights_upper, self.weights_lower)


@dataclass
class ErgodicDiagnostics:
    sup_diffs: List[float]
    rho_estimate: float
    K_estimate: float
    r_squared: float
    window: Tuple[int, int]
    ratios_below_one: bool
    fixed_point_residual: float = float('nan')
    power_iterations: int = 0
    max_row_defect: float = float('nan')

    def to_dict(self) -> Dict[str, object]:
        return {
            'sup_diffs': list(self.sup_diffs),
            'rho_estimate': self.rho_estimate,
            'K_estimate': self.K_estimate,
            'r_squared': self.r_squared,
            'window': list(self.window),
            'ratios_below_one': self.ratios_below_one,
            'fixed_point_residual': self.fixed_point_residual,
            'power_iterations': self.power_iterations,
            'max_row_defect': self.max_row_defect,
        }


@dataclass
class InvariantMeasure:
    """
    Stationary measure of the discrete process

    elastic is a density on the full grid (zero at plastic face nodes);
    plastic_plus / plastic_minus are surface densities on the faces z = +-Y
    over the whole y-axis, exactly zero on the wrong-sign half.
    """
    grid: Grid3
    elastic: Field3
    plastic_plus: FaceField
    plastic_minus: FaceField
    node_mass: np.ndarray
    weights: Tuple[np.ndarray, np.ndarray, np.ndarray]
    clipped: int = 0

    def total_mass(self) -> float:
        wx, wy, wz = self.weights
        w_face = wx[:, None] * wy[None, :]
        w_vol = w_face[:, :, None] * wz[None, None, :]
        return float(np.sum(self.elastic.values * w_vol) + np.sum(self.plastic_plus.values * w_face)
                     + np.sum(self.plastic_minus.values * w_face))

    def component_masses(self) -> Dict[str, float]:
        wx, wy, _ = self.weights
        w_face = wx[:, None] * wy[None, :]
        plus = float(np.sum(self.plastic_plus.values * w_face))
        minus = float(np.sum(self.plastic_minus.values * w_face))
        return {'elastic': float(self.node_mass.sum()) - plus - minus, 'plastic_plus': plus, 'plastic_minus': minus}

    def integrate(self, f: Callable) -> float:
        X, Yv, Z = self.grid.mesh()
        return float(np.sum(self.node_mass * np.asarray(f(X, Yv, Z), dtype=float)))


@dataclass
class CompleteReport:
    nu_f: float
    solvability_tol: float
    terms: int
    series_scale: float = 1.0
    increments: List[float] = field(default_factory=list)
    glue: float = float('nan')
    fixed_point_residual: float = float('nan')
    residual: float = float('nan')

    def to_dict(self) -> Dict[str, object]:
        return {
            'nu_f': self.nu_f,
            'solvability_tol': self.solvability_tol,
            'terms': self.terms,
            'series_scale': self.series_scale,
            'increments': list(self.increments),
            'glue': self.glue,
            'fixed_point_residual': self.fixed_point_residual,
            'residual': self.residual,
        }


class CycleContext:
    """Grid, parameters and factorized problems shared by every cycle computation"""

    def __init__(self, grid: Grid3, p: ModelParams, c: CycleLevels, opts: SolverOptions,
                 ergodic: Optional[ErgodicOptions] = None):
        self.grid = grid
        self.p = p
        self.c = c
        self.opts = opts
        self.ergodic = ergodic or ErgodicOptions()
        self.problems = ProblemSet(grid, p, c, opts)
        self._p_matrix: Optional[np.ndarray] = None
        self._t_one: Optional[np.ndarray] = None

    @property
    def n_surface(self) -> int:
        return 2 * self.grid.xs.size * self.grid.zs.size

    def surface(self, vector: np.ndarray) -> SurfaceField:
        return SurfaceField.from_vector(Level.GAMMA1, self.grid.xs, self.grid.zs, vector)

    def source(self, f: Source) -> Field3:
        if isinstance(f, Field3):
            return f
        return Field3.from_function(self.grid, Region.FULL, f)


def _apply_P_vectors(ctx: CycleContext, G: np.ndarray) -> np.ndarray:
    problems = ctx.problems
    U, _ = problems.interior_solve(G)
    H = U[problems.surface_nodes(Level.GAMMA)]
    V, _, _ = problems.exterior_solve(H)
    return V[problems.surface_nodes(Level.GAMMA1)]


def _apply_T_vector(ctx: CycleContext, f: Field3) -> np.ndarray:
    problems = ctx.problems
    R = problems.global_rhs(f)
    U, _ = problems.interior_solve(np.zeros(ctx.n_surface), R)
    V, _, _ = problems.exterior_solve(U[problems.surface_nodes(Level.GAMMA)], R)
    return V[problems.surface_nodes(Level.GAMMA1)]


def apply_P(phi: SurfaceField, ctx: CycleContext) -> SurfaceField:
    """One step of the embedded chain: interior solve, trace on Gamma, exterior solve, trace on Gamma1"""
    if phi.level is not Level.GAMMA1:
        raise ValueError("P acts on Gamma1 data")
    return ctx.surface(_apply_P_vectors(ctx, phi.vector()))


def apply_T(f: Source, ctx: CycleContext) -> SurfaceField:
    """Expected integral of f over one cycle, as a function of the Gamma1 start"""
    return ctx.surface(_apply_T_vector(ctx, ctx.source(f)))


def p_matrix(ctx: CycleContext) -> np.ndarray:
    """
    Discrete P, one column per Gamma1 node (rows are transition probabilities)

    Raises:
        NotStochastic: a row mass differs from 1 by more than 10 tol
    """
    if ctx._p_matrix is not None:
        return ctx._p_matrix
    n = ctx.n_surface
    P = np.zeros((n, n))
    chunk = ctx.ergodic.column_chunk
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        G = np.zeros((n, stop - start))
        G[np.arange(start, stop), np.arange(stop - start)] = 1.0
        P[:, start:stop] = _apply_P_vectors(ctx, G)

    mass = P.sum(axis=1)
    worst = int(np.argmax(np.abs(mass - 1.0)))
    if abs(mass[worst] - 1.0) > 10 * ctx.opts.tol or P.min() < -10 * ctx.opts.tol:
        raise NotStochastic(worst, float(mass[worst]))
    logger.info("assembled P (%d x %d), max row defect %.2e", n, n, abs(mass[worst] - 1.0))
    ctx._p_matrix = P
    return P


def _power_iteration(P: np.ndarray, tol: float, max_iter: int) -> Tuple[np.ndarray, int]:
    gamma = np.full(P.shape[0], 1.0 / P.shape[0])
    for it in range(1, max_iter + 1):
        nxt = P.T @ gamma
        nxt /= nxt.sum()
        change = float(np.abs(nxt - gamma).sum())
        gamma = nxt
        if change <= tol:
            return gamma, it
    raise NoConvergence(max_iter, change, what='power iteration')


def geometric_diagnostics(step: Callable[[np.ndarray], np.ndarray], probe: np.ndarray,
                          n_steps: int, burn_in: int) -> ErgodicDiagnostics:
    """
    Fit log sup|P^{n+1} phi - P^n phi| ~ log K|phi| - rho n

    The window keeps n >= burn_in while the increments stay above the
    round-off floor.
    """
    s = probe.astype(float)
    diffs = []
    for _ in range(n_steps):
        nxt = step(s)
        diffs.append(float(np.max(np.abs(nxt - s))))
        s = nxt

    floor = 1e3 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(probe))))
    n_idx = np.arange(len(diffs))
    usable = (n_idx >= burn_in) & (np.asarray(diffs) > floor)
    stop = burn_in
    while stop < len(diffs) and usable[stop]:
        stop += 1
    window = (burn_in, stop)
    if stop - burn_in < 3:
        return ErgodicDiagnostics(diffs, float('nan'), float('nan'), float('nan'), window, False)

    n_fit = n_idx[burn_in:stop].reshape(-1, 1)
    log_d = np.log(np.asarray(diffs[burn_in:stop]))
    model = LinearRegression().fit(n_fit, log_d)
    r2 = float(r2_score(log_d, model.predict(n_fit)))
    rho = float(-model.coef_[0])
    K = float(np.exp(model.intercept_) / max(float(np.max(np.abs(probe))), np.finfo(float).tiny))
    ratios = [diffs[n + 5] / diffs[n] for n in range(burn_in, stop - 5)]
    return ErgodicDiagnostics(diffs, rho, K, r2, window, bool(all(r < 1.0 for r in ratios)))


def default_probe(ctx: CycleContext) -> np.ndarray:
    """Indicator of the upper sheet of Gamma1"""
    half = ctx.n_surface // 2
    return np.concatenate([np.zeros(half), np.ones(half)])


def boundary_histogram(hits: np.ndarray, xs: np.ndarray, zs: np.ndarray) -> BoundaryMeasure:
    """Nearest-node histogram of Gamma1 hit points (x, y, z), sheet by sign of y"""
    i = np.searchsorted(0.5 * (xs[1:] + xs[:-1]), hits[:, 0])
    k = np.searchsorted(0.5 * (zs[1:] + zs[:-1]), hits[:, 2])
    sheet = (hits[:, 1] > 0).astype(int)
    counts = np.bincount(np.ravel_multi_index((sheet, i, k), (2, xs.size, zs.size)),
                         minlength=2 * xs.size * zs.size).astype(float)
    counts /= counts.sum()
    return BoundaryMeasure.from_vector(xs, zs, counts)


def boundary_invariant_measure(ctx: CycleContext, mode: str = 'matrix',
                               mc: Optional[McOptions] = None) -> Tuple[BoundaryMeasure, ErgodicDiagnostics]:
    """
    Invariant probability of the embedded chain on Gamma1

    matrix: power iteration on the adjoint of the assembled P.
    mc: long-run histogram of the simulated embedded chain.
    """
    eo = ctx.ergodic
    probe = default_probe(ctx)
    if mode == 'matrix':
        P = p_matrix(ctx)
        gamma, iterations = _power_iteration(P, eo.gamma_tol, eo.gamma_max_iter)
        diagnostics = geometric_diagnostics(lambda v: P @ v, probe, eo.probe_steps, eo.probe_burn_in)
        diagnostics.fixed_point_residual = float(np.max(np.abs(P.T @ gamma - gamma)))
        diagnostics.power_iterations = iterations
        diagnostics.max_row_defect = float(np.max(np.abs(P.sum(axis=1) - 1.0)))
    elif mode == 'mc':
        mc = mc or McOptions()
        start = State(0.0, ctx.c.ybar1, 0.0)
        hits = cycle_chain(start, eo.mc_cycles, eo.mc_burn_cycles, ctx.p, ctx.c, mc)
        gamma = boundary_histogram(hits, ctx.grid.xs, ctx.grid.zs).vector()
        diagnostics = geometric_diagnostics(lambda v: _apply_P_vectors(ctx, v), probe,
                                            eo.probe_steps, eo.probe_burn_in)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    logger.info("boundary measure (%s): rho = %.4f, R2 = %.4f", mode, diagnostics.rho_estimate, diagnostics.r_squared)
    return BoundaryMeasure.from_vector(ctx.grid.xs, ctx.grid.zs, gamma), diagnostics


def t_one(ctx: CycleContext) -> np.ndarray:
    if ctx._t_one is None:
        ctx._t_one = _apply_T_vector(ctx, Field3.from_function(ctx.grid, Region.FULL, lambda x, y, z: np.ones_like(x)))
    return ctx._t_one


def nu_functional(f: Source, ctx: CycleContext, gamma: BoundaryMeasure) -> float:
    """nu(f) = int Tf d gamma / int T1 d gamma"""
    weights = gamma.vector()
    denominator = float(weights @ t_one(ctx))
    if not denominator > 0:
        raise DegenerateDenominator(denominator)
    return float(weights @ _apply_T_vector(ctx, ctx.source(f))) / denominator


def _closed_classes(Q: sp.csr_matrix) -> Tuple[int, np.ndarray]:
    """Number of closed communicating classes of the chain with generator Q, and a mask of their nodes"""
    off = Q - sp.diags(Q.diagonal())
    off.eliminate_zeros()
    n_comp, labels = connected_components(off, directed=True, connection='strong')
    coo = off.tocoo()
    leaving = labels[coo.row] != labels[coo.col]
    open_classes = np.unique(labels[coo.row[leaving]])
    closed = np.setdiff1d(np.arange(n_comp), open_classes)
    return closed.size, np.isin(labels, closed)


def solve_stationary_density(ctx: CycleContext) -> InvariantMeasure:
    """
    Stationary distribution of the full-grid generator (forward equation)

    Solves Q^T pi = 0 with one equation replaced by sum(pi) = 1 and turns
    node masses into densities with the dual cell widths.
    """
    grid = ctx.grid
    op = ctx.problems.op
    n_closed, in_closed = _closed_classes(op.matrix)
    if n_closed != 1:
        raise NullspaceDimension(n_closed)

    A = transpose_generator(op).matrix
    anchor = int(np.flatnonzero(in_closed)[0])
    keep = np.ones(grid.n_nodes)
    keep[anchor] = 0.0
    ones_row = sp.csr_matrix((np.ones(grid.n_nodes), (np.full(grid.n_nodes, anchor), np.arange(grid.n_nodes))),
                             shape=A.shape)
    system = (sp.diags(keep) @ A + ones_row).tocsc()
    rhs = np.zeros(grid.n_nodes)
    rhs[anchor] = 1.0
    pi = splu(system).solve(rhs)

    residual = float(np.max(np.abs(A @ pi)) / (float(abs(A).sum(axis=1).max()) * float(np.max(np.abs(pi)))))
    if residual > ctx.opts.tol:
        raise NoConvergence(1, residual, what='stationary solve')

    tol = ctx.opts.tol
    below = pi < -tol
    if below.any():
        raise NegativeDensity(float(pi.min()), int(below.sum()))
    clipped = int(np.sum(pi < 0))
    if clipped:
        logger.warning("clipped %d slightly negative stationary masses (min %.2e)", clipped, pi.min())
    pi = np.maximum(pi, 0.0)
    pi /= pi.sum()

    mass = pi.reshape(grid.shape)
    wx, wy, wz = grid.weights()
    _, Yg, Zg = grid.mesh()
    codes = phase_codes(Yg, Zg, ctx.p)
    volume = wx[:, None, None] * wy[None, :, None] * wz[None, None, :]
    face = wx[:, None] * wy[None, :]
    elastic = np.where(codes == 0, mass / volume, 0.0)
    plus = np.where(codes[:, :, -1] == 1, mass[:, :, -1] / face, 0.0)
    minus = np.where(codes[:, :, 0] == 2, mass[:, :, 0] / face, 0.0)

    return InvariantMeasure(
        grid=grid,
        elastic=Field3(grid, Region.FULL, elastic),
        plastic_plus=FaceField(Face.PLUS, grid.xs, grid.ys, plus),
        plastic_minus=FaceField(Face.MINUS, grid.xs, grid.ys, minus),
        node_mass=mass,
        weights=(wx, wy, wz),
        clipped=clipped,
    )


def nu_from_density(f: Callable, measure: InvariantMeasure) -> float:
    return measure.integrate(f)


def stationarity_residual(f: TestFunction, nu: InvariantMeasure, p: ModelParams) -> float:
    """Quadrature of the generator applied to f against all three components of nu"""
    X, Yv, Z = nu.grid.mesh()
    return float(np.sum(nu.node_mass * generator_apply_nodes(f, X, Yv, Z, p)))


def stationarity_refinement(ctx: CycleContext, probes: Sequence[TestFunction],
                            levels: int = 1) -> List[Dict[str, float]]:
    """Largest |stationarity residual| over the probes on the grid and its successive midpoint refinements"""
    records: List[Dict[str, float]] = []
    current = ctx
    for level in range(levels + 1):
        nu = solve_stationary_density(current)
        worst = max(abs(stationarity_residual(f, nu, ctx.p)) for f in probes)
        records.append({'level': level, 'h_y': current.grid.h_y, 'residual': float(worst)})
        logger.info("stationarity residual at level %d (h_y = %.4g): %.3e", level, current.grid.h_y, worst)
        if level < levels:
            current = CycleContext(refine_grid(current.grid), ctx.p, ctx.c, ctx.opts, ctx.ergodic)
    return records


def coarse_total_variation(a: np.ndarray, b: np.ndarray, bins: Tuple[int, ...]) -> float:
    """Total variation between two mass arrays after summing over contiguous index blocks"""
    def coarse(m: np.ndarray) -> np.ndarray:
        out = m
        for axis, n_bins in enumerate(bins):
            parts = np.array_split(np.arange(out.shape[axis]), min(n_bins, out.shape[axis]))
            out = np.stack([out.take(part, axis=axis).sum(axis=axis) for part in parts], axis=axis)
        return out
    return 0.5 * float(np.abs(coarse(a) - coarse(b)).sum())


def centered(f: Callable, nu_f: float) -> Callable:
    return lambda x, y, z: np.asarray(f(x, y, z), dtype=float) - nu_f


def solve_complete_problem(f: Source, ctx: CycleContext,
                           gamma: Optional[BoundaryMeasure] = None) -> Tuple[Field3, CompleteReport]:
    """
    Solve Lambda u + f = 0 on the whole truncated space

    The Gamma1 data g of the interior field is the sum of the series
    Tf + P Tf + P^2 Tf + ..., which converges only when nu(f) = 0.

    Raises:
        NotSolvable: |nu(f)| above the solvability tolerance
        NoConvergence: series increments never fall below series_tol
    """
    eo = ctx.ergodic
    problems = ctx.problems
    source = ctx.source(f)
    if gamma is None:
        gamma, _ = boundary_invariant_measure(ctx, 'matrix')

    nu_f = nu_functional(source, ctx, gamma)
    f_norm = source.max_abs()
    solvability_tol = eo.solvability_tol or 10.0 * max(ctx.opts.tol, eo.gamma_tol) * max(1.0, f_norm)
    report = CompleteReport(nu_f=nu_f, solvability_tol=solvability_tol, terms=0)
    if abs(nu_f) > solvability_tol:
        raise NotSolvable(nu_f, solvability_tol)

    increment = _apply_T_vector(ctx, source)
    report.series_scale = max(1.0, float(np.max(np.abs(increment))))
    series_tol = (eo.series_tol or ctx.opts.tol) * report.series_scale
    total = increment.copy()
    for term in range(1, eo.max_terms + 1):
        increment = _apply_P_vectors(ctx, increment)
        size = float(np.max(np.abs(increment)))
        report.increments.append(size)
        if size <= series_tol:
            report.terms = term
            break
        total += increment
    else:
        raise NoConvergence(eo.max_terms, report.increments[-1], what='cycle series', diagnostics={
            'last_increments': report.increments[-10:],
            'partial_sum_norm': float(np.max(np.abs(total))),
            'growth_per_term': float(np.max(np.abs(total))) / eo.max_terms,
        })

    R = problems.global_rhs(source)
    U_int, _ = problems.interior_solve(total, R)
    U_ext, _, _ = problems.exterior_solve(U_int[problems.surface_nodes(Level.GAMMA)], R)

    interior_nodes = ctx.grid.node_indices(Region.INTERIOR)
    exterior_nodes = ctx.grid.node_indices(Region.EXTERIOR)
    overlap = np.intersect1d(interior_nodes, exterior_nodes)
    report.glue = float(np.max(np.abs(U_int[overlap] - U_ext[overlap])))
    report.fixed_point_residual = float(np.max(np.abs(U_ext[problems.surface_nodes(Level.GAMMA1)] - total)))

    u = U_ext.copy()
    u[interior_nodes] = U_int[interior_nodes]

    truncation = [] if ctx.opts.y_closure == 'neumann' else \
        np.concatenate([problems.sheet_nodes(ctx.grid.ys[0]), problems.sheet_nodes(ctx.grid.ys[-1])])
    tagged = mark_dirichlet(problems.op, np.asarray(truncation, dtype=np.int64))
    rows = tagged.generator_rows()
    r = (problems.op.matrix @ u + source.flat())[rows]
    scale = float(abs(problems.op.matrix).sum(axis=1).max()) * float(np.max(np.abs(u))) + f_norm
    report.residual = float(np.max(np.abs(r))) / scale if scale > 0 else float(np.max(np.abs(r)))

    logger.info("complete problem: %d terms, glue %.2e, residual %.2e", report.terms, report.glue, report.residual)
    return Field3(ctx.grid, Region.FULL, u.reshape(ctx.grid.shape)), report


def main():
    """Example usage"""
    p = ModelParams(alpha=1.0, beta=0.2, c0=1.0, k=1.0, Y=1.0, L=1.0)
    c = CycleLevels(ybar=0.5, ybar1=1.0)
    grid = build_grid(p, c, nx=5, ny_per_band=3, nz=7, y_max=5.0)
    ctx = CycleContext(grid, p, c, SolverOptions(y_closure='neumann'))
    gamma, diag = boundary_invariant_measure(ctx)
    print(f"gamma* mass {gamma.mass():.12f}, rho {diag.rho_estimate:.4f}")
    measure = solve_stationary_density(ctx)
    f = lambda x, y, z: np.tanh(y) + z
    print(f"nu(f): cycle {nu_functional(f, ctx, gamma):.6f}, density {nu_from_density(f, measure):.6f}")


if __name__ == "__main__":
    main()
