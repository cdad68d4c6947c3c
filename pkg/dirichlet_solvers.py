"""
Plastokh - Dirichlet Solvers
Interior and exterior cycle problems (homogeneous and with sources), plastic
face problems, barrier gauges and the beta = 0 semi-explicit reference
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.integrate import quad
from scipy.sparse.linalg import spsolve

from grid_fd import (DirichletSystem, Face, FaceField, Field3, Grid3, Level, Region, SolveInfo, SolverOptions,
                     SparseOperator, SurfaceField, assemble_generator, build_grid, coarse_nodes, refine_grid, trace,
                     yz_grid)
from model_core import CycleLevels, ModelParams

logger = logging.getLogger(__name__)

Data = Union[float, np.ndarray]


class GaugeKind(str, Enum):
    PHI_INTERIOR = 'phi_interior'
    PSI_EXTERIOR = 'psi_exterior'


@dataclass(frozen=True)
class BarrierGauge:
    """
    Sup-norm gauge for solutions with a bounded source

    Interior: Phi = exp(lam * (c0 k z^2 + c0 y^2)), bound exp(lam (c0 k Y^2 + c0 ybar1^2)).
    Exterior: Psi(y) = gamma * log|y| + K.
    """
    kind: GaugeKind
    f_norm: float
    c0: float
    k: float
    Y: float
    ybar1: float
    lam: float = 1.0
    gamma_scale: float = 0.0
    K_offset: float = 0.0
    hypothesis_holds: bool = True

    def evaluate(self, x, y, z) -> np.ndarray:
        x, y, z = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(z, float))
        if self.kind is GaugeKind.PHI_INTERIOR:
            return np.exp(self.lam * (self.c0 * self.k * z ** 2 + self.c0 * y ** 2))
        ay = np.abs(y)
        out = np.zeros(ay.shape)
        pos = ay > 0
        out[pos] = self.gamma_scale * np.log(ay[pos]) + self.K_offset
        return out

    @property
    def bound(self) -> float:
        """Interior sup bound (exterior bounds are y-dependent, see evaluate)"""
        return float(np.exp(self.lam * (self.c0 * self.k * self.Y ** 2 + self.c0 * self.ybar1 ** 2)))

    def to_dict(self) -> Dict[str, float]:
        return {'kind': self.kind.value, 'lambda': self.lam, 'gamma': self.gamma_scale,
                'K': self.K_offset, 'f_norm': self.f_norm, 'hypothesis_holds': self.hypothesis_holds}


def interior_gauge(f_norm: float, p: ModelParams, c: CycleLevels, lam: Optional[float] = None) -> BarrierGauge:
    """Smallest lam with lam >= max(1, 2|f|/c0, 1 + (kY + beta L)^2 / c0), or a larger override"""
    lam_min = max(1.0, 2.0 * f_norm / p.c0, 1.0 + (p.k * p.Y + p.beta * p.L) ** 2 / p.c0)
    if lam is not None and lam < lam_min:
        raise ValueError(f"lambda = {lam} below the admissible minimum {lam_min}")
    return BarrierGauge(GaugeKind.PHI_INTERIOR, f_norm, p.c0, p.k, p.Y, c.ybar1, lam=lam or lam_min)


def exterior_gauge(f_norm: float, p: ModelParams, c: CycleLevels,
                   gamma: Optional[float] = None, K: Optional[float] = None) -> BarrierGauge:
    """
    Psi(y) = gamma log|y| + K with gamma c0 / 2 >= |f| and Psi(ybar) = gamma

    Psi is a supersolution only when ybar > 2 (kY + beta L) / c0; the flag
    hypothesis_holds records it.
    """
    gamma_min = 2.0 * f_norm / p.c0
    if gamma is not None and gamma < gamma_min:
        raise ValueError(f"gamma = {gamma} below the admissible minimum {gamma_min}")
    g = gamma if gamma is not None else gamma_min
    offset = K if K is not None else g * (1.0 - np.log(c.ybar))
    holds = c.ybar > 2.0 * (p.k * p.Y + p.beta * p.L) / p.c0
    return BarrierGauge(GaugeKind.PSI_EXTERIOR, f_norm, p.c0, p.k, p.Y, c.ybar1,
                        gamma_scale=g, K_offset=offset, hypothesis_holds=holds)


@dataclass
class InteriorSolution:
    eta: Field3
    beta_plus: FaceField
    beta_minus: FaceField
    residual: float
    iterations: int
    corner_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    gauge: Optional[BarrierGauge] = None


@dataclass
class ExteriorSolution:
    zeta: Field3
    zeta_plus: FaceField
    zeta_minus: FaceField
    residual: float
    iterations: int
    method: str = 'march'
    gauge: Optional[BarrierGauge] = None


class ProblemSet:
    """
    Factorized cycle problems on one grid

    Holds the assembled generator and lazily builds one DirichletSystem per
    problem (interior, coupled exterior, face strips, exterior z-slabs).
    All solves work on global node vectors with one column per case.
    """

    def __init__(self, grid: Grid3, p: ModelParams, c: CycleLevels, opts: SolverOptions,
                 op: Optional[SparseOperator] = None):
        self.grid = grid
        self.p = p
        self.c = c
        self.opts = opts
        self.op = op or assemble_generator(grid, p, opts)
        self._systems: Dict[tuple, object] = {}
        self._index = np.arange(grid.n_nodes).reshape(grid.shape)

    # -- node bookkeeping -------------------------------------------------

    def sheet_nodes(self, y: float) -> np.ndarray:
        return self._index[:, self.grid.j_of(y), :].ravel()

    def surface_nodes(self, level: Level) -> np.ndarray:
        """Global nodes of a cycle surface in SurfaceField.vector() order"""
        value = self.grid.level_value(level)
        return np.concatenate([self.sheet_nodes(-value), self.sheet_nodes(value)])

    def _band_js(self, up: bool) -> np.ndarray:
        g = self.grid
        return np.arange(g.j_of(g.ybar), g.ys.size) if up else np.arange(0, g.j_of(-g.ybar) + 1)

    def _truncation_js(self) -> List[int]:
        return [0, self.grid.ys.size - 1] if self.opts.y_closure == 'dirichlet' else []

    def corner_nodes(self) -> np.ndarray:
        j0 = self.grid.j_of(0.0)
        return np.concatenate([self._index[:, j0, -1], self._index[:, j0, 0]])

    # -- systems ------------------------------------------------------------

    def _cached(self, key: tuple, build: Callable[[], object]):
        if key not in self._systems:
            self._systems[key] = build()
        return self._systems[key]

    def interior_system(self) -> DirichletSystem:
        def build():
            g = self.grid
            nodes = g.node_indices(Region.INTERIOR)
            j = np.unravel_index(nodes, g.shape)[1]
            edge = (j == g.j_of(g.ybar1)) | (j == g.j_of(-g.ybar1))
            return DirichletSystem(self.op, nodes[~edge], nodes[edge], self.opts)
        return self._cached(('interior',), build)

    def exterior_system(self) -> DirichletSystem:
        def build():
            g = self.grid
            nodes = g.node_indices(Region.EXTERIOR)
            j = np.unravel_index(nodes, g.shape)[1]
            edge = np.isin(j, [g.j_of(g.ybar), g.j_of(-g.ybar)] + self._truncation_js())
            return DirichletSystem(self.op, nodes[~edge], nodes[edge], self.opts)
        return self._cached(('exterior',), build)

    def face_system(self, face: Face, region: str) -> DirichletSystem:
        """Strip of the plastic face: interior strip [0, ybar1] or exterior strip [ybar, y_max] (mirrored for Minus)"""
        def build():
            g = self.grid
            k = g.zs.size - 1 if face is Face.PLUS else 0
            sign = 1.0 if face is Face.PLUS else -1.0
            if region == 'interior':
                inner, outer = g.j_of(0.0), g.j_of(sign * g.ybar1)
                known_js = [inner, outer]
            else:
                inner = g.j_of(sign * g.ybar)
                outer = g.ys.size - 1 if face is Face.PLUS else 0
                known_js = [inner] + ([outer] if self.opts.y_closure == 'dirichlet' else [])
            js = np.arange(min(inner, outer), max(inner, outer) + 1)
            strip = self._index[:, js, k]
            known = np.isin(js, known_js)[None, :].repeat(g.xs.size, axis=0)
            return DirichletSystem(self.op, strip[~known], strip[known], self.opts)
        return self._cached(('face', face, region), build)

    def slab_systems(self, up: bool) -> List[DirichletSystem]:
        """Face strip first, then z-slabs marching away from the plastic face"""
        def build():
            g = self.grid
            nz = g.zs.size
            js = self._band_js(up)
            inner = g.j_of(g.ybar if up else -g.ybar)
            fixed = [inner] + [j for j in self._truncation_js() if j in js]
            free = js[~np.isin(js, fixed)]
            order = range(nz - 2, -1, -1) if up else range(1, nz)
            systems = [self.face_system(Face.PLUS if up else Face.MINUS, 'exterior')]
            for k in order:
                unknown = self._index[:, free, k].ravel()
                prev = k + 1 if up else k - 1
                known = np.concatenate([self._index[:, js, prev].ravel(), self._index[:, fixed, k].ravel()])
                systems.append(DirichletSystem(self.op, unknown, known, self.opts))
            return systems
        return self._cached(('slabs', up), build)

    # -- global-vector solves ---------------------------------------------

    def _blank(self, columns: Optional[int]) -> np.ndarray:
        n = self.grid.n_nodes
        return np.zeros(n) if columns is None else np.zeros((n, columns))

    @staticmethod
    def _run(systems: Sequence[DirichletSystem], U: np.ndarray, R: np.ndarray) -> SolveInfo:
        worst, iterations = 0.0, 0
        for system in systems:
            U[system.unknown] = system.solve(R[system.unknown], U[system.known])
            worst = max(worst, system.last_info.residual)
            iterations += system.last_info.iterations
        return SolveInfo(worst, iterations)

    def interior_solve(self, data: np.ndarray, rhs: Optional[np.ndarray] = None) -> Tuple[np.ndarray, SolveInfo]:
        """data: Gamma1 surface vector(s); rhs: global right-hand side Q u = rhs"""
        columns = None if data.ndim == 1 else data.shape[1]
        U = self._blank(columns)
        R = self._blank(columns) if rhs is None else rhs
        U[self.surface_nodes(Level.GAMMA1)] = data
        info = self._run([self.interior_system()], U, R)
        return U, info

    def exterior_solve(self, data: np.ndarray, rhs: Optional[np.ndarray] = None,
                       method: Optional[str] = None) -> Tuple[np.ndarray, SolveInfo, str]:
        """data: Gamma surface vector(s); truncation rows get opts.truncation_value"""
        method = method or self.opts.exterior_method
        if self.opts.epsilon_z > 0 and method == 'march':
            method = 'coupled'
        columns = None if data.ndim == 1 else data.shape[1]
        U = self._blank(columns)
        R = self._blank(columns) if rhs is None else rhs
        U[self.surface_nodes(Level.GAMMA)] = data
        for j in self._truncation_js():
            U[self._index[:, j, :].ravel()] = self.opts.truncation_value
        if method == 'march':
            info_up = self._run(self.slab_systems(True), U, R)
            info_dn = self._run(self.slab_systems(False), U, R)
            info = SolveInfo(max(info_up.residual, info_dn.residual), info_up.iterations + info_dn.iterations)
        else:
            info = self._run([self.exterior_system()], U, R)
        return U, info, method

    def region_field(self, U: np.ndarray, region: Region) -> Field3:
        g = self.grid
        values = U[g.node_indices(region)]
        return Field3(g, region, values.reshape(g.xs.size, g.region_js(region).size, g.zs.size))

    def global_rhs(self, f: Field3) -> np.ndarray:
        """Q u = -f on the nodes covered by f"""
        R = np.zeros(self.grid.n_nodes)
        R[self.grid.node_indices(f.region)] = -f.flat()
        return R


def _interior_result(problems: ProblemSet, U: np.ndarray, info: SolveInfo,
                     gauge: Optional[BarrierGauge] = None) -> InteriorSolution:
    eta = problems.region_field(U, Region.INTERIOR)
    logger.info("interior solve: residual %.2e, %d iterations", info.residual, info.iterations)
    return InteriorSolution(
        eta=eta,
        beta_plus=trace(eta, Face.PLUS),
        beta_minus=trace(eta, Face.MINUS),
        residual=info.residual,
        iterations=info.iterations,
        corner_nodes=problems.corner_nodes(),
        gauge=gauge,
    )


def _exterior_result(problems: ProblemSet, U: np.ndarray, info: SolveInfo, method: str,
                     gauge: Optional[BarrierGauge] = None) -> ExteriorSolution:
    zeta = problems.region_field(U, Region.EXTERIOR)
    logger.info("exterior solve (%s): residual %.2e, %d iterations", method, info.residual, info.iterations)
    return ExteriorSolution(
        zeta=zeta,
        zeta_plus=trace(problems.region_field(U, Region.EXTERIOR_UP), Face.PLUS),
        zeta_minus=trace(problems.region_field(U, Region.EXTERIOR_DOWN), Face.MINUS),
        residual=info.residual,
        iterations=info.iterations,
        method=method,
        gauge=gauge,
    )


def _problems(grid: Grid3, p: ModelParams, c: CycleLevels, opts: SolverOptions,
              problems: Optional[ProblemSet]) -> ProblemSet:
    return problems if problems is not None else ProblemSet(grid, p, c, opts)


def solve_face_plus(data_top: Data, data_bottom: Data, face: Face, region: str, grid: Grid3,
                    p: ModelParams, opts: SolverOptions, c: Optional[CycleLevels] = None,
                    problems: Optional[ProblemSet] = None) -> FaceField:
    """
    Two-point problem on a plastic face strip with Neumann ends at x = +-L

    Args:
        data_top: Values at the outer end (|y| = ybar1, or y_max for exterior strips)
        data_bottom: Values at the inner end (y = 0, or |y| = ybar for exterior strips)
        face: Face.PLUS or Face.MINUS
        region: 'interior' or 'exterior'

    Returns:
        FaceField over the strip including both ends
    """
    c = c or CycleLevels(grid.ybar, grid.ybar1)
    problems = _problems(grid, p, c, opts, problems)
    system = problems.face_system(face, region)
    nx = grid.xs.size
    top = np.broadcast_to(np.asarray(data_top, float), (nx,))
    bottom = np.broadcast_to(np.asarray(data_bottom, float), (nx,))

    k = grid.zs.size - 1 if face is Face.PLUS else 0
    sign = 1.0 if face is Face.PLUS else -1.0
    if region == 'interior':
        inner, outer = grid.j_of(0.0), grid.j_of(sign * grid.ybar1)
    else:
        inner, outer = grid.j_of(sign * grid.ybar), (grid.ys.size - 1 if face is Face.PLUS else 0)
    js = np.arange(min(inner, outer), max(inner, outer) + 1)

    U = np.zeros(grid.n_nodes)
    index = np.arange(grid.n_nodes).reshape(grid.shape)
    U[index[:, inner, k]] = bottom
    U[index[:, outer, k]] = top
    U[system.unknown] = system.solve(np.zeros(system.unknown.size), U[system.known])
    return FaceField(face, grid.xs, grid.ys[js], U[index[:, js, k]])


def kernel_I(a: float, b: float, p: ModelParams, c: CycleLevels) -> float:
    """I(a, b) = int_a^b exp(c0 s^2 + 2kYs) ds / int_0^ybar1 exp(c0 s^2 + 2kYs) ds"""
    if not (-c.ybar1 <= a <= b <= c.ybar1):
        raise ValueError("need -ybar1 <= a <= b <= ybar1")
    weight = lambda s: np.exp(p.c0 * s * s + 2.0 * p.k * p.Y * s)
    num, _ = quad(weight, a, b, epsabs=0.0, epsrel=1e-12, limit=200)
    den, _ = quad(weight, 0.0, c.ybar1, epsabs=0.0, epsrel=1e-12, limit=200)
    return num / den


def solve_interior(phi: SurfaceField, grid: Grid3, p: ModelParams, c: CycleLevels, opts: SolverOptions,
                   problems: Optional[ProblemSet] = None) -> InteriorSolution:
    """Harmonic extension of Gamma1 data (both sheets) into |y| < ybar1"""
    if phi.level is not Level.GAMMA1:
        raise ValueError("interior data must live on Gamma1")
    problems = _problems(grid, p, c, opts, problems)
    U, info = problems.interior_solve(phi.vector())
    return _interior_result(problems, U, info)


def solve_exterior(h: SurfaceField, grid: Grid3, p: ModelParams, c: CycleLevels, opts: SolverOptions,
                   problems: Optional[ProblemSet] = None, method: Optional[str] = None) -> ExteriorSolution:
    """Harmonic extension of Gamma data into |y| > ybar (face strip first, then z-march)"""
    if h.level is not Level.GAMMA:
        raise ValueError("exterior data must live on Gamma")
    problems = _problems(grid, p, c, opts, problems)
    U, info, used = problems.exterior_solve(h.vector(), method=method)
    return _exterior_result(problems, U, info, used)


def solve_interior_nonhom(f: Field3, grid: Grid3, p: ModelParams, c: CycleLevels, opts: SolverOptions,
                          problems: Optional[ProblemSet] = None,
                          boundary: Optional[SurfaceField] = None) -> InteriorSolution:
    """Solve A chi + f = 0, B+- chi + f = 0 with chi = boundary (default 0) on Gamma1"""
    problems = _problems(grid, p, c, opts, problems)
    data = boundary.vector() if boundary is not None else np.zeros(problems.surface_nodes(Level.GAMMA1).size)
    U, info = problems.interior_solve(data, problems.global_rhs(f))
    gauge = interior_gauge(f.restrict(Region.INTERIOR).max_abs() if f.region is not Region.INTERIOR
                           else f.max_abs(), p, c)
    return _interior_result(problems, U, info, gauge)


def solve_exterior_nonhom(f: Field3, grid: Grid3, p: ModelParams, c: CycleLevels, opts: SolverOptions,
                          problems: Optional[ProblemSet] = None,
                          boundary: Optional[SurfaceField] = None) -> ExteriorSolution:
    """Solve A xi + f = 0, B+- xi + f = 0 with xi = boundary (default 0) on Gamma"""
    problems = _problems(grid, p, c, opts, problems)
    data = boundary.vector() if boundary is not None else np.zeros(problems.surface_nodes(Level.GAMMA).size)
    U, info, used = problems.exterior_solve(data, problems.global_rhs(f))
    f_ext = f if f.region is Region.EXTERIOR else f.restrict(Region.EXTERIOR)
    gauge = exterior_gauge(f_ext.max_abs(), p, c)
    return _exterior_result(problems, U, info, used, gauge)


def barrier_certificate(problems: ProblemSet, gauge: BarrierGauge) -> Dict[str, float]:
    """
    Discrete operator applied to the gauge at the unknown nodes of its problem

    Interior: margin = min (Q Phi)_i - |f| (>= 0 certifies the bound).
    Exterior: margin = min (-|f| - (Q Psi)_i).
    """
    g = problems.grid
    X, Yv, Z = np.meshgrid(g.xs, g.ys, g.zs, indexing='ij')
    values = gauge.evaluate(X, Yv, Z).ravel()
    if gauge.kind is GaugeKind.PHI_INTERIOR:
        rows = problems.interior_system().unknown
        applied = problems.op.matrix[rows] @ values
        margin = float(np.min(applied - gauge.f_norm))
    else:
        rows = problems.exterior_system().unknown
        applied = problems.op.matrix[rows] @ values
        margin = float(np.min(-gauge.f_norm - applied))
    return {'margin': margin, 'rows': int(rows.size), 'hypothesis_holds': gauge.hypothesis_holds}


def truncation_convergence(h_fn: Callable, p: ModelParams, c: CycleLevels, nx: int, ny_per_band: int,
                           nz: int, y_max_values: Sequence[float], opts: SolverOptions) -> List[Dict[str, float]]:
    """
    Exterior solutions at Gamma1 for increasing truncation levels

    Returns:
        One record per y_max with the sup difference to the previous level and
        whether the Gamma1 values increased (expected for h >= 0, zero truncation data)
    """
    records = []
    previous = None
    for y_max in sorted(y_max_values):
        grid = build_grid(p, c, nx, ny_per_band, nz, y_max)
        h = SurfaceField.from_function(grid, Level.GAMMA, h_fn)
        sol = solve_exterior(h, grid, p, c, opts)
        values = trace(sol.zeta, Level.GAMMA1).vector()
        record = {'y_max': float(y_max), 'sup_diff': float('nan'), 'increasing': True}
        if previous is not None:
            record['sup_diff'] = float(np.max(np.abs(values - previous)))
            record['increasing'] = bool(np.all(values >= previous - opts.tol))
        records.append(record)
        previous = values
    return records


def regularization_gap(phi: SurfaceField, grid: Grid3, p: ModelParams, c: CycleLevels,
                       opts: SolverOptions, epsilon: float) -> float:
    """Sup-norm difference of interior solutions with z-viscosity epsilon and without"""
    base = solve_interior(phi, grid, p, c, opts.model_copy(update={'epsilon_z': 0.0}))
    regular = solve_interior(phi, grid, p, c, opts.model_copy(update={'epsilon_z': epsilon}))
    return float(np.max(np.abs(base.eta.values - regular.eta.values)))


def _surface_columns(grid: Grid3, level: Level, data_fns: Sequence[Callable]) -> np.ndarray:
    return np.column_stack([SurfaceField.from_function(grid, level, fn).vector() for fn in data_fns])


def refinement_study(grid: Grid3, p: ModelParams, c: CycleLevels, opts: SolverOptions,
                     data_fns: Dict[str, Callable], source: Optional[Callable] = None) -> List[Dict[str, float]]:
    """
    Interior and exterior solves on grid and on its midpoint refinement

    One record per problem and data set (plus the nonhomogeneous problem with
    zero data when a source is given), holding the sup difference of the two
    solutions at the shared nodes and its ratio to max(1, sup |u_h|). For a
    first-order scheme the error of the coarse solution is about twice the
    difference.
    """
    fine = refine_grid(grid)
    shared = coarse_nodes(grid, fine)
    sets = [(ProblemSet(grid, p, c, opts), grid), (ProblemSet(fine, p, c, opts), fine)]
    names = list(data_fns)
    records: List[Dict[str, float]] = []

    def compare(problem: str, labels: List[str], region: Region, U_coarse: np.ndarray, U_fine: np.ndarray):
        nodes = grid.node_indices(region)
        coarse = U_coarse[nodes].reshape(nodes.size, -1)
        refined = U_fine[shared[nodes]].reshape(nodes.size, -1)
        for col, label in enumerate(labels):
            delta = float(np.max(np.abs(coarse[:, col] - refined[:, col])))
            scale = max(1.0, float(np.max(np.abs(coarse[:, col]))))
            records.append({'problem': problem, 'data': label, 'delta': delta, 'scale': scale,
                            'relative': delta / scale})

    for problem, level, region in (('interior', Level.GAMMA1, Region.INTERIOR),
                                   ('exterior', Level.GAMMA, Region.EXTERIOR)):
        solved = []
        for ps, g in sets:
            data = _surface_columns(g, level, [data_fns[n] for n in names])
            solved.append(ps.interior_solve(data)[0] if problem == 'interior' else ps.exterior_solve(data)[0])
        compare(problem, names, region, *solved)
        if source is None:
            continue
        solved = []
        for ps, g in sets:
            zero = np.zeros(2 * g.xs.size * g.zs.size)
            R = ps.global_rhs(Field3.from_function(g, Region.FULL, source))
            solved.append(ps.interior_solve(zero, R)[0] if problem == 'interior' else ps.exterior_solve(zero, R)[0])
        compare(problem, ['source'], region, *solved)

    worst = max(records, key=lambda r: r['relative'])
    logger.info("refinement study: worst relative difference %.3e (%s, %s)",
                worst['relative'], worst['problem'], worst['data'])
    return records


@dataclass
class OneDReference:
    """beta = 0 interior solution on (y, z) with closed-form plastic face lines"""
    ys: np.ndarray
    zs: np.ndarray
    values: np.ndarray        # (len(ys), nz)
    eta_Y: float
    eta_minus_Y: float
    discrete: np.ndarray      # plain coupled discrete solve on the same grid
    discrepancy: float


def _face_particular(f_line: Optional[Callable], ys: np.ndarray, p: ModelParams, c: CycleLevels) -> np.ndarray:
    """2 (J2(ybar1) I(0, y) - J2(y)) for the face ODE 1/2 u'' - (c0 y + kY) u' = -f"""
    if f_line is None:
        return np.zeros(ys.size)
    g = lambda s: p.c0 * s * s + 2.0 * p.k * p.Y * s
    inner = lambda t: quad(lambda s: float(f_line(s)) * np.exp(-g(s)), 0.0, t, epsabs=1e-14, epsrel=1e-12)[0]
    J2 = lambda y: quad(lambda t: np.exp(g(t)) * inner(t), 0.0, y, epsabs=1e-14, epsrel=1e-10, limit=100)[0]
    J2_top = J2(c.ybar1)
    return np.array([2.0 * (J2_top * kernel_I(0.0, y, p, c) - J2(y)) for y in ys])


def solve_1d_reference(phi_upper: np.ndarray, phi_lower: np.ndarray, grid2d: Grid3, p: ModelParams,
                       c: CycleLevels, opts: SolverOptions,
                       source: Optional[Callable] = None) -> OneDReference:
    """
    Semi-explicit interior solve for beta = 0

    The plastic face lines are replaced by their closed forms
    eta(y, Y) = eta_Y I(y, ybar1) + phi+(Y) I(0, y) (plus a particular part for
    sources) and eta(y, -Y) = eta_-Y I(-y, ybar1) + phi-(-Y) I(0, -y); the
    constants eta_Y, eta_-Y are the unknown values at (0, +-Y) of the coupled
    elastic system.

    Args:
        phi_upper, phi_lower: Data along z at y = ybar1 and y = -ybar1
        grid2d: Grid from build_yz_grid
        source: Optional f(y, z)
    """
    if p.beta != 0.0:
        raise ValueError("the 1d reference needs beta = 0")
    if grid2d.xs.size != 1:
        raise ValueError("grid2d must have a single x node")
    problems = ProblemSet(grid2d, p, c, opts)
    nz = grid2d.zs.size
    js = grid2d.region_js(Region.INTERIOR)
    ys = grid2d.ys[js]
    j_lo, j_hi, j0 = grid2d.j_of(-c.ybar1), grid2d.j_of(c.ybar1), grid2d.j_of(0.0)
    phi_upper = np.asarray(phi_upper, float)
    phi_lower = np.asarray(phi_lower, float)

    nodes = grid2d.node_indices(Region.INTERIOR)
    _, j, k = np.unravel_index(nodes, grid2d.shape)
    y = grid2d.ys[j]
    dirichlet = (j == j_lo) | (j == j_hi)
    plus = (k == nz - 1) & (y > 0) & ~dirichlet
    minus = (k == 0) & (y < 0) & ~dirichlet
    elastic = ~(dirichlet | plus | minus)

    n_all = nodes.size
    position = {int(g): i for i, g in enumerate(nodes)}
    e_nodes = nodes[elastic]
    col = {int(g): i for i, g in enumerate(e_nodes)}
    top_node = int(np.ravel_multi_index((0, j0, nz - 1), grid2d.shape))
    bottom_node = int(np.ravel_multi_index((0, j0, 0), grid2d.shape))

    f_plus = (lambda s: source(s, p.Y)) if source is not None else None
    f_minus = (lambda s: source(-s, -p.Y)) if source is not None else None
    part_plus = _face_particular(f_plus, y[plus], p, c)
    part_minus = _face_particular(f_minus, -y[minus], p, c)

    S = sp.lil_matrix((n_all, e_nodes.size))
    offset = np.zeros(n_all)
    for g in e_nodes:
        S[position[int(g)], col[int(g)]] = 1.0
    for i, (g, yy) in enumerate(zip(nodes[plus], y[plus])):
        S[position[int(g)], col[top_node]] = kernel_I(yy, c.ybar1, p, c)
        offset[position[int(g)]] = phi_upper[nz - 1] * kernel_I(0.0, yy, p, c) + part_plus[i]
    for i, (g, yy) in enumerate(zip(nodes[minus], y[minus])):
        S[position[int(g)], col[bottom_node]] = kernel_I(-yy, c.ybar1, p, c)
        offset[position[int(g)]] = phi_lower[0] * kernel_I(0.0, -yy, p, c) + part_minus[i]
    lo = j == j_lo
    hi = j == j_hi
    offset[lo] = phi_lower[k[lo]]
    offset[hi] = phi_upper[k[hi]]

    Q = problems.op.matrix[e_nodes][:, nodes]
    rhs = np.zeros(e_nodes.size)
    if source is not None:
        rhs -= np.asarray(source(y[elastic], grid2d.zs[k[elastic]]), dtype=float)
    w = spsolve((Q @ S.tocsr()).tocsc(), rhs - Q @ offset)
    values = (S.tocsr() @ w + offset).reshape(js.size, nz)

    data = np.concatenate([phi_lower, phi_upper])
    R = None
    if source is not None:
        Yv, Zv = np.meshgrid(ys, grid2d.zs, indexing='ij')
        R = np.zeros(grid2d.n_nodes)
        R[nodes] = -np.asarray(source(Yv, Zv), dtype=float).ravel()
    U, info = problems.interior_solve(data, R)
    discrete = U[nodes].reshape(js.size, nz)
    discrepancy = float(np.max(np.abs(discrete - values)))
    logger.info("1d reference: eta_Y = %.8f, eta_-Y = %.8f, discrete gap %.2e",
                w[col[top_node]], w[col[bottom_node]], discrepancy)
    return OneDReference(ys=ys, zs=grid2d.zs, values=values, eta_Y=float(w[col[top_node]]),
                         eta_minus_Y=float(w[col[bottom_node]]), discrete=discrete, discrepancy=discrepancy)


def face_line_error(ref: OneDReference, phi_upper: np.ndarray, phi_lower: np.ndarray,
                    p: ModelParams, c: CycleLevels) -> float:
    """Largest deviation of the reference face lines from eta_Y I(y, ybar1) + phi+(Y) I(0, y) and its mirror image"""
    worst = 0.0
    for y, value in zip(ref.ys, ref.values[:, -1]):
        if y >= 0.0:
            expected = ref.eta_Y * kernel_I(y, c.ybar1, p, c) + float(phi_upper[-1]) * kernel_I(0.0, y, p, c)
            worst = max(worst, abs(value - expected))
    for y, value in zip(ref.ys, ref.values[:, 0]):
        if y <= 0.0:
            expected = ref.eta_minus_Y * kernel_I(-y, c.ybar1, p, c) + float(phi_lower[0]) * kernel_I(0.0, -y, p, c)
            worst = max(worst, abs(value - expected))
    return float(worst)


def one_d_refinement(data_fn: Callable, p: ModelParams, c: CycleLevels, nx: int, ny_per_band: int, nz: int,
                     opts: SolverOptions, levels: int = 2) -> List[Dict[str, float]]:
    """
    x-slice of the beta = 0 interior solve against the 1d reference under (y, z) refinement

    data_fn is sampled at x = 0. The grids end just beyond ybar1 and are
    nested, so every level is compared on the nodes of the starting grid.

    Returns:
        One record per level: h_y, h_z, the slice gap, its ratio to the
        previous gap and the face-line error of the reference
    """
    if p.beta != 0.0:
        raise ValueError("the 1d reduction needs beta = 0")
    grid = build_grid(p, c, nx, ny_per_band, nz, 2.0 * c.ybar1 - c.ybar)
    sampled = lambda x, y, z: data_fn(np.zeros_like(x), y, z)
    records: List[Dict[str, float]] = []
    for level in range(levels + 1):
        phi = SurfaceField.from_function(grid, Level.GAMMA1, sampled)
        eta = solve_interior(phi, grid, p, c, opts).eta
        ref = solve_1d_reference(phi.upper[0], phi.lower[0], yz_grid(grid), p, c, opts)
        step = 2 ** level
        gap = float(np.max(np.abs(eta.values[grid.xs.size // 2][::step, ::step] - ref.values[::step, ::step])))
        ratio = records[-1]['gap'] / gap if records and gap > 0 else float('nan')
        records.append({'level': level, 'h_y': grid.h_y, 'h_z': float(grid.zs[1] - grid.zs[0]), 'gap': gap,
                        'ratio': ratio, 'face_line_error': face_line_error(ref, phi.upper[0], phi.lower[0], p, c),
                        'discrepancy': ref.discrepancy})
        logger.info("1d reduction level %d: h_y = %.4g, gap = %.3e", level, grid.h_y, gap)
        if level < levels:
            grid = refine_grid(grid, refine_x=False)
    return records


def main():
    """Example usage"""
    p = ModelParams(alpha=1.0, beta=0.0, c0=1.0, k=1.0, Y=1.0, L=1.0)
    c = CycleLevels(ybar=0.5, ybar1=1.0)
    opts = SolverOptions(y_closure='neumann')
    grid = build_grid(p, c, nx=3, ny_per_band=4, nz=9, y_max=4.0)
    phi = SurfaceField.from_function(grid, Level.GAMMA1, lambda x, y, z: (y > 0).astype(float))
    sol = solve_interior(phi, grid, p, c, opts)
    j = np.flatnonzero(sol.eta.ys == 0.0)[0]
    print(f"eta(0, 0, 0) = {sol.eta.values[1, j, grid.zs.size // 2]:.4f} (symmetry gives 0.5)")


if __name__ == "__main__":
    main()
