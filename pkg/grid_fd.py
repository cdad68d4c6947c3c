"""
Plastokh - Grids and Finite Differences
Snapped tensor grids, grid fields and the monotone upwind discretization of the generator
"""

import logging
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field
from scipy.sparse.linalg import splu, spsolve_triangular

from errors import InvalidResolution, InvalidTruncation, NoConvergence
from model_core import CycleLevels, ModelParams, TestFunction, generator_apply_nodes, phase_codes

logger = logging.getLogger(__name__)


class Region(str, Enum):
    INTERIOR = 'interior'
    EXTERIOR_UP = 'exterior_up'
    EXTERIOR_DOWN = 'exterior_down'
    EXTERIOR = 'exterior'
    FULL = 'full'


class Level(str, Enum):
    GAMMA = 'gamma'
    GAMMA1 = 'gamma1'


class Face(str, Enum):
    PLUS = 'plus'
    MINUS = 'minus'


class RowKind(IntEnum):
    INTERIOR_A = 0
    FACE_PLUS = 1
    FACE_MINUS = 2
    DIRICHLET = 3
    NEUMANN_X = 4


class SolverOptions(BaseModel):
    """Linear solver and discretization knobs"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    tol: float = Field(default=1e-10, gt=0)
    max_iter: int = Field(default=20000, ge=1)
    relaxation: float = Field(default=1.0, gt=0, lt=2)
    epsilon_z: float = Field(default=0.0, ge=0)
    method: Literal['direct', 'sor'] = 'direct'
    exterior_method: Literal['march', 'coupled'] = 'march'
    y_closure: Literal['dirichlet', 'neumann'] = 'dirichlet'
    truncation_value: float = 0.0


@dataclass(frozen=True, eq=False)
class Grid3:
    """Tensor grid on [-L, L] x [-y_max, y_max] x [-Y, Y] with snapped cycle levels"""
    xs: np.ndarray
    ys: np.ndarray
    zs: np.ndarray
    y_max: float
    ybar: float
    ybar1: float
    level_index: Dict[float, int]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.xs.size, self.ys.size, self.zs.size)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def Y(self) -> float:
        return float(self.zs[-1])

    @property
    def h_y(self) -> float:
        """Finest y spacing"""
        return float(np.min(np.diff(self.ys)))

    def j_of(self, y: float) -> int:
        if y not in self.level_index:
            raise KeyError(f"y = {y} is not a snapped level")
        return self.level_index[y]

    def level_value(self, level: Level) -> float:
        return self.ybar if level is Level.GAMMA else self.ybar1

    def region_js(self, region: Region) -> np.ndarray:
        ny = self.ys.size
        if region is Region.FULL:
            return np.arange(ny)
        if region is Region.INTERIOR:
            return np.arange(self.j_of(-self.ybar1), self.j_of(self.ybar1) + 1)
        if region is Region.EXTERIOR_UP:
            return np.arange(self.j_of(self.ybar), ny)
        if region is Region.EXTERIOR_DOWN:
            return np.arange(0, self.j_of(-self.ybar) + 1)
        return np.concatenate([np.arange(0, self.j_of(-self.ybar) + 1), np.arange(self.j_of(self.ybar), ny)])

    def node_indices(self, region: Region = Region.FULL) -> np.ndarray:
        """Global (lexicographic) indices of the region nodes, in region order"""
        nx, ny, nz = self.shape
        i, j, k = np.meshgrid(np.arange(nx), self.region_js(region), np.arange(nz), indexing='ij')
        return np.ravel_multi_index((i, j, k), self.shape).ravel()

    def mesh(self, region: Region = Region.FULL) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.meshgrid(self.xs, self.ys[self.region_js(region)], self.zs, indexing='ij')

    @staticmethod
    def _dual_widths(axis: np.ndarray) -> np.ndarray:
        if axis.size == 1:
            return np.ones(1)
        h = np.diff(axis)
        w = np.zeros(axis.size)
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
        return w

    def weights(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Dual cell widths along x, y and z"""
        return self._dual_widths(self.xs), self._dual_widths(self.ys), self._dual_widths(self.zs)


@dataclass
class Field3:
    """Grid function on a region; values has shape (nx, len(region ys), nz)"""
    grid: Grid3
    region: Region
    values: np.ndarray

    @property
    def ys(self) -> np.ndarray:
        return self.grid.ys[self.grid.region_js(self.region)]

    @classmethod
    def zeros(cls, grid: Grid3, region: Region) -> 'Field3':
        return cls(grid, region, np.zeros((grid.xs.size, grid.region_js(region).size, grid.zs.size)))

    @classmethod
    def from_function(cls, grid: Grid3, region: Region, fn) -> 'Field3':
        X, Yv, Z = grid.mesh(region)
        return cls(grid, region, np.broadcast_to(np.asarray(fn(X, Yv, Z), dtype=float), X.shape).copy())

    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def restrict(self, region: Region) -> 'Field3':
        """Restriction to a sub-region (nodes must be contained in this field)"""
        mine = self.grid.region_js(self.region)
        target = self.grid.region_js(region)
        pos = np.searchsorted(mine, target)
        if np.any(pos >= mine.size) or np.any(mine[np.minimum(pos, mine.size - 1)] != target):
            raise ValueError(f"{region.value} is not contained in {self.region.value}")
        return Field3(self.grid, region, self.values[:, pos, :].copy())

    def __add__(self, other: 'Field3') -> 'Field3':
        if other.region is not self.region:
            raise ValueError("fields live on different regions")
        return Field3(self.grid, self.region, self.values + other.values)


@dataclass
class FaceField:
    """Values on a plastic face sheet, shape (nx, len(ys))"""
    face: Face
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


@dataclass
class SurfaceField:
    """Data on the two sheets y = +-level, each of shape (nx, nz)"""
    level: Level
    xs: np.ndarray
    zs: np.ndarray
    upper: np.ndarray
    lower: np.ndarray

    @classmethod
    def constant(cls, grid: Grid3, level: Level, value: float) -> 'SurfaceField':
        shape = (grid.xs.size, grid.zs.size)
        return cls(level, grid.xs, grid.zs, np.full(shape, float(value)), np.full(shape, float(value)))

    @classmethod
    def from_function(cls, grid: Grid3, level: Level, fn) -> 'SurfaceField':
        """fn(x, y, z) sampled on both sheets"""
        X, Z = np.meshgrid(grid.xs, grid.zs, indexing='ij')
        y = grid.level_value(level)
        upper = np.broadcast_to(np.asarray(fn(X, np.full_like(X, y), Z), dtype=float), X.shape).copy()
        lower = np.broadcast_to(np.asarray(fn(X, np.full_like(X, -y), Z), dtype=float), X.shape).copy()
        return cls(level, grid.xs, grid.zs, upper, lower)

    @classmethod
    def from_vector(cls, level: Level, xs: np.ndarray, zs: np.ndarray, vector: np.ndarray) -> 'SurfaceField':
        n = xs.size * zs.size
        return cls(level, xs, zs, vector[n:].reshape(xs.size, zs.size).copy(),
                   vector[:n].reshape(xs.size, zs.size).copy())

    def vector(self) -> np.ndarray:
        """Lower sheet first, then upper, each in (x, z) lexicographic order"""
        return np.concatenate([self.lower.ravel(), self.upper.ravel()])

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(self.upper)), np.max(np.abs(self.lower))))

    def __add__(self, other: 'SurfaceField') -> 'SurfaceField':
        return SurfaceField(self.level, self.xs, self.zs, self.upper + other.upper, self.lower + other.lower)

    def __sub__(self, other: 'SurfaceField') -> 'SurfaceField':
        return SurfaceField(self.level, self.xs, self.zs, self.upper - other.upper, self.lower - other.lower)

    def scaled(self, a: float) -> 'SurfaceField':
        return SurfaceField(self.level, self.xs, self.zs, a * self.upper, a * self.lower)


@dataclass
class SparseOperator:
    """Generator matrix (CSR) with a per-row tag"""
    matrix: sp.csr_matrix
    row_kind: np.ndarray
    grid: Grid3

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def row(self, i: int) -> List[Tuple[int, float]]:
        start, stop = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return list(zip(self.matrix.indices[start:stop].tolist(), self.matrix.data[start:stop].tolist()))

    def generator_rows(self) -> np.ndarray:
        return self.row_kind != RowKind.DIRICHLET


def _axis_from_bands(edges: List[float], per_band: int, h_target: float) -> np.ndarray:
    pieces = [np.array([edges[0]])]
    for a, b in zip(edges[:-1], edges[1:]):
        n = max(per_band, int(np.ceil((b - a) / h_target - 1e-9)))
        pieces.append(a + (b - a) * np.arange(1, n) / n)
        pieces.append(np.array([b]))
    return np.concatenate(pieces)


def _y_axis(c: CycleLevels, ny_per_band: int, y_max: float) -> Tuple[np.ndarray, Dict[float, int]]:
    h_target = min(c.ybar, c.ybar1 - c.ybar) / ny_per_band
    positive = _axis_from_bands([0.0, c.ybar, c.ybar1, y_max], ny_per_band, h_target)
    ys = np.concatenate([-positive[:0:-1], positive])
    centre = positive.size - 1
    index = {0.0: centre}
    for value in (c.ybar, c.ybar1, y_max):
        offset = int(np.flatnonzero(positive == value)[0])
        index[value] = centre + offset
        index[-value] = centre - offset
    return ys, index


def build_grid(p: ModelParams, c: CycleLevels, nx: int, ny_per_band: int, nz: int, y_max: float) -> Grid3:
    """
    Build the snapped tensor grid

    y is split into the bands [0, ybar], [ybar, ybar1], [ybar1, y_max] (and
    mirror images); each band gets max(ny_per_band, ceil(width / h)) equal
    intervals with h = min(ybar, ybar1 - ybar) / ny_per_band.
    """
    if nx < 3 or nz < 3 or ny_per_band < 1:
        raise InvalidResolution(f"need nx, nz >= 3 and ny_per_band >= 1 (got {nx}, {ny_per_band}, {nz})")
    if not y_max > c.ybar1:
        raise InvalidTruncation(f"y_max = {y_max} must exceed ybar1 = {c.ybar1}")

    ys, index = _y_axis(c, ny_per_band, y_max)
    grid = Grid3(
        xs=np.linspace(-p.L, p.L, nx),
        ys=ys,
        zs=np.linspace(-p.Y, p.Y, nz),
        y_max=float(y_max), ybar=c.ybar, ybar1=c.ybar1, level_index=index,
    )
    logger.debug("grid %s (%d nodes), finest h_y = %.4g", grid.shape, grid.n_nodes, grid.h_y)
    return grid


def build_yz_grid(p: ModelParams, c: CycleLevels, ny_per_band: int, nz: int, y_max: float) -> Grid3:
    """Single x-node grid used by the beta = 0 reference problems"""
    if nz < 3 or ny_per_band < 1:
        raise InvalidResolution(f"need nz >= 3 and ny_per_band >= 1 (got {ny_per_band}, {nz})")
    if not y_max > c.ybar1:
        raise InvalidTruncation(f"y_max = {y_max} must exceed ybar1 = {c.ybar1}")
    ys, index = _y_axis(c, ny_per_band, y_max)
    return Grid3(xs=np.zeros(1), ys=ys, zs=np.linspace(-p.Y, p.Y, nz),
                 y_max=float(y_max), ybar=c.ybar, ybar1=c.ybar1, level_index=index)


def _midpoints(axis: np.ndarray) -> np.ndarray:
    out = np.empty(2 * axis.size - 1)
    out[::2] = axis
    out[1::2] = 0.5 * (axis[:-1] + axis[1:])
    return out


def refine_grid(grid: Grid3, refine_x: bool = True) -> Grid3:
    """
    Midpoint refinement: every interval is halved

    Node (i, j, k) of grid is node (2i, 2j, 2k) of the result (i stays put
    when x is not refined or has a single node).
    """
    xs = _midpoints(grid.xs) if refine_x and grid.xs.size > 1 else grid.xs.copy()
    index = {y: 2 * j for y, j in grid.level_index.items()}
    return Grid3(xs=xs, ys=_midpoints(grid.ys), zs=_midpoints(grid.zs), y_max=grid.y_max,
                 ybar=grid.ybar, ybar1=grid.ybar1, level_index=index)


def yz_grid(grid: Grid3) -> Grid3:
    """Single x-node grid with the y and z axes of grid"""
    return Grid3(xs=np.zeros(1), ys=grid.ys.copy(), zs=grid.zs.copy(), y_max=grid.y_max,
                 ybar=grid.ybar, ybar1=grid.ybar1, level_index=dict(grid.level_index))


def coarse_nodes(coarse: Grid3, fine: Grid3) -> np.ndarray:
    """Global indices in fine of the coarse nodes, in coarse lexicographic order"""
    picks = []
    for c_axis, f_axis in ((coarse.xs, fine.xs), (coarse.ys, fine.ys), (coarse.zs, fine.zs)):
        stride = (f_axis.size - 1) // (c_axis.size - 1) if c_axis.size > 1 else 1
        picked = f_axis[::max(stride, 1)]
        nested = stride >= 1 and picked.size == c_axis.size and np.allclose(picked, c_axis, atol=1e-12)
        if c_axis.size > 1 and not nested:
            raise ValueError("fine grid is not a refinement of the coarse grid")
        picks.append(np.arange(c_axis.size) * stride)
    i, j, k = np.meshgrid(*picks, indexing='ij')
    return np.ravel_multi_index((i, j, k), fine.shape).ravel()


def _row_kinds(grid: Grid3, codes: np.ndarray) -> np.ndarray:
    """Node tags from geometry: x ends, then the plastic faces"""
    kind = np.full(grid.shape, RowKind.INTERIOR_A, dtype=np.int8)
    if grid.xs.size >= 3:
        kind[0] = RowKind.NEUMANN_X
        kind[-1] = RowKind.NEUMANN_X
    kind[codes == 1] = RowKind.FACE_PLUS
    kind[codes == 2] = RowKind.FACE_MINUS
    return kind.ravel()


def assemble_generator(grid: Grid3, p: ModelParams, opts: SolverOptions) -> SparseOperator:
    """
    Monotone upwind discretization of the generator on the full grid

    Elastic rows carry 1/2 d_xx + 1/2 d_yy, upwind drifts and the upwind
    transport y d_z; plastic face rows (z = Y, y > 0 and z = -Y, y < 0) drop
    the transport. x = +-L uses mirror ghosts, |y| = y_max is reflecting.
    """
    nx, ny, nz = grid.shape
    shape = grid.shape
    n = grid.n_nodes
    idx = np.arange(n).reshape(shape)
    X, Yg, Z = np.meshgrid(grid.xs, grid.ys, grid.zs, indexing='ij')
    codes = phase_codes(Yg, Z, p)
    elastic = codes == 0

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []

    def couple(src: np.ndarray, dst: np.ndarray, coef: np.ndarray):
        keep = coef != 0.0
        rows.append(src[keep])
        cols.append(dst[keep])
        vals.append(coef[keep])

    if nx >= 3:
        hx = grid.xs[1] - grid.xs[0]
        a = -p.alpha * X
        diff = 0.5 / hx ** 2
        up = diff + np.maximum(a, 0.0) / hx
        down = diff + np.maximum(-a, 0.0) / hx
        up[0] += diff
        down[-1] += diff
        couple(idx[:-1].ravel(), idx[1:].ravel(), up[:-1].ravel())
        couple(idx[1:].ravel(), idx[:-1].ravel(), down[1:].ravel())

    hy = np.diff(grid.ys)
    hm = np.empty(ny)
    hp = np.empty(ny)
    hm[1:] = hy
    hp[:-1] = hy
    hm[0] = hp[0]
    hp[-1] = hm[-1]
    b = -(p.beta * X + p.c0 * Yg + p.k * Z)
    up = 1.0 / (hp * (hm + hp))[None, :, None] + np.maximum(b, 0.0) / hp[None, :, None]
    down = 1.0 / (hm * (hm + hp))[None, :, None] + np.maximum(-b, 0.0) / hm[None, :, None]
    # reflecting ends: mirror ghost for diffusion, outward drift dropped
    down[:, -1, :] += 1.0 / (hm[-1] * (hm[-1] + hp[-1]))
    up[:, 0, :] += 1.0 / (hp[0] * (hm[0] + hp[0]))
    couple(idx[:, :-1].ravel(), idx[:, 1:].ravel(), up[:, :-1].ravel())
    couple(idx[:, 1:].ravel(), idx[:, :-1].ravel(), down[:, 1:].ravel())

    hz = grid.zs[1] - grid.zs[0]
    forward = np.where(elastic & (Yg > 0), Yg / hz, 0.0)
    backward = np.where(elastic & (Yg < 0), -Yg / hz, 0.0)
    if opts.epsilon_z > 0:
        visc = 0.5 * opts.epsilon_z / hz ** 2
        forward = forward + np.where(elastic, visc, 0.0)
        backward = backward + np.where(elastic, visc, 0.0)
        forward[:, :, 0] += np.where(elastic[:, :, 0], visc, 0.0)
        backward[:, :, -1] += np.where(elastic[:, :, -1], visc, 0.0)
    couple(idx[:, :, :-1].ravel(), idx[:, :, 1:].ravel(), forward[:, :, :-1].ravel())
    couple(idx[:, :, 1:].ravel(), idx[:, :, :-1].ravel(), backward[:, :, 1:].ravel())

    r = np.concatenate(rows)
    cidx = np.concatenate(cols)
    v = np.concatenate(vals)
    off = sp.coo_matrix((v, (r, cidx)), shape=(n, n)).tocsr()
    rowsum = np.asarray(off.sum(axis=1)).ravel()
    matrix = (off - sp.diags(rowsum)).tocsr()
    matrix.eliminate_zeros()

    logger.debug("assembled generator: %d rows, %d nonzeros", n, matrix.nnz)
    return SparseOperator(matrix=matrix, row_kind=_row_kinds(grid, codes), grid=grid)


def mark_dirichlet(op: SparseOperator, nodes: np.ndarray) -> SparseOperator:
    """Copy of op whose given rows are identity placeholders tagged Dirichlet"""
    keep = np.ones(op.n)
    keep[nodes] = 0.0
    ident = np.zeros(op.n)
    ident[nodes] = 1.0
    matrix = (sp.diags(keep) @ op.matrix + sp.diags(ident)).tocsr()
    kind = op.row_kind.copy()
    kind[nodes] = RowKind.DIRICHLET
    return SparseOperator(matrix=matrix, row_kind=kind, grid=op.grid)


def transpose_generator(op: SparseOperator) -> SparseOperator:
    """
    Structural transpose for the forward (mass balance) equation

    Row n of the transpose balances the mass entering and leaving node n, so
    its tag is the geometric tag of the node: Dirichlet placeholders of op
    are not carried over, and wrong-sign face nodes (z = Y with y <= 0,
    z = -Y with y >= 0) stay INTERIOR_A like their backward rows.
    """
    grid = op.grid
    _, Yg, _ = np.meshgrid(grid.xs, grid.ys, grid.zs, indexing='ij')
    nz = grid.zs.size
    k = np.broadcast_to(np.arange(nz)[None, None, :], grid.shape)
    codes = np.zeros(grid.shape, dtype=np.int8)
    codes[(k == nz - 1) & (Yg > 0)] = 1
    codes[(k == 0) & (Yg < 0)] = 2
    return SparseOperator(matrix=op.matrix.T.tocsr(), row_kind=_row_kinds(grid, codes), grid=grid)


def consistency_error(op: SparseOperator, p: ModelParams, f: TestFunction) -> np.ndarray:
    """|Q f - A f| at every node, shaped like the grid"""
    grid = op.grid
    X, Yg, Z = np.meshgrid(grid.xs, grid.ys, grid.zs, indexing='ij')
    discrete = op.matrix @ np.asarray(f(X, Yg, Z), dtype=float).ravel()
    exact = generator_apply_nodes(f, X, Yg, Z, p).ravel()
    return np.abs(discrete - exact).reshape(grid.shape)


def consistency_study(grid: Grid3, p: ModelParams, f: TestFunction, levels: int = 2) -> List[Dict[str, float]]:
    """
    Truncation error of the generator under repeated midpoint refinement

    The error is measured on the nodes of the starting grid away from the
    x ends and the reflecting y ends, so every level sees the same points.
    Assembled without vanishing viscosity.
    """
    if grid.xs.size < 3:
        raise InvalidResolution("the consistency study needs nx >= 3")
    records: List[Dict[str, float]] = []
    current = grid
    for level in range(levels + 1):
        err = consistency_error(assemble_generator(current, p, SolverOptions()), p, f)
        shared = err.ravel()[coarse_nodes(grid, current)].reshape(grid.shape)
        error = float(np.max(shared[1:-1, 1:-1, :]))
        ratio = records[-1]['error'] / error if records and error > 0 else float('nan')
        records.append({'level': level, 'h_y': current.h_y, 'error': error, 'ratio': ratio})
        logger.debug("consistency level %d: h_y = %.4g, error = %.3e", level, current.h_y, error)
        if level < levels:
            current = refine_grid(current)
    return records


@dataclass
class SolveInfo:
    residual: float
    iterations: int


def _backward_error(A: sp.spmatrix, u: np.ndarray, b: np.ndarray) -> float:
    r = A @ u - b
    norm_a = float(abs(A).sum(axis=1).max()) if A.shape[0] else 0.0
    denom = norm_a * float(np.max(np.abs(u), initial=0.0)) + float(np.max(np.abs(b), initial=0.0))
    num = float(np.max(np.abs(r), initial=0.0))
    return num / denom if denom > 0 else num


def _sor(A: sp.csc_matrix, b: np.ndarray, opts: SolverOptions) -> Tuple[np.ndarray, int, float]:
    """Lexicographic relaxed Gauss-Seidel sweeps as lower-triangular solves"""
    A = A.tocsr()
    d = A.diagonal()
    omega = opts.relaxation
    lower = (sp.tril(A, k=-1) + sp.diags(d / omega)).tocsr()
    upper = (sp.triu(A, k=1) + sp.diags((1.0 - 1.0 / omega) * d)).tocsr()
    u = np.zeros_like(b)
    residual = np.inf
    for it in range(1, opts.max_iter + 1):
        u = spsolve_triangular(lower, b - upper @ u, lower=True)
        residual = _backward_error(A, u, b)
        if residual <= opts.tol:
            return u, it, residual
    raise NoConvergence(opts.max_iter, residual, what='SOR')


class DirichletSystem:
    """
    Generator rows of `unknown` nodes with values of `known` nodes eliminated

    Solves (Q u)_U = rhs_U for u_U given u_K. The factorization is cached, so
    repeated solves (and multi-column right-hand sides) reuse it.
    """

    def __init__(self, op: SparseOperator, unknown: np.ndarray, known: np.ndarray, opts: SolverOptions):
        self.op = op
        self.unknown = np.asarray(unknown, dtype=np.int64)
        self.known = np.asarray(known, dtype=np.int64)
        self.opts = opts
        block = op.matrix[self.unknown]
        self.A_uu = block[:, self.unknown].tocsc()
        self.A_uk = block[:, self.known].tocsr()
        if self.A_uu.nnz + self.A_uk.nnz != block.nnz:
            raise ValueError("unknown rows reference nodes outside the system")
        self._lu = None
        self.last_info = SolveInfo(0.0, 0)

    def solve(self, rhs: np.ndarray, known_values: np.ndarray) -> np.ndarray:
        """rhs over unknown nodes, known_values over known nodes (1-D or one column per case)"""
        b = np.asarray(rhs, dtype=float) - self.A_uk @ np.asarray(known_values, dtype=float)
        if self.unknown.size == 0:
            self.last_info = SolveInfo(0.0, 0)
            return b
        if self.opts.method == 'direct':
            if self._lu is None:
                self._lu = splu(self.A_uu)
            u = self._lu.solve(b)
            iterations = 1
            residual = _backward_error(self.A_uu, u, b)
            if residual > self.opts.tol:
                raise NoConvergence(iterations, residual, what='sparse LU')
        else:
            u, iterations, residual = _sor(self.A_uu, b, self.opts)
        self.last_info = SolveInfo(residual, iterations)
        return u


def solve_linear(op: SparseOperator, rhs: Field3, dirichlet: Tuple[np.ndarray, np.ndarray],
                 opts: SolverOptions) -> Field3:
    """
    Solve Q u = rhs on the region nodes outside the Dirichlet mask

    Args:
        op: Assembled generator
        rhs: Right-hand side on the region (only non-Dirichlet nodes are read)
        dirichlet: (mask, values) arrays shaped like rhs.values
        opts: Solver options

    Returns:
        Field3 on rhs.region; Dirichlet nodes carry the prescribed values
    """
    mask = np.asarray(dirichlet[0], dtype=bool).ravel()
    values = np.asarray(dirichlet[1], dtype=float).ravel()
    if not mask.any():
        raise ValueError("Dirichlet mask is empty; the generator system is singular")
    nodes = op.grid.node_indices(rhs.region)
    system = DirichletSystem(op, nodes[~mask], nodes[mask], opts)
    out = values.copy()
    out[~mask] = system.solve(rhs.flat()[~mask], values[mask])
    return Field3(op.grid, rhs.region, out.reshape(rhs.values.shape))


def trace(field: Field3, selector: Union[Level, Face]) -> Union[SurfaceField, FaceField]:
    """Exact nodal restriction to a cycle surface (both sheets) or a plastic face"""
    grid = field.grid
    if isinstance(selector, Face):
        k = grid.zs.size - 1 if selector is Face.PLUS else 0
        return FaceField(selector, grid.xs, field.ys, field.values[:, :, k].copy())

    js = grid.region_js(field.region)
    level = grid.level_value(selector)
    sheets = []
    for y in (level, -level):
        pos = np.flatnonzero(js == grid.j_of(y))
        if pos.size == 0:
            raise ValueError(f"region {field.region.value} has no sheet at y = {y}")
        sheets.append(field.values[:, pos[0], :].copy())
    return SurfaceField(selector, grid.xs, grid.zs, sheets[0], sheets[1])


def embed(surface: SurfaceField, grid: Grid3, region: Region, fill: float = 0.0) -> Field3:
    """Field on region equal to the surface data on its sheets and fill elsewhere"""
    field = Field3(grid, region, np.full((grid.xs.size, grid.region_js(region).size, grid.zs.size), fill))
    js = grid.region_js(region)
    level = grid.level_value(surface.level)
    for y, sheet in ((level, surface.upper), (-level, surface.lower)):
        pos = np.flatnonzero(js == grid.j_of(y))
        if pos.size:
            field.values[:, pos[0], :] = sheet
    return field


def main():
    """Example usage"""
    p = ModelParams(alpha=1.0, beta=0.2, c0=1.0, k=1.0, Y=1.0, L=1.0)
    c = CycleLevels(ybar=0.5, ybar1=1.0)
    grid = build_grid(p, c, nx=5, ny_per_band=4, nz=9, y_max=4.0)
    op = assemble_generator(grid, p, SolverOptions())
    print(f"grid {grid.shape}, operator nnz {op.matrix.nnz}")
    print(f"max |row sum|: {np.max(np.abs(np.asarray(op.matrix.sum(axis=1)))):.2e}")


if __name__ == "__main__":
    main()
