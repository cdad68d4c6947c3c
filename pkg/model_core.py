"""
Plastokh - Model Core
Parameters, states, phases and pointwise evaluation of the generator
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Tuple

import numpy as np


@dataclass(frozen=True)
class ModelParams:
    """Physical constants of the oscillator and its filtered excitation

    alpha: OU relaxation rate, beta: excitation coupling, c0: viscous damping,
    k: stiffness, Y: plastic yield bound on z, L: reflection bound on x.
    """
    alpha: float = 1.0
    beta: float = 0.0
    c0: float = 1.0
    k: float = 1.0
    Y: float = 1.0
    L: float = 1.0

    @property
    def one_d(self) -> bool:
        """beta = 0 decouples the excitation from the oscillator"""
        return self.beta == 0.0

    def to_dict(self) -> Dict[str, float]:
        return {'alpha': self.alpha, 'beta': self.beta, 'c0': self.c0,
                'k': self.k, 'Y': self.Y, 'L': self.L}


@dataclass(frozen=True)
class CycleLevels:
    """Inner (ybar) and outer (ybar1) velocity levels of a cycle"""
    ybar: float = 0.5
    ybar1: float = 1.0

    def to_dict(self) -> Dict[str, float]:
        return {'ybar': self.ybar, 'ybar1': self.ybar1}


class Phase(str, Enum):
    ELASTIC = 'elastic'
    PLASTIC_PLUS = 'plastic_plus'
    PLASTIC_MINUS = 'plastic_minus'


# integer codes used by the vectorized helpers
PHASE_CODES = {Phase.ELASTIC: 0, Phase.PLASTIC_PLUS: 1, Phase.PLASTIC_MINUS: 2}


@dataclass(frozen=True)
class State:
    x: float
    y: float
    z: float
    t: float = 0.0

    def admissible(self, p: ModelParams) -> bool:
        return abs(self.x) <= p.L and abs(self.z) <= p.Y and self.t >= 0.0

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.x, self.y, self.z)


@dataclass(frozen=True)
class TestFunction:
    """Smooth function of (x, y, z) with caller-supplied analytic derivatives

    All callables take numpy arrays (or scalars) x, y, z and broadcast.
    grad returns (fx, fy, fz); hess_diag returns (fxx, fyy).
    """
    __test__ = False

    value: Callable
    grad: Callable
    hess_diag: Callable
    name: str = 'test_function'

    def __call__(self, x, y, z):
        return self.value(x, y, z)


@dataclass
class ValidationReport:
    violations: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict[str, List[str]]:
        return {'violations': list(self.violations), 'warnings': list(self.warnings)}


def validate_params(p: ModelParams, c: CycleLevels) -> ValidationReport:
    """
    Collect constraint violations and warnings for a parameter set

    Args:
        p: Model parameters
        c: Cycle levels

    Returns:
        ValidationReport; violations empty iff every constraint holds
    """
    report = ValidationReport()

    for name in ('alpha', 'c0', 'k', 'Y', 'L'):
        value = getattr(p, name)
        if not np.isfinite(value) or value <= 0:
            report.violations.append(f"{name} > 0 fails ({name} = {value})")
    if not np.isfinite(p.beta) or p.beta < 0:
        report.violations.append(f"beta >= 0 fails (beta = {p.beta})")

    for name in ('ybar', 'ybar1'):
        value = getattr(c, name)
        if not np.isfinite(value) or value <= 0:
            report.violations.append(f"{name} > 0 fails ({name} = {value})")
    if not c.ybar < c.ybar1:
        report.violations.append("ybar < ybar1 fails")

    if p.beta > 0 and p.L > 0 and 2.0 * c.ybar1 >= 1.0 / (2.0 * p.beta * p.L):
        report.warnings.append(
            f"2*ybar1 = {2.0 * c.ybar1:g} >= 1/(2*beta*L) = {1.0 / (2.0 * p.beta * p.L):g}; "
            "interior barrier bound loses its beta-independent form"
        )

    return report


def phase_codes(y, z, p: ModelParams) -> np.ndarray:
    """Vectorized phase classification: 0 elastic, 1 plastic plus, 2 plastic minus"""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    codes = np.zeros(np.broadcast(y, z).shape, dtype=np.int8)
    codes[(z >= p.Y) & (y > 0)] = 1
    codes[(z <= -p.Y) & (y < 0)] = 2
    return codes


def phase_of(s: State, p: ModelParams) -> Phase:
    # y = 0 on a face is elastic
    if s.z >= p.Y and s.y > 0:
        return Phase.PLASTIC_PLUS
    if s.z <= -p.Y and s.y < 0:
        return Phase.PLASTIC_MINUS
    return Phase.ELASTIC


def drift(s: State, p: ModelParams) -> Tuple[float, float, float]:
    dx = -p.alpha * s.x
    dy = -(p.beta * s.x + p.c0 * s.y + p.k * s.z)
    dz = s.y if phase_of(s, p) is Phase.ELASTIC else 0.0
    return (dx, dy, dz)


def generator_apply_nodes(f: TestFunction, x, y, z, p: ModelParams) -> np.ndarray:
    """Apply A, B+ or B- (chosen by phase) to f at arrays of points"""
    x, y, z = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(z, float))
    fx, fy, fz = f.grad(x, y, z)
    fxx, fyy = f.hess_diag(x, y, z)

    out = 0.5 * (fxx + fyy) - p.alpha * x * fx - (p.beta * x + p.c0 * y + p.k * z) * fy
    elastic = phase_codes(y, z, p) == 0
    return out + np.where(elastic, y * fz, 0.0)


def generator_apply(f: TestFunction, s: State, p: ModelParams) -> float:
    return float(generator_apply_nodes(f, s.x, s.y, s.z, p))


def check_test_function(f: TestFunction, points: np.ndarray, step: float = 1e-5) -> float:
    """
    Compare supplied derivatives with central differences

    Returns:
        Largest relative error over all points and derivative components
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    value = f.value(x, y, z)
    analytic = list(f.grad(x, y, z)) + list(f.hess_diag(x, y, z))

    numeric = []
    for axis in range(3):
        shift = np.zeros(3)
        shift[axis] = step
        up = f.value(*(points + shift).T)
        down = f.value(*(points - shift).T)
        numeric.append((up - down) / (2 * step))
    for axis in range(2):
        shift = np.zeros(3)
        shift[axis] = step ** 0.5 * 1e-1
        h = shift[axis]
        up = f.value(*(points + shift).T)
        down = f.value(*(points - shift).T)
        numeric.append((up - 2 * value + down) / h ** 2)

    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.broadcast_to(np.asarray(a, dtype=float), x.shape)
        scale = np.maximum(np.abs(a), 1.0)
        worst = max(worst, float(np.max(np.abs(a - n) / scale)))
    return worst


def constant_function(value: float = 1.0) -> TestFunction:
    zero = lambda x, y, z: np.zeros(np.broadcast(x, y, z).shape)
    return TestFunction(
        value=lambda x, y, z: np.full(np.broadcast(x, y, z).shape, float(value)),
        grad=lambda x, y, z: (zero(x, y, z), zero(x, y, z), zero(x, y, z)),
        hess_diag=lambda x, y, z: (zero(x, y, z), zero(x, y, z)),
        name=f"constant_{value:g}",
    )


def compact_bump(p: ModelParams, y_center: float = 0.0, y_radius: float = 2.0,
                 x_mode: int = 0, z_weight: float = 0.0, name: str = 'bump') -> TestFunction:
    """
    C3 bump in y with compact support [y_center - r, y_center + r]

    The x-factor cos(pi*m*x/L) has zero slope at x = +-L; the z-factor is
    1 + z_weight*z. f = (1 - s^2)^4 * cos(pi m x / L) * (1 + w z), s = (y - yc)/r.
    """
    w = np.pi * x_mode / p.L

    def _parts(x, y, z):
        s = (np.asarray(y, float) - y_center) / y_radius
        inside = np.abs(s) < 1.0
        q = np.where(inside, 1.0 - s * s, 0.0)
        g = q ** 4
        gy = np.where(inside, -8.0 * s * q ** 3 / y_radius, 0.0)
        gyy = np.where(inside, (-8.0 * q ** 3 + 48.0 * s * s * q ** 2) / y_radius ** 2, 0.0)
        cx = np.cos(w * np.asarray(x, float))
        sx = np.sin(w * np.asarray(x, float))
        hz = 1.0 + z_weight * np.asarray(z, float)
        return g, gy, gyy, cx, sx, hz

    def value(x, y, z):
        g, _, _, cx, _, hz = _parts(x, y, z)
        return g * cx * hz

    def grad(x, y, z):
        g, gy, _, cx, sx, hz = _parts(x, y, z)
        return (-w * g * sx * hz, gy * cx * hz, g * cx * z_weight)

    def hess(x, y, z):
        g, _, gyy, cx, _, hz = _parts(x, y, z)
        return (-w * w * g * cx * hz, gyy * cx * hz)

    return TestFunction(value=value, grad=grad, hess_diag=hess, name=name)


def quadratic_function(p: ModelParams) -> TestFunction:
    """f = x^2/(2L^2) + y^2/4 + yz/(2Y) + z^2/(2Y^2); upwind truncation error is exactly first order"""
    a, b, cyz, d = 0.5 / p.L ** 2, 0.25, 0.5 / p.Y, 0.5 / p.Y ** 2

    def value(x, y, z):
        x, y, z = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(z, float))
        return a * x * x + b * y * y + cyz * y * z + d * z * z

    def grad(x, y, z):
        x, y, z = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(z, float))
        return (2.0 * a * x, 2.0 * b * y + cyz * z, cyz * y + 2.0 * d * z)

    def hess(x, y, z):
        shape = np.broadcast(x, y, z).shape
        return (np.full(shape, 2.0 * a), np.full(shape, 2.0 * b))

    return TestFunction(value=value, grad=grad, hess_diag=hess, name='quadratic')


def stationarity_probes(p: ModelParams, c: CycleLevels) -> List[TestFunction]:
    """Five smooth test functions supported well inside the truncated y-range"""
    r = 2.0 * c.ybar1
    return [
        compact_bump(p, 0.0, r, 0, 0.0, name='bump_centered'),
        compact_bump(p, 0.0, r, 1, 0.0, name='bump_cos_x'),
        compact_bump(p, 0.0, r, 0, 1.0 / p.Y, name='bump_tilt_z'),
        compact_bump(p, 0.5 * c.ybar1, r, 0, 0.0, name='bump_shifted_up'),
        compact_bump(p, -0.5 * c.ybar1, r, 1, -0.5 / p.Y, name='bump_shifted_down'),
    ]


def source_basket(p: ModelParams, c: CycleLevels) -> Dict[str, Callable]:
    """Ten bounded sources f(x, y, z) used for the three-route nu comparison"""
    return {
        'one': lambda x, y, z: np.ones(np.broadcast(x, y, z).shape),
        'z_scaled': lambda x, y, z: np.broadcast_to(np.asarray(z, float) / p.Y, np.broadcast(x, y, z).shape).copy(),
        'z_squared': lambda x, y, z: np.broadcast_to((np.asarray(z, float) / p.Y) ** 2, np.broadcast(x, y, z).shape).copy(),
        'tanh_y': lambda x, y, z: np.broadcast_to(np.tanh(np.asarray(y, float)), np.broadcast(x, y, z).shape).copy(),
        'y2_saturated': lambda x, y, z: np.broadcast_to(np.asarray(y, float) ** 2 / (1.0 + np.asarray(y, float) ** 2),
                                                        np.broadcast(x, y, z).shape).copy(),
        'cos_x': lambda x, y, z: np.broadcast_to(np.cos(np.pi * np.asarray(x, float) / p.L), np.broadcast(x, y, z).shape).copy(),
        'xz': lambda x, y, z: np.asarray(x, float) * np.asarray(z, float) / (p.L * p.Y) + 0.0 * np.asarray(y, float),
        'gauss_y': lambda x, y, z: np.broadcast_to(np.exp(-np.asarray(y, float) ** 2), np.broadcast(x, y, z).shape).copy(),
        'lorentz_yz': lambda x, y, z: 1.0 / (1.0 + np.asarray(y, float) ** 2 + np.asarray(z, float) ** 2) + 0.0 * np.asarray(x, float),
        'sin_z_cos_y': lambda x, y, z: np.sin(np.asarray(z, float)) * np.cos(np.asarray(y, float)) + 0.0 * np.asarray(x, float),
    }

def boundary_basket(p: ModelParams, c: CycleLevels) -> Dict[str, Callable]:
    """Five boundary data sets phi(x, y, z) for the hitting-time checks"""
    def shaped(x, y, z, values):
        return np.broadcast_to(values, np.broadcast(x, y, z).shape).astype(float)

    return {
        'z_scaled': lambda x, y, z: shaped(x, y, z, np.asarray(z, float) / p.Y),
        'cos_x': lambda x, y, z: shaped(x, y, z, np.cos(np.pi * np.asarray(x, float) / p.L)),
        'upper_sheet': lambda x, y, z: shaped(x, y, z, np.asarray(y, float) > 0),
        'xz_tilt': lambda x, y, z: shaped(x, y, z, 0.5 + 0.5 * np.asarray(x, float) * np.asarray(z, float) / (p.L * p.Y)),
        'sheet_z_mix': lambda x, y, z: shaped(x, y, z, np.sign(np.asarray(y, float)) * (1.0 + np.asarray(z, float) / p.Y)),
    }



def main():
    """Example usage"""
    p = ModelParams(alpha=1.0, beta=0.2, c0=1.0, k=1.0, Y=1.0, L=1.0)
    c = CycleLevels(ybar=0.5, ybar1=1.0)
    report = validate_params(p, c)
    print(f"valid: {report.ok}, warnings: {report.warnings}")
    s = State(0.3, 1.2, 1.0)
    print(f"phase: {phase_of(s, p).value}, drift: {drift(s, p)}")


if __name__ == "__main__":
    main()
