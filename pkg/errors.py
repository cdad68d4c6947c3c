"""
Plastokh - Error Hierarchy
Domain errors raised by the solvers, simulators and the CLI surface
"""

from typing import List, Optional


class PlastokhError(Exception):
    """Base class for every domain error; carries the CLI exit code"""

    exit_code = 1

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.stage = stage

    def to_dict(self):
        return {
            'error': type(self).__name__,
            'message': self.message,
            'stage': self.stage,
            'exit_code': self.exit_code,
        }


class InvalidResolution(PlastokhError, ValueError):
    """Grid axis with fewer than three nodes"""


class InvalidTruncation(PlastokhError, ValueError):
    """Truncation level y_max not above the outer cycle level"""


class InvalidTimeStep(PlastokhError, ValueError):
    """Time step above the explicit-Euler stability guard"""


class HorizonExceeded(PlastokhError):
    """No crossing of the target level within the simulation horizon"""

    def __init__(self, level: float, horizon: float, stage: Optional[str] = None):
        super().__init__(f"no crossing of |y| = {level:g} within horizon {horizon:g}", stage)
        self.level = level
        self.horizon = horizon


class NoConvergence(PlastokhError):
    """Iterative procedure stopped above its tolerance"""

    def __init__(self, iterations: int, residual: float, what: str = "solver",
                 diagnostics: Optional[dict] = None, stage: Optional[str] = None):
        super().__init__(f"{what} did not converge: residual {residual:.3e} after {iterations} iterations", stage)
        self.iterations = iterations
        self.residual = residual
        self.diagnostics = diagnostics or {}


class NotStochastic(PlastokhError):
    """A row of the discrete transition matrix lost (or gained) mass"""

    def __init__(self, row: int, mass: float, stage: Optional[str] = None):
        super().__init__(f"row {row} of P has mass {mass:.12g}; refine the grid or raise y_max", stage)
        self.row = row
        self.mass = mass


class DegenerateDenominator(PlastokhError):
    """Expected cycle duration under the boundary measure is not positive"""

    def __init__(self, value: float, stage: Optional[str] = None):
        super().__init__(f"cycle-duration denominator is {value:.6g} (must be > 0)", stage)
        self.value = value


class NullspaceDimension(PlastokhError):
    """Forward generator has more than one stationary distribution"""

    def __init__(self, dimension: int, stage: Optional[str] = None):
        super().__init__(f"stationary nullspace has dimension {dimension}; resolution too coarse", stage)
        self.dimension = dimension


class NegativeDensity(PlastokhError):
    """Stationary density below the clipping tolerance"""

    def __init__(self, min_value: float, count: int, stage: Optional[str] = None):
        super().__init__(f"{count} density values below tolerance (min {min_value:.3e})", stage)
        self.min_value = min_value
        self.count = count


class NotSolvable(PlastokhError):
    """Complete problem has no solution since nu(f) != 0"""

    exit_code = 2

    def __init__(self, nu_f: float, tolerance: float, stage: Optional[str] = None):
        super().__init__(f"nu(f) = {nu_f:.12g} exceeds solvability tolerance {tolerance:.3e}", stage)
        self.nu_f = nu_f
        self.tolerance = tolerance


class ConfigParseError(PlastokhError):
    """Malformed configuration text"""

    def __init__(self, line: Optional[int], message: str):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}", stage='config')
        self.line = line


class ConfigValidationError(PlastokhError):
    """Configuration parsed but violates model constraints"""

    def __init__(self, violations: List[str]):
        super().__init__("invalid configuration: " + "; ".join(violations), stage='config')
        self.violations = list(violations)


class ExportError(PlastokhError):
    """Output file could not be written"""
