"""
Plastokh - Configuration and Artifacts
Sectioned run configuration (parse / render / overrides) and bit-stable CSV export of fields and measures
"""

import configparser
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import ConfigParseError, ConfigValidationError, ExportError
from ergodic import ErgodicOptions
from grid_fd import FaceField, Field3, Grid3, SolverOptions, SurfaceField, build_grid
from model_core import CycleLevels, ModelParams, source_basket, validate_params
from svi_sim import McOptions

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'

SOURCE_NAMES = ('one', 'z_scaled', 'z_squared', 'tanh_y', 'y2_saturated', 'cos_x', 'xz', 'gauss_y',
                'lorentz_yz', 'sin_z_cos_y')


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')


class ModelSection(_Section):
    alpha: float = 1.0
    beta: float = 0.2
    c0: float = 1.0
    k: float = 1.0
    Y: float = 1.0
    L: float = 1.0

    def params(self) -> ModelParams:
        return ModelParams(**self.model_dump())


class CycleSection(_Section):
    ybar: float = 0.5
    ybar1: float = 1.0

    def levels(self) -> CycleLevels:
        return CycleLevels(**self.model_dump())


class GridSection(_Section):
    nx: int = Field(default=7, ge=3)
    ny_per_band: int = Field(default=4, ge=1)
    nz: int = Field(default=9, ge=3)
    y_max: float = Field(default=6.5, gt=0)
    y_closure: Literal['dirichlet', 'neumann'] = 'dirichlet'


class SolverSection(_Section):
    tol: float = Field(default=1e-10, gt=0)
    max_iter: int = Field(default=20000, ge=1)
    relaxation: float = Field(default=1.0, gt=0, lt=2)
    epsilon_z: float = Field(default=0.0, ge=0)
    method: Literal['direct', 'sor'] = 'direct'
    exterior_method: Literal['march', 'coupled'] = 'march'
    truncation_value: float = 0.0
    gamma_tol: float = Field(default=1e-13, gt=0)
    series_tol: Optional[float] = Field(default=None, gt=0)
    max_terms: int = Field(default=2000, ge=1)
    solvability_tol: Optional[float] = Field(default=None, gt=0)


class McSection(_Section):
    dt: float = Field(default=0.01, gt=0)
    n_paths: int = Field(default=2000, ge=1)
    horizon: float = Field(default=200.0, ge=0)
    burn_in: float = Field(default=20.0, ge=0)
    seed: int = Field(default=20111001, ge=0, le=2 ** 64 - 1)
    batch_size: int = Field(default=4096, ge=1)
    chain_cycles: int = Field(default=60, ge=2)
    chain_burn_cycles: int = Field(default=10, ge=0)


class SourceSection(_Section):
    name: Literal[SOURCE_NAMES] = 'tanh_y'
    center: bool = False


class BoundarySection(_Section):
    """Boundary data for the homogeneous solves and apply-p"""
    kind: Literal['constant', 'linear_z', 'cos_x', 'upper_indicator'] = 'linear_z'
    value: float = 1.0


class OutputsSection(_Section):
    directory: str = 'runs/desk'
    fields: bool = True
    markdown: bool = True


SECTIONS = {
    'model': ModelSection,
    'cycle': CycleSection,
    'grid': GridSection,
    'solver': SolverSection,
    'mc': McSection,
    'source': SourceSection,
    'boundary': BoundarySection,
    'outputs': OutputsSection,
}


class RunConfig(_Section):
    model: ModelSection = ModelSection()
    cycle: CycleSection = CycleSection()
    grid: GridSection = GridSection()
    solver: SolverSection = SolverSection()
    mc: McSection = McSection()
    source: SourceSection = SourceSection()
    boundary: BoundarySection = BoundarySection()
    outputs: OutputsSection = OutputsSection()

    def params(self) -> ModelParams:
        return self.model.params()

    def levels(self) -> CycleLevels:
        return self.cycle.levels()

    def solver_options(self) -> SolverOptions:
        s = self.solver
        return SolverOptions(tol=s.tol, max_iter=s.max_iter, relaxation=s.relaxation, epsilon_z=s.epsilon_z,
                             method=s.method, exterior_method=s.exterior_method, y_closure=self.grid.y_closure,
                             truncation_value=s.truncation_value)

    def ergodic_options(self) -> ErgodicOptions:
        s = self.solver
        return ErgodicOptions(gamma_tol=s.gamma_tol, series_tol=s.series_tol, max_terms=s.max_terms,
                              solvability_tol=s.solvability_tol, mc_cycles=self.mc.chain_cycles,
                              mc_burn_cycles=self.mc.chain_burn_cycles)

    def mc_options(self) -> McOptions:
        m = self.mc
        return McOptions(dt=m.dt, n_paths=m.n_paths, horizon=m.horizon, burn_in=m.burn_in, seed=m.seed,
                         batch_size=m.batch_size)

    def build_grid(self) -> Grid3:
        g = self.grid
        return build_grid(self.params(), self.levels(), g.nx, g.ny_per_band, g.nz, g.y_max)

    def source_function(self) -> Callable:
        return source_basket(self.params(), self.levels())[self.source.name]

    def boundary_function(self) -> Callable:
        b = self.boundary
        p = self.params()
        if b.kind == 'constant':
            return lambda x, y, z: np.full(np.broadcast(x, y, z).shape, b.value)
        if b.kind == 'linear_z':
            return lambda x, y, z: b.value * np.broadcast_to(z, np.broadcast(x, y, z).shape) / p.Y
        if b.kind == 'cos_x':
            return lambda x, y, z: b.value * np.cos(np.pi * np.broadcast_to(x, np.broadcast(x, y, z).shape) / p.L)
        return lambda x, y, z: b.value * (np.broadcast_to(y, np.broadcast(x, y, z).shape) > 0)

    def warnings(self) -> List[str]:
        return validate_params(self.params(), self.levels()).warnings


def _locate(text: str, section: str, key: Optional[str] = None) -> Optional[int]:
    """1-based line of a section header, or of a key inside that section"""
    current = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith('[') and line.endswith(']'):
            current = line[1:-1].strip()
            if key is None and current == section:
                return number
            continue
        if key is not None and current == section and '=' in line:
            if line.split('=', 1)[0].strip() == key:
                return number
    return None


def _read_sections(text: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(strict=True, interpolation=None, comment_prefixes=('#', ';'),
                                       inline_comment_prefixes=('#', ';'), default_section='__defaults__')
    parser.optionxform = str
    try:
        parser.read_string(text)
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as e:
        raise ConfigParseError(e.lineno, e.message.splitlines()[0])
    except configparser.MissingSectionHeaderError as e:
        raise ConfigParseError(e.lineno, "key outside of any section")
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigParseError(line, "malformed line (expected key = value)")
    return parser


def parse_config(text: str) -> RunConfig:
    """
    Parse sectioned key = value text into a RunConfig

    Omitted keys take their defaults; unknown sections or keys, duplicates and
    unparseable literals are ConfigParseError; constraint violations
    (including validate_params) are ConfigValidationError.
    """
    parser = _read_sections(text)
    sections: Dict[str, Any] = {}
    violations: List[str] = []

    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigParseError(_locate(text, name), f"unknown section [{name}]")
        raw = dict(parser.items(name))
        try:
            sections[name] = SECTIONS[name](**raw)
        except ValidationError as e:
            for err in e.errors():
                key = str(err['loc'][0]) if err['loc'] else None
                if err['type'] == 'extra_forbidden':
                    raise ConfigParseError(_locate(text, name, key), f"unknown key '{key}' in [{name}]")
                if err['type'].endswith('_parsing') or err['type'].endswith('_type'):
                    raise ConfigParseError(_locate(text, name, key),
                                           f"cannot parse {name}.{key} = {raw.get(key)!r}")
                violations.append(f"{name}.{key}: {err['msg']}")

    if violations:
        raise ConfigValidationError(violations)

    config = RunConfig(**sections)
    report = validate_params(config.params(), config.levels())
    if not report.ok:
        raise ConfigValidationError(report.violations)
    if config.grid.y_max <= config.cycle.ybar1:
        raise ConfigValidationError([f"grid.y_max = {config.grid.y_max} must exceed ybar1 = {config.cycle.ybar1}"])
    for warning in report.warnings:
        logger.warning(warning)
    return config


def load_config(path: Union[str, Path]) -> RunConfig:
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigParseError(None, f"cannot read {path}: {e}")
    return parse_config(text)


def _literal(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(config: RunConfig) -> str:
    """Canonical text with every key spelled out (None-valued keys omitted)"""
    blocks = []
    for name in SECTIONS:
        section = getattr(config, name)
        lines = [f"[{name}]"]
        for key, value in section.model_dump().items():
            if value is not None:
                lines.append(f"{key} = {_literal(value)}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def with_overrides(config: RunConfig, seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    """Apply --seed / --out on top of a parsed config"""
    update: Dict[str, Any] = {}
    if seed is not None:
        update['mc'] = McSection(**{**config.mc.model_dump(), 'seed': seed})
    if out is not None:
        update['outputs'] = config.outputs.model_copy(update={'directory': str(out)})
    return config.model_copy(update=update) if update else config


# -- CSV artifacts -------------------------------------------------------

def _frame(obj) -> pd.DataFrame:
    if isinstance(obj, Field3):
        X, Yv, Z = obj.grid.mesh(obj.region)
        return pd.DataFrame({'x': X.ravel(), 'y': Yv.ravel(), 'z': Z.ravel(), 'value': obj.values.ravel()})
    if isinstance(obj, FaceField):
        X, Yv = np.meshgrid(obj.xs, obj.ys, indexing='ij')
        return pd.DataFrame({'x': X.ravel(), 'y': Yv.ravel(), 'value': obj.values.ravel(),
                             'face': np.full(X.size, obj.face.value)})
    if isinstance(obj, SurfaceField) or hasattr(obj, 'as_surface'):
        surface = obj if isinstance(obj, SurfaceField) else obj.as_surface()
        X, Z = np.meshgrid(surface.xs, surface.zs, indexing='ij')
        n = X.size
        return pd.DataFrame({
            'x': np.tile(X.ravel(), 2),
            'z': np.tile(Z.ravel(), 2),
            'value': surface.vector(),
            'sheet': np.repeat(['lower', 'upper'], n),
        })
    raise TypeError(f"cannot export {type(obj).__name__}")


def export_field(obj, path: Union[str, Path], fmt: str = 'csv') -> Path:
    """
    Write a volume field, face field, surface field or boundary measure as CSV

    Rows follow lexicographic node order; floats carry 17 significant digits,
    so re-reading with round-trip precision reproduces the values exactly.
    """
    if fmt != 'csv':
        raise ValueError(f"unsupported format {fmt!r}")
    path = Path(path)
    frame = _frame(obj)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    except OSError as e:
        raise ExportError(f"cannot write {path}: {e}")
    logger.debug("wrote %s (%d rows)", path, len(frame))
    return path


def export_measure(measure, directory: Union[str, Path], stem: str = 'm') -> List[Path]:
    """Elastic density and both plastic surface densities of an InvariantMeasure"""
    directory = Path(directory)
    return [
        export_field(measure.elastic, directory / f"{stem}_elastic.csv"),
        export_field(measure.plastic_plus, directory / f"{stem}_plastic_plus.csv"),
        export_field(measure.plastic_minus, directory / f"{stem}_plastic_minus.csv"),
    ]


def read_field_csv(path: Union[str, Path]) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision='round_trip')
    except OSError as e:
        raise ExportError(f"cannot read {path}: {e}")


def read_values(path: Union[str, Path]) -> np.ndarray:
    return read_field_csv(path)['value'].to_numpy(dtype=float)


def main():
    """Example usage"""
    config = parse_config("[model]\nbeta = 0.2\n")
    text = render_config(config)
    print(text)
    print("round trip:", parse_config(text) == config)


if __name__ == "__main__":
    main()
