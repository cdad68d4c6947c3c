"""
Plastokh - Main Orchestration Script
Runs one subcommand pipeline from a configuration file and writes fields, measures and the run report
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from cli_io import FLOAT_FORMAT, RunConfig, export_field, export_measure, load_config, render_config, with_overrides
from dirichlet_solvers import (solve_exterior, solve_exterior_nonhom, solve_interior, solve_interior_nonhom)
from ergodic import (BoundaryMeasure, CycleContext, apply_P, apply_T, boundary_invariant_measure, centered,
                     nu_from_density, nu_functional, solve_complete_problem, solve_stationary_density)
from errors import ExportError, NotSolvable, PlastokhError
from grid_fd import Field3, Level, Region, SurfaceField
from model_core import State, source_basket
from oracle_suite import OracleSuite
from report_generator import RunReport
from svi_sim import cycle_ensemble, simulate_path

logger = logging.getLogger(__name__)

COMMANDS = ('simulate', 'solve-interior', 'solve-exterior', 'solve-interior-src', 'solve-exterior-src',
            'apply-p', 'apply-t', 'gamma-star', 'nu', 'fokker-planck', 'complete', 'validate', 'oracle-suite')

# stage outcome: (residual, iterations, details, console lines)
StageResult = Tuple[Optional[float], Optional[int], Dict[str, Any], List[str]]


def setup_logging(directory: Path, verbose: bool = False) -> logging.Handler:
    """run.log in the output directory; console only shows warnings unless verbose"""
    directory.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    handler = logging.FileHandler(directory / 'run.log', mode='w', encoding='utf-8')
    handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s'))
    root.addHandler(handler)
    return handler


class PlastokhOrchestrator:
    """Builds the stage list of a subcommand and runs it with progress output"""

    def __init__(self, config: RunConfig, command: str):
        if command not in COMMANDS:
            raise ValueError(f"unknown command {command!r}")
        self.config = config
        self.command = command
        self.out = Path(config.outputs.directory)
        self.report = RunReport(command, render_config(config), config.mc.seed)
        self.report.warnings.extend(config.warnings())
        self.p = config.params()
        self.c = config.levels()
        self.opts = config.solver_options()
        self.mc = config.mc_options()
        self.ctx: Optional[CycleContext] = None
        self.gamma: Optional[BoundaryMeasure] = None
        self.suite: Optional[OracleSuite] = None

    # -- helpers --------------------------------------------------------------

    def _export(self, obj, name: str) -> str:
        if self.config.outputs.fields:
            export_field(obj, self.out / name)
            self.report.outputs.append(name)
        return name

    def _source(self) -> Callable:
        return self.config.source_function()

    def _suite(self) -> OracleSuite:
        if self.suite is None:
            self.suite = OracleSuite(self.ctx, self.report, self._source(), self.config.boundary_function(),
                                     self.mc, seed=self.config.mc.seed)
            self.suite._gamma = self.gamma
        return self.suite

    # -- stages -----------------------------------------------------------------

    def stage_grid(self) -> StageResult:
        grid = self.config.build_grid()
        self.ctx = CycleContext(grid, self.p, self.c, self.opts, self.config.ergodic_options())
        details = {'shape': list(grid.shape), 'nodes': grid.n_nodes, 'h_y': grid.h_y,
                   'surface_nodes': self.ctx.n_surface, 'y_closure': self.opts.y_closure}
        return None, None, details, [f"Grid {grid.shape} ({grid.n_nodes:,} nodes, finest h_y = {grid.h_y:.4g})"]

    def stage_simulate(self) -> StageResult:
        s0 = State(0.0, 0.0, 0.0)
        rows = []
        stride = max(1, int(round(0.1 / self.mc.dt)))
        count = [0]

        def observe(s: State):
            count[0] += 1
            if count[0] % stride == 0:
                rows.append((s.t, s.x, s.y, s.z))

        final = simulate_path(s0, self.p, self.mc, observe)
        frame = pd.DataFrame(rows, columns=['t', 'x', 'y', 'z'])
        self._write_frame(frame, 'path.csv')

        start = State(0.0, self.c.ybar1, 0.0)
        ens = cycle_ensemble(start, self._source(), self.p, self.c, self.mc)
        cycles = pd.DataFrame({'tau_bar': ens.tau_bar, 'tau_bar1': ens.tau_bar1, 'integral': ens.integral,
                               'x_out': ens.outer[:, 0], 'y_out': ens.outer[:, 1], 'z_out': ens.outer[:, 2]})
        self._write_frame(cycles, 'cycles.csv')
        mean_cycle = float(ens.tau_bar1.mean())
        details = {'final_state': list(final.as_tuple()), 'path_rows': len(frame), 'cycles': int(ens.tau_bar1.size),
                   'mean_cycle_duration': mean_cycle,
                   'stderr_cycle_duration': float(ens.tau_bar1.std(ddof=1) / np.sqrt(ens.tau_bar1.size))}
        return None, None, details, [f"Path of {len(frame)} samples", f"Mean cycle duration {mean_cycle:.4f}"]

    def _write_frame(self, frame: pd.DataFrame, name: str):
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            frame.to_csv(self.out / name, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
        except OSError as e:
            raise ExportError(f"cannot write {self.out / name}: {e}")
        self.report.outputs.append(name)

    def stage_interior(self) -> StageResult:
        ctx = self.ctx
        phi = SurfaceField.from_function(ctx.grid, Level.GAMMA1, self.config.boundary_function())
        sol = solve_interior(phi, ctx.grid, self.p, self.c, self.opts, problems=ctx.problems)
        self._export(sol.eta, 'eta.csv')
        self._export(sol.beta_plus, 'eta_face_plus.csv')
        self._export(sol.beta_minus, 'eta_face_minus.csv')
        details = {'max_abs': sol.eta.max_abs(), 'data_max_abs': phi.max_abs(),
                   'corner_nodes': sol.corner_nodes.tolist()}
        return sol.residual, sol.iterations, details, [f"max|eta| = {sol.eta.max_abs():.6g} (data {phi.max_abs():.6g})"]

    def stage_exterior(self) -> StageResult:
        ctx = self.ctx
        h = SurfaceField.from_function(ctx.grid, Level.GAMMA, self.config.boundary_function())
        sol = solve_exterior(h, ctx.grid, self.p, self.c, self.opts, problems=ctx.problems)
        self._export(sol.zeta, 'zeta.csv')
        self._export(sol.zeta_plus, 'zeta_face_plus.csv')
        self._export(sol.zeta_minus, 'zeta_face_minus.csv')
        details = {'max_abs': sol.zeta.max_abs(), 'data_max_abs': h.max_abs(), 'method': sol.method}
        return sol.residual, sol.iterations, details, [f"max|zeta| = {sol.zeta.max_abs():.6g} ({sol.method})"]

    def _source_field(self) -> Field3:
        return Field3.from_function(self.ctx.grid, Region.FULL, self._source())

    def stage_interior_src(self) -> StageResult:
        ctx = self.ctx
        sol = solve_interior_nonhom(self._source_field(), ctx.grid, self.p, self.c, self.opts, problems=ctx.problems)
        self._export(sol.eta, 'chi.csv')
        details = {'max_abs': sol.eta.max_abs(), 'gauge': sol.gauge.to_dict(), 'gauge_bound': sol.gauge.bound}
        return sol.residual, sol.iterations, details, [
            f"max|chi| = {sol.eta.max_abs():.6g} <= gauge bound {sol.gauge.bound:.6g}"]

    def stage_exterior_src(self) -> StageResult:
        ctx = self.ctx
        sol = solve_exterior_nonhom(self._source_field(), ctx.grid, self.p, self.c, self.opts, problems=ctx.problems)
        self._export(sol.zeta, 'xi.csv')
        details = {'max_abs': sol.zeta.max_abs(), 'gauge': sol.gauge.to_dict()}
        lines = [f"max|xi| = {sol.zeta.max_abs():.6g}"]
        if not sol.gauge.hypothesis_holds:
            self.report.warnings.append("exterior gauge hypothesis ybar > 2(kY + beta L)/c0 fails")
            lines.append("gauge hypothesis fails; bound not certified")
        return sol.residual, sol.iterations, details, lines

    def stage_apply_p(self) -> StageResult:
        phi = SurfaceField.from_function(self.ctx.grid, Level.GAMMA1, self.config.boundary_function())
        out = apply_P(phi, self.ctx)
        self._export(out, 'P_phi.csv')
        details = {'max_abs': out.max_abs(), 'data_max_abs': phi.max_abs()}
        return None, None, details, [f"|P phi| = {out.max_abs():.6g} <= |phi| = {phi.max_abs():.6g}"]

    def stage_apply_t(self) -> StageResult:
        out = apply_T(self._source_field(), self.ctx)
        self._export(out, 'T_f.csv')
        return None, None, {'max_abs': out.max_abs()}, [f"|T f| = {out.max_abs():.6g}"]

    def stage_gamma_star(self) -> StageResult:
        self.gamma, diag = boundary_invariant_measure(self.ctx, 'matrix')
        self._export(self.gamma, 'gamma_star.csv')
        return diag.fixed_point_residual, diag.power_iterations, diag.to_dict(), [
            f"gamma* mass {self.gamma.mass():.12f}",
            f"rho = {diag.rho_estimate:.4f}, K = {diag.K_estimate:.4g}, R^2 = {diag.r_squared:.4f}"]

    def stage_nu(self) -> StageResult:
        values = {name: nu_functional(f, self.ctx, self.gamma)
                  for name, f in source_basket(self.p, self.c).items()}
        frame = pd.DataFrame({'name': list(values), 'nu': list(values.values())})
        self._write_frame(frame, 'nu.csv')
        chosen = self.config.source.name
        return None, None, {'nu': values}, [f"nu({chosen}) = {values[chosen]:.10g}", f"{len(values)} functionals"]

    def stage_fokker_planck(self) -> StageResult:
        measure = solve_stationary_density(self.ctx)
        if self.config.outputs.fields:
            for path in export_measure(measure, self.out):
                self.report.outputs.append(path.name)
        masses = measure.component_masses()
        f = self._source()
        details = {'total_mass': measure.total_mass(), 'masses': masses, 'clipped': measure.clipped,
                   'nu_source': nu_from_density(f, measure)}
        return None, None, details, [
            f"Total mass {measure.total_mass():.12f}",
            "Masses: " + ", ".join(f"{k} {v:.4f}" for k, v in masses.items())]

    def stage_complete(self) -> StageResult:
        f = self._source()
        if self.config.source.center:
            f = centered(f, nu_functional(f, self.ctx, self.gamma))
        u, info = solve_complete_problem(f, self.ctx, self.gamma)
        self._export(u, 'u.csv')
        return info.residual, info.terms, info.to_dict(), [
            f"nu(f) = {info.nu_f:.3e} (tolerance {info.solvability_tol:.1e})",
            f"Series terms {info.terms}, glue {info.glue:.2e}, residual {info.residual:.2e}"]

    def stage_validate(self) -> StageResult:
        suite = self._suite()
        before = len(self.report.checks)
        suite.run_validate()
        checks = self.report.checks[before:]
        passed = sum(c.passed for c in checks)
        return None, None, {'checks': len(checks), 'passed': passed}, [f"{passed}/{len(checks)} invariant checks passed"]

    def stage_oracles(self) -> StageResult:
        suite = self._suite()
        before = len(self.report.checks)
        suite.run_oracles()
        checks = self.report.checks[before:]
        passed = sum(c.passed for c in checks)
        return None, None, {'checks': len(checks), 'passed': passed}, [f"{passed}/{len(checks)} oracle checks passed"]

    def pipeline(self) -> List[Tuple[str, Callable[[], StageResult]]]:
        grid = [('grid', self.stage_grid)]
        gamma = [('gamma-star', self.stage_gamma_star)]
        return {
            'simulate': [('simulate', self.stage_simulate)],
            'solve-interior': grid + [('solve-interior', self.stage_interior)],
            'solve-exterior': grid + [('solve-exterior', self.stage_exterior)],
            'solve-interior-src': grid + [('solve-interior-src', self.stage_interior_src)],
            'solve-exterior-src': grid + [('solve-exterior-src', self.stage_exterior_src)],
            'apply-p': grid + [('apply-p', self.stage_apply_p)],
            'apply-t': grid + [('apply-t', self.stage_apply_t)],
            'gamma-star': grid + gamma,
            'nu': grid + gamma + [('nu', self.stage_nu)],
            'fokker-planck': grid + [('fokker-planck', self.stage_fokker_planck)],
            'complete': grid + gamma + [('complete', self.stage_complete)],
            'validate': grid + gamma + [('validate', self.stage_validate)],
            'oracle-suite': grid + gamma + [('validate', self.stage_validate), ('oracle-suite', self.stage_oracles)],
        }[self.command]

    def run(self) -> RunReport:
        """Execute the pipeline; domain errors are recorded with their stage and re-raised"""
        stages = self.pipeline()
        print("=" * 80)
        print(f"PLASTOKH {self.command.upper()}")
        print("=" * 80)
        for warning in self.report.warnings:
            print(f"  ⚠ {warning}")

        for i, (name, fn) in enumerate(stages, 1):
            print(f"\n[{i}/{len(stages)}] {name}...")
            started = time.perf_counter()
            try:
                residual, iterations, details, lines = fn()
            except Exception as e:
                if isinstance(e, PlastokhError):
                    e.stage = e.stage or name
                details = {'nu_f': e.nu_f} if isinstance(e, NotSolvable) else {}
                self.report.add_stage(name, 'failed', details=details, seconds=time.perf_counter() - started)
                print(f"  ✗ {type(e).__name__}: {e}")
                raise
            seconds = time.perf_counter() - started
            self.report.add_stage(name, 'ok', residual, iterations, details, seconds)
            logger.info("stage %s finished in %.3f s", name, seconds)
            for line in lines:
                print(f"  ✓ {line}")
        return self.report


def run_command(cmd: str, cfg: RunConfig, verbose: bool = False) -> RunReport:
    """
    Run one subcommand and write report.json, timings.json, report.md and run.log

    The exit code lands in report.exit_code: 0 on success, 2 when the
    complete problem is not solvable, 1 for any other error.
    """
    orchestrator = PlastokhOrchestrator(cfg, cmd)
    handler = setup_logging(orchestrator.out, verbose)
    report = orchestrator.report
    try:
        orchestrator.run()
    except PlastokhError as e:
        report.error = e.to_dict()
        if isinstance(e, NotSolvable):
            report.error['nu_f'] = e.nu_f
        report.exit_code = e.exit_code
        logger.error("%s in stage %s: %s", type(e).__name__, e.stage, e.message)
    except Exception as e:
        failed = [s.name for s in report.stages if s.status == 'failed']
        report.error = {'error': type(e).__name__, 'message': str(e), 'stage': failed[0] if failed else None,
                        'exit_code': 1}
        report.exit_code = 1
        logger.exception("unexpected failure")
    finally:
        try:
            report.write(orchestrator.out, cfg.outputs.markdown)
        except ExportError as e:
            logger.error(e.message)
            report.exit_code = report.exit_code or e.exit_code
        logging.getLogger().removeHandler(handler)
        handler.close()

    print("\n📁 Output Files:")
    for name in sorted(report.outputs) + ['report.json', 'timings.json', 'run.log']:
        print(f"  • {orchestrator.out / name}")
    status = "✅ Done" if report.exit_code == 0 else f"✗ Exit code {report.exit_code}"
    print(f"\n{status}")
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='plastokh',
                                     description='Ergodic analysis of the randomly excited elasto-plastic oscillator')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', type=Path, help='sectioned key = value configuration file')
    parser.add_argument('--out', help='output directory (overrides [outputs] directory)')
    parser.add_argument('--seed', type=int, help='Monte Carlo seed (overrides [mc] seed)')
    parser.add_argument('--verbose', action='store_true', help='debug-level run.log')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config) if args.config else RunConfig()
        config = with_overrides(config, seed=args.seed, out=args.out)
    except PlastokhError as e:
        print(f"✗ {type(e).__name__}: {e.message}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"✗ invalid override: {e}", file=sys.stderr)
        return 1
    return run_command(args.command, config, args.verbose).exit_code


if __name__ == "__main__":
    sys.exit(main())
