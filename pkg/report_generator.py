"""
Plastokh - Run Report
Collects stage records and invariant checks of a run and writes report.json, timings.json and report.md
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from errors import ExportError

VERSION = '0.3.0'


def _clean(value: Any) -> Any:
    """JSON-safe copy: non-finite floats become None, numpy scalars become Python numbers"""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, 'item') and not isinstance(value, (str, bytes)):
        try:
            value = value.item()
        except (TypeError, ValueError):
            return str(value)
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(data: Dict[str, Any], path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(_clean(data), f, indent=2, ensure_ascii=False)
            f.write('\n')
    except OSError as e:
        raise ExportError(f"cannot write {path}: {e}")
    return path


@dataclass
class StageRecord:
    name: str
    status: str
    residual: Optional[float] = None
    iterations: Optional[int] = None
    details: Dict[str, Any] = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'status': self.status, 'residual': self.residual,
                'iterations': self.iterations, 'details': self.details}


@dataclass
class CheckRecord:
    name: str
    passed: bool
    value: Optional[float]
    threshold: Optional[float]
    stage: str = ''

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'passed': bool(self.passed), 'value': self.value,
                'threshold': self.threshold, 'stage': self.stage}


class RunReport:
    """Everything a run did, in execution order"""

    def __init__(self, command: str, config_text: str, seed: int):
        self.command = command
        self.config_text = config_text
        self.seed = seed
        self.stages: List[StageRecord] = []
        self.checks: List[CheckRecord] = []
        self.warnings: List[str] = []
        self.outputs: List[str] = []
        self.error: Optional[Dict[str, Any]] = None
        self.exit_code = 0

    def add_stage(self, name: str, status: str = 'ok', residual: Optional[float] = None,
                  iterations: Optional[int] = None, details: Optional[Dict[str, Any]] = None,
                  seconds: float = 0.0) -> StageRecord:
        if any(s.name == name for s in self.stages):
            raise ValueError(f"stage {name!r} recorded twice")
        record = StageRecord(name, status, residual, iterations, details or {}, seconds)
        self.stages.append(record)
        return record

    def stage(self, name: str) -> StageRecord:
        for record in self.stages:
            if record.name == name:
                return record
        raise KeyError(name)

    def add_check(self, name: str, passed: bool, value: Optional[float] = None,
                  threshold: Optional[float] = None, stage: str = '') -> CheckRecord:
        record = CheckRecord(name, bool(passed), value, threshold, stage)
        self.checks.append(record)
        return record

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> Dict[str, Any]:
        """Deterministic content of report.json (no wall-clock data)"""
        return {
            'tool': 'plastokh',
            'version': VERSION,
            'command': self.command,
            'seed': self.seed,
            'exit_code': self.exit_code,
            'config': self.config_text,
            'warnings': list(self.warnings),
            'stages': [s.to_dict() for s in self.stages],
            'checks': [c.to_dict() for c in self.checks],
            'outputs': sorted(self.outputs),
            'error': self.error,
        }

    def timings(self) -> Dict[str, float]:
        return {s.name: round(s.seconds, 6) for s in self.stages}

    def generate_stage_section(self) -> str:
        lines = ["## Stages", "", "| stage | status | residual | iterations |", "|---|---|---|---|"]
        for s in self.stages:
            residual = f"{s.residual:.3e}" if s.residual is not None else "-"
            iterations = str(s.iterations) if s.iterations is not None else "-"
            lines.append(f"| {s.name} | {s.status} | {residual} | {iterations} |")
        return "\n".join(lines) + "\n\n"

    def generate_check_section(self) -> str:
        if not self.checks:
            return ""
        passed = sum(c.passed for c in self.checks)
        lines = [f"## Checks ({passed}/{len(self.checks)} passed)", "",
                 "| check | result | value | threshold |", "|---|---|---|---|"]
        for c in self.checks:
            value = f"{c.value:.4g}" if isinstance(c.value, (int, float)) and c.value is not None else "-"
            threshold = f"{c.threshold:.4g}" if isinstance(c.threshold, (int, float)) else "-"
            lines.append(f"| {c.name} | {'✓' if c.passed else '✗'} | {value} | {threshold} |")
        return "\n".join(lines) + "\n\n"

    def to_markdown(self) -> str:
        report = f"# plastokh {self.command}\n\n"
        report += f"**Version:** {VERSION}  \n**Seed:** {self.seed}  \n**Exit code:** {self.exit_code}\n\n"
        if self.error:
            report += f"**Error:** {self.error['error']} in stage `{self.error.get('stage')}`: {self.error['message']}\n\n"
        if self.warnings:
            report += "## Warnings\n\n" + "".join(f"- {w}\n" for w in self.warnings) + "\n"
        report += self.generate_stage_section()
        report += self.generate_check_section()
        report += "## Configuration\n\n```ini\n" + self.config_text.rstrip() + "\n```\n"
        return report

    def write(self, directory: Path, markdown: bool = True) -> List[Path]:
        directory = Path(directory)
        paths = [write_json(self.to_dict(), directory / 'report.json'),
                 write_json(self.timings(), directory / 'timings.json')]
        if markdown:
            path = directory / 'report.md'
            try:
                path.write_text(self.to_markdown(), encoding='utf-8')
            except OSError as e:
                raise ExportError(f"cannot write {path}: {e}")
            paths.append(path)
        return paths


def main():
    """Example usage"""
    report = RunReport('validate', '[model]\n', seed=1)
    report.add_stage('grid', details={'nodes': 100})
    report.add_check('row sums vanish', True, 1e-16, 1e-12, stage='grid')
    print(report.to_markdown())


if __name__ == "__main__":
    main()
