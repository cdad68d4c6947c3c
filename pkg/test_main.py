"""End-to-end tests of the command-line pipelines"""

import json

import numpy as np
import pytest

from cli_io import parse_config, read_values
from main import COMMANDS, PlastokhOrchestrator, main, run_command

SMALL_CONFIG = """\
[model]
beta = 0.2

[grid]
nx = 5
ny_per_band = 2
nz = 5
y_max = 4.0
y_closure = neumann

[mc]
dt = 0.01
n_paths = 50
horizon = 20.0
burn_in = 2.0
seed = 3

[source]
name = {source}
center = {center}

[outputs]
directory = {directory}
"""


def _write_config(tmp_path, source="tanh_y", center="true", name="run.ini"):
    path = tmp_path / name
    path.write_text(SMALL_CONFIG.format(source=source, center=center, directory=tmp_path / "out"), encoding="utf-8")
    return path


def _report(directory):
    return json.loads((directory / "report.json").read_text(encoding="utf-8"))


class TestCommands:

    def test_thirteen_commands(self):
        assert len(COMMANDS) == 13

    def test_unknown_command(self, tmp_path):
        config = parse_config(SMALL_CONFIG.format(source="one", center="false", directory=tmp_path))
        with pytest.raises(ValueError):
            PlastokhOrchestrator(config, "plot")

    def test_solve_interior(self, tmp_path):
        assert main(["solve-interior", "--config", str(_write_config(tmp_path))]) == 0
        out = tmp_path / "out"
        for name in ("eta.csv", "eta_face_plus.csv", "eta_face_minus.csv", "report.json", "timings.json",
                     "report.md", "run.log"):
            assert (out / name).exists(), name
        data = _report(out)
        assert [s["name"] for s in data["stages"]] == ["grid", "solve-interior"]
        assert data["exit_code"] == 0
        assert data["error"] is None

    def test_gamma_star_is_a_probability(self, tmp_path):
        assert main(["gamma-star", "--config", str(_write_config(tmp_path))]) == 0
        weights = read_values(tmp_path / "out" / "gamma_star.csv")
        assert weights.size == 50
        assert weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_out_and_seed_overrides(self, tmp_path):
        target = tmp_path / "elsewhere"
        code = main(["apply-t", "--config", str(_write_config(tmp_path)), "--out", str(target), "--seed", "99"])
        assert code == 0
        assert _report(target)["seed"] == 99
        assert (target / "T_f.csv").exists()

    def test_report_is_deterministic(self, tmp_path):
        config = _write_config(tmp_path)
        main(["nu", "--config", str(config)])
        first = (tmp_path / "out" / "report.json").read_bytes()
        main(["nu", "--config", str(config)])
        assert (tmp_path / "out" / "report.json").read_bytes() == first

    def test_fokker_planck_files(self, tmp_path):
        assert main(["fokker-planck", "--config", str(_write_config(tmp_path))]) == 0
        out = tmp_path / "out"
        masses = _report(out)["stages"][1]["details"]["masses"]
        assert sum(masses.values()) == pytest.approx(1.0, abs=1e-10)
        assert np.all(read_values(out / "m_plastic_minus.csv") >= 0.0)


class TestExitCodes:

    def test_uncentered_constant_is_not_solvable(self, tmp_path):
        code = main(["complete", "--config", str(_write_config(tmp_path, source="one", center="false"))])
        assert code == 2
        data = _report(tmp_path / "out")
        assert data["error"]["error"] == "NotSolvable"
        assert data["error"]["stage"] == "complete"
        assert data["error"]["nu_f"] == pytest.approx(1.0)
        assert data["stages"][-1]["status"] == "failed"

    def test_centered_source_is_solvable(self, tmp_path):
        assert main(["complete", "--config", str(_write_config(tmp_path, source="gauss_y"))]) == 0
        assert (tmp_path / "out" / "u.csv").exists()

    def test_invalid_config(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text("[model]\nalpha = -1\n", encoding="utf-8")
        assert main(["nu", "--config", str(path)]) == 1
        assert "ConfigValidationError" in capsys.readouterr().err

    def test_malformed_config(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text("[grid]\nnx = five\n", encoding="utf-8")
        assert main(["nu", "--config", str(path)]) == 1
        assert "line 2" in capsys.readouterr().err

    def test_domain_failure_is_recorded(self, tmp_path):
        text = SMALL_CONFIG.format(source="tanh_y", center="true", directory=tmp_path / "out")
        for old, new in (("y_closure = neumann", "y_closure = dirichlet"), ("y_max = 4.0", "y_max = 1.5"),
                         ("ny_per_band = 2", "ny_per_band = 1")):
            text = text.replace(old, new)
        config = parse_config(text)
        report = run_command("gamma-star", config)
        assert report.exit_code == 1
        assert report.error["error"] == "NotStochastic"
        assert report.error["stage"] == "gamma-star"

    def test_unexpected_error_is_recorded(self, tmp_path, monkeypatch):
        def broken(self):
            raise TypeError("unsupported operand")

        monkeypatch.setattr(PlastokhOrchestrator, "stage_grid", broken)
        config = parse_config(SMALL_CONFIG.format(source="tanh_y", center="true", directory=tmp_path / "out"))
        report = run_command("solve-interior", config)
        assert report.exit_code == 1
        assert report.error == {"error": "TypeError", "message": "unsupported operand", "stage": "grid",
                                "exit_code": 1}
        assert _report(tmp_path / "out")["error"]["error"] == "TypeError"


@pytest.mark.slow
def test_validate_checks_pass(tmp_path):
    report = run_command("validate", parse_config(SMALL_CONFIG.format(source="tanh_y", center="true",
                                                                     directory=tmp_path)))
    assert report.exit_code == 0
    assert report.checks
    failed = [c.name for c in report.checks if not c.passed]
    assert failed == []
