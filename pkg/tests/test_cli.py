import numpy as np
import pytest

from reactive_control import cli, sim
from reactive_control.controller import Target
from reactive_control.kinematics import Pose


@pytest.mark.parametrize("name", sim.EXPERIMENTS)
def test_bundled_scenarios_match_generator(name):
    bundled = sim.bundled_scenario_path(name).read_text()
    assert bundled == sim.save_scenario(sim.exp_scenario(name))


def test_gen_exp_writes_file(tmp_path):
    assert cli.main(["gen-exp", "5-2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "exp-5-2.yaml").read_text() == sim.bundled_scenario_path("5-2").read_text()


def test_gen_exp_stdout(capsys):
    assert cli.main(["gen-exp", "2", "--out", "-"]) == 0
    assert capsys.readouterr().out == sim.bundled_scenario_path("2").read_text()


def test_run_writes_metrics_and_summary(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", "exp-2", "--out", str(out), "--ticks", "40", "--dump-qp"]) == 0
    rows = sim.read_metrics(out / "metrics.csv")
    assert len(rows) == 40
    summary = sim.load_yaml((out / "summary.yaml").read_text())
    assert summary["ticks"] == 40
    assert (out / "qp_dump.txt").read_text().count("# tick ") == 40


def test_run_by_path_is_deterministic(tmp_path):
    path = sim.bundled_scenario_path("5-1")
    for d in ("a", "b"):
        assert cli.main(["run", str(path), "--out", str(tmp_path / d), "--ticks", "60"]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_summarize_matches_run(tmp_path, capsys):
    cli.main(["run", "2", "--out", str(tmp_path), "--ticks", "30"])
    capsys.readouterr()
    assert cli.main(["summarize", str(tmp_path / "metrics.csv")]) == 0
    printed = sim.load_yaml(capsys.readouterr().out)
    saved = sim.load_yaml((tmp_path / "summary.yaml").read_text())
    assert printed["ticks"] == saved["ticks"] == 30
    assert printed["solver_success_fraction"] == saved["solver_success_fraction"]


def test_unknown_scenario_is_bad_input(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == cli.EXIT_BAD_INPUT
    assert "neither a file" in capsys.readouterr().err


def test_invalid_scenario_is_bad_input(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("format_version: 1\nname: x\n")
    assert cli.main(["run", str(bad), "--out", str(tmp_path)]) == cli.EXIT_BAD_INPUT


def test_hard_error_exit_code_and_dump(tmp_path, monkeypatch):
    real = sim.control_step

    def poisoned(state, cfg, chain, targets, events, solver, frames=None):
        if state.tick == 3:
            targets = {arm: Target(Pose(np.full(3, np.nan), np.zeros(3)), t.mode) for arm, t in targets.items() if t}
        return real(state, cfg, chain, targets, events, solver, frames)

    monkeypatch.setattr(sim, "control_step", poisoned)
    assert cli.main(["run", "exp-2", "--out", str(tmp_path), "--ticks", "10"]) == cli.EXIT_HARD_ERROR
    assert "NaN" in (tmp_path / "error_dump.txt").read_text()
    assert not (tmp_path / "metrics.csv").exists()
