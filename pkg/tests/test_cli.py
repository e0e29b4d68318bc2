import csv
import json

import numpy as np
import pytest

from dpsys import StateSpace
from dpsys.cli import main
from dpsys.linsys import save_system


def _sections(text):
    """Parse the ``===== name =====`` delimited JSON sections of CLI output."""
    out, name, buf = {}, None, []
    for line in text.splitlines():
        if line.startswith("===== end "):
            out[name] = json.loads("\n".join(buf))
            name, buf = None, []
        elif line.startswith("===== "):
            name = line.strip("= ").strip()
        elif name:
            buf.append(line)
    return out


@pytest.fixture
def scalar_files(tmp_path):
    save_system(StateSpace([[0.9]], [[1.0]], [[1.0]], [[0.0]]), tmp_path / "plant.json")
    save_system(StateSpace([[1.0]], np.zeros((1, 0)), [[1.0]], np.zeros((1, 0))),
                tmp_path / "exo.json")
    (tmp_path / "toy.json").write_text(json.dumps(
        {"A": [[0.5, 0.1], [0, 0.3]], "B": [[1], [0.5]], "C": [[1, 0]], "D": [[0.2]]}))
    return tmp_path


def test_analyze_reports_gramian(scalar_files, capsys):
    code = main(["analyze", str(scalar_files / "toy.json"), "-t", "4", "--sigma", "iid:2",
                 "--eps", "1.0", "--delta", "0.05"])
    assert code == 0
    sec = _sections(capsys.readouterr().out)
    report = sec["analyze"]
    assert report["gramian"]["n"] == 2 and report["strong_input_observability"]["observable"]


@pytest.mark.parametrize("mode", ["output-iid", "input", "stable", "laplace"])
def test_calibrate_modes(scalar_files, capsys, mode):
    code = main(["calibrate", str(scalar_files / "toy.json"), "--eps", "0.5", "--delta", "0.01",
                 "--mode", mode])
    assert code == 0
    assert capsys.readouterr().out.strip()


def test_validation_errors_exit_2(scalar_files, capsys):
    assert main(["calibrate", str(scalar_files / "toy.json"), "--eps", "-1", "--delta",
                 "0.01"]) == 2
    assert main(["analyze", str(scalar_files / "missing.json"), "-t", "3"]) == 2
    (scalar_files / "bad.json").write_text("{not json")
    assert main(["analyze", str(scalar_files / "bad.json"), "-t", "3"]) == 2


def test_stable_mode_on_unstable_system_is_a_validation_error(scalar_files, capsys):
    # stability is a precondition of the stable-system bound
    save_system(StateSpace([[1.5]], [[1.0]], [[1.0]], [[0.0]]), scalar_files / "u.json")
    assert main(["calibrate", str(scalar_files / "u.json"), "--eps", "1", "--delta", "0.05",
                 "--mode", "stable"]) == 2
    assert "unstable" in capsys.readouterr().err


def test_numerical_failure_exits_4(scalar_files, capsys, monkeypatch):
    from dpsys import NumericalError
    import dpsys.privacy

    def boom(*args, **kwargs):
        raise NumericalError("solver diverged")

    monkeypatch.setattr(dpsys.privacy, "min_iid_sigma", boom)
    assert main(["calibrate", str(scalar_files / "toy.json"), "--eps", "1", "--delta",
                 "0.05"]) == 4


def test_synthesize_infeasible_exits_3(scalar_files, capsys):
    code = main(["synthesize", str(scalar_files / "plant.json"), str(scalar_files / "exo.json"),
                 "--gamma", "1e-6"])
    assert code == 3
    assert "smallest feasible gamma" in capsys.readouterr().err


def test_synthesize_simulate_estimate_chain(scalar_files, capsys):
    d = scalar_files
    assert main(["synthesize", str(d / "plant.json"), str(d / "exo.json"), "--gamma", "2",
                 "-o", str(d / "ctrl.json")]) == 0
    sec = _sections(capsys.readouterr().out)
    assert sec["controller"]["gamma"] == 2.0

    (d / "exp.json").write_text(json.dumps({
        "horizon": 200, "offset": [1.5], "x_r0": [2.0], "exo": "exo.json",
        "csv_path": str(d / "traj.csv")}))
    assert main(["simulate", str(d / "plant.json"), str(d / "ctrl.json"),
                 "--config", str(d / "exp.json")]) == 0
    summary = _sections(capsys.readouterr().out)["summary"]
    assert abs(summary["final_output"]["y0"] - 2.0) < 1e-6

    assert main(["estimate", str(d / "ctrl.json"), "--traj", str(d / "traj.csv"),
                 "-o", str(d / "est.csv")]) == 0
    assert _sections(capsys.readouterr().out)["estimate"]["max_error"] < 1e-8
    with open(d / "est.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "ehat0", "e0", "error"] and len(rows) == 199


def test_simulate_config_needs_reference(scalar_files, capsys):
    d = scalar_files
    main(["synthesize", str(d / "plant.json"), str(d / "exo.json"), "--gamma", "2",
          "-o", str(d / "ctrl.json")])
    (d / "exp.json").write_text(json.dumps({"horizon": 10, "offset": [0.0]}))
    assert main(["simulate", str(d / "plant.json"), str(d / "ctrl.json"),
                 "--config", str(d / "exp.json")]) == 2


def test_unknown_preset_exits_2(tmp_path, capsys):
    assert main(["microgrid", "--preset", "other", "-o", str(tmp_path)]) == 2


def test_microgrid_preset(tmp_path, capsys):
    assert main(["microgrid", "--preset", "paper", "-o", str(tmp_path), "--horizon", "300"]) == 0
    sec = _sections(capsys.readouterr().out)
    assert "traces.png" in sec["artifacts"]["files"]
    assert (tmp_path / "report.json").exists()
