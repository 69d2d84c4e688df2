import json
import sys

import pytest

from compositional_inference.main import main


def test_main_list(monkeypatch, capsys):
    """Test listing the registered scenarios."""
    monkeypatch.setattr(sys, 'argv', ["compositional_inference", "list"])

    main()

    data = json.loads(capsys.readouterr().out)
    names = [s["name"] for s in data["scenarios"]]
    assert "chain4-inverse-det" in names
    assert all(s["description"] for s in data["scenarios"])


def test_main_validate(monkeypatch, capsys, tmp_path):
    """Test validating a configuration file."""
    path = tmp_path / "toy.json"
    path.write_text(json.dumps({"scenario": "hierarchy-toy", "params": {"horizon": 0.5}}))
    monkeypatch.setattr(sys, 'argv', ["compositional_inference", "validate", str(path)])

    main()

    data = json.loads(capsys.readouterr().out)
    assert data["valid"] is True
    assert data["params"]["horizon"] == 0.5
    assert data["params"]["dt"] == 1e-3


def test_main_run_writes_reports(monkeypatch, capsys, tmp_path):
    """Test a short run with flag overrides."""
    config = tmp_path / "toy.json"
    config.write_text(json.dumps({"scenario": "hierarchy-toy", "params": {"horizon": 0.05}}))
    out = tmp_path / "out"
    monkeypatch.setattr(sys, 'argv', [
        "compositional_inference", "run", "hierarchy-toy", "--config", str(config), "--seed", "7", "--out", str(out),
    ])

    main()

    data = json.loads(capsys.readouterr().out)
    assert data["scenario"] == "hierarchy-toy"
    assert (out / "report.json").exists()
    assert (out / "flat.csv").exists()
    assert json.loads((out / "report.json").read_text())["config"]["seed"] == 7


def test_main_unknown_scenario(monkeypatch, capsys):
    """Test that an unknown scenario exits with code 1."""
    monkeypatch.setattr(sys, 'argv', ["compositional_inference", "run", "chain5"])

    with pytest.raises(SystemExit) as excinfo:
        main()

    assert excinfo.value.code == 1
    assert "Error: Unknown scenario 'chain5'" in capsys.readouterr().err


def test_main_invalid_config(monkeypatch, capsys, tmp_path):
    """Test that a malformed configuration exits with code 1."""
    path = tmp_path / "bad.json"
    path.write_text('{"scenario": "hierarchy-toy", "seed": -3}')
    monkeypatch.setattr(sys, 'argv', ["compositional_inference", "validate", str(path)])

    with pytest.raises(SystemExit) as excinfo:
        main()

    assert excinfo.value.code == 1
    assert "seed" in capsys.readouterr().err


def test_main_missing_case_file(monkeypatch, capsys, tmp_path):
    """Test that a missing MATPOWER case exits with code 1."""
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"scenario": "grid-case9-wls", "params": {"case": str(tmp_path / "nope.m")}}))
    monkeypatch.setattr(sys, 'argv', ["compositional_inference", "run", "grid-case9-wls", "--config", str(path),
                                      "--out", str(tmp_path / "out")])

    with pytest.raises(SystemExit) as excinfo:
        main()

    assert excinfo.value.code == 1
    err = capsys.readouterr().err
    assert "Error: " in err and "nope.m" in err
    assert "Unexpected error" not in err


def test_main_no_command(monkeypatch, capsys):
    """Test that no subcommand prints help."""
    monkeypatch.setattr(sys, 'argv', ["compositional_inference"])

    main()

    assert "usage:" in capsys.readouterr().out
