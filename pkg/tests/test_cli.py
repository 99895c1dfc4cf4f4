import json
from pathlib import Path

import pytest

from herdlab.cli import EXIT_COMPARE, EXIT_INVALID, EXIT_OK, EXIT_SOLVER, main

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def test_predict_matches_golden_table(tmp_path, data_dir):
    assert main(["predict", "-c", str(CONFIG_DIR / "predict.toml"), "-o", str(tmp_path)]) == EXIT_OK
    produced = tmp_path / "bifurcation_values.csv"
    golden = data_dir / "case1_bifurcation_values.csv"
    assert main(["compare", str(produced), str(golden), "--atol", "5e-3"]) == EXIT_OK
    predictions = json.loads((tmp_path / "predictions.json").read_text())
    assert predictions["alpha_regime"] == "large" and len(predictions["modes"]) == 9


def test_compare_failure_exit_code(tmp_path, data_dir, capsys):
    main(["predict", "-c", str(CONFIG_DIR / "predict.toml"), "-o", str(tmp_path)])
    code = main(["compare", str(tmp_path / "bifurcation_values.csv"),
                 str(data_dir / "case1_bifurcation_values.csv"), "--atol", "1e-4"])
    assert code == EXIT_COMPARE
    assert "column" in capsys.readouterr().out


def test_compare_schema_mismatch_exit_code(tmp_path, data_dir):
    other = tmp_path / "other.csv"
    other.write_text("a,b\n1,2\n")
    assert main(["compare", str(other), str(data_dir / "case1_bifurcation_values.csv")]) == EXIT_COMPARE


def test_validation_exit_code(tmp_path, capsys):
    code = main(["simulate", "--set", "params.delta=0", "-o", str(tmp_path)])
    assert code == EXIT_INVALID
    assert "δ≠0" in capsys.readouterr().err


def test_unknown_key_exit_code(tmp_path):
    assert main(["predict", "--set", "params.kapa=1", "-o", str(tmp_path)]) == EXIT_INVALID


def test_scenario_mismatch_exit_code(tmp_path):
    code = main(["simulate", "-c", str(CONFIG_DIR / "predict.toml"), "-o", str(tmp_path)])
    assert code == EXIT_INVALID


def test_solver_failure_exit_code_and_manifest(tmp_path):
    # no mode-40 bifurcation is resolved on a 64-cell grid
    code = main(["switch", "-c", str(CONFIG_DIR / "switch.toml"), "-o", str(tmp_path),
                 "--set", "grid.n_cells=64", "--set", "switch.mode_index=40"])
    assert code == EXIT_SOLVER
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "solver failure"
    assert "mode 40" in manifest["error"]


def test_continue_writes_plot_data(tmp_path):
    code = main(["continue", "-c", str(CONFIG_DIR / "continue.toml"), "-o", str(tmp_path),
                 "--set", "grid.n_cells=64"])
    assert code == EXIT_OK
    header = (tmp_path / "bifurcation_diagram.csv").read_text().splitlines()[0]
    assert header == "branch,parameter,l2_norm"
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["stopping_reasons"]["homogeneous"] == "D_g degeneracy"


@pytest.mark.parametrize("name", ["predict", "simulate", "continue", "switch", "homotopy",
                                  "decay_map"])
def test_example_configs_validate(name):
    from herdlab.config import load_config

    cfg = load_config(CONFIG_DIR / f"{name}.toml")
    assert cfg.scenario == name.replace("_", "-")


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert "herdlab" in capsys.readouterr().out
