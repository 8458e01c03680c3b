import json
import os

import pytest

from qdiff.cli import main
from qdiff.config import ConfigError, validate_config


def write(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj) if not isinstance(obj, str) else obj, encoding="utf-8")
    return str(p)


def minimal(**exp):
    e = {"eigenvalues": [0, 1], "initial_state": {"diagonal": [0.3, 0.7]}}
    e.update(exp)
    return {"schema": 1, "experiment": e}


def small_run(tmp_path, **top):
    cfg = minimal(trajectories=60, t_max=0.5, stop_at_endpoint=False,
                  initial_state={"amplitudes": [0.6, 0.8]})
    cfg["output_dir"] = str(tmp_path / "out")
    cfg.update(top)
    return cfg


def test_validate_echoes_defaults(tmp_path, capsys):
    assert main(["validate", write(tmp_path, minimal())]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["experiment"]["dt"] == 1e-3
    assert out["experiment"]["epsilon_endpoint"] == 1e-4
    assert out["schema"] == 1 and out["tracked"] == ["p[0]", "p[1]"]


@pytest.mark.parametrize("exp, field", [
    ({"dt": 0}, "dt"),
    ({"t_max": 0.0105}, "t_max"),
    ({"trajectories": 0}, "trajectories"),
    ({"eigenvalues": [0, 1, 2]}, "eigenvalues"),
    ({"engine": "EULER"}, "engine"),
    ({"initial_state": {"diagonal": [0.5, 0.6]}}, "initial_state"),
    ({"epsilon_endpoint": 0.7}, "epsilon_endpoint"),
])
def test_semantic_errors_name_the_field(tmp_path, capsys, exp, field):
    assert main(["validate", write(tmp_path, minimal(**exp))]) == 3
    assert f"experiment.{field}" in capsys.readouterr().err


def test_non_hermitian_observable(tmp_path, capsys):
    cfg = minimal()
    del cfg["experiment"]["eigenvalues"]
    cfg["experiment"]["observable"] = {"dim": 2, "re": [[0, 1], [0, 1]]}
    assert main(["validate", write(tmp_path, cfg)]) == 3
    err = capsys.readouterr().err
    assert "experiment.observable" in err and "Hermitian" in err


def test_diagonal_observable_matrix_accepted(tmp_path):
    cfg = minimal()
    del cfg["experiment"]["eigenvalues"]
    cfg["experiment"]["observable"] = {"dim": 2, "re": [[0, 0], [0, 2]]}
    assert main(["validate", write(tmp_path, cfg)]) == 0


def test_top_level_errors():
    with pytest.raises(ConfigError, match="tracked\\[0\\]"):
        validate_config({**minimal(), "tracked": ["p[5]"]})
    with pytest.raises(ConfigError, match="tracked\\[1\\]"):
        validate_config({**minimal(), "tracked": ["p[0]", "q"]})
    with pytest.raises(ConfigError, match="workers"):
        validate_config({**minimal(), "workers": 0})
    with pytest.raises(ConfigError, match="schema"):
        validate_config({**minimal(), "schema": 2})
    with pytest.raises(ConfigError, match="colour"):
        validate_config({**minimal(), "colour": "red"})
    with pytest.raises(ConfigError, match="decoherence.pair"):
        validate_config({**minimal(), "decoherence": {"pair": [0, 0]}})
    with pytest.raises(ConfigError, match="engines\\[1\\]"):
        validate_config({**minimal(), "engines": ["STATE_VECTOR", "NOPE"]})


def test_parse_and_io_errors(tmp_path):
    assert main(["validate", write(tmp_path, "{not json")]) == 2
    assert main(["validate", write(tmp_path, "[1, 2]")]) == 2
    assert main(["validate", str(tmp_path / "missing.json")]) == 5
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = small_run(tmp_path, output_dir=str(blocker / "sub"))
    assert main(["run", "-q", write(tmp_path, cfg)]) == 5


def test_run_writes_artifacts(tmp_path):
    cfg = small_run(tmp_path, tracked=["p[0]", "rho[0,1].re", "<L>", "purity"])
    cfg["experiment"]["trajectories"] = 200
    assert main(["run", "-q", write(tmp_path, cfg)]) == 0
    out = tmp_path / "out"
    names = sorted(os.listdir(out))
    assert names == ["manifest.json", "series.csv", "summary.json"]
    summary = json.loads((out / "summary.json").read_text())
    assert {"born", "fitted_rate", "martingale", "weights", "config_hash", "seed"} <= set(summary)
    assert summary["fitted_rate"] is not None  # coherent start: (0, 1) fitted automatically
    lines = (out / "series.csv").read_text().splitlines()
    assert lines[0] == 't,p[0],p[0]_se,"rho[0,1].re","rho[0,1].re_se",<L>,<L>_se,purity,purity_se'
    assert len(lines) == 1 + 21
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == summary["config_hash"]
    assert manifest["seed"] == 0 and "numpy" in manifest["versions"]


def test_seed_override_and_env_output(tmp_path, monkeypatch):
    cfg = write(tmp_path, small_run(tmp_path))
    monkeypatch.setenv("QDIFF_OUT", str(tmp_path / "a"))
    assert main(["run", "-q", cfg, "--seed", "4"]) == 0
    monkeypatch.setenv("QDIFF_OUT", str(tmp_path / "b"))
    assert main(["run", "-q", cfg, "--seed", "4"]) == 0
    monkeypatch.setenv("QDIFF_OUT", str(tmp_path / "c"))
    assert main(["run", "-q", cfg, "--seed", "5"]) == 0
    read = lambda d: (tmp_path / d / "series.csv").read_bytes()  # noqa: E731
    assert read("a") == read("b") != read("c")
    assert json.loads((tmp_path / "a" / "summary.json").read_text())["seed"] == 4
    assert not (tmp_path / "out").exists()


def test_trajectory_failure_exit_code(tmp_path):
    cfg = small_run(tmp_path)
    cfg["experiment"].update(dt=0.2, t_max=2.0, eigenvalues=[0, 1.5], n_record=10,
                             initial_state={"amplitudes": [0.7071067811865476, 0.7071067811865476]})
    with pytest.warns(Warning):
        code = main(["run", "-q", write(tmp_path, cfg)])
    assert code == 4
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["engines"]["DENSITY_NONLINEAR"]["failures"]["failed"] > 0


def test_compare_requires_two_engines(tmp_path):
    assert main(["compare", "-q", write(tmp_path, small_run(tmp_path))]) == 3


def test_compare_engine_with_itself_is_exact(tmp_path, capsys):
    cfg = small_run(tmp_path, engines=["DENSITY_NONLINEAR", "DENSITY_NONLINEAR"])
    assert main(["compare", "-q", write(tmp_path, cfg)]) == 0
    rep = json.loads((tmp_path / "out" / "comparison.json").read_text())
    key = "DENSITY_NONLINEAR|DENSITY_NONLINEAR#2"
    assert rep["pathwise"][key]["max"] == 0.0
    assert rep["pairwise_z_with_unresolved"][key] == [0.0, 0.0]


def test_compare_three_engines(tmp_path, capsys):
    cfg = small_run(tmp_path, engines=["STATE_VECTOR", "DENSITY_NONLINEAR", "LINEAR_WEIGHTED"])
    assert main(["compare", "-q", write(tmp_path, cfg)]) == 0
    rep = json.loads((tmp_path / "out" / "comparison.json").read_text())
    assert len(rep["pairwise_z"]) == 3
    assert set(rep["mean_state_vs_reference"]) == {"STATE_VECTOR", "DENSITY_NONLINEAR", "LINEAR_WEIGHTED"}
    assert "STATE_VECTOR|DENSITY_NONLINEAR: born z" in capsys.readouterr().out


def test_no_temporary_files_left(tmp_path):
    assert main(["run", "-q", write(tmp_path, small_run(tmp_path))]) == 0
    assert not [n for n in os.listdir(tmp_path / "out") if n.startswith(".")]
