import json
import sys

import pytest

from src.main import EXIT_BUDGET, EXIT_CONFIG, EXIT_OK, EXIT_SIMULATOR, build_parser, main
from src.modules.run_manifest import MANIFEST_FILE


def _write(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def _toy_run(tmp_path, **extra):
    config = {
        "model": "toy-gaussian",
        "seed": 4,
        "smc_abc": {"n_particles": 100, "min_acceptance": 0.3},
        "models": {"toy-gaussian": {"true_theta": [1.0]}},
        **extra,
    }
    return _write(tmp_path, config)


def test_parser_requires_a_verb():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    args = build_parser().parse_args(["infer", "--config", "run.json", "--threads", "2"])
    assert args.verb == "infer" and args.threads == 2


def test_validate_accepts_a_good_config(tmp_path, capsys):
    assert main(["validate", "--config", str(_toy_run(tmp_path))]) == EXIT_OK
    assert "configuration is valid" in capsys.readouterr().out


def test_validate_reports_every_error(tmp_path, capsys):
    path = _write(tmp_path, {"model": "toy-gaussian", "smc_abc": {"a": 1.5}, "threads": -2})
    assert main(["validate", "--config", str(path)]) == EXIT_CONFIG
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 2
    assert err[0].startswith("smc_abc.a:") and err[1].startswith("threads:")


def test_invalid_override_is_a_config_error(tmp_path):
    assert main(["validate", "--config", str(_toy_run(tmp_path)), "--algorithm", "rejection"]) == EXIT_CONFIG


def test_infer_writes_run_directory(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["infer", "--config", str(_toy_run(tmp_path)), "--output-dir", str(out), "--seed", "9"])
    assert code == EXIT_OK
    assert capsys.readouterr().out.strip() == str(out / "infer")
    assert (out / "infer" / "samples.csv").is_file()
    manifest = json.loads((out / MANIFEST_FILE).read_text(encoding="utf-8"))
    assert manifest["seed"] == 9
    assert manifest["status"] == "completed"


def test_budget_below_initial_population_exits_four(tmp_path):
    out = tmp_path / "run"
    path = _toy_run(tmp_path, smc_abc={"n_particles": 100, "max_total_simulations": 50})
    assert main(["infer", "--config", str(path), "--output-dir", str(out)]) == EXIT_BUDGET
    manifest = json.loads((out / MANIFEST_FILE).read_text(encoding="utf-8"))
    assert manifest["status"] == "budget_exhausted"


def test_failing_external_simulator_exits_three(tmp_path):
    config = {
        "model": "external",
        "models": {"external": {
            "command": [sys.executable, "-c", "import sys; sys.stdin.read(); sys.exit(5)"],
            "prior": {"low": [0.0], "high": [1.0]},
            "true_theta": [0.5],
        }},
    }
    path = _write(tmp_path, config)
    assert main(["pre-analysis", "--config", str(path), "--output-dir", str(tmp_path / "run")]) == EXIT_SIMULATOR


def test_mismatched_dataset_exits_two(tmp_path):
    dataset = tmp_path / "data.csv"
    dataset.write_text("1.0,2.0,3.0\n", encoding="utf-8")
    path = _toy_run(tmp_path, dataset=str(dataset))
    assert main(["infer", "--config", str(path), "--output-dir", str(tmp_path / "run")]) == EXIT_CONFIG


def test_analyse_before_infer_exits_two(tmp_path):
    path = _toy_run(tmp_path)
    assert main(["analyse", "--config", str(path), "--output-dir", str(tmp_path / "run")]) == EXIT_CONFIG
