import json
from pathlib import Path

import pytest

from src.core.config_manager import ConfigManager, ConfigManagerError, deep_merge, get_application_config
from src.utils.config_validation import (ConfigValidationError, load_run_config, parse_config_text, schema_errors,
                                         validate_config)

EXAMPLE_RUN = Path(__file__).resolve().parents[1] / "config" / "example_run.json"


def _write(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_example_run_config_is_valid():
    result = validate_config(EXAMPLE_RUN)
    assert result.ok, result.errors
    assert result.config["model"] == "toy-gaussian"


def test_toolkit_defaults_satisfy_the_schema():
    defaults = ConfigManager().run_defaults()
    assert schema_errors({**defaults, "model": "toy-gaussian"}) == []


def test_out_of_range_value_names_the_field(tmp_path):
    result = validate_config(_write(tmp_path, {"model": "toy-gaussian", "smc_abc": {"a": -0.1}}))
    assert not result.ok
    assert result.errors == ["smc_abc.a: -0.1 is less than or equal to the minimum of 0"]


def test_unknown_choice_lists_valid_ones(tmp_path):
    result = validate_config(_write(tmp_path, {"model": "toy-gaussian", "algorithm": "rejection"}))
    assert len(result.errors) == 1
    assert result.errors[0].startswith("algorithm: 'rejection' is not one of")
    assert "'smc-abc'" in result.errors[0] and "'rsnl'" in result.errors[0]


def test_every_error_is_reported(tmp_path):
    config = {"model": "toy-gaussian", "bsl": {"m": 2}, "neural": {"tau": 0}, "bogus": 1}
    errors = validate_config(_write(tmp_path, config)).errors
    assert len(errors) == 3
    assert any(e.startswith("bsl.m:") for e in errors)
    assert any(e.startswith("neural.tau:") for e in errors)
    assert any("'bogus'" in e for e in errors)


def test_missing_model_is_an_error(tmp_path):
    errors = validate_config(_write(tmp_path, {"algorithm": "bsl"})).errors
    assert errors == ["<root>: 'model' is a required property"]


def test_parse_error_reports_line_and_column(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "model": "toy-gaussian",\n}\n', encoding="utf-8")
    errors = validate_config(path).errors
    assert len(errors) == 1
    assert "line 3, column 1" in errors[0]
    with pytest.raises(ConfigValidationError):
        parse_config_text("[1,", "inline")


def test_semantic_checks(tmp_path):
    config = {
        "model": "external",
        "dataset": str(tmp_path / "absent.csv"),
        "models": {"toy-gaussian": {"prior_low": 3.0, "prior_high": 1.0}},
        "diagnostics": {"levels": [0.9, 0.1]},
    }
    errors = validate_config(_write(tmp_path, config)).errors
    assert any(e.startswith("dataset:") for e in errors)
    assert any(e.startswith("models.external:") for e in errors)
    assert any(e.startswith("models.toy-gaussian:") for e in errors)
    assert any(e.startswith("diagnostics.levels:") for e in errors)


def test_overrides_are_validated_too(tmp_path):
    path = _write(tmp_path, {"model": "toy-gaussian"})
    assert validate_config(path, {"seed": 7, "threads": None}).config["seed"] == 7
    assert validate_config(path, {"threads": -1}).errors == ["threads: -1 is less than the minimum of 0"]


def test_load_run_config_merges_defaults(tmp_path):
    path = _write(tmp_path, {"model": "toy-gaussian", "smc_abc": {"n_particles": 64}})
    config = load_run_config(path, ConfigManager().run_defaults())
    assert config["smc_abc"]["n_particles"] == 64
    assert config["smc_abc"]["a"] == 0.5
    assert config["bsl"]["gamma_prior_scale"] == 0.5
    with pytest.raises(ConfigValidationError) as info:
        load_run_config(_write(tmp_path, {"model": "nope"}, "bad.json"), {})
    assert info.value.errors


def test_deep_merge_replaces_lists_and_keeps_base():
    base = {"a": {"b": 1, "c": [1, 2]}, "d": 4}
    merged = deep_merge(base, {"a": {"c": [3]}, "e": 5})
    assert merged == {"a": {"b": 1, "c": [3]}, "d": 4, "e": 5}
    assert base["a"]["c"] == [1, 2]


def test_config_manager_is_a_singleton():
    assert ConfigManager() is get_application_config()


def test_config_manager_get_and_set(toolkit_services):
    manager = ConfigManager()
    assert manager.get_setting("smc_abc.a") == 0.5
    assert manager.get_setting("smc_abc.missing", "fallback") == "fallback"
    manager.set_setting("scratch.nested.value", 3)
    assert manager.get_setting("scratch.nested.value") == 3
    saved = json.loads(manager.config_file_path.read_text(encoding="utf-8"))
    assert saved["scratch"]["nested"]["value"] == 3
    with pytest.raises(ConfigManagerError):
        manager.set_setting("scratch.nested.value.deeper", 1)


def test_discard_fraction_must_replace_a_particle(tmp_path):
    config = {"model": "toy-gaussian", "smc_abc": {"n_particles": 10, "a": 0.05}}
    errors = validate_config(_write(tmp_path, config)).errors
    assert len(errors) == 1 and errors[0].startswith("smc_abc.a:")
    assert validate_config(_write(tmp_path, {"model": "toy-gaussian", "smc_abc": {"n_particles": 10, "a": 0.1}},
                                  "ok.json")).ok
