import json

import numpy as np
import pandas as pd
import pytest

from src.core.config_manager import ConfigManager, deep_merge
from src.modules.bvcbm import BvcbmModel
from src.modules.invasion import InvasionModel
from src.modules.pipeline import (TIMING_DIR, MissingArtifactError, PipelineError, SbiPipeline, build_model,
                                  default_run_dir, load_dataset, run_pipeline)
from src.modules.run_manifest import MANIFEST_FILE
from src.modules.toy_gaussian import ToyGaussianModel
from src.utils.artifacts import read_json

TOY_RUN = {
    "model": "toy-gaussian",
    "algorithm": "smc-abc",
    "seed": 17,
    "threads": 1,
    "smc_abc": {"n_particles": 200, "min_acceptance": 0.2},
    "bsl": {"n_iter": 200, "m": 10, "pilot_iter": 0, "proposal_cov": [[0.01]]},
    "diagnostics": {
        "cost_simulations": 20,
        "predictive_simulations": 100,
        "normality": True,
        "normality_m": 1000,
        "tune_m": True,
        "tune_m_candidates": [5, 10],
        "tune_m_reps": 10,
    },
    "models": {"toy-gaussian": {"true_theta": [2.0]}},
}


def _config(**overrides):
    return deep_merge(deep_merge(ConfigManager().run_defaults(), TOY_RUN), overrides)


FAST_NEURAL = {
    "neural": {"rounds": 1, "sims_per_round": 300, "max_epochs": 10, "patience": 5, "batch_size": 64,
               "n_components": 2, "hidden_units": 8, "hidden_layers": 1, "learning_rate": 5e-3,
               "posterior_draws": 100},
    "mcmc": {"n_iter": 200, "warmup": 100, "initial_scale": 0.5, "init_candidates": 50},
}

# (stage, algorithm) pairs covering every stage and each algorithm family
REPRODUCIBLE_RUNS = [
    ("pre-analysis", "smc-abc"),
    ("infer", "smc-abc"),
    ("infer", "rbsl-mean"),
    ("infer", "nle"),
    ("infer", "rsnl"),
    ("analyse", "smc-abc"),
    ("analyse", "rbsl-mean"),
]


def _stage_config(algorithm, **overrides):
    config = _config(algorithm=algorithm, **overrides)
    return deep_merge(config, FAST_NEURAL) if algorithm in ("nle", "rsnl") else config


def _run_through(config, stage, run_dir):
    if stage == "analyse":
        run_pipeline(config, "infer", run_dir)
    run_pipeline(config, stage, run_dir)


def _tree(run_dir):
    """Every file under the run directory except the manifest and the timing sidecar."""
    return {path.relative_to(run_dir).as_posix(): path.read_bytes()
            for path in sorted(run_dir.rglob("*"))
            if path.is_file() and path.name != MANIFEST_FILE and path.relative_to(run_dir).parts[0] != TIMING_DIR}


def test_build_model_by_name():
    assert isinstance(build_model(_config()), ToyGaussianModel)
    assert isinstance(build_model(_config(model="invasion")), InvasionModel)
    assert isinstance(build_model(_config(model="bvcbm")), BvcbmModel)
    with pytest.raises(PipelineError):
        build_model({"model": "lotka-volterra"})


def test_default_run_dir(tmp_path):
    assert default_run_dir({"model": "bvcbm", "algorithm": "bsl", "seed": 3}, tmp_path) == tmp_path / "bvcbm_bsl_seed3"
    assert default_run_dir({"model": "bvcbm", "output_dir": str(tmp_path / "x")}, tmp_path) == tmp_path / "x"


def test_load_dataset(tmp_path):
    path = tmp_path / "observed.csv"
    path.write_text("1.5,2.5\n3.5,\n", encoding="utf-8")
    assert load_dataset(path).tolist() == [1.5, 2.5, 3.5]
    path.write_text("1.0,abc\n", encoding="utf-8")
    with pytest.raises(PipelineError):
        load_dataset(path)
    with pytest.raises(PipelineError):
        load_dataset(tmp_path / "absent.csv")


def test_pre_analysis_writes_indexed_artifacts(tmp_path):
    outcome = run_pipeline(_config(), "pre-analysis", tmp_path)
    stage_dir = tmp_path / "pre-analysis"
    assert outcome.status == "completed"
    for name in ("observed.csv", "prior_predictive_bands.csv", "prior_predictive_coverage.json", "m_tuning.csv",
                 "normality.csv", "pre_analysis_summary.json"):
        assert (stage_dir / name).is_file(), name
    assert not (stage_dir / "cost.csv").exists()
    timing_dir = tmp_path / TIMING_DIR / "pre-analysis"
    assert len(pd.read_csv(timing_dir / "cost.csv")) == 20
    assert (timing_dir / "cost_histogram.csv").is_file()
    index = read_json(stage_dir / "index.json")
    assert index["stage"] == "pre-analysis"
    assert len(index["artifacts"]) == len(outcome.artifacts)
    summary = read_json(stage_dir / "pre_analysis_summary.json")
    assert summary["cost"] == {"n": 20, "timing_dir": f"{TIMING_DIR}/pre-analysis"}
    assert summary["prior_predictive"]["incompatible"] is False
    assert summary["m_tuning"]["selected_m"] in (5, 10)
    manifest = json.loads((tmp_path / MANIFEST_FILE).read_text(encoding="utf-8"))
    record = manifest["history"][-1]
    assert record["status"] == "completed"
    assert record["details"]["timing"]["cost"]["n"] == 20
    assert record["details"]["timing"]["cost"]["min_seconds"] <= record["details"]["timing"]["cost"]["max_seconds"]
    assert manifest["total_simulations"] == outcome.total_simulations


def test_smc_infer_then_analyse(tmp_path):
    infer = run_pipeline(_config(), "infer", tmp_path)
    summary = read_json(tmp_path / "infer" / "inference_summary.json")
    assert summary["algorithm"] == "smc-abc"
    assert summary["termination_reason"] == "min_acceptance"
    assert summary["total_simulations"] == infer.total_simulations
    assert summary["posterior_mean"]["theta"] == pytest.approx(2.0, abs=0.3)
    samples = pd.read_csv(tmp_path / "infer" / "samples.csv")
    assert len(samples) == 200

    analyse = run_pipeline(_config(), "analyse", tmp_path)
    assert analyse.status == "completed"
    comparison = pd.read_csv(tmp_path / "analyse" / "comparison.csv")
    assert comparison["algorithm"].tolist() == ["smc-abc"]
    assert comparison["total_simulations"][0] == infer.total_simulations
    assert (tmp_path / "analyse" / "posterior_predictive_smc-abc_bands.csv").is_file()
    assert (tmp_path / "analyse" / "identifiability_smc-abc.csv").is_file()
    history = json.loads((tmp_path / MANIFEST_FILE).read_text(encoding="utf-8"))["history"]
    assert [h["stage"] for h in history] == ["infer", "analyse"]


@pytest.mark.parametrize("stage, algorithm", REPRODUCIBLE_RUNS)
def test_reruns_are_byte_identical(tmp_path, stage, algorithm):
    config = _stage_config(algorithm)
    _run_through(config, stage, tmp_path / "first")
    _run_through(config, stage, tmp_path / "second")
    first = _tree(tmp_path / "first")
    assert f"{stage}/index.json" in first
    assert first == _tree(tmp_path / "second")


@pytest.mark.parametrize("stage, algorithm", REPRODUCIBLE_RUNS)
def test_thread_count_does_not_change_results(tmp_path, stage, algorithm):
    _run_through(_stage_config(algorithm, threads=1), stage, tmp_path / "serial")
    _run_through(_stage_config(algorithm, threads=3), stage, tmp_path / "threaded")
    assert _tree(tmp_path / "serial") == _tree(tmp_path / "threaded")


def test_robust_bsl_infer(tmp_path):
    run_pipeline(_config(algorithm="rbsl-mean"), "infer", tmp_path)
    chain = pd.read_csv(tmp_path / "infer" / "chain_1.csv")
    assert len(chain) == 200
    samples = pd.read_csv(tmp_path / "infer" / "samples.csv")
    assert len(samples) == 180
    assert set(samples["chain"]) == {1}
    summary = read_json(tmp_path / "infer" / "inference_summary.json")
    assert summary["burn_in"] == 20
    assert len(summary["gamma_median"]) == 1
    assert summary["total_simulations"] == 201 * 10


def test_dataset_replaces_synthetic_observation(tmp_path):
    dataset = tmp_path / "data.csv"
    dataset.write_text("2.05\n", encoding="utf-8")
    pipeline = SbiPipeline(_config(dataset=str(dataset)), tmp_path / "run")
    assert pipeline.observed().tolist() == [2.05]

    dataset.write_text("2.05,1.0\n", encoding="utf-8")
    with pytest.raises(PipelineError):
        pipeline.observed()


def test_missing_true_theta_without_dataset(tmp_path):
    config = _config()
    config["models"]["toy-gaussian"]["true_theta"] = []
    with pytest.raises(PipelineError):
        SbiPipeline(config, tmp_path).observed()


def test_analyse_needs_inference_artifacts(tmp_path):
    with pytest.raises(MissingArtifactError):
        run_pipeline(_config(), "analyse", tmp_path)
    manifest = json.loads((tmp_path / MANIFEST_FILE).read_text(encoding="utf-8"))
    assert manifest["status"] == "failed"
    assert "infer" in manifest["history"][-1]["details"]["error"]


def test_analyse_compares_listed_sample_files(tmp_path):
    rng = np.random.default_rng(0)
    paths = []
    for i, centre in enumerate((1.9, 2.1)):
        path = tmp_path / f"samples_{i}.csv"
        pd.DataFrame({"theta": rng.normal(centre, 0.1, 300)}).to_csv(path, index=False)
        paths.append(str(path))
    listed = [{"algorithm": "bsl", "path": paths[0], "total_simulations": 5000},
              {"algorithm": "bsl", "path": paths[1], "total_simulations": 7000}]
    config = _config(analyse={"samples": listed})
    run_pipeline(config, "analyse", tmp_path / "run")
    comparison = pd.read_csv(tmp_path / "run" / "analyse" / "comparison.csv")
    assert comparison["algorithm"].tolist() == ["bsl_1", "bsl_2"]
    assert comparison["total_simulations"].tolist() == [5000, 7000]


def test_unknown_stage(tmp_path):
    with pytest.raises(PipelineError):
        run_pipeline(_config(), "report", tmp_path)


def test_progress_reaches_completion(tmp_path):
    seen = []
    run_pipeline(_config(), "infer", tmp_path, progress_callback=lambda p, m: seen.append(p))
    assert seen[0] == 0 and seen[-1] == 100
