import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from src.core.logger import get_application_logger
from src.core.rng import SeedStream
from src.core.simulator import SimulationCounter, SimulationEngine, SimulatorModel
from src.modules.bsl import BslConfig, pilot_proposal_cov, run_bsl_chains, tune_m
from src.modules.bvcbm import BvcbmModel, BvcbmParams
from src.modules.cnde import TrainingConfig
from src.modules.diagnostics import (CostProfile, DiagnosticsRunner, PredictiveCheck, RunSummary,
                                     compare_report, identifiability_ratio, posterior_correlations)
from src.modules.external_simulator import ExternalSimulatorModel
from src.modules.invasion import InvasionConfig, InvasionModel
from src.modules.mcmc import McmcConfig
from src.modules.neural_inference import NeuralConfig, NeuralSbiRunner
from src.modules.run_manifest import RunManifest
from src.modules.smc_abc import BudgetExhaustedError, SmcAbcSampler, SmcConfig
from src.modules.toy_gaussian import ToyGaussianConfig, ToyGaussianModel
from src.utils.artifacts import ArtifactIndex, read_json, read_samples, samples_frame

STAGES = ("pre-analysis", "infer", "analyse")
ROBUST_BY_ALGORITHM = {"bsl": "none", "rbsl-mean": "mean-adjust", "rbsl-var": "variance-adjust"}
NEURAL_ALGORITHMS = ("npe", "tsnpe", "nle", "rsnl")
BSL_BURN_IN_FRACTION = 0.1
# wall-clock artefacts live outside the stage directories, which stay byte-reproducible
TIMING_DIR = "timing"

# seed stream children of the run seed
OBSERVED_STREAM, PRE_ANALYSIS_STREAM, INFER_STREAM, ANALYSE_STREAM = 0, 1, 2, 3


class PipelineError(Exception):
    """Custom exception for pipeline failures caused by run inputs."""
    pass


class MissingArtifactError(PipelineError):
    """A stage needs files an earlier stage should have written."""
    pass


@dataclass
class PipelineOutcome:
    stage: str
    run_dir: Path
    status: str
    total_simulations: int
    artifacts: List[str] = field(default_factory=list)


def build_model(config: Dict[str, Any]) -> SimulatorModel:
    name = config["model"]
    section = config.get("models", {}).get(name, {})
    if name == "toy-gaussian":
        return ToyGaussianModel(ToyGaussianConfig.from_settings(section))
    if name == "bvcbm":
        return BvcbmModel(BvcbmParams.from_settings(section))
    if name == "invasion":
        return InvasionModel(InvasionConfig.from_settings(section))
    if name == "external":
        return ExternalSimulatorModel.from_settings(section)
    raise PipelineError(f"Unknown model '{name}'.")


def default_run_dir(config: Dict[str, Any], output_root: Path) -> Path:
    if config.get("output_dir"):
        return Path(config["output_dir"])
    return Path(output_root) / f"{config['model']}_{config.get('algorithm', 'smc-abc')}_seed{config.get('seed', 0)}"


def load_dataset(path: Path) -> np.ndarray:
    """Reads observed summaries: every numeric cell of a header-less CSV, row-major."""
    try:
        frame = pd.read_csv(path, header=None)
        values = frame.apply(pd.to_numeric, errors="raise").to_numpy(dtype=np.float64).reshape(-1)
    except (OSError, ValueError) as e:
        raise PipelineError(f"Could not read dataset {path}: {e}") from e
    values = values[~np.isnan(values)]
    if values.size == 0 or not np.all(np.isfinite(values)):
        raise PipelineError(f"Dataset {path} holds no usable finite values.")
    return values


class SbiPipeline:
    """
    The three-stage workflow over one model: pre-analysis, inference and
    uncertainty analysis. Each stage writes into `<run_dir>/<stage>/` and
    records itself in the run manifest.
    """

    def __init__(self, config: Dict[str, Any], run_dir: Path,
                 progress_callback: Optional[Callable[[int, str], None]] = None):
        self.logger = get_application_logger()
        self.config = config
        self.run_dir = Path(run_dir)
        self.seed = SeedStream(int(config.get("seed", 0)))
        self.model = build_model(config)
        self.counter = SimulationCounter()
        self.engine = SimulationEngine(self.model, n_jobs=int(config.get("threads", 1)),
                                       max_retries=int(config.get("max_retries", 5)), counter=self.counter)
        self.diagnostics = DiagnosticsRunner(self.engine, progress_callback)
        self._timing: Optional[Dict[str, Any]] = None
        self._external_progress_callback = progress_callback
        self.logger.info(f"SbiPipeline initialized for model '{self.model.name}' in {self.run_dir}.")

    def _update_progress(self, percent: int, message: str, level: str = "info"):
        if self._external_progress_callback:
            self._external_progress_callback(int(percent), message)
        self.logger.log(getattr(logging, level.upper()), f"PIPELINE_PROGRESS: {message}")

    @property
    def names(self) -> List[str]:
        return list(self.model.prior.names)

    def true_theta(self) -> Optional[np.ndarray]:
        section = self.config.get("models", {}).get(self.config["model"], {})
        values = section.get("true_theta")
        if not values:
            return None
        theta = np.asarray(values, dtype=np.float64).reshape(-1)
        if theta.size != self.model.param_dim:
            raise PipelineError(f"true_theta has {theta.size} values, model '{self.model.name}' "
                                f"has {self.model.param_dim} parameters.")
        return theta

    def observed(self) -> np.ndarray:
        """Dataset summaries if a path is configured, otherwise a synthetic dataset at true_theta."""
        if self.config.get("dataset"):
            observed = load_dataset(Path(self.config["dataset"]))
            if isinstance(self.model, ExternalSimulatorModel):
                self.model.calibration.check(observed.size)
            elif observed.size != self.model.summary_dim:
                raise PipelineError(f"Dataset has {observed.size} values, model '{self.model.name}' "
                                    f"produces {self.model.summary_dim} summaries.")
            return observed
        theta = self.true_theta()
        if theta is None:
            raise PipelineError(f"No dataset given and models.{self.config['model']}.true_theta is not set.")
        self.logger.info(f"Simulating synthetic observed data at true_theta={theta}.")
        return self.model.simulate_summary(theta, self.seed.child(OBSERVED_STREAM))

    def _observed_frame(self, observed: np.ndarray) -> pd.DataFrame:
        return pd.DataFrame({"summary": np.arange(1, observed.size + 1), "value": observed})

    def _predictive_artifacts(self, index: ArtifactIndex, check: PredictiveCheck, prefix: str):
        index.csv(check.ensemble.to_frame(check.observed), f"{prefix}_bands.csv", "bands",
                  f"{check.source} predictive quantile bands per summary")
        index.json(check.to_dict(), f"{prefix}_coverage.json", "coverage",
                   f"observed coverage of the {check.source} predictive bands")

    def _write_timing(self, profile: CostProfile) -> str:
        """Cost CSVs go to `<run_dir>/timing/pre-analysis/`; the min/max/mean land in the manifest."""
        relative = f"{TIMING_DIR}/pre-analysis"
        timing = ArtifactIndex(self.run_dir / relative, "pre-analysis")
        timing.csv(profile.to_frame(), "cost.csv", "cost", "seconds per prior-predictive simulation")
        timing.csv(profile.histogram(), "cost_histogram.csv", "histogram", "simulation cost histogram")
        timing.write()
        self._timing = {"cost": profile.to_dict(), "files": [f"{relative}/{e['path']}" for e in timing.entries]}
        return relative

    def pre_analysis(self, index: ArtifactIndex) -> Dict[str, Any]:
        diag = self.config["diagnostics"]
        seed = self.seed.child(PRE_ANALYSIS_STREAM)
        observed = self.observed()
        index.csv(self._observed_frame(observed), "observed.csv", "observed", "observed summary vector")

        profile = self.diagnostics.cost(int(diag["cost_simulations"]), seed.child(0))
        timing_dir = self._write_timing(profile)

        check = self.diagnostics.predictive(observed, int(diag["predictive_simulations"]), seed.child(1),
                                            levels=diag["levels"], floor=float(diag["coverage_floor"]))
        self._predictive_artifacts(index, check, "prior_predictive")
        details: Dict[str, Any] = {"cost": {"n": profile.n, "timing_dir": timing_dir},
                                   "prior_predictive": check.to_dict()}

        anchor = self.true_theta()
        if anchor is None:
            anchor = self.model.prior.central_point()
        if diag.get("tune_m"):
            tuning = tune_m(self.engine, anchor, observed, diag["tune_m_candidates"], int(diag["tune_m_reps"]),
                            seed.child(2))
            index.csv(tuning.table, "m_tuning.csv", "m_tuning", "std of the log synthetic likelihood per m")
            details["m_tuning"] = {"selected_m": tuning.selected_m, "warning": tuning.warning}
        if diag.get("normality"):
            report = self.diagnostics.normality(anchor, int(diag["normality_m"]), seed.child(3))
            index.csv(report.table, "normality.csv", "normality", "moments and bimodality per summary")
            index.csv(report.histograms(), "normality_histograms.csv", "histogram", "summary histograms")
            details["normality_flagged"] = [k + 1 for k in report.flagged]
        index.json(details, "pre_analysis_summary.json", "summary", "pre-analysis digest")
        return details

    def _infer_smc(self, index: ArtifactIndex, observed: np.ndarray, seed: SeedStream) -> Dict[str, Any]:
        config = SmcConfig.from_settings(self.config["smc_abc"])
        result = SmcAbcSampler(self.engine, observed, config, self._external_progress_callback).run(seed)
        index.csv(result.population.to_frame(self.names), "population.csv", "population", "final particles")
        index.csv(result.trace.to_frame(), "trace.csv", "trace", "tolerance and acceptance per iteration")
        index.csv(samples_frame(result.population.thetas, self.names), "samples.csv", "samples",
                  "posterior samples")
        if result.trace.termination_reason == "budget_exhausted":
            self.logger.warning("SMC ABC stopped on the simulation budget; the final tolerance may be loose.")
        return {
            "samples": result.population.thetas,
            "termination_reason": result.trace.termination_reason,
            "final_epsilon": result.trace.final_epsilon,
            "iterations": len(result.trace.records),
        }

    def _infer_bsl(self, index: ArtifactIndex, observed: np.ndarray, seed: SeedStream, algorithm: str) -> Dict[str, Any]:
        config = BslConfig.from_settings(self.config["bsl"])
        if config.proposal_cov is None and config.pilot_iter > 0:
            cov = pilot_proposal_cov(self.engine, observed, config, seed.child(0))
            config = replace(config, proposal_cov=tuple(tuple(float(v) for v in row) for row in cov))
        chains = run_bsl_chains(self.engine, observed, config, ROBUST_BY_ALGORITHM[algorithm], seed.child(1),
                                n_jobs=self.engine.n_jobs)
        burn = int(BSL_BURN_IN_FRACTION * config.n_iter)
        kept, chain_ids, gammas = [], [], []
        for c, chain in enumerate(chains):
            chain.names = tuple(self.names)
            index.csv(chain.to_frame(), f"chain_{c + 1}.csv", "chain", f"BSL chain {c + 1}")
            kept.append(chain.samples[burn:])
            chain_ids.append(np.full(len(chain.samples) - burn, c + 1))
            gammas.append(chain.gammas[burn:])
        samples = np.vstack(kept)
        index.csv(samples_frame(samples, self.names, {"chain": np.concatenate(chain_ids)}), "samples.csv",
                  "samples", f"posterior samples after discarding the first {burn} iterations")
        details: Dict[str, Any] = {
            "samples": samples,
            "acceptance_rates": [chain.acceptance_rate for chain in chains],
            "burn_in": burn,
        }
        if algorithm != "bsl":
            details["gamma_median"] = np.median(np.vstack(gammas), axis=0).tolist()
        return details

    def _infer_neural(self, index: ArtifactIndex, observed: np.ndarray, seed: SeedStream, algorithm: str) -> Dict[str, Any]:
        section = self.config["neural"]
        runner = NeuralSbiRunner(self.engine, observed, TrainingConfig.from_settings(section),
                                 NeuralConfig.from_settings(section), McmcConfig.from_settings(self.config["mcmc"]),
                                 self._external_progress_callback)
        results = runner.run(algorithm, seed)
        frames, rounds = [], []
        for e, result in enumerate(results):
            frames.append(samples_frame(result.samples, self.names, {"ensemble_seed": np.full(len(result.samples), e + 1)}))
            for record in result.rounds:
                rounds.append({"ensemble_seed": e + 1, "round": record.round, "n_simulations": record.n_simulations,
                               "cum_sims": record.cum_sims, "validation_loss": record.validation_loss,
                               **record.extra})
            json_path, bin_path = result.estimator.save(index.root / f"estimator_{e + 1}")
            index.add(json_path, "estimator", "estimator architecture and normalisation")
            index.add(bin_path, "estimator", "estimator weights")
            if result.gammas is not None:
                gamma_frame = pd.DataFrame(result.gammas, columns=[f"gamma_{k + 1}" for k in range(result.gammas.shape[1])])
                index.csv(gamma_frame, f"gammas_{e + 1}.csv", "gammas", "adjustment parameter draws")
        samples_table = pd.concat(frames, ignore_index=True)
        index.csv(samples_table, "samples.csv", "samples", "posterior samples per ensemble seed")
        index.csv(pd.DataFrame(rounds), "rounds.csv", "rounds", "simulations and validation loss per round")
        details: Dict[str, Any] = {
            "samples": results[0].samples,
            "per_seed_simulations": [r.total_simulations for r in results],
            "per_seed_mean": [r.samples.mean(axis=0).tolist() for r in results],
        }
        if results[0].leakage is not None:
            details["leakage"] = [r.leakage for r in results]
        if results[0].gammas is not None:
            details["gamma_median"] = [np.median(r.gammas, axis=0).tolist() for r in results]
        return details

    def infer(self, index: ArtifactIndex) -> Dict[str, Any]:
        algorithm = self.config.get("algorithm", "smc-abc")
        seed = self.seed.child(INFER_STREAM)
        observed = self.observed()
        index.csv(self._observed_frame(observed), "observed.csv", "observed", "observed summary vector")
        self._update_progress(0, f"Running {algorithm} on '{self.model.name}'...")
        if algorithm == "smc-abc":
            details = self._infer_smc(index, observed, seed)
        elif algorithm in ROBUST_BY_ALGORITHM:
            details = self._infer_bsl(index, observed, seed, algorithm)
        elif algorithm in NEURAL_ALGORITHMS:
            details = self._infer_neural(index, observed, seed, algorithm)
        else:
            raise PipelineError(f"Unknown algorithm '{algorithm}'.")
        samples = details.pop("samples")
        summary = {
            "algorithm": algorithm,
            "model": self.model.name,
            "parameters": self.names,
            "total_simulations": self.counter.count,
            "posterior_mean": dict(zip(self.names, np.mean(samples, axis=0).tolist())),
            **details,
        }
        index.json(summary, "inference_summary.json", "summary", "inference digest")
        self._update_progress(100, f"{algorithm} finished after {self.counter.count} simulations.")
        return summary

    def _sample_sources(self) -> List[Dict[str, Any]]:
        listed = self.config.get("analyse", {}).get("samples")
        if listed:
            return [dict(entry) for entry in listed]
        samples_path = self.run_dir / "infer" / "samples.csv"
        summary_path = self.run_dir / "infer" / "inference_summary.json"
        if not samples_path.exists() or not summary_path.exists():
            raise MissingArtifactError(f"No posterior samples at {samples_path}; run 'infer' first or list "
                                       f"files under analyse.samples.")
        summary = read_json(summary_path)
        return [{"algorithm": summary["algorithm"], "path": str(samples_path),
                 "total_simulations": summary["total_simulations"]}]

    def analyse(self, index: ArtifactIndex) -> Dict[str, Any]:
        diag = self.config["diagnostics"]
        seed = self.seed.child(ANALYSE_STREAM)
        observed = self.observed()
        sources = self._sample_sources()
        tags = [s["algorithm"] for s in sources]
        runs, details = [], {}
        for i, source in enumerate(sources):
            tag = source["algorithm"] if tags.count(source["algorithm"]) == 1 else f"{source['algorithm']}_{i + 1}"
            samples = read_samples(Path(source["path"]), self.names)
            check = self.diagnostics.predictive(observed, int(diag["predictive_simulations"]), seed.child(i),
                                                samples=samples, levels=diag["levels"],
                                                floor=float(diag["coverage_floor"]))
            self._predictive_artifacts(index, check, f"posterior_predictive_{tag}")
            index.csv(posterior_correlations(samples, self.names), f"correlations_{tag}.csv", "correlations",
                      "pairwise posterior correlations")
            index.csv(identifiability_ratio(samples, self.model.prior), f"identifiability_{tag}.csv",
                      "identifiability", "posterior to prior 95% width ratios")
            widest = next(iter(check.coverage))
            runs.append(RunSummary(tag, samples, int(source.get("total_simulations", 0)), self.names,
                                   check.coverage[widest]))
            details[tag] = check.to_dict()
        index.csv(compare_report(runs), "comparison.csv", "comparison", "per-algorithm cost and posterior summary")
        index.json(details, "analysis_summary.json", "summary", "predictive coverage per sample set")
        return details

    def run(self, stage: str) -> PipelineOutcome:
        if stage not in STAGES:
            raise PipelineError(f"Unknown stage '{stage}'. Valid choices: {', '.join(STAGES)}.")
        self._timing = None
        manifest = RunManifest(self.run_dir)
        manifest.start_stage(stage, self.config, int(self.config.get("seed", 0)))
        index = ArtifactIndex(self.run_dir / stage, stage)
        index.root.mkdir(parents=True, exist_ok=True)
        handler = {"pre-analysis": self.pre_analysis, "infer": self.infer, "analyse": self.analyse}[stage]
        try:
            details = handler(index)
        except BudgetExhaustedError:
            manifest.finish_stage("budget_exhausted", self.counter.count)
            raise
        except Exception as e:
            manifest.finish_stage("failed", self.counter.count, {"error": str(e)})
            raise
        index.write()
        status = "completed"
        if details.get("termination_reason") == "budget_exhausted":
            status = "budget_exhausted"
        record: Dict[str, Any] = {"artifacts": len(index.entries)}
        if self._timing is not None:
            record["timing"] = self._timing
        manifest.finish_stage(status, self.counter.count, record)
        return PipelineOutcome(stage, self.run_dir, status, self.counter.count, [e["path"] for e in index.entries])


def run_pipeline(config: Dict[str, Any], stage: str, run_dir: Path,
                 progress_callback: Optional[Callable[[int, str], None]] = None) -> PipelineOutcome:
    """Runs one stage of a resolved (validated and default-merged) run configuration."""
    return SbiPipeline(config, run_dir, progress_callback).run(stage)
