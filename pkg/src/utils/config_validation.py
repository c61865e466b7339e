import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from jsonschema import Draft7Validator

from src.core.config_manager import deep_merge
from src.core.logger import get_application_logger
from src.modules.smc_abc import SmcAbcError, SmcConfig, discard_count

MODELS = ("toy-gaussian", "bvcbm", "invasion", "external")
STAGES = ("pre-analysis", "infer", "analyse")
ALGORITHMS = ("smc-abc", "bsl", "rbsl-mean", "rbsl-var", "npe", "tsnpe", "nle", "rsnl")


class ConfigValidationError(Exception):
    """Raised with every problem found in a run configuration."""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("Invalid run configuration:\n  " + "\n  ".join(self.errors))


def _obj(properties: Dict[str, Any], required: Optional[List[str]] = None) -> Dict[str, Any]:
    schema = {"type": "object", "properties": properties, "additionalProperties": False}
    if required:
        schema["required"] = required
    return schema


def _int(minimum: Optional[int] = None) -> Dict[str, Any]:
    schema: Dict[str, Any] = {"type": "integer"}
    if minimum is not None:
        schema["minimum"] = minimum
    return schema


def _num(minimum=None, maximum=None, exclusive_min=None, exclusive_max=None) -> Dict[str, Any]:
    schema: Dict[str, Any] = {"type": "number"}
    for key, value in (("minimum", minimum), ("maximum", maximum),
                       ("exclusiveMinimum", exclusive_min), ("exclusiveMaximum", exclusive_max)):
        if value is not None:
            schema[key] = value
    return schema


_NUMBERS = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_POSITIVE = _num(exclusive_min=0)
_PROBABILITY_OPEN = _num(exclusive_min=0, exclusive_max=1)

SMC_SCHEMA = _obj({
    "n_particles": _int(2),
    "a": _PROBABILITY_OPEN,
    "c": _PROBABILITY_OPEN,
    "epsilon_target": {"type": ["number", "null"], "minimum": 0},
    "min_acceptance": _num(minimum=0, exclusive_max=1),
    "max_total_simulations": _int(1),
    "max_mcmc_steps": _int(1),
    "metric": {"enum": ["euclidean", "scaled-euclidean"]},
    "scale": {"type": ["array", "null"], "items": {"type": "number", "exclusiveMinimum": 0}},
})

BSL_SCHEMA = _obj({
    "n_iter": _int(1),
    "m": _int(3),
    "proposal_cov": {"type": ["array", "null"], "items": _NUMBERS},
    "gamma_prior_scale": _POSITIVE,
    "refresh_current": {"type": "boolean"},
    "initial_scale": _POSITIVE,
    "max_init_retries": _int(0),
    "pilot_iter": _int(0),
    "n_chains": _int(1),
})

NEURAL_SCHEMA = _obj({
    "learning_rate": _POSITIVE,
    "batch_size": _int(1),
    "max_epochs": _int(1),
    "patience": _int(1),
    "validation_fraction": _num(exclusive_min=0, exclusive_max=0.5),
    "rounds": _int(1),
    "sims_per_round": _int(1),
    "n_components": _int(1),
    "hidden_units": _int(1),
    "hidden_layers": _int(1),
    "min_pairs": _int(1),
    "posterior_draws": _int(1),
    "leakage_limit": _PROBABILITY_OPEN,
    "transform_parameters": {"type": "boolean"},
    "truncation_quantile": _PROBABILITY_OPEN,
    "threshold_source": {"enum": ["posterior", "prior"]},
    "truncation_draws": _int(1),
    "tau": _POSITIVE,
    "lambda_floor": _POSITIVE,
    "fix_gamma_zero": {"type": "boolean"},
    "ensemble_seeds": _int(1),
})

MCMC_SCHEMA = _obj({
    "n_iter": _int(1),
    "warmup": _int(0),
    "initial_scale": _POSITIVE,
    "adapt": {"type": "boolean"},
    "init_candidates": _int(1),
})

DIAGNOSTICS_SCHEMA = _obj({
    "cost_simulations": _int(1),
    "predictive_simulations": _int(50),
    "levels": {"type": "array", "items": _PROBABILITY_OPEN, "minItems": 2},
    "coverage_floor": _num(minimum=0, maximum=1),
    "normality": {"type": "boolean"},
    "normality_m": _int(1000),
    "tune_m": {"type": "boolean"},
    "tune_m_candidates": {"type": "array", "items": _int(3), "minItems": 1},
    "tune_m_reps": _int(2),
})

MODELS_SCHEMA = _obj({
    "toy-gaussian": _obj({
        "n_obs": _int(2),
        "sigma": _POSITIVE,
        "summary": {"enum": ["mean", "mean_var"]},
        "prior_low": {"type": "number"},
        "prior_high": {"type": "number"},
        "true_theta": _NUMBERS,
    }),
    "bvcbm": _obj({
        "days": _int(1),
        "p_psc": _num(minimum=0, maximum=1),
        "d_max": _POSITIVE,
        "lam": _POSITIVE,
        "dt": _POSITIVE,
        "cell_area": _POSITIVE,
        "spacing": _POSITIVE,
        "n_rings": {"type": ["integer", "null"], "minimum": 1},
        "growth_g_age": _POSITIVE,
        "growth_seed": _int(0),
        "true_theta": {**_NUMBERS, "minItems": 3, "maxItems": 3},
    }),
    "invasion": _obj({
        "width": _int(2),
        "height": _int(2),
        "density": _num(exclusive_min=0, maximum=1),
        "scratch_fraction": _num(minimum=0, exclusive_max=1),
        "phase_proportions": {"type": "array", "items": _num(minimum=0), "minItems": 3, "maxItems": 3},
        "horizon": _POSITIVE,
        "summary": {"enum": ["counts", "trajectory", "density"]},
        "initial_seed": _int(0),
        "true_theta": {**_NUMBERS, "minItems": 6, "maxItems": 6},
    }),
    "external": _obj({
        "command": {"anyOf": [{"type": "string", "minLength": 1},
                              {"type": "array", "items": {"type": "string"}, "minItems": 1}]},
        "timeout": _POSITIVE,
        "summary_dim": _int(1),
        "working_dir": {"type": "string"},
        "true_theta": _NUMBERS,
        "prior": {"type": "object"},
    }, required=["command", "prior"]),
})

RUN_SCHEMA = _obj({
    "model": {"enum": list(MODELS)},
    "stage": {"enum": list(STAGES)},
    "algorithm": {"enum": list(ALGORITHMS)},
    "dataset": {"type": "string"},
    "output_dir": {"type": "string"},
    "seed": _int(0),
    "threads": _int(0),
    "max_retries": _int(0),
    "smc_abc": SMC_SCHEMA,
    "bsl": BSL_SCHEMA,
    "neural": NEURAL_SCHEMA,
    "mcmc": MCMC_SCHEMA,
    "diagnostics": DIAGNOSTICS_SCHEMA,
    "models": MODELS_SCHEMA,
    "analyse": _obj({
        "samples": {"type": "array", "items": _obj({
            "algorithm": {"type": "string"},
            "path": {"type": "string"},
            "total_simulations": _int(0),
        }, required=["algorithm", "path"])},
    }),
}, required=["model"])


def _format_error(error) -> str:
    location = ".".join(str(p) for p in error.absolute_path) or "<root>"
    return f"{location}: {error.message}"


def schema_errors(config: Any) -> List[str]:
    """Every schema violation, sorted by location."""
    validator = Draft7Validator(RUN_SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: [str(p) for p in e.absolute_path])
    return [_format_error(e) for e in errors]


def semantic_errors(config: Dict[str, Any]) -> List[str]:
    """Checks the schema cannot express: file existence and cross-field rules."""
    errors = []
    dataset = config.get("dataset")
    if dataset and not Path(dataset).is_file():
        errors.append(f"dataset: file '{dataset}' does not exist")
    for i, entry in enumerate(config.get("analyse", {}).get("samples", [])):
        if isinstance(entry, dict) and "path" in entry and not Path(entry["path"]).is_file():
            errors.append(f"analyse.samples.{i}.path: file '{entry['path']}' does not exist")
    if config.get("model") == "external" and "external" not in config.get("models", {}):
        errors.append("models.external: required when model is 'external'")
    toy = config.get("models", {}).get("toy-gaussian", {})
    if isinstance(toy, dict) and "prior_low" in toy and "prior_high" in toy:
        if isinstance(toy["prior_low"], (int, float)) and isinstance(toy["prior_high"], (int, float)) \
                and toy["prior_low"] >= toy["prior_high"]:
            errors.append("models.toy-gaussian: prior_low must be below prior_high")
    smc = config.get("smc_abc", {})
    if isinstance(smc, dict):
        n = smc.get("n_particles", SmcConfig.n_particles)
        a = smc.get("a", SmcConfig.a)
        if isinstance(n, int) and isinstance(a, (int, float)) and n >= 2 and 0 < a < 1:
            try:
                discard_count(n, a)
            except SmcAbcError:
                errors.append(f"smc_abc.a: a·n_particles = {a * n:g} replaces no particle; it must be at least 1")
    levels = config.get("diagnostics", {}).get("levels")
    if isinstance(levels, list) and all(isinstance(q, (int, float)) for q in levels):
        if any(b <= a for a, b in zip(levels, levels[1:])):
            errors.append("diagnostics.levels: band levels must be strictly increasing")
    return errors


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigValidationError([f"{source}: line {e.lineno}, column {e.colno}: {e.msg}"])


@dataclass
class ValidationResult:
    config: Optional[Dict[str, Any]]
    errors: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_config(path: Path, overrides: Optional[Dict[str, Any]] = None) -> ValidationResult:
    """
    Parses and validates a run configuration, collecting every error.

    Overrides (CLI flags) are applied to top-level keys before validation.
    A parse error is the only case that stops early.
    """
    logger = get_application_logger()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        return ValidationResult(None, [f"{path}: cannot read file: {e}"])
    try:
        config = parse_config_text(text, str(path))
    except ConfigValidationError as e:
        return ValidationResult(None, e.errors)
    if not isinstance(config, dict):
        return ValidationResult(None, ["<root>: run configuration must be a JSON object"])
    config.update({k: v for k, v in (overrides or {}).items() if v is not None})
    errors = schema_errors(config) + semantic_errors(config)
    for message in errors:
        logger.error(f"Config error in {path}: {message}")
    return ValidationResult(None if errors else config, errors)


def resolve_config(config: Dict[str, Any], defaults: Dict[str, Any]) -> Dict[str, Any]:
    """Deep-merges a validated run configuration over the toolkit defaults."""
    return deep_merge(defaults, config)


def load_run_config(path: Path, defaults: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    result = validate_config(path, overrides)
    if not result.ok:
        raise ConfigValidationError(result.errors)
    return resolve_config(result.config, defaults)
