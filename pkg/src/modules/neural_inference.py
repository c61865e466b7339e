import logging
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from src.core.logger import get_application_logger
from src.core.priors import BoundTransform, PriorSpec
from src.core.rng import SeedStream
from src.core.simulator import SimulationEngine
from src.modules.cnde import ConditionalDensityEstimator, TrainingConfig, train_cnde
from src.modules.mcmc import McmcConfig, laplace_logpdf, random_walk_metropolis, slice_sample_1d

ProgressCallback = Callable[[int, str], None]
LogLikelihood = Callable[[np.ndarray], float]

THRESHOLD_SOURCES = ("prior", "posterior")


class NeuralInferenceError(Exception):
    """Custom exception for neural SBI errors."""
    pass


class LeakageError(NeuralInferenceError):
    """Raised when almost all posterior-estimator mass falls outside the prior."""
    pass


class TruncationError(NeuralInferenceError):
    """Raised when the truncated proposal region contains no prior draws."""
    pass


@dataclass(frozen=True)
class NeuralConfig:
    posterior_draws: int = 1000
    leakage_limit: float = 0.99
    transform_parameters: bool = False
    truncation_quantile: float = 1e-3
    threshold_source: str = "prior"
    truncation_draws: int = 10000
    tau: float = 0.3
    lambda_floor: float = 1e-2
    fix_gamma_zero: bool = False
    ensemble_seeds: int = 1

    def __post_init__(self):
        if self.posterior_draws < 1:
            raise NeuralInferenceError("posterior_draws must be at least 1.")
        if not 0.0 < self.leakage_limit < 1.0:
            raise NeuralInferenceError("leakage_limit must lie in (0, 1).")
        if not 0.0 < self.truncation_quantile < 1.0:
            raise NeuralInferenceError("truncation_quantile must lie in (0, 1).")
        if self.threshold_source not in THRESHOLD_SOURCES:
            raise NeuralInferenceError(f"Unknown threshold_source '{self.threshold_source}'. "
                                       f"Valid choices: {', '.join(THRESHOLD_SOURCES)}.")
        if self.tau <= 0 or self.lambda_floor <= 0:
            raise NeuralInferenceError("tau and lambda_floor must be positive.")
        if self.ensemble_seeds < 1:
            raise NeuralInferenceError("ensemble_seeds must be at least 1.")

    @classmethod
    def from_settings(cls, settings: Optional[Mapping[str, Any]] = None) -> "NeuralConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (settings or {}).items() if k in known})


@dataclass(frozen=True)
class RsnlAdjustment:
    """Γ lives in standardised-summary space with Laplace(0, λ_i) priors."""
    lambdas: np.ndarray
    summary_scale: np.ndarray

    @classmethod
    def from_observed(cls, estimator: ConditionalDensityEstimator, observed_summary: np.ndarray,
                      tau: float = 0.3, floor: float = 1e-2) -> "RsnlAdjustment":
        standardized = (np.asarray(observed_summary, dtype=np.float64) - estimator.out_mean) / estimator.out_std
        return cls(np.maximum(np.abs(tau * standardized), floor), estimator.out_std.copy())

    def shifted(self, observed_summary: np.ndarray, gamma: np.ndarray) -> np.ndarray:
        return observed_summary - gamma * self.summary_scale


@dataclass
class NpeDraws:
    samples: np.ndarray
    leakage: float
    n_rejected: int
    n_accepted: int


@dataclass
class PosteriorChain:
    samples: np.ndarray
    gammas: Optional[np.ndarray]
    log_target: np.ndarray
    accepted: np.ndarray

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if self.accepted.size else 0.0


@dataclass
class RoundRecord:
    round: int
    n_simulations: int
    cum_sims: int
    validation_loss: float
    extra: Dict[str, float] = field(default_factory=dict)


@dataclass
class NeuralResult:
    algorithm: str
    samples: np.ndarray
    estimator: ConditionalDensityEstimator
    rounds: List[RoundRecord]
    total_simulations: int
    gammas: Optional[np.ndarray] = None
    leakage: Optional[float] = None


def mixture_logpdf(y: np.ndarray, params: Tuple[np.ndarray, np.ndarray, np.ndarray]) -> float:
    """Diagonal-mixture log-density from precomputed raw-space mixture parameters."""
    log_w, mu, scale = params
    z = (np.asarray(y, dtype=np.float64) - mu) / scale
    log_comp = np.sum(-0.5 * z ** 2 - np.log(scale) - 0.5 * np.log(2.0 * np.pi), axis=1)
    return float(logsumexp(log_w + log_comp))


def npe_sample(estimator: ConditionalDensityEstimator, observed: np.ndarray, n: int, prior: PriorSpec,
               rng: np.random.Generator, transform: Optional[BoundTransform] = None,
               leakage_limit: float = 0.99) -> NpeDraws:
    """
    n posterior draws at the observed conditioner, rejecting draws outside the
    prior support. Leakage is the rejected fraction of everything drawn.

    Raises:
        LeakageError: If leakage exceeds `leakage_limit`.
    """
    if estimator.direction != "posterior":
        raise NeuralInferenceError("npe_sample needs a posterior-direction estimator.")
    accepted: List[np.ndarray] = []
    n_accepted, n_drawn = 0, 0
    max_drawn = int(np.ceil(n / (1.0 - leakage_limit))) + n
    while n_accepted < n and n_drawn < max_drawn:
        batch = estimator.sample(observed, n, rng)
        if transform is not None:
            batch, _ = transform.inverse(batch)
        keep = prior.in_support(batch)
        accepted.append(batch[keep])
        n_accepted += int(np.sum(keep))
        n_drawn += n
    n_rejected = n_drawn - n_accepted
    leakage = n_rejected / n_drawn if n_drawn else 0.0
    if n_accepted < n or leakage > leakage_limit:
        raise LeakageError(f"Posterior estimator leaks {leakage:.4f} of its mass outside the prior.")
    return NpeDraws(np.vstack(accepted)[:n], leakage, n_rejected, n_accepted)


def _posterior_log_q(estimator: ConditionalDensityEstimator, thetas: np.ndarray, observed: np.ndarray,
                     transform: Optional[BoundTransform]) -> np.ndarray:
    if transform is None:
        return estimator.log_prob(thetas, observed)
    z, log_jac = transform.forward(thetas)
    return estimator.log_prob(z, observed) + log_jac


def truncation_threshold(estimator: ConditionalDensityEstimator, prior: PriorSpec, observed: np.ndarray,
                         config: NeuralConfig, rng: np.random.Generator,
                         transform: Optional[BoundTransform] = None) -> float:
    """log q_ε: the `truncation_quantile` quantile of log q(θ|y) over reference draws."""
    if config.threshold_source == "prior":
        reference = prior.sample(rng, config.truncation_draws)
    else:
        reference = npe_sample(estimator, observed, config.truncation_draws, prior, rng, transform,
                               config.leakage_limit).samples
    return float(np.quantile(_posterior_log_q(estimator, reference, observed, transform), config.truncation_quantile))


def truncated_prior_sample(estimator: ConditionalDensityEstimator, prior: PriorSpec, observed: np.ndarray,
                           n: int, threshold: float, rng: np.random.Generator,
                           transform: Optional[BoundTransform] = None, batch_size: int = 10000,
                           max_batches: int = 1000) -> Tuple[np.ndarray, float]:
    """
    Prior draws restricted to {θ : log q(θ|y) ≥ threshold} by rejection.

    Returns:
        (draws, retained fraction of the prior draws examined)
    """
    kept: List[np.ndarray] = []
    n_kept, n_seen = 0, 0
    for _ in range(max_batches):
        batch = prior.sample(rng, batch_size)
        inside = _posterior_log_q(estimator, batch, observed, transform) >= threshold
        kept.append(batch[inside])
        n_kept += int(np.sum(inside))
        n_seen += batch_size
        if n_kept == 0:
            raise TruncationError("Truncated region is empty: every prior draw fell below the threshold.")
        if n_kept >= n:
            break
    if n_kept < n:
        raise TruncationError(f"Only {n_kept} of {n} truncated draws found after {n_seen} prior draws.")
    return np.vstack(kept)[:n], n_kept / n_seen


def _best_prior_start(prior: PriorSpec, log_target: Callable[[np.ndarray], float], n_candidates: int,
                      rng: np.random.Generator) -> np.ndarray:
    transform = prior.transform()
    z, _ = transform.forward(prior.sample(rng, max(1, n_candidates)))
    values = np.array([log_target(row) for row in z])
    if not np.any(np.isfinite(values)):
        raise NeuralInferenceError("Learned log-density is non-finite at every initialisation candidate.")
    return z[int(np.nanargmax(np.where(np.isfinite(values), values, -np.inf)))]


def nle_posterior_sample(estimator: Optional[ConditionalDensityEstimator], prior: PriorSpec,
                         observed_summary: np.ndarray, config: McmcConfig, seed: SeedStream,
                         log_likelihood: Optional[LogLikelihood] = None) -> PosteriorChain:
    """
    Random-walk Metropolis in transformed space on prior × learned likelihood.

    Args:
        estimator: Likelihood-direction estimator (ignored when `log_likelihood` is given).
        log_likelihood: Optional θ ↦ log p(S(y)|θ) replacing the learned likelihood.
    """
    if log_likelihood is None:
        if estimator is None or estimator.direction != "likelihood":
            raise NeuralInferenceError("nle_posterior_sample needs a likelihood-direction estimator.")
        observed = np.atleast_2d(np.asarray(observed_summary, dtype=np.float64))
        log_likelihood = lambda theta: float(estimator.log_prob(observed, theta)[0])
    transform = prior.transform()

    def log_target(z: np.ndarray) -> float:
        theta, _ = transform.inverse(z)
        return log_likelihood(theta) + float(prior.log_density_unbounded(z))

    z0 = _best_prior_start(prior, log_target, config.init_candidates, seed.child(0).generator())
    chain = random_walk_metropolis(log_target, z0, config, seed.child(1).generator())
    thetas, _ = transform.inverse(chain.samples)
    return PosteriorChain(thetas, None, chain.log_target, chain.accepted)


class _GammaBlock:
    """Γ as the Gibbs block of the RSNL chain: one slice update per γ_i given z."""

    def __init__(self, joint_log_target: Callable[[np.ndarray, np.ndarray], float], lambdas: np.ndarray):
        self.joint_log_target = joint_log_target
        self.lambdas = lambdas
        self.gamma = np.zeros(lambdas.size)

    def log_target(self, z: np.ndarray) -> float:
        return self.joint_log_target(z, self.gamma)

    def update(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        gamma = self.gamma.copy()
        for k in range(gamma.size):
            def log_f(g: float, k=k) -> float:
                trial = gamma.copy()
                trial[k] = g
                return self.joint_log_target(z, trial)
            gamma[k] = slice_sample_1d(log_f, float(gamma[k]), rng, width=2.0 * self.lambdas[k])
        self.gamma = gamma
        return gamma.copy()


def rsnl_posterior_sample(estimator: ConditionalDensityEstimator, prior: PriorSpec, observed_summary: np.ndarray,
                          config: McmcConfig, seed: SeedStream, tau: float = 0.3, lambda_floor: float = 1e-2,
                          fix_gamma_zero: bool = False) -> PosteriorChain:
    """
    Joint (θ, Γ) chain targeting q(S(y) − Γ | θ) p(θ) Π Laplace(γ_i; 0, λ_i),
    with Γ measured in standardised-summary units.
    """
    if estimator.direction != "likelihood":
        raise NeuralInferenceError("rsnl_posterior_sample needs a likelihood-direction estimator.")
    if tau <= 0:
        raise NeuralInferenceError("tau must be positive.")
    observed = np.asarray(observed_summary, dtype=np.float64).reshape(-1)
    if fix_gamma_zero:
        chain = nle_posterior_sample(estimator, prior, observed, config, seed)
        chain.gammas = np.zeros((len(chain.samples), observed.size))
        return chain
    adjustment = RsnlAdjustment.from_observed(estimator, observed, tau, lambda_floor)
    transform = prior.transform()
    cache: Dict[bytes, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def params_at(z: np.ndarray):
        key = z.tobytes()
        if key not in cache:
            if len(cache) > 4:
                cache.clear()
            theta, _ = transform.inverse(z)
            cache[key] = estimator.mixture_params(theta)
        return cache[key]

    def joint_log_target(z: np.ndarray, gamma: np.ndarray) -> float:
        prior_part = float(prior.log_density_unbounded(z))
        if not np.isfinite(prior_part):
            return -np.inf
        return (mixture_logpdf(adjustment.shifted(observed, gamma), params_at(z)) + prior_part
                + laplace_logpdf(gamma, adjustment.lambdas))

    block = _GammaBlock(joint_log_target, adjustment.lambdas)
    z0 = _best_prior_start(prior, block.log_target, config.init_candidates, seed.child(0).generator())
    chain = random_walk_metropolis(block.log_target, z0, config, seed.child(1).generator(), gibbs_update=block.update)
    thetas, _ = transform.inverse(chain.samples)
    get_application_logger().debug(f"RSNL Γ prior scales: {adjustment.lambdas}.")
    return PosteriorChain(thetas, chain.extras["gibbs"], chain.log_target, chain.accepted)


class NeuralSbiRunner:
    """Runs NPE, TSNPE, SNLE and RSNL with a shared simulation engine."""

    def __init__(self, engine: SimulationEngine, observed_summary: np.ndarray,
                 training: TrainingConfig = TrainingConfig(), neural: NeuralConfig = NeuralConfig(),
                 mcmc: McmcConfig = McmcConfig(), progress_callback: Optional[ProgressCallback] = None):
        self.logger = get_application_logger()
        self.engine = engine
        self.prior = engine.prior
        self.observed = np.asarray(observed_summary, dtype=np.float64).reshape(-1)
        self.training = training
        self.neural = neural
        self.mcmc = mcmc
        self._external_progress_callback = progress_callback
        self._sims = 0

    def _update_progress(self, percent: int, message: str, level: str = "info"):
        if self._external_progress_callback:
            self._external_progress_callback(int(percent), message)
        self.logger.log(getattr(logging, level.upper()), f"NEURAL_PROGRESS: {message}")

    def _simulate(self, thetas: np.ndarray, seed: SeedStream) -> np.ndarray:
        summaries = self.engine.simulate_summaries(list(thetas), [seed.child(i) for i in range(len(thetas))])
        self._sims += len(thetas)
        return summaries

    def _posterior_transform(self) -> Optional[BoundTransform]:
        return self.prior.transform() if self.neural.transform_parameters else None

    def _train_posterior(self, thetas: np.ndarray, data: np.ndarray, seed: SeedStream) -> ConditionalDensityEstimator:
        transform = self._posterior_transform()
        outputs = thetas if transform is None else transform.forward(thetas)[0]
        return train_cnde(outputs, data, "posterior", self.training, seed)

    def run_npe(self, seed: SeedStream) -> NeuralResult:
        """One amortised round using the whole budget (rounds × sims_per_round)."""
        self._sims = 0
        n = self.training.rounds * self.training.sims_per_round
        self._update_progress(0, f"NPE: simulating {n} prior-predictive datasets.")
        thetas = self.prior.sample(seed.child(0).generator(), n)
        data = self._simulate(thetas, seed.child(1))
        estimator = self._train_posterior(thetas, data, seed.child(2))
        draws = npe_sample(estimator, self.observed, self.neural.posterior_draws, self.prior,
                           seed.child(3).generator(), self._posterior_transform(), self.neural.leakage_limit)
        record = RoundRecord(1, n, self._sims, min(estimator.history.get("validation", [np.nan])),
                             {"leakage": draws.leakage})
        self._update_progress(100, f"NPE finished: leakage {draws.leakage:.4f}, {self._sims} simulations.")
        return NeuralResult("npe", draws.samples, estimator, [record], self._sims, leakage=draws.leakage)

    def run_tsnpe(self, seed: SeedStream) -> NeuralResult:
        """`rounds` rounds; later rounds draw from the prior truncated to the previous HPD region."""
        self._sims = 0
        cfg, transform = self.training, self._posterior_transform()
        all_thetas, all_data, records = [], [], []
        estimator = None
        for r in range(cfg.rounds):
            round_seed = seed.child(r)
            retained = 1.0
            if estimator is None:
                thetas = self.prior.sample(round_seed.child(0).generator(), cfg.sims_per_round)
            else:
                rng = round_seed.child(0).generator()
                threshold = truncation_threshold(estimator, self.prior, self.observed, self.neural, rng, transform)
                thetas, retained = truncated_prior_sample(estimator, self.prior, self.observed, cfg.sims_per_round,
                                                          threshold, rng, transform)
            all_thetas.append(thetas)
            all_data.append(self._simulate(thetas, round_seed.child(1)))
            estimator = self._train_posterior(np.vstack(all_thetas), np.vstack(all_data), round_seed.child(2))
            records.append(RoundRecord(r + 1, len(thetas), self._sims, min(estimator.history["validation"]),
                                       {"retained_fraction": retained}))
            self._update_progress(int(100 * (r + 1) / cfg.rounds),
                                  f"TSNPE round {r + 1}/{cfg.rounds}: retained prior fraction {retained:.4f}.")
        draws = npe_sample(estimator, self.observed, self.neural.posterior_draws, self.prior,
                           seed.child(cfg.rounds).generator(), transform, self.neural.leakage_limit)
        return NeuralResult("tsnpe", draws.samples, estimator, records, self._sims, leakage=draws.leakage)

    def run_snle(self, seed: SeedStream, robust: bool = False) -> NeuralResult:
        """
        Sequential NLE (or RSNL when `robust`): round 1 simulates from the prior,
        later rounds from the current posterior chain; every round retrains on
        all simulations so far.
        """
        self._sims = 0
        cfg = self.training
        tag = "rsnl" if robust else "nle"
        all_thetas, all_data, records = [], [], []
        chain: Optional[PosteriorChain] = None
        estimator = None
        for r in range(cfg.rounds):
            round_seed = seed.child(r)
            if chain is None:
                thetas = self.prior.sample(round_seed.child(0).generator(), cfg.sims_per_round)
            else:
                picks = round_seed.child(0).generator().choice(len(chain.samples), cfg.sims_per_round, replace=True)
                thetas = chain.samples[picks]
            all_thetas.append(thetas)
            all_data.append(self._simulate(thetas, round_seed.child(1)))
            estimator = train_cnde(np.vstack(all_thetas), np.vstack(all_data), "likelihood", cfg, round_seed.child(2))
            chain = self._likelihood_chain(estimator, round_seed.child(3), robust)
            records.append(RoundRecord(r + 1, len(thetas), self._sims, min(estimator.history["validation"]),
                                       {"acceptance_rate": chain.acceptance_rate}))
            self._update_progress(int(100 * (r + 1) / cfg.rounds),
                                  f"{tag.upper()} round {r + 1}/{cfg.rounds}: acceptance {chain.acceptance_rate:.3f}.")
        return NeuralResult(tag, chain.samples, estimator, records, self._sims, gammas=chain.gammas)

    def _likelihood_chain(self, estimator: ConditionalDensityEstimator, seed: SeedStream, robust: bool) -> PosteriorChain:
        if robust:
            return rsnl_posterior_sample(estimator, self.prior, self.observed, self.mcmc, seed,
                                         self.neural.tau, self.neural.lambda_floor, self.neural.fix_gamma_zero)
        return nle_posterior_sample(estimator, self.prior, self.observed, self.mcmc, seed)

    def run(self, algorithm: str, seed: SeedStream) -> List[NeuralResult]:
        """Runs `algorithm` once per ensemble seed; seed e uses seed.child(e)."""
        dispatch = {
            "npe": self.run_npe,
            "tsnpe": self.run_tsnpe,
            "nle": lambda s: self.run_snle(s, robust=False),
            "rsnl": lambda s: self.run_snle(s, robust=True),
        }
        if algorithm not in dispatch:
            raise NeuralInferenceError(f"Unknown neural algorithm '{algorithm}'. Valid choices: {', '.join(dispatch)}.")
        results = []
        for e in range(self.neural.ensemble_seeds):
            results.append(dispatch[algorithm](seed.child(e)))
            if self.neural.ensemble_seeds > 1:
                self.logger.info(f"{algorithm} ensemble seed {e + 1}/{self.neural.ensemble_seeds}: "
                                 f"posterior mean {results[-1].samples.mean(axis=0)}.")
        return results
