import logging
import math
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.core.distances import make_discrepancy
from src.core.logger import get_application_logger
from src.core.rng import SeedStream
from src.core.simulator import SimulationEngine, SimulatorModel

ProgressCallback = Callable[[int, str], None]

TERMINATION_REASONS = ("min_acceptance", "target_reached", "budget_exhausted", "stagnation")


class SmcAbcError(Exception):
    """Custom exception for SMC ABC sampler errors."""
    pass


class BudgetExhaustedError(SmcAbcError):
    """Raised when the simulation budget runs out before the first iteration completes."""
    pass


@dataclass(frozen=True)
class SmcConfig:
    n_particles: int = 1000
    a: float = 0.5
    c: float = 0.01
    epsilon_target: Optional[float] = None
    min_acceptance: float = 0.01
    max_total_simulations: int = 1_000_000
    max_mcmc_steps: int = 500
    metric: str = "euclidean"
    scale: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.n_particles < 2:
            raise SmcAbcError("n_particles must be at least 2.")
        if not 0.0 < self.a < 1.0:
            raise SmcAbcError(f"Discard fraction a must lie in (0, 1), got {self.a}.")
        if not 0.0 < self.c < 1.0:
            raise SmcAbcError(f"Tuning parameter c must lie in (0, 1), got {self.c}.")
        if self.epsilon_target is not None and self.epsilon_target < 0:
            raise SmcAbcError("epsilon_target must be non-negative.")
        if not 0.0 <= self.min_acceptance < 1.0:
            raise SmcAbcError("min_acceptance must lie in [0, 1).")
        if self.max_total_simulations < 1:
            raise SmcAbcError("max_total_simulations must be positive.")
        if self.max_mcmc_steps < 1:
            raise SmcAbcError("max_mcmc_steps must be at least 1.")
        discard_count(self.n_particles, self.a)
        if self.scale is not None:
            object.__setattr__(self, "scale", tuple(float(s) for s in self.scale))

    @classmethod
    def from_settings(cls, settings: Optional[Mapping[str, Any]] = None) -> "SmcConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (settings or {}).items() if k in known})


def discard_count(n: int, a: float) -> int:
    """⌊a·N⌋ particles replaced per iteration, at least one and at most N − 1."""
    if not 0.0 < a < 1.0:
        raise SmcAbcError(f"Discard fraction a must lie in (0, 1), got {a}.")
    # tolerance keeps products such as 0.29 * 100 = 28.999... from rounding down
    n_discard = int(math.floor(a * n + 1e-9))
    if n_discard < 1:
        raise SmcAbcError(f"Discard fraction a={a} replaces no particle out of N={n}; a·N must be at least 1.")
    return min(n_discard, n - 1)


@dataclass
class ParticlePopulation:
    """N equally weighted particles stored column-wise."""
    thetas: np.ndarray
    summaries: np.ndarray
    rhos: np.ndarray

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=np.float64))
        self.summaries = np.atleast_2d(np.asarray(self.summaries, dtype=np.float64))
        self.rhos = np.asarray(self.rhos, dtype=np.float64).reshape(-1)
        if not (len(self.thetas) == len(self.summaries) == len(self.rhos)):
            raise SmcAbcError("Population arrays must have one row per particle.")

    def __len__(self) -> int:
        return len(self.rhos)

    def copy(self) -> "ParticlePopulation":
        return ParticlePopulation(self.thetas.copy(), self.summaries.copy(), self.rhos.copy())

    def mean(self) -> np.ndarray:
        return self.thetas.mean(axis=0)

    def to_frame(self, names: Sequence[str]) -> pd.DataFrame:
        frame = pd.DataFrame(self.thetas, columns=list(names))
        for k in range(self.summaries.shape[1]):
            frame[f"s_{k + 1}"] = self.summaries[:, k]
        frame["rho"] = self.rhos
        return frame


@dataclass
class SmcIteration:
    iteration: int
    epsilon: float
    p_acc: float
    r_t: int
    cum_sims: int


@dataclass
class SmcTrace:
    records: List[SmcIteration] = field(default_factory=list)
    termination_reason: Optional[str] = None
    final_epsilon: float = float("inf")
    total_simulations: int = 0

    @property
    def epsilons(self) -> np.ndarray:
        return np.array([r.epsilon for r in self.records])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.iteration, r.epsilon, r.p_acc, r.r_t, r.cum_sims) for r in self.records],
            columns=["iter", "epsilon", "p_acc", "R_t", "cum_sims"],
        )


@dataclass
class SmcResult:
    population: ParticlePopulation
    trace: SmcTrace


def adaptive_threshold(population: ParticlePopulation, a: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Next tolerance from the discard fraction.

    Returns:
        (epsilon_t, survivors, discarded): epsilon_t is the rho of the
        (N − ⌊aN⌋)-th smallest particle; the index arrays split the population
        by rho rank (ties broken by particle order).
    """
    n = len(population)
    n_keep = n - discard_count(n, a)
    order = np.argsort(population.rhos, kind="stable")
    epsilon = float(population.rhos[order[n_keep - 1]])
    return epsilon, order[:n_keep], order[n_keep:]


def compute_num_mcmc_steps(p_acc: float, c: float, cap: int = 500) -> int:
    """R_t = ⌈log c / log(1 − p_acc)⌉, with p_acc = 0 mapped to `cap`."""
    if not 0.0 < c < 1.0:
        raise SmcAbcError(f"Tuning parameter c must lie in (0, 1), got {c}.")
    if p_acc <= 0.0:
        return int(cap)
    if p_acc >= 1.0:
        return 1
    # tolerance keeps exact ratios such as p_acc = 1 - c from rounding up
    steps = math.ceil(math.log(c) / math.log(1.0 - p_acc) - 1e-9)
    return int(min(max(steps, 1), cap))


def proposal_factor(cov: np.ndarray) -> np.ndarray:
    """Square-root factor of a PSD covariance (zero directions stay zero)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    cov = 0.5 * (cov + cov.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    tol = 1e-10 * max(1.0, float(np.max(np.abs(eigvals))) if eigvals.size else 1.0)
    if np.any(eigvals < -tol):
        raise SmcAbcError(f"Proposal covariance is not positive semidefinite (min eigenvalue {eigvals.min():.3e}).")
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


def proposal_cov_from_population(population: ParticlePopulation, prior, indices: Optional[np.ndarray] = None,
                                 scale: float = 2.0) -> np.ndarray:
    """`scale` times the particle covariance in transformed (unbounded) space."""
    thetas = population.thetas if indices is None else population.thetas[indices]
    z, _ = prior.transform().forward(thetas)
    if len(z) < 2:
        return np.zeros((z.shape[1], z.shape[1]))
    return scale * np.atleast_2d(np.cov(z, rowvar=False))


class _MoveKernel:
    """MCMC-ABC move on a subset of particles, vectorised over simulations."""

    def __init__(self, engine: SimulationEngine, observed: np.ndarray, rho_fn: Callable[[np.ndarray, np.ndarray], float]):
        self.engine = engine
        self.prior = engine.prior
        self.transform = self.prior.transform()
        self.observed = observed
        self.rho_fn = rho_fn

    def step(self, population: ParticlePopulation, indices: np.ndarray, epsilon: float,
             factor: np.ndarray, seed: SeedStream) -> int:
        """One Metropolis step for every particle in `indices`; returns the accepted count."""
        if len(indices) == 0:
            return 0
        z_cur, _ = self.transform.forward(population.thetas[indices])
        z_prop = np.empty_like(z_cur)
        log_u = np.empty(len(indices))
        sim_seeds = []
        for k, j in enumerate(indices):
            particle_seed = seed.child(int(j))
            rng = particle_seed.child(0).generator()
            z_prop[k] = z_cur[k] + factor @ rng.standard_normal(z_cur.shape[1])
            log_u[k] = np.log(rng.uniform())
            sim_seeds.append(particle_seed.child(1))
        theta_prop, _ = self.transform.inverse(z_prop)
        summaries = self.engine.simulate_summaries(list(theta_prop), sim_seeds, allow_nonfinite=True)
        log_ratio = self.prior.log_density_unbounded(z_prop) - self.prior.log_density_unbounded(z_cur)
        accepted = 0
        for k, j in enumerate(indices):
            rho = self.rho_fn(self.observed, summaries[k])
            if rho <= epsilon and log_u[k] < log_ratio[k]:
                population.thetas[j] = theta_prop[k]
                population.summaries[j] = summaries[k]
                population.rhos[j] = rho
                accepted += 1
        return accepted


def resample_and_move(population: ParticlePopulation, epsilon: float, proposal_cov: np.ndarray, n_steps: int,
                      engine: SimulationEngine, observed: np.ndarray, seed: SeedStream, a: float = 0.5,
                      metric: str = "euclidean", scale: Optional[Sequence[float]] = None) -> Tuple[ParticlePopulation, float]:
    """
    Replaces the a·N worst particles by uniform draws from the survivors and
    moves each of them with `n_steps` MCMC-ABC steps at tolerance `epsilon`.

    Returns:
        (population′, p_acc) with p_acc the accepted fraction of all proposals.
    """
    _, survivors, discarded = adaptive_threshold(population, a)
    new_population = population.copy()
    _resample(new_population, survivors, discarded, seed.child(0).generator())
    kernel = _MoveKernel(engine, np.asarray(observed, dtype=np.float64), make_discrepancy(metric, scale))
    factor = proposal_factor(proposal_cov)
    accepted = 0
    for s in range(n_steps):
        accepted += kernel.step(new_population, discarded, epsilon, factor, seed.child(s + 1))
    proposals = n_steps * len(discarded)
    return new_population, (accepted / proposals if proposals else 0.0)


def _resample(population: ParticlePopulation, survivors: np.ndarray, discarded: np.ndarray, rng: np.random.Generator):
    picks = survivors[rng.integers(0, len(survivors), size=len(discarded))]
    population.thetas[discarded] = population.thetas[picks]
    population.summaries[discarded] = population.summaries[picks]
    population.rhos[discarded] = population.rhos[picks]


class SmcAbcSampler:
    """
    Adaptive SMC ABC with a discard-and-refresh tolerance schedule.

    Each iteration discards the a·N particles with the largest discrepancy,
    resamples them from the survivors, runs one trial MCMC-ABC step to measure
    the acceptance rate, and then the remaining R_t − 1 steps.
    """

    def __init__(self, engine: SimulationEngine, observed: np.ndarray, config: SmcConfig = SmcConfig(),
                 progress_callback: Optional[ProgressCallback] = None):
        self.logger = get_application_logger()
        self.engine = engine
        self.prior = engine.prior
        self.observed = np.asarray(observed, dtype=np.float64).reshape(-1)
        self.config = config
        self.rho_fn = make_discrepancy(config.metric, config.scale)
        self._external_progress_callback = progress_callback
        self._sims = 0
        self.logger.info(f"SmcAbcSampler initialized: N={config.n_particles}, a={config.a}, c={config.c}.")

    def _update_progress(self, percent: int, message: str, level: str = "info"):
        if self._external_progress_callback:
            self._external_progress_callback(int(percent), message)
        self.logger.log(getattr(logging, level.upper()), f"SMC_ABC_PROGRESS: {message}")

    def _budget_left(self) -> int:
        return self.config.max_total_simulations - self._sims

    def _initial_population(self, seed: SeedStream) -> ParticlePopulation:
        n = self.config.n_particles
        if self._budget_left() < n:
            raise BudgetExhaustedError(f"Budget of {self.config.max_total_simulations} simulations cannot cover {n} initial particles.")
        thetas = np.vstack([self.prior.sample(seed.child(i).child(0).generator()) for i in range(n)])
        summaries = self.engine.simulate_summaries(list(thetas), [seed.child(i).child(1) for i in range(n)],
                                                   allow_nonfinite=True)
        self._sims += n
        rhos = np.array([self.rho_fn(self.observed, s) for s in summaries])
        return ParticlePopulation(thetas, summaries, rhos)

    def run(self, seed: SeedStream) -> SmcResult:
        """
        Runs the sampler to termination.

        Args:
            seed (SeedStream): Root stream; child 0 seeds the initial population
                               and child t seeds iteration t.

        Returns:
            SmcResult: Final population and the per-iteration trace.
        """
        cfg = self.config
        self._sims = 0
        trace = SmcTrace()
        self._update_progress(0, f"Sampling {cfg.n_particles} particles from the prior...")
        population = self._initial_population(seed.child(0))
        kernel = _MoveKernel(self.engine, self.observed, self.rho_fn)
        previous_epsilon = float("inf")
        t = 0

        while True:
            t += 1
            epsilon, survivors, discarded = adaptive_threshold(population, cfg.a)
            target_hit = cfg.epsilon_target is not None and epsilon <= cfg.epsilon_target
            if target_hit:
                epsilon = float(cfg.epsilon_target)
            stagnant = np.all(population.rhos == population.rhos[0]) and not target_hit
            if stagnant or (np.isfinite(previous_epsilon) and epsilon >= previous_epsilon * (1.0 - 1e-12)):
                trace.termination_reason = "stagnation"
                self.logger.warning(f"Tolerance stopped decreasing at iteration {t} (epsilon={epsilon:.6g}); stopping.")
                break

            iteration_seed = seed.child(t)
            factor = proposal_factor(proposal_cov_from_population(population, self.prior, survivors))
            _resample(population, survivors, discarded, iteration_seed.child(0).generator())

            n_move = len(discarded)
            if self._budget_left() < n_move:
                if not trace.records:
                    raise BudgetExhaustedError("Simulation budget exhausted before the first SMC iteration completed.")
                trace.termination_reason = "budget_exhausted"
                break

            accepted = kernel.step(population, discarded, epsilon, factor, iteration_seed.child(1))
            self._sims += n_move
            proposals = n_move
            trial_acc = accepted / n_move if n_move else 0.0
            r_t = compute_num_mcmc_steps(trial_acc, cfg.c, cfg.max_mcmc_steps)

            out_of_budget = False
            for s in range(1, r_t):
                if self._budget_left() < n_move:
                    out_of_budget = True
                    break
                accepted += kernel.step(population, discarded, epsilon, factor, iteration_seed.child(s + 1))
                self._sims += n_move
                proposals += n_move

            if out_of_budget and not trace.records:
                raise BudgetExhaustedError("Simulation budget exhausted before the first SMC iteration completed.")

            p_acc = accepted / proposals if proposals else 0.0
            trace.records.append(SmcIteration(t, epsilon, p_acc, r_t, self._sims))
            previous_epsilon = epsilon
            self._update_progress(
                min(99, int(100 * self._sims / cfg.max_total_simulations)),
                f"Iteration {t}: epsilon={epsilon:.6g}, p_acc={p_acc:.4f}, R_t={r_t}, sims={self._sims}",
            )

            if out_of_budget:
                trace.termination_reason = "budget_exhausted"
                break
            if target_hit:
                trace.termination_reason = "target_reached"
                break
            if p_acc < cfg.min_acceptance:
                trace.termination_reason = "min_acceptance"
                break

        trace.final_epsilon = previous_epsilon if trace.records else float(np.max(population.rhos))
        trace.total_simulations = self._sims
        level = "warning" if trace.termination_reason in ("budget_exhausted", "stagnation") else "info"
        self._update_progress(100, f"Finished after {len(trace.records)} iteration(s): {trace.termination_reason}, "
                                   f"final epsilon {trace.final_epsilon:.6g}, {self._sims} simulations.", level)
        return SmcResult(population, trace)


def run_smc_abc(model: SimulatorModel, observed: np.ndarray, config: SmcConfig = SmcConfig(), seed: int = 0,
                n_jobs: int = 1, engine: Optional[SimulationEngine] = None,
                progress_callback: Optional[ProgressCallback] = None) -> Tuple[ParticlePopulation, SmcTrace]:
    """Convenience wrapper: builds an engine for `model` and runs the sampler."""
    engine = engine or SimulationEngine(model, n_jobs=n_jobs)
    result = SmcAbcSampler(engine, observed, config, progress_callback).run(SeedStream(seed))
    return result.population, result.trace
