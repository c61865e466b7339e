import logging
from dataclasses import dataclass, field, fields
from typing import Any, Callable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import linalg

from src.core.logger import get_application_logger
from src.core.rng import SeedStream
from src.core.simulator import SimulationEngine
from src.modules.mcmc import laplace_logpdf, scaled_empirical_cov, slice_sample_1d

ProgressCallback = Callable[[int, str], None]

ROBUST_MODES = ("none", "mean-adjust", "variance-adjust")
JITTER = 1e-10


class BslError(Exception):
    """Custom exception for Bayesian synthetic likelihood errors."""
    pass


class SingularCovarianceError(BslError):
    """Raised when the estimated summary covariance is singular even after jitter."""
    pass


@dataclass(frozen=True)
class BslConfig:
    n_iter: int = 10000
    m: int = 50
    proposal_cov: Optional[Tuple[Tuple[float, ...], ...]] = None
    gamma_prior_scale: float = 0.5
    refresh_current: bool = False
    initial_scale: float = 0.1
    max_init_retries: int = 5
    pilot_iter: int = 500
    n_chains: int = 1

    def __post_init__(self):
        if self.n_iter < 1:
            raise BslError("n_iter must be at least 1.")
        if self.m < 3:
            raise BslError("m must be at least 3.")
        if self.gamma_prior_scale <= 0:
            raise BslError("gamma_prior_scale must be positive.")
        if self.n_chains < 1:
            raise BslError("n_chains must be at least 1.")
        if self.proposal_cov is not None:
            object.__setattr__(self, "proposal_cov", tuple(tuple(float(v) for v in row) for row in self.proposal_cov))

    @classmethod
    def from_settings(cls, settings: Optional[Mapping[str, Any]] = None) -> "BslConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (settings or {}).items() if k in known})


@dataclass(frozen=True)
class AdjustmentVector:
    gamma: np.ndarray
    mode: str = "mean"

    def __post_init__(self):
        if self.mode not in ("mean", "variance"):
            raise BslError(f"Unknown adjustment mode '{self.mode}'.")
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=np.float64).reshape(-1))


@dataclass(frozen=True)
class SyntheticLikelihoodEstimate:
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    log_density_at_observed: float

    def adjusted(self, observed: np.ndarray, adjustment: Optional[AdjustmentVector]) -> float:
        """Log synthetic likelihood with Γ applied to the mean or the covariance."""
        if adjustment is None or not np.any(adjustment.gamma):
            return self.log_density_at_observed
        if adjustment.gamma.size != self.mu_hat.size:
            raise BslError(f"Γ has dimension {adjustment.gamma.size}, summaries have {self.mu_hat.size}.")
        if adjustment.mode == "mean":
            return gaussian_logpdf(observed, mean_adjusted_mean(self.mu_hat, self.sigma_hat, adjustment.gamma), self.sigma_hat)
        return gaussian_logpdf(observed, self.mu_hat, variance_adjusted_cov(self.sigma_hat, adjustment.gamma))


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """
    Multivariate normal log-density with a relative diagonal jitter.

    Raises:
        SingularCovarianceError: If the jittered covariance is not positive definite.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    d = x.size
    jittered = cov + JITTER * np.trace(cov) / d * np.eye(d)
    try:
        chol = np.linalg.cholesky(jittered)
    except np.linalg.LinAlgError as e:
        raise SingularCovarianceError(f"Summary covariance is singular: {e}") from e
    diag = np.diag(chol)
    if not np.all(np.isfinite(diag)) or np.any(diag <= 0):
        raise SingularCovarianceError("Summary covariance is singular.")
    white = linalg.solve_triangular(chol, x - mean, lower=True)
    return float(-0.5 * d * np.log(2.0 * np.pi) - np.sum(np.log(diag)) - 0.5 * white @ white)


def mean_adjusted_mean(mu_hat: np.ndarray, sigma_hat: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """φ = mu_hat + sd ⊙ Γ where sd are the square roots of diag(sigma_hat)."""
    mu_hat = np.asarray(mu_hat, dtype=np.float64).reshape(-1)
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    diag = np.diag(np.atleast_2d(sigma_hat)).astype(np.float64)
    if mu_hat.shape != gamma.shape or diag.shape != gamma.shape:
        raise BslError("mu_hat, sigma_hat and Γ dimensions disagree.")
    if np.any(diag < 0):
        get_application_logger().warning(f"Negative variance(s) {diag[diag < 0]} in sigma_hat clamped to 0.")
        diag = np.clip(diag, 0.0, None)
    return mu_hat + np.sqrt(diag) * gamma


def variance_adjusted_cov(sigma_hat: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """V = sigma_hat + diag(sigma_hat_ii · γ_i²)."""
    sigma_hat = np.atleast_2d(np.asarray(sigma_hat, dtype=np.float64))
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    if sigma_hat.shape != (gamma.size, gamma.size):
        raise BslError("sigma_hat and Γ dimensions disagree.")
    return sigma_hat + np.diag(np.diag(sigma_hat) * gamma ** 2)


def estimate_synthetic_loglik(engine: SimulationEngine, theta: np.ndarray, m: int, observed_summary: np.ndarray,
                              seed: SeedStream) -> SyntheticLikelihoodEstimate:
    """
    Gaussian synthetic likelihood from m simulations at θ.

    Args:
        engine (SimulationEngine): Runs (and counts) the simulations.
        theta: Parameter vector.
        m (int): Number of simulations; needs m ≥ d + 2.
        observed_summary: S(y).
        seed (SeedStream): Simulation k uses seed.child(k).

    Returns:
        SyntheticLikelihoodEstimate: Sample mean, unbiased sample covariance and
                                     the log-density of S(y) under them.
    """
    observed_summary = np.asarray(observed_summary, dtype=np.float64).reshape(-1)
    d = observed_summary.size
    if m < d + 2:
        raise BslError(f"m={m} is too small for {d} summaries (need m ≥ {d + 2}).")
    summaries = engine.simulate_summaries([theta] * m, [seed.child(k) for k in range(m)])
    mu_hat = summaries.mean(axis=0)
    sigma_hat = np.atleast_2d(np.cov(summaries, rowvar=False, ddof=1))
    sigma_hat = 0.5 * (sigma_hat + sigma_hat.T)
    return SyntheticLikelihoodEstimate(mu_hat, sigma_hat, gaussian_logpdf(observed_summary, mu_hat, sigma_hat))


@dataclass
class MTuningResult:
    selected_m: int
    table: pd.DataFrame
    warning: bool = False


def tune_m(engine: SimulationEngine, theta_central: np.ndarray, observed_summary: np.ndarray,
           candidate_ms: Sequence[int], reps: int, seed: SeedStream,
           target: Tuple[float, float] = (1.0, 2.0)) -> MTuningResult:
    """
    Picks the smallest m whose std of the log synthetic likelihood lies in `target`.

    Falls back to the candidate closest to the middle of the target range and
    sets the warning flag when no candidate qualifies.
    """
    logger = get_application_logger()
    observed_summary = np.asarray(observed_summary, dtype=np.float64).reshape(-1)
    rows = []
    for i, m in enumerate(sorted(int(c) for c in candidate_ms)):
        values, singular = [], 0
        if m >= observed_summary.size + 2:
            for r in range(reps):
                try:
                    est = estimate_synthetic_loglik(engine, theta_central, m, observed_summary, seed.child(i).child(r))
                    values.append(est.log_density_at_observed)
                except SingularCovarianceError:
                    singular += 1
        std = float(np.std(values, ddof=1)) if len(values) >= 2 else float("nan")
        rows.append({"m": m, "std_loglik": std, "n_valid": len(values), "n_singular": singular})
        logger.info(f"BSL m-tuning: m={m}, std(log SL)={std:.4g} ({len(values)} valid, {singular} singular).")

    table = pd.DataFrame(rows, columns=["m", "std_loglik", "n_valid", "n_singular"])
    valid = table[np.isfinite(table["std_loglik"])]
    if valid.empty:
        raise SingularCovarianceError("Every candidate m produced singular summary covariances.")
    lo, hi = target
    inside = valid[(valid["std_loglik"] >= lo) & (valid["std_loglik"] <= hi)]
    if not inside.empty:
        return MTuningResult(int(inside["m"].iloc[0]), table, False)
    centre = 0.5 * (lo + hi)
    best = valid.iloc[int(np.argmin(np.abs(valid["std_loglik"].to_numpy() - centre)))]
    logger.warning(f"No candidate m gives std(log SL) in [{lo}, {hi}]; using m={int(best['m'])} "
                   f"(std {best['std_loglik']:.4g}).")
    return MTuningResult(int(best["m"]), table, True)


@dataclass
class BslChain:
    samples: np.ndarray
    gammas: np.ndarray
    loglik: np.ndarray
    accepted: np.ndarray
    robust: str = "none"
    names: Tuple[str, ...] = field(default=())

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if self.accepted.size else 0.0

    def to_frame(self) -> pd.DataFrame:
        names = list(self.names) or [f"theta_{i + 1}" for i in range(self.samples.shape[1])]
        frame = pd.DataFrame({"iter": np.arange(1, len(self.samples) + 1)})
        for i, name in enumerate(names):
            frame[name] = self.samples[:, i]
        for k in range(self.gammas.shape[1]):
            frame[f"gamma_{k + 1}"] = self.gammas[:, k]
        frame["loglik"] = self.loglik
        frame["accepted"] = self.accepted.astype(int)
        return frame


class BslSampler:
    """
    Random-walk Metropolis on the (robust) synthetic likelihood.

    θ moves in the prior's unbounded space. The estimate at the current point
    is reused until a proposal is accepted unless `refresh_current` is set.
    With a robust mode, each iteration also updates every γ_i by slice
    sampling under a Laplace(0, gamma_prior_scale) prior.
    """

    def __init__(self, engine: SimulationEngine, observed_summary: np.ndarray, config: BslConfig = BslConfig(),
                 robust: str = "none", progress_callback: Optional[ProgressCallback] = None):
        if robust not in ROBUST_MODES:
            raise BslError(f"Unknown robust mode '{robust}'. Valid choices: {', '.join(ROBUST_MODES)}.")
        self.logger = get_application_logger()
        self.engine = engine
        self.prior = engine.prior
        self.transform = self.prior.transform()
        self.observed = np.asarray(observed_summary, dtype=np.float64).reshape(-1)
        self.config = config
        self.robust = robust
        self._external_progress_callback = progress_callback

    def _update_progress(self, percent: int, message: str, level: str = "info"):
        if self._external_progress_callback:
            self._external_progress_callback(int(percent), message)
        self.logger.log(getattr(logging, level.upper()), f"BSL_PROGRESS: {message}")

    def _adjustment(self, gamma: np.ndarray) -> Optional[AdjustmentVector]:
        if self.robust == "none":
            return None
        return AdjustmentVector(gamma, "mean" if self.robust == "mean-adjust" else "variance")

    def _initial_estimate(self, theta: np.ndarray, seed: SeedStream) -> SyntheticLikelihoodEstimate:
        last_error = None
        for attempt in range(self.config.max_init_retries + 1):
            stream = seed if attempt == 0 else seed.retry(attempt - 1)
            try:
                return estimate_synthetic_loglik(self.engine, theta, self.config.m, self.observed, stream)
            except SingularCovarianceError as e:
                last_error = e
                self.logger.warning(f"Singular covariance at the initial point (attempt {attempt + 1}); re-estimating.")
        raise SingularCovarianceError(f"Covariance singular at the initial point after retries: {last_error}")

    def _update_gamma(self, est: SyntheticLikelihoodEstimate, gamma: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        gamma = gamma.copy()
        mode = "mean" if self.robust == "mean-adjust" else "variance"
        scale = self.config.gamma_prior_scale
        for k in range(gamma.size):
            def log_f(g: float, k=k) -> float:
                trial = gamma.copy()
                trial[k] = g
                try:
                    ll = est.adjusted(self.observed, AdjustmentVector(trial, mode))
                except SingularCovarianceError:
                    return -np.inf
                return ll + laplace_logpdf(np.array([g]), scale)
            gamma[k] = slice_sample_1d(log_f, float(gamma[k]), rng, width=scale * 2.0)
        return gamma

    def run(self, seed: SeedStream, theta0: Optional[np.ndarray] = None) -> BslChain:
        cfg = self.config
        p, d = self.prior.dim, self.observed.size
        theta = np.asarray(self.prior.central_point() if theta0 is None else theta0, dtype=np.float64).reshape(-1)
        if not self.prior.in_support(theta):
            raise BslError(f"Initial θ {theta} lies outside the prior support.")
        z, _ = self.transform.forward(theta)
        cov = np.eye(p) * cfg.initial_scale ** 2 if cfg.proposal_cov is None else np.array(cfg.proposal_cov)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as e:
            raise BslError(f"Proposal covariance is not positive definite: {e}") from e

        gamma = np.zeros(d)
        est = self._initial_estimate(theta, seed.child(0))
        current = est.adjusted(self.observed, self._adjustment(gamma)) + self.prior.log_density_unbounded(z)
        if not np.isfinite(current):
            raise BslError(f"Non-finite log synthetic likelihood at the initial point {theta}.")

        samples = np.empty((cfg.n_iter, p))
        gammas = np.zeros((cfg.n_iter, d))
        logliks = np.empty(cfg.n_iter)
        accepted = np.zeros(cfg.n_iter, dtype=bool)
        report_every = max(1, cfg.n_iter // 10)
        self._update_progress(0, f"Starting BSL chain ({self.robust}) with m={cfg.m}, n_iter={cfg.n_iter}.")

        for i in range(cfg.n_iter):
            rng = seed.child(1).child(i).generator()
            if cfg.refresh_current:
                try:
                    est = estimate_synthetic_loglik(self.engine, theta, cfg.m, self.observed, seed.child(3).child(i))
                    current = est.adjusted(self.observed, self._adjustment(gamma)) + self.prior.log_density_unbounded(z)
                except SingularCovarianceError:
                    self.logger.debug(f"Refresh at iteration {i} singular; keeping the stored estimate.")

            z_prop = z + chol @ rng.standard_normal(p)
            theta_prop, _ = self.transform.inverse(z_prop)
            try:
                est_prop = estimate_synthetic_loglik(self.engine, theta_prop, cfg.m, self.observed, seed.child(2).child(i))
                proposed = est_prop.adjusted(self.observed, self._adjustment(gamma)) + self.prior.log_density_unbounded(z_prop)
            except SingularCovarianceError:
                self.logger.debug(f"Singular covariance at proposal {theta_prop}; rejected.")
                est_prop, proposed = None, -np.inf
            if np.isfinite(proposed) and np.log(rng.uniform()) < proposed - current:
                z, theta, est, current = z_prop, theta_prop, est_prop, proposed
                accepted[i] = True

            if self.robust != "none":
                gamma = self._update_gamma(est, gamma, seed.child(4).child(i).generator())
                current = est.adjusted(self.observed, self._adjustment(gamma)) + self.prior.log_density_unbounded(z)

            samples[i] = theta
            gammas[i] = gamma
            logliks[i] = current - self.prior.log_density_unbounded(z)
            if (i + 1) % report_every == 0:
                self._update_progress(int(100 * (i + 1) / cfg.n_iter),
                                      f"Iteration {i + 1}/{cfg.n_iter}, acceptance {accepted[: i + 1].mean():.3f}")

        chain = BslChain(samples, gammas, logliks, accepted, self.robust, tuple(self.prior.names))
        level = "warning" if chain.acceptance_rate < 0.05 else "info"
        self._update_progress(100, f"BSL chain finished, acceptance rate {chain.acceptance_rate:.3f}.", level)
        return chain


def run_bsl_mcmc(engine: SimulationEngine, observed_summary: np.ndarray, config: BslConfig = BslConfig(),
                 robust: str = "none", seed: SeedStream = SeedStream(0), theta0: Optional[np.ndarray] = None,
                 progress_callback: Optional[ProgressCallback] = None) -> BslChain:
    """Runs one BSL (robust=none), RBSL mean-adjust or RBSL variance-adjust chain."""
    return BslSampler(engine, observed_summary, config, robust, progress_callback).run(seed, theta0)


def run_bsl_chains(engine: SimulationEngine, observed_summary: np.ndarray, config: BslConfig = BslConfig(),
                   robust: str = "none", seed: SeedStream = SeedStream(0), theta0: Optional[np.ndarray] = None,
                   n_jobs: int = 1) -> List[BslChain]:
    """`config.n_chains` independent chains; chain c uses seed.child(c)."""
    sampler = BslSampler(engine, observed_summary, config, robust)
    if n_jobs == 1 or config.n_chains == 1:
        return [sampler.run(seed.child(c), theta0) for c in range(config.n_chains)]
    return Parallel(n_jobs=n_jobs, backend="threading")(
        delayed(sampler.run)(seed.child(c), theta0) for c in range(config.n_chains)
    )


def pilot_proposal_cov(engine: SimulationEngine, observed_summary: np.ndarray, config: BslConfig = BslConfig(),
                       seed: SeedStream = SeedStream(0), theta0: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Runs a short plain-BSL pilot chain and returns 2.38²/p times the covariance
    of its transformed-space draws, for initialising the main chain.
    """
    pilot_cfg = BslConfig(n_iter=config.pilot_iter, m=config.m, proposal_cov=config.proposal_cov,
                          initial_scale=config.initial_scale, max_init_retries=config.max_init_retries)
    chain = run_bsl_mcmc(engine, observed_summary, pilot_cfg, "none", seed, theta0)
    z, _ = engine.prior.transform().forward(chain.samples)
    p = z.shape[1]
    if np.unique(z, axis=0).shape[0] < p + 1:
        get_application_logger().warning("Pilot chain barely moved; shrinking its initial proposal instead.")
        base = np.eye(p) * config.initial_scale ** 2 if config.proposal_cov is None else np.array(config.proposal_cov)
        return 0.25 * base
    return scaled_empirical_cov(z)
