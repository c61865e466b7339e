from dataclasses import dataclass, field, fields
from typing import Any, Callable, Dict, Mapping, Optional

import numpy as np

from src.core.logger import get_application_logger

# redraws the conditional block that log_target reads, given z; returns the new block
GibbsUpdate = Callable[[np.ndarray, np.random.Generator], np.ndarray]


class McmcError(Exception):
    """Custom exception for MCMC sampler errors."""
    pass


@dataclass(frozen=True)
class McmcConfig:
    """Random-walk Metropolis settings shared by the likelihood-based samplers."""
    n_iter: int = 10000
    warmup: int = 1000
    initial_scale: float = 0.1
    adapt: bool = True
    init_candidates: int = 1000

    def __post_init__(self):
        if self.n_iter < 1:
            raise McmcError("n_iter must be at least 1.")
        if self.warmup < 0:
            raise McmcError("warmup must be non-negative.")
        if self.initial_scale <= 0:
            raise McmcError("initial_scale must be positive.")

    @classmethod
    def from_settings(cls, settings: Optional[Mapping[str, Any]] = None) -> "McmcConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (settings or {}).items() if k in known})


@dataclass
class McmcResult:
    samples: np.ndarray
    log_target: np.ndarray
    accepted: np.ndarray
    proposal_cov: np.ndarray
    extras: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if self.accepted.size else 0.0


def scaled_empirical_cov(samples: np.ndarray, jitter: float = 1e-10) -> np.ndarray:
    """2.38²/p times the sample covariance, the usual random-walk scaling."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    p = samples.shape[1]
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    cov = 0.5 * (cov + cov.T) + jitter * np.eye(p)
    return (2.38 ** 2 / p) * cov


def random_walk_metropolis(log_target: Callable[[np.ndarray], float], z0: np.ndarray, config: McmcConfig,
                           rng: np.random.Generator, proposal_cov: Optional[np.ndarray] = None,
                           gibbs_update: Optional[GibbsUpdate] = None) -> McmcResult:
    """
    Gaussian random-walk Metropolis in unbounded space.

    The proposal covariance is adapted from the running chain during warm-up
    only (Haario-style) and frozen afterwards; the returned chain holds the
    `n_iter` post-warm-up states.

    Args:
        log_target: Unnormalized log-density of z.
        z0: Starting point with finite log_target.
        config (McmcConfig): Chain settings.
        rng (np.random.Generator): Source of randomness.
        proposal_cov (np.ndarray, optional): Initial proposal covariance.
        gibbs_update (GibbsUpdate, optional): Block update run after every z step
            (Metropolis-within-Gibbs). The target is re-evaluated afterwards and
            post-warm-up block states are returned in `extras["gibbs"]`.

    Returns:
        McmcResult: Chain, log-target values and acceptance flags.
    """
    logger = get_application_logger()
    z = np.asarray(z0, dtype=np.float64).copy()
    p = z.size
    current = float(log_target(z))
    if not np.isfinite(current):
        raise McmcError(f"Log target is not finite at the initial point {z}.")
    cov = np.eye(p) * config.initial_scale ** 2 if proposal_cov is None else np.atleast_2d(proposal_cov).astype(np.float64)
    chol = np.linalg.cholesky(cov + 1e-12 * np.eye(p))

    total = config.warmup + config.n_iter
    samples = np.empty((config.n_iter, p))
    values = np.empty(config.n_iter)
    accepted = np.zeros(config.n_iter, dtype=bool)
    warm_history = np.empty((config.warmup, p)) if config.warmup else None
    adapt_every = max(50, config.warmup // 10) if config.warmup else 0
    blocks = []

    for it in range(total):
        proposal = z + chol @ rng.standard_normal(p)
        candidate = float(log_target(proposal))
        accept = np.isfinite(candidate) and np.log(rng.uniform()) < candidate - current
        if accept:
            z, current = proposal, candidate
        if gibbs_update is not None:
            block = np.asarray(gibbs_update(z, rng), dtype=np.float64)
            current = float(log_target(z))
        if it < config.warmup:
            warm_history[it] = z
            if config.adapt and (it + 1) % adapt_every == 0 and it + 1 >= 2 * p + 2:
                chol = np.linalg.cholesky(scaled_empirical_cov(warm_history[: it + 1]) + 1e-12 * np.eye(p))
        else:
            k = it - config.warmup
            samples[k], values[k], accepted[k] = z, current, accept
            if gibbs_update is not None:
                blocks.append(block)

    extras = {"gibbs": np.array(blocks).reshape(config.n_iter, -1)} if gibbs_update is not None else {}
    result = McmcResult(samples, values, accepted, chol @ chol.T, extras)
    logger.debug(f"Random-walk Metropolis finished: {config.n_iter} draws, acceptance {result.acceptance_rate:.3f}.")
    return result


def slice_sample_1d(log_f: Callable[[float], float], x0: float, rng: np.random.Generator,
                    width: float = 1.0, max_steps_out: int = 50) -> float:
    """
    One univariate slice-sampling update with stepping out and shrinkage.

    Args:
        log_f: Unnormalized log-density, finite at x0.
        x0 (float): Current point.
        rng (np.random.Generator): Source of randomness.
        width (float): Initial bracket width.
        max_steps_out (int): Cap on stepping-out expansions per side.

    Returns:
        float: The new state.
    """
    log_y = log_f(x0) + np.log(rng.uniform())
    left = x0 - width * rng.uniform()
    right = left + width
    j = int(np.floor(max_steps_out * rng.uniform()))
    k = max_steps_out - 1 - j
    while j > 0 and log_f(left) > log_y:
        left -= width
        j -= 1
    while k > 0 and log_f(right) > log_y:
        right += width
        k -= 1
    while True:
        x1 = rng.uniform(left, right)
        if log_f(x1) > log_y:
            return float(x1)
        if x1 < x0:
            left = x1
        else:
            right = x1
        if right - left < 1e-14:
            return float(x0)


def laplace_logpdf(x: np.ndarray, scale: np.ndarray) -> float:
    """Sum of independent Laplace(0, scale) log-densities."""
    x = np.asarray(x, dtype=np.float64)
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), x.shape)
    return float(np.sum(-np.log(2.0 * scale) - np.abs(x) / scale))
