from dataclasses import dataclass, fields
from typing import Any, Mapping, Optional, Tuple

import numpy as np
from scipy import stats

from src.core.priors import PriorSpec
from src.core.rng import SeedStream
from src.core.simulator import SimulatorModel

SUMMARY_KINDS = ("mean", "mean_var")


class ToyGaussianError(Exception):
    """Custom exception for the Gaussian toy model."""
    pass


@dataclass(frozen=True)
class ToyGaussianConfig:
    n_obs: int = 100
    sigma: float = 1.0
    summary: str = "mean"
    prior_low: float = -10.0
    prior_high: float = 10.0
    true_theta: Tuple[float, ...] = (2.0,)

    def __post_init__(self):
        if self.n_obs < 2:
            raise ToyGaussianError("n_obs must be at least 2.")
        if self.sigma <= 0:
            raise ToyGaussianError("sigma must be positive.")
        if self.summary not in SUMMARY_KINDS:
            raise ToyGaussianError(f"Unknown summary '{self.summary}'. Valid choices: {', '.join(SUMMARY_KINDS)}.")
        object.__setattr__(self, "true_theta", tuple(float(t) for t in self.true_theta))

    @classmethod
    def from_settings(cls, settings: Optional[Mapping[str, Any]] = None) -> "ToyGaussianConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (settings or {}).items() if k in known})


class ToyGaussianModel(SimulatorModel):
    """
    n_obs draws from Normal(θ, σ²) under a Uniform prior on θ.

    The "mean" summary gives a closed-form posterior (a truncated normal),
    used as the oracle for every inference engine. "mean_var" adds the
    sample variance, which carries no information about θ.
    """
    name = "toy-gaussian"

    def __init__(self, config: ToyGaussianConfig = ToyGaussianConfig()):
        super().__init__(PriorSpec.uniform([config.prior_low], [config.prior_high], ["theta"]))
        self.config = config

    @property
    def summary_dim(self) -> int:
        return 1 if self.config.summary == "mean" else 2

    def simulate(self, theta: np.ndarray, seed: SeedStream) -> np.ndarray:
        return seed.generator().normal(float(np.asarray(theta).reshape(-1)[0]), self.config.sigma, self.config.n_obs)

    def summarize(self, raw: np.ndarray) -> np.ndarray:
        if self.config.summary == "mean":
            return np.array([raw.mean()])
        return np.array([raw.mean(), raw.var(ddof=1)])

    def summary_sd(self) -> np.ndarray:
        """Sampling standard deviation of each summary (independent of θ)."""
        n, s = self.config.n_obs, self.config.sigma
        sds = [s / np.sqrt(n)]
        if self.config.summary == "mean_var":
            sds.append(s ** 2 * np.sqrt(2.0 / (n - 1)))
        return np.array(sds)

    def analytic_posterior(self, observed_mean: float):
        """Exact posterior of θ given the observed sample mean (frozen scipy truncnorm)."""
        loc = float(observed_mean)
        scale = self.config.sigma / np.sqrt(self.config.n_obs)
        a = (self.config.prior_low - loc) / scale
        b = (self.config.prior_high - loc) / scale
        return stats.truncnorm(a, b, loc=loc, scale=scale)
