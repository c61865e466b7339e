from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from src.core.rng import SeedStream


class PriorError(Exception):
    """Custom exception for malformed priors or parameter vectors."""
    pass


class TransformDomainError(PriorError):
    """Raised when a point on or outside a logit bound is transformed."""
    pass


def as_parameter_vector(values: Sequence[float], dim: Optional[int] = None) -> np.ndarray:
    """
    Validates and returns a parameter vector as a 1-D float64 array.

    Args:
        values: The parameter values.
        dim (int, optional): Required dimension.

    Returns:
        np.ndarray: A read-only copy of the values.
    """
    theta = np.array(values, dtype=np.float64).reshape(-1)
    if dim is not None and theta.size != dim:
        raise PriorError(f"Parameter vector has dimension {theta.size}, expected {dim}.")
    if not np.all(np.isfinite(theta)):
        raise PriorError(f"Parameter vector contains non-finite entries: {theta}")
    theta.setflags(write=False)
    return theta


@dataclass(frozen=True)
class UniformMarginal:
    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or not self.lo < self.hi:
            raise PriorError(f"Uniform marginal requires finite lo < hi, got ({self.lo}, {self.hi}).")

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        inside = (x >= self.lo) & (x <= self.hi)
        return np.where(inside, -np.log(self.hi - self.lo), -np.inf)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=size)

    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def std(self) -> float:
        return (self.hi - self.lo) / np.sqrt(12.0)

    @property
    def bounds(self) -> Tuple[float, float]:
        return self.lo, self.hi


@dataclass(frozen=True)
class LaplaceMarginal:
    location: float
    scale: float

    def __post_init__(self):
        if not (np.isfinite(self.location) and np.isfinite(self.scale)) or self.scale <= 0:
            raise PriorError(f"Laplace marginal requires finite location and scale > 0, got ({self.location}, {self.scale}).")

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return -np.log(2.0 * self.scale) - np.abs(x - self.location) / self.scale

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.laplace(self.location, self.scale, size=size)

    def mean(self) -> float:
        return self.location

    def std(self) -> float:
        return np.sqrt(2.0) * self.scale

    @property
    def bounds(self) -> Tuple[float, float]:
        return -np.inf, np.inf


Marginal = Union[UniformMarginal, LaplaceMarginal]


@dataclass(frozen=True)
class BoundTransform:
    """
    Per-dimension map from a bounded parameter space to an unbounded one.
    Uniform marginals get a logit on (lo, hi); Laplace marginals stay identity.
    """
    kinds: Tuple[str, ...]
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]

    def __post_init__(self):
        if not (len(self.kinds) == len(self.lo) == len(self.hi)):
            raise PriorError("BoundTransform kinds and bounds must have equal length.")
        for kind in self.kinds:
            if kind not in ("identity", "logit"):
                raise PriorError(f"Unknown transform kind '{kind}'.")

    @property
    def dim(self) -> int:
        return len(self.kinds)

    def _arrays(self):
        is_logit = np.array([k == "logit" for k in self.kinds])
        return is_logit, np.array(self.lo, dtype=np.float64), np.array(self.hi, dtype=np.float64)

    def forward(self, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Maps θ to unbounded z. Accepts a single vector or a (n, dim) batch.

        Returns:
            (z, log_jacobian) where log_jacobian = log|dz/dθ| summed over dimensions.
        """
        theta = np.asarray(theta, dtype=np.float64)
        is_logit, lo, hi = self._arrays()
        if np.any(is_logit):
            inner = theta[..., is_logit]
            if np.any(inner <= lo[is_logit]) or np.any(inner >= hi[is_logit]):
                raise TransformDomainError("Logit transform requires points strictly inside the bounds.")
        z = theta.copy()
        log_jac = np.zeros(theta.shape[:-1])
        if np.any(is_logit):
            width = hi[is_logit] - lo[is_logit]
            u = (theta[..., is_logit] - lo[is_logit]) / width
            z[..., is_logit] = special.logit(u)
            # dz/dθ = width / ((θ - lo)(hi - θ))
            log_jac = np.sum(np.log(width) - np.log(theta[..., is_logit] - lo[is_logit])
                             - np.log(hi[is_logit] - theta[..., is_logit]), axis=-1)
        return z, log_jac

    def inverse(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Maps unbounded z back to θ.

        Returns:
            (θ, log_jacobian) where log_jacobian = log|dθ/dz| summed over dimensions.
        """
        z = np.asarray(z, dtype=np.float64)
        is_logit, lo, hi = self._arrays()
        theta = z.copy()
        log_jac = np.zeros(z.shape[:-1])
        if np.any(is_logit):
            width = hi[is_logit] - lo[is_logit]
            zl = z[..., is_logit]
            theta[..., is_logit] = lo[is_logit] + width * special.expit(zl)
            log_jac = np.sum(np.log(width) + special.log_expit(zl) + special.log_expit(-zl), axis=-1)
        return theta, log_jac


@dataclass(frozen=True)
class PriorSpec:
    """Product of independent Uniform / Laplace marginals over model parameters."""
    marginals: Tuple[Marginal, ...]
    names: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        if len(self.marginals) == 0:
            raise PriorError("PriorSpec needs at least one marginal.")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"theta_{i + 1}" for i in range(len(self.marginals))))
        if len(self.names) != len(self.marginals):
            raise PriorError("PriorSpec names and marginals must have equal length.")

    @classmethod
    def uniform(cls, lows: Sequence[float], highs: Sequence[float], names: Sequence[str] = ()) -> "PriorSpec":
        return cls(tuple(UniformMarginal(float(lo), float(hi)) for lo, hi in zip(lows, highs)), tuple(names))

    @property
    def dim(self) -> int:
        return len(self.marginals)

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        """Draws `size` points (or one point when size is None); always in support."""
        n = 1 if size is None else int(size)
        draws = np.column_stack([m.sample(rng, n) for m in self.marginals])
        return draws[0] if size is None else draws

    def log_density(self, theta: np.ndarray) -> Union[float, np.ndarray]:
        """Exact log-density; −inf outside the support. Accepts a vector or a batch."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape[-1] != self.dim:
            raise PriorError(f"Dimension mismatch: got {theta.shape[-1]}, prior has {self.dim}.")
        total = sum(m.log_density(theta[..., i]) for i, m in enumerate(self.marginals))
        return float(total) if np.ndim(total) == 0 else total

    def in_support(self, theta: np.ndarray) -> Union[bool, np.ndarray]:
        logp = self.log_density(theta)
        return np.isfinite(logp)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = zip(*(m.bounds for m in self.marginals))
        return np.array(lo, dtype=np.float64), np.array(hi, dtype=np.float64)

    def mean(self) -> np.ndarray:
        return np.array([m.mean() for m in self.marginals])

    def std(self) -> np.ndarray:
        return np.array([m.std() for m in self.marginals])

    def central_point(self) -> np.ndarray:
        """Default in-support starting point for chains and m-tuning."""
        return self.mean()

    def transform(self) -> BoundTransform:
        kinds = tuple("logit" if isinstance(m, UniformMarginal) else "identity" for m in self.marginals)
        lo, hi = self.bounds()
        return BoundTransform(kinds, tuple(lo.tolist()), tuple(hi.tolist()))

    def log_density_unbounded(self, z: np.ndarray) -> Union[float, np.ndarray]:
        """Prior log-density pushed to transformed space: log p(θ(z)) + log|dθ/dz|."""
        theta, log_jac = self.transform().inverse(z)
        return self.log_density(theta) + log_jac


def sample_prior(prior: PriorSpec, rng: SeedStream) -> np.ndarray:
    """Draws one ParameterVector from the prior using the given seed stream."""
    return as_parameter_vector(prior.sample(rng.generator()), prior.dim)


def log_prior_density(prior: PriorSpec, theta: np.ndarray) -> float:
    """Log prior density of one parameter vector (−inf outside the support)."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.size != prior.dim:
        raise PriorError(f"Dimension mismatch: got {theta.size}, prior has {prior.dim}.")
    return float(prior.log_density(theta))
