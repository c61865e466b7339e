import threading
from abc import ABC, abstractmethod
from typing import Any, List, Optional, Sequence

import numpy as np
import psutil
from joblib import Parallel, delayed

from src.core.logger import get_application_logger
from src.core.priors import PriorSpec
from src.core.rng import SeedStream


class SimulatorError(Exception):
    """Custom exception for simulator failures."""
    pass


class NonFiniteSummaryError(SimulatorError):
    """Raised when a simulation produces NaN or infinite summaries."""
    pass


class SimulatorModel(ABC):
    """
    Contract every data-generating process implements.

    `simulate` must be deterministic given (θ, seed) and must not mutate
    shared state, so any number of threads may call it concurrently.
    """
    name: str = "model"

    def __init__(self, prior: PriorSpec):
        self.prior = prior

    @property
    def param_dim(self) -> int:
        return self.prior.dim

    @property
    @abstractmethod
    def summary_dim(self) -> int:
        ...

    @abstractmethod
    def simulate(self, theta: np.ndarray, seed: SeedStream) -> Any:
        """Runs the model once and returns its raw output."""

    @abstractmethod
    def summarize(self, raw: Any) -> np.ndarray:
        """Maps raw output to the summary vector S(x)."""

    def simulate_summary(self, theta: np.ndarray, seed: SeedStream) -> np.ndarray:
        """Simulates and summarizes, raising NonFiniteSummaryError on NaN/inf."""
        summary = np.asarray(self.summarize(self.simulate(theta, seed)), dtype=np.float64).reshape(-1)
        if summary.size != self.summary_dim:
            raise SimulatorError(f"{self.name}: summary has dimension {summary.size}, expected {self.summary_dim}.")
        if not np.all(np.isfinite(summary)):
            raise NonFiniteSummaryError(f"{self.name}: non-finite summary {summary} at theta={np.asarray(theta)}")
        return summary


class SimulationCounter:
    """Thread-safe count of every simulator invocation made during a run."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def increment(self, n: int = 1):
        with self._lock:
            self._count += n

    @property
    def count(self) -> int:
        with self._lock:
            return self._count


def resolve_n_jobs(threads: int) -> int:
    """0 means "one worker per physical core"."""
    if threads and threads > 0:
        return int(threads)
    return int(psutil.cpu_count(logical=False) or 1)


class SimulationEngine:
    """
    Runs batches of simulations for one model with retries and accounting.

    Results are always returned in submission order and each task draws only
    from its own SeedStream, so outputs do not depend on `n_jobs`.
    """

    def __init__(self, model: SimulatorModel, n_jobs: int = 1, max_retries: int = 5,
                 counter: Optional[SimulationCounter] = None):
        self.logger = get_application_logger()
        self.model = model
        self.n_jobs = resolve_n_jobs(n_jobs)
        self.max_retries = int(max_retries)
        self.counter = counter if counter is not None else SimulationCounter()
        self.logger.debug(f"SimulationEngine for '{model.name}' using {self.n_jobs} worker(s) (threads).")

    @property
    def prior(self) -> PriorSpec:
        return self.model.prior

    def _attempt(self, theta: np.ndarray, seed: SeedStream) -> np.ndarray:
        self.counter.increment()
        return self.model.simulate_summary(theta, seed)

    def summary_with_retries(self, theta: np.ndarray, seed: SeedStream) -> np.ndarray:
        """
        One summary; a non-finite draw is resimulated on the next retry
        substream, up to `max_retries` times, before a hard error.
        """
        try:
            return self._attempt(theta, seed)
        except NonFiniteSummaryError as first_error:
            last_error = first_error
            for attempt in range(self.max_retries):
                try:
                    return self._attempt(theta, seed.retry(attempt))
                except NonFiniteSummaryError as e:
                    last_error = e
            raise SimulatorError(f"Simulation failed after {self.max_retries} retries: {last_error}") from last_error

    def summary_or_nan(self, theta: np.ndarray, seed: SeedStream) -> np.ndarray:
        """One summary; a non-finite draw comes back as a NaN vector (no retry)."""
        try:
            return self._attempt(theta, seed)
        except NonFiniteSummaryError:
            self.logger.debug(f"Non-finite summary at theta={np.asarray(theta)}; reported as NaN.")
            return np.full(self.model.summary_dim, np.nan)

    def _map(self, fn, thetas: Sequence[np.ndarray], seeds: Sequence[SeedStream]) -> List[np.ndarray]:
        if len(thetas) != len(seeds):
            raise ValueError("Each simulation needs its own seed stream.")
        if self.n_jobs == 1 or len(thetas) < 2:
            return [fn(t, s) for t, s in zip(thetas, seeds)]
        return Parallel(n_jobs=self.n_jobs, backend="threading")(
            delayed(fn)(t, s) for t, s in zip(thetas, seeds)
        )

    def simulate_summaries(self, thetas: Sequence[np.ndarray], seeds: Sequence[SeedStream],
                           allow_nonfinite: bool = False) -> np.ndarray:
        """
        Simulates a batch and returns an (n, d) array of summaries.

        Args:
            thetas: Parameter vectors.
            seeds: One SeedStream per parameter vector.
            allow_nonfinite (bool): If True, failed draws are returned as NaN rows
                                    instead of being retried.
        """
        fn = self.summary_or_nan if allow_nonfinite else self.summary_with_retries
        rows = self._map(fn, list(thetas), list(seeds))
        if not rows:
            return np.empty((0, self.model.summary_dim))
        return np.vstack(rows)
