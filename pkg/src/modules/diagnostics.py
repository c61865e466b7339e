import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from src.core.logger import get_application_logger
from src.core.priors import LaplaceMarginal, PriorSpec, UniformMarginal
from src.core.rng import SeedStream
from src.core.simulator import SimulationEngine, SimulatorError
from src.utils.artifacts import histogram_frame

DEFAULT_LEVELS = (0.025, 0.1, 0.25, 0.75, 0.9, 0.975)
BIMODALITY_THRESHOLD = 0.555
MIN_PREDICTIVE_SIMULATIONS = 50
MIN_NORMALITY_SIMULATIONS = 1000


class DiagnosticsError(Exception):
    """Custom exception for diagnostics failures."""
    pass


@dataclass
class CostProfile:
    """Wall-clock seconds of individually timed prior-predictive simulations."""
    times: np.ndarray
    thetas: np.ndarray
    summaries: np.ndarray

    @property
    def n(self) -> int:
        return int(self.times.size)

    @property
    def minimum(self) -> float:
        return float(self.times.min())

    @property
    def maximum(self) -> float:
        return float(self.times.max())

    @property
    def mean(self) -> float:
        return float(self.times.mean())

    def histogram(self, bins: Any = "auto") -> pd.DataFrame:
        return histogram_frame(self.times, bins)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"simulation": np.arange(self.n), "seconds": self.times})

    def to_dict(self) -> Dict[str, Any]:
        return {"n": self.n, "min_seconds": self.minimum, "max_seconds": self.maximum, "mean_seconds": self.mean}


def profile_cost(engine: SimulationEngine, n: int, seed: SeedStream,
                 clock: Callable[[], float] = time.perf_counter,
                 progress_callback: Optional[Callable[[int, str], None]] = None) -> CostProfile:
    """
    Times `n` prior-predictive simulations one by one.

    Non-finite summaries are kept as NaN rows (they still cost time); any
    other simulator failure is re-raised naming the offending index.
    """
    if n < 1:
        raise DiagnosticsError(f"profile_cost needs n >= 1, got {n}.")
    logger = get_application_logger()
    prior = engine.prior
    times = np.empty(n)
    thetas = np.empty((n, prior.dim))
    summaries = []
    for i in range(n):
        task = seed.child(i)
        thetas[i] = prior.sample(task.child(0).generator())
        start = clock()
        try:
            summaries.append(engine.summary_or_nan(thetas[i], task.child(1)))
        except SimulatorError as e:
            raise SimulatorError(f"Simulation {i} of the cost profile failed: {e}") from e
        # clock resolution can be coarser than a very fast simulator
        times[i] = max(clock() - start, 1e-9)
        if progress_callback and (i + 1) % max(1, n // 20) == 0:
            progress_callback(int(100 * (i + 1) / n), f"Timed {i + 1}/{n} simulations")
    profile = CostProfile(times, thetas, np.vstack(summaries))
    logger.info(f"Cost profile over {n} simulations: min {profile.minimum:.4g}s, "
                f"max {profile.maximum:.4g}s, mean {profile.mean:.4g}s.")
    return profile


def _band_pairs(levels: Sequence[float]) -> List[Tuple[float, float]]:
    levels = [float(q) for q in levels]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise DiagnosticsError(f"Band levels must be strictly increasing, got {levels}.")
    if len(levels) % 2 or any(not 0.0 < q < 1.0 for q in levels):
        raise DiagnosticsError(f"Band levels must be an even number of quantiles in (0, 1), got {levels}.")
    half = len(levels) // 2
    pairs = [(levels[i], levels[-1 - i]) for i in range(half)]
    for lo, hi in pairs:
        if not np.isclose(lo, 1.0 - hi):
            raise DiagnosticsError(f"Band levels must be symmetric, {lo} does not pair with {hi}.")
    return pairs


def band_label(lower: float, upper: float) -> str:
    return f"{round(100 * (upper - lower), 6):g}"


@dataclass
class PredictiveEnsemble:
    """Parameters and summaries of a predictive simulation batch with quantile bands."""
    thetas: np.ndarray
    summaries: np.ndarray
    levels: Tuple[float, ...] = DEFAULT_LEVELS

    def __post_init__(self):
        self.summaries = np.atleast_2d(np.asarray(self.summaries, dtype=np.float64))
        self.pairs = _band_pairs(self.levels)

    @property
    def n(self) -> int:
        return int(self.summaries.shape[0])

    def quantiles(self) -> np.ndarray:
        """(len(levels), d) array of per-coordinate quantiles."""
        return np.quantile(self.summaries, list(self.levels), axis=0)

    def median(self) -> np.ndarray:
        return np.median(self.summaries, axis=0)

    def bands(self) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        """Nominal mass label ("95", "80", ...) to (lower, upper) per coordinate."""
        q = dict(zip(self.levels, self.quantiles()))
        return {band_label(lo, hi): (q[lo], q[hi]) for lo, hi in self.pairs}

    def to_frame(self, observed: Optional[np.ndarray] = None, summary_names: Sequence[str] = ()) -> pd.DataFrame:
        d = self.summaries.shape[1]
        names = list(summary_names) or [f"s_{k + 1}" for k in range(d)]
        frame = pd.DataFrame({"summary": names})
        if observed is not None:
            frame["observed"] = np.asarray(observed, dtype=np.float64).reshape(-1)
        frame["median"] = self.median()
        for level, values in zip(self.levels, self.quantiles()):
            frame[f"q_{round(100 * level, 6):g}"] = values
        return frame


@dataclass
class PredictiveCheck:
    ensemble: PredictiveEnsemble
    observed: np.ndarray
    coverage: Dict[str, float]
    floor: float
    incompatible: bool
    source: str = "prior"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "source": self.source,
            "n_simulations": self.ensemble.n,
            "coverage": self.coverage,
            "coverage_floor": self.floor,
            "incompatible": self.incompatible,
        }


def coverage_report(ensemble: PredictiveEnsemble, observed: np.ndarray,
                    floor: float = 0.5, source: str = "prior") -> PredictiveCheck:
    """
    Fraction of observed coordinates inside each band (inclusive).

    The widest band decides compatibility: coverage below `floor` flags the
    observed data as something the model cannot reproduce.
    """
    observed = np.asarray(observed, dtype=np.float64).reshape(-1)
    if observed.size != ensemble.summaries.shape[1]:
        raise DiagnosticsError(
            f"Observed summary has {observed.size} coordinates, ensemble has {ensemble.summaries.shape[1]}."
        )
    coverage = {}
    for label, (lower, upper) in ensemble.bands().items():
        inside = (observed >= lower) & (observed <= upper)
        coverage[label] = float(np.mean(inside))
    widest = band_label(*ensemble.pairs[0])
    incompatible = coverage[widest] < floor
    if incompatible:
        get_application_logger().warning(
            f"Observed data fall outside the {widest}% predictive band for "
            f"{100 * (1 - coverage[widest]):.0f}% of summaries; the model may be incompatible."
        )
    return PredictiveCheck(ensemble, observed, coverage, floor, incompatible, source)


def predictive_check(engine: SimulationEngine, observed: np.ndarray, n: int, seed: SeedStream,
                     samples: Optional[np.ndarray] = None, levels: Sequence[float] = DEFAULT_LEVELS,
                     floor: float = 0.5) -> PredictiveCheck:
    """
    Prior predictive check when `samples` is None, posterior predictive
    otherwise (parameters resampled with replacement from `samples`).
    """
    if n < MIN_PREDICTIVE_SIMULATIONS:
        raise DiagnosticsError(f"predictive_check needs n >= {MIN_PREDICTIVE_SIMULATIONS}, got {n}.")
    logger = get_application_logger()
    rng = seed.child(0).generator()
    if samples is None:
        source = "prior"
        thetas = engine.prior.sample(rng, n)
    else:
        source = "posterior"
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        thetas = samples[rng.integers(0, samples.shape[0], size=n)]
    summaries = engine.simulate_summaries(list(thetas), [seed.child(1).child(i) for i in range(n)],
                                          allow_nonfinite=True)
    finite = np.all(np.isfinite(summaries), axis=1)
    if not finite.all():
        logger.warning(f"{int((~finite).sum())} of {n} predictive simulations were non-finite and are excluded.")
    if finite.sum() < 2:
        raise DiagnosticsError("Too few finite predictive simulations to form bands.")
    ensemble = PredictiveEnsemble(thetas[finite], summaries[finite], tuple(levels))
    return coverage_report(ensemble, observed, floor, source)


@dataclass
class NormalityReport:
    """Per-coordinate moment diagnostics of the summary distribution at one θ."""
    table: pd.DataFrame
    summaries: np.ndarray = field(repr=False)

    @property
    def flagged(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.table["multimodal"].to_numpy())]

    def histograms(self, bins: Any = "auto") -> pd.DataFrame:
        frames = []
        for k in range(self.summaries.shape[1]):
            column = self.summaries[:, k]
            column = column[np.isfinite(column)]
            if column.size == 0:
                continue
            frame = histogram_frame(column, bins)
            frame.insert(0, "summary", k + 1)
            frames.append(frame)
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["summary", "bin_edge", "count"])


def moment_table(summaries: np.ndarray) -> pd.DataFrame:
    """
    Skewness, excess kurtosis and bimodality coefficient
    b = (skew² + 1) / (excess kurtosis + 3) per summary coordinate.
    """
    summaries = np.atleast_2d(np.asarray(summaries, dtype=np.float64))
    rows = []
    for k in range(summaries.shape[1]):
        column = summaries[:, k]
        column = column[np.isfinite(column)]
        degenerate = column.size < 2 or np.ptp(column) == 0.0
        if degenerate:
            skew = kurt = b = np.nan
        else:
            skew = float(stats.skew(column))
            kurt = float(stats.kurtosis(column, fisher=True))
            b = (skew ** 2 + 1.0) / (kurt + 3.0)
        rows.append({
            "summary": k + 1,
            "mean": float(column.mean()) if column.size else np.nan,
            "std": float(column.std(ddof=1)) if column.size > 1 else np.nan,
            "skewness": skew,
            "excess_kurtosis": kurt,
            "bimodality": b,
            "multimodal": bool(not degenerate and b > BIMODALITY_THRESHOLD),
            "degenerate": bool(degenerate),
        })
    return pd.DataFrame(rows)


def normality_report(engine: SimulationEngine, theta: np.ndarray, m_large: int, seed: SeedStream) -> NormalityReport:
    """Simulates `m_large` summaries at θ and tabulates their shape."""
    if m_large < MIN_NORMALITY_SIMULATIONS:
        raise DiagnosticsError(f"normality_report needs m_large >= {MIN_NORMALITY_SIMULATIONS}, got {m_large}.")
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    summaries = engine.simulate_summaries([theta] * m_large, [seed.child(i) for i in range(m_large)],
                                          allow_nonfinite=True)
    report = NormalityReport(moment_table(summaries), summaries)
    logger = get_application_logger()
    for k in report.flagged:
        logger.warning(f"Summary {k + 1} looks multimodal (b={report.table['bimodality'][k]:.3f}); "
                       f"the Gaussian synthetic likelihood may be a poor fit.")
    for k in np.flatnonzero(report.table["degenerate"].to_numpy()):
        logger.warning(f"Summary {k + 1} has zero variance at theta={theta}.")
    return report


@dataclass
class RunSummary:
    """What `compare_report` needs from one inference run."""
    algorithm: str
    samples: np.ndarray
    total_simulations: int
    names: Sequence[str] = ()
    coverage_95: Optional[float] = None
    trace: Optional[pd.DataFrame] = None


def compare_report(runs: Sequence[RunSummary], ci: float = 0.95) -> pd.DataFrame:
    """One row per run: simulation count, marginal means and central CIs, predictive coverage."""
    if not runs:
        raise DiagnosticsError("compare_report needs at least one run.")
    lower_q, upper_q = (1.0 - ci) / 2.0, 1.0 - (1.0 - ci) / 2.0
    rows = []
    for run in runs:
        samples = np.atleast_2d(np.asarray(run.samples, dtype=np.float64))
        names = list(run.names) or [f"theta_{j + 1}" for j in range(samples.shape[1])]
        row: Dict[str, Any] = {"algorithm": run.algorithm, "total_simulations": int(run.total_simulations),
                               "n_samples": int(samples.shape[0])}
        for j, name in enumerate(names):
            row[f"{name}_mean"] = float(np.mean(samples[:, j]))
            row[f"{name}_lower"] = float(np.quantile(samples[:, j], lower_q))
            row[f"{name}_upper"] = float(np.quantile(samples[:, j], upper_q))
        row["coverage_95"] = np.nan if run.coverage_95 is None else float(run.coverage_95)
        rows.append(row)
    return pd.DataFrame(rows)


def posterior_correlations(samples: np.ndarray, names: Sequence[str] = ()) -> pd.DataFrame:
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    names = list(names) or [f"theta_{j + 1}" for j in range(samples.shape[1])]
    corr = pd.DataFrame(samples, columns=names).corr()
    corr.insert(0, "parameter", corr.index)
    return corr.reset_index(drop=True)


def _marginal_width(marginal, mass: float) -> float:
    if isinstance(marginal, UniformMarginal):
        return mass * (marginal.hi - marginal.lo)
    if isinstance(marginal, LaplaceMarginal):
        tail = (1.0 - mass) / 2.0
        dist = stats.laplace(loc=marginal.location, scale=marginal.scale)
        return float(dist.ppf(1.0 - tail) - dist.ppf(tail))
    raise DiagnosticsError(f"No width rule for marginal {type(marginal).__name__}.")


def identifiability_ratio(samples: np.ndarray, prior: PriorSpec, mass: float = 0.95) -> pd.DataFrame:
    """
    Posterior central-interval width over the prior's, per parameter.

    Ratios near 1 mean the data told us little about that parameter.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    tail = (1.0 - mass) / 2.0
    rows = []
    for j, (name, marginal) in enumerate(zip(prior.names, prior.marginals)):
        post = float(np.quantile(samples[:, j], 1.0 - tail) - np.quantile(samples[:, j], tail))
        prior_width = _marginal_width(marginal, mass)
        rows.append({"parameter": name, "posterior_width": post, "prior_width": prior_width,
                     "ratio": post / prior_width})
    return pd.DataFrame(rows)


class DiagnosticsRunner:
    """Progress-reporting wrapper the pipeline drives for pre-analysis and analysis."""

    def __init__(self, engine: SimulationEngine, progress_callback: Optional[Callable[[int, str], None]] = None):
        self.logger = get_application_logger()
        self.engine = engine
        self._external_progress_callback = progress_callback

    def _update_progress(self, percent: int, message: str, level: str = "info"):
        if self._external_progress_callback:
            self._external_progress_callback(int(percent), message)
        self.logger.log(getattr(logging, level.upper()), f"DIAGNOSTICS_PROGRESS: {message}")

    def cost(self, n: int, seed: SeedStream, clock: Callable[[], float] = time.perf_counter) -> CostProfile:
        self._update_progress(0, f"Profiling simulation cost over {n} prior draws...")
        profile = profile_cost(self.engine, n, seed, clock, self._external_progress_callback)
        self._update_progress(100, f"Cost profile done: mean {profile.mean:.4g}s per simulation.")
        return profile

    def predictive(self, observed: np.ndarray, n: int, seed: SeedStream, samples: Optional[np.ndarray] = None,
                   levels: Sequence[float] = DEFAULT_LEVELS, floor: float = 0.5) -> PredictiveCheck:
        kind = "prior" if samples is None else "posterior"
        self._update_progress(0, f"Running {kind} predictive check with {n} simulations...")
        check = predictive_check(self.engine, observed, n, seed, samples, levels, floor)
        level = "warning" if check.incompatible else "info"
        self._update_progress(100, f"{kind.capitalize()} predictive coverage: {check.coverage}", level)
        return check

    def normality(self, theta: np.ndarray, m_large: int, seed: SeedStream) -> NormalityReport:
        self._update_progress(0, f"Simulating {m_large} summaries for the normality report...")
        report = normality_report(self.engine, theta, m_large, seed)
        self._update_progress(100, f"Normality report done; {len(report.flagged)} summary(ies) flagged.")
        return report
