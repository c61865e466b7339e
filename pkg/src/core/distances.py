from typing import Callable, Optional, Sequence

import numpy as np

METRICS = ("euclidean", "scaled-euclidean")


class DimensionMismatchError(ValueError):
    """Raised when two data or summary vectors have different dimensions."""
    pass


def discrepancy(y: Sequence[float], x: Sequence[float], metric: str = "euclidean",
                scale: Optional[Sequence[float]] = None) -> float:
    """
    Distance ρ(y, x) between observed and simulated data (or summaries).

    Args:
        y: Observed vector.
        x: Simulated vector.
        metric (str): "euclidean" or "scaled-euclidean".
        scale: Per-dimension positive scale for the scaled metric.

    Returns:
        float: A non-negative discrepancy; +inf when x has non-finite entries.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if y.shape != x.shape:
        raise DimensionMismatchError(f"Cannot compare vectors of dimension {y.size} and {x.size}.")
    if metric not in METRICS:
        raise ValueError(f"Unknown metric '{metric}'. Valid choices: {', '.join(METRICS)}.")
    if not np.all(np.isfinite(x)):
        return float("inf")
    diff = y - x
    if metric == "scaled-euclidean":
        if scale is None:
            raise ValueError("scaled-euclidean requires a per-dimension scale.")
        scale = np.asarray(scale, dtype=np.float64).reshape(-1)
        if scale.shape != diff.shape:
            raise DimensionMismatchError(f"Scale has dimension {scale.size}, data has {diff.size}.")
        if np.any(scale <= 0):
            raise ValueError("scaled-euclidean scales must be positive.")
        diff = diff / scale
    return float(np.linalg.norm(diff))


def make_discrepancy(metric: str = "euclidean", scale: Optional[Sequence[float]] = None) -> Callable[[np.ndarray, np.ndarray], float]:
    """Binds metric and scale into a two-argument discrepancy function."""
    if metric not in METRICS:
        raise ValueError(f"Unknown metric '{metric}'. Valid choices: {', '.join(METRICS)}.")

    def rho(y: np.ndarray, x: np.ndarray) -> float:
        return discrepancy(y, x, metric=metric, scale=scale)

    return rho
