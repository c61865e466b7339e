import math
import threading
from dataclasses import astuple, dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import ConvexHull, Delaunay, QhullError, cKDTree

from src.core.logger import get_application_logger
from src.core.priors import PriorSpec
from src.core.rng import SeedStream
from src.core.simulator import SimulatorModel

THRESHOLD_AREA_MM2 = 100.0
MAX_GROWTH_STEPS = 1_000_000


class BvcbmError(Exception):
    """Custom exception for the biphasic tumour growth simulator."""
    pass


class DelaunayError(BvcbmError):
    """Raised when a cell configuration cannot be triangulated."""
    pass


def hexagon_rings_for(n_cells: int) -> int:
    """Smallest n with 1 + 3·n·(n+1) >= n_cells."""
    rings = max(0, int(math.ceil((math.sqrt(12.0 * n_cells - 3.0) - 3.0) / 6.0 - 1e-9)))
    while 1 + 3 * rings * (rings + 1) < n_cells:
        rings += 1
    return rings


@dataclass(frozen=True)
class BvcbmParams:
    """Fixed (non-inferred) simulator constants. Times in hours."""
    days: int = 32
    p_psc: float = 1e-5
    d_max: float = 10.0
    lam: float = 0.1
    dt: float = 1.0
    cell_area: float = 0.01
    spacing: float = 1.0
    n_rings: Optional[int] = None
    growth_g_age: float = 24.0
    growth_seed: int = 0

    def __post_init__(self):
        if self.days < 1:
            raise BvcbmError("days must be at least 1.")
        if not 0.0 <= self.p_psc <= 1.0:
            raise BvcbmError("p_psc must be a probability.")
        for name in ("d_max", "lam", "dt", "cell_area", "spacing", "growth_g_age"):
            if getattr(self, name) <= 0:
                raise BvcbmError(f"{name} must be positive.")
        if self.n_rings is not None and self.n_rings < 1:
            raise BvcbmError("n_rings must be at least 1.")

    @property
    def threshold_cells(self) -> int:
        return int(math.ceil(THRESHOLD_AREA_MM2 / self.cell_area - 1e-9))

    @property
    def patch_rings(self) -> int:
        """`n_rings` if set, else the smallest hexagon holding the threshold tumour plus d_max of healthy margin."""
        if self.n_rings is not None:
            return self.n_rings
        return hexagon_rings_for(self.threshold_cells) + int(math.ceil(self.d_max / self.spacing - 1e-9))

    @classmethod
    def from_settings(cls, settings: Optional[Mapping[str, Any]] = None) -> "BvcbmParams":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (settings or {}).items() if k in known})


@dataclass(frozen=True)
class CellState:
    """Immutable snapshot of all cells; steps return new snapshots."""
    positions: np.ndarray
    is_cancer: np.ndarray
    age: np.ndarray

    def __post_init__(self):
        for arr in (self.positions, self.is_cancer, self.age):
            arr.setflags(write=False)

    @property
    def n_cells(self) -> int:
        return len(self.is_cancer)

    @property
    def n_cancer(self) -> int:
        return int(np.sum(self.is_cancer))

    def tumour_area(self, cell_area: float) -> float:
        return self.n_cancer * cell_area


@dataclass
class TumourTrajectory:
    areas: np.ndarray
    counts: List[Tuple[int, int, int]] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"day": np.arange(1, len(self.areas) + 1), "area_mm2": self.areas})

    def counts_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.counts, columns=["hour", "n_cancer", "n_healthy"])


@dataclass(frozen=True)
class DelaunayGraph:
    indptr: np.ndarray
    indices: np.ndarray
    simplices: np.ndarray

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def directed_edges(self) -> Tuple[np.ndarray, np.ndarray]:
        counts = np.diff(self.indptr)
        return np.repeat(np.arange(len(counts)), counts), self.indices

    def edges(self) -> set:
        src, dst = self.directed_edges()
        return {(int(a), int(b)) for a, b in zip(src, dst) if a < b}


def init_hexagonal(n_rings: int, spacing: float = 1.0) -> CellState:
    """Centred hexagonal patch of 1 + 3·n·(n+1) cells with one cancer cell at the origin."""
    if n_rings < 1:
        raise BvcbmError("n_rings must be at least 1.")
    coords = [(q, r) for q in range(-n_rings, n_rings + 1) for r in range(-n_rings, n_rings + 1)
              if abs(q + r) <= n_rings]
    qr = np.array(coords, dtype=np.float64)
    positions = spacing * np.column_stack([qr[:, 0] + 0.5 * qr[:, 1], (math.sqrt(3.0) / 2.0) * qr[:, 1]])
    is_cancer = np.all(qr == 0, axis=1)
    return CellState(positions, is_cancer, np.zeros(len(qr)))


def delaunay_neighbors(positions: np.ndarray) -> DelaunayGraph:
    """
    Delaunay adjacency of 2-D points.

    Raises:
        DelaunayError: Fewer than 3 points, all points collinear, or a
                       triangulation failure that survives a joggled retry.
    """
    points = np.asarray(positions, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2 or len(points) < 3:
        raise DelaunayError("Delaunay triangulation needs at least 3 points in the plane.")
    centred = points - points.mean(axis=0)
    singular = np.linalg.svd(centred, compute_uv=False)
    if singular[1] <= 1e-12 * max(singular[0], 1.0):
        raise DelaunayError("All points are collinear.")
    try:
        tri = Delaunay(centred)
    except QhullError:
        get_application_logger().warning("Delaunay construction failed; retrying with joggled input.")
        try:
            tri = Delaunay(centred, qhull_options="QJ Qbb Qc Qz")
        except QhullError as e:
            raise DelaunayError(f"Delaunay construction failed: {e}") from e
    indptr, indices = tri.vertex_neighbor_vertices
    return DelaunayGraph(indptr.copy(), indices.copy(), tri.simplices.copy())


def tumour_reaches_boundary(state: CellState) -> bool:
    """True when a cancer cell lies on the convex hull of the whole configuration."""
    hull = ConvexHull(state.positions)
    return bool(np.any(state.is_cancer[hull.vertices]))


def division_probability(d: np.ndarray, g_age: float, params: BvcbmParams) -> np.ndarray:
    """p_d = (dt / g_age)(1 − d / d_max) with d clamped to [0, d_max]."""
    d = np.clip(np.asarray(d, dtype=np.float64), 0.0, params.d_max)
    return (params.dt / g_age) * (1.0 - d / params.d_max)


def hooke_displacement(positions: np.ndarray, graph: DelaunayGraph, lam: float, rest_length: float) -> np.ndarray:
    """Δx_i = −λ Σ_j (|r_ij| − s) r_ij / |r_ij| over Delaunay neighbours j, with r_ij = x_i − x_j."""
    src, dst = graph.directed_edges()
    r = positions[src] - positions[dst]
    length = np.linalg.norm(r, axis=1)
    length = np.where(length > 0, length, 1.0)
    contrib = -lam * ((length - rest_length) / length)[:, None] * r
    displacement = np.zeros_like(positions)
    np.add.at(displacement, src, contrib)
    return displacement


def step(state: CellState, g_age: float, params: BvcbmParams, rng: np.random.Generator,
         max_new_cancer: Optional[int] = None) -> CellState:
    """
    One time step: divisions at the tumour edge, p_psc invasion of a Delaunay
    neighbour, then one Hooke's-law relaxation of all positions.

    Args:
        max_new_cancer (int, optional): Cap on new cancer cells this step (used to
                                        stop growth exactly at a threshold).
    """
    positions, is_cancer, age = state.positions, state.is_cancer.copy(), state.age + params.dt
    cancer = np.flatnonzero(is_cancer)
    healthy = np.flatnonzero(~is_cancer)
    graph = delaunay_neighbors(positions)

    if len(healthy):
        d_edge, _ = cKDTree(positions[healthy]).query(positions[cancer])
    else:
        d_edge = np.full(len(cancer), np.inf)
    dividing = cancer[rng.random(len(cancer)) < division_probability(d_edge, g_age, params)]
    angles = rng.uniform(0.0, 2.0 * np.pi, size=len(dividing))
    invasive = cancer[rng.random(len(cancer)) < params.p_psc]
    picks = rng.random(len(invasive))

    budget = np.inf if max_new_cancer is None else int(max_new_cancer)
    n_div = int(min(len(dividing), budget))
    dividing, angles = dividing[:n_div], angles[:n_div]
    budget -= n_div

    for cell, u in zip(invasive, picks):
        if budget <= 0:
            break
        candidates = [j for j in graph.neighbors(cell) if not is_cancer[j]]
        if candidates:
            is_cancer[candidates[int(u * len(candidates))]] = True
            budget -= 1

    if len(dividing):
        nn_dist, _ = cKDTree(positions).query(positions[dividing], k=2)
        offset = 0.5 * nn_dist[:, 1][:, None] * np.column_stack([np.cos(angles), np.sin(angles)])
        positions = np.vstack([positions, positions[dividing] + offset])
        is_cancer = np.concatenate([is_cancer, np.ones(len(dividing), dtype=bool)])
        age = age.copy()
        age[dividing] = 0.0
        age = np.concatenate([age, np.zeros(len(dividing))])

    relaxed = positions + hooke_displacement(positions, delaunay_neighbors(positions), params.lam, params.spacing)
    return CellState(relaxed, is_cancer, age)


def grow_to_threshold(params: BvcbmParams, g_age: float, rng: np.random.Generator,
                      initial: Optional[CellState] = None) -> Tuple[CellState, int]:
    """
    Grows a single cancer cell until the tumour reaches 100 mm².

    Returns:
        (state, steps): The first configuration with area ≥ 100 mm² (and below
                        100 mm² + one cell area) and the number of steps taken.
    """
    state = initial if initial is not None else init_hexagonal(params.patch_rings, params.spacing)
    target = params.threshold_cells
    steps = 0
    while state.n_cancer < target:
        if steps >= MAX_GROWTH_STEPS:
            raise BvcbmError(f"Tumour did not reach {THRESHOLD_AREA_MM2} mm² within {MAX_GROWTH_STEPS} steps.")
        state = step(state, g_age, params, rng, max_new_cancer=target - state.n_cancer)
        steps += 1
    if tumour_reaches_boundary(state):
        get_application_logger().warning(f"Tumour reached the edge of the {params.patch_rings}-ring healthy patch; "
                                         f"growth near the boundary is truncated. Increase n_rings.")
    return state, steps


_GROWTH_CACHE: Dict[Tuple, CellState] = {}
_GROWTH_LOCK = threading.Lock()


def cached_initial_state(params: BvcbmParams) -> CellState:
    """The 100 mm² configuration for (params, growth_seed), grown once and shared."""
    key = astuple(params)
    with _GROWTH_LOCK:
        if key not in _GROWTH_CACHE:
            logger = get_application_logger()
            state, steps = grow_to_threshold(params, params.growth_g_age, SeedStream(params.growth_seed).generator())
            logger.info(f"BVCBM base configuration grown in {steps} steps ({state.n_cancer} cancer cells).")
            _GROWTH_CACHE[key] = state
        return _GROWTH_CACHE[key]


def simulate_biphasic(theta: np.ndarray, params: BvcbmParams, seed: SeedStream,
                      initial: Optional[CellState] = None, record_counts: bool = False) -> TumourTrajectory:
    """
    Runs 24·days hourly steps from the base configuration, using g_age_1
    before hour 24·tau and g_age_2 afterwards; the area is recorded at the
    start of each day.

    Args:
        theta: (g_age_1 [h], tau [days], g_age_2 [h]).
    """
    g_age_1, tau_days, g_age_2 = (float(v) for v in np.asarray(theta, dtype=np.float64).reshape(-1))
    if min(g_age_1, g_age_2) < 2.0 or not 1.0 <= tau_days <= params.days:
        raise BvcbmError(f"θ={theta} lies outside the valid parameter range.")
    state = initial if initial is not None else cached_initial_state(params)
    rng = seed.generator()
    switch_hour = 24.0 * tau_days
    areas = np.empty(params.days)
    counts: List[Tuple[int, int, int]] = []
    for hour in range(24 * params.days):
        if hour % 24 == 0:
            areas[hour // 24] = state.tumour_area(params.cell_area)
        state = step(state, g_age_1 if hour < switch_hour else g_age_2, params, rng)
        if record_counts:
            counts.append((hour + 1, state.n_cancer, state.n_cells - state.n_cancer))
    return TumourTrajectory(areas, counts)


class BvcbmModel(SimulatorModel):
    """Biphasic tumour growth model; data are daily tumour areas (mm²)."""
    name = "bvcbm"

    def __init__(self, params: BvcbmParams = BvcbmParams()):
        upper = 24.0 * params.days
        super().__init__(PriorSpec.uniform([2.0, 1.0, 2.0], [upper, float(params.days), upper],
                                           ["g_age_1", "tau", "g_age_2"]))
        self.params = params

    @property
    def summary_dim(self) -> int:
        return self.params.days

    def with_params(self, **changes) -> "BvcbmModel":
        return BvcbmModel(replace(self.params, **changes))

    def simulate(self, theta: np.ndarray, seed: SeedStream) -> TumourTrajectory:
        return simulate_biphasic(theta, self.params, seed)

    def summarize(self, raw: TumourTrajectory) -> np.ndarray:
        return np.asarray(raw.areas, dtype=np.float64)
