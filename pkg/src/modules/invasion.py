import math
from dataclasses import dataclass, fields
from typing import Any, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from numba import njit

from src.core.priors import PriorSpec
from src.core.rng import SeedStream
from src.core.simulator import NonFiniteSummaryError, SimulatorModel

PHASES = ("red", "yellow", "green")
SUMMARY_FAMILIES = {"counts": 3, "trajectory": 6, "density": 15}
PARAM_NAMES = ("R_r", "R_y", "R_g", "M_r", "M_y", "M_g")

# Event kinds in the event log.
EVENT_TRANSITION, EVENT_MOVE, EVENT_DIVISION, EVENT_BLOCKED_MOVE, EVENT_BLOCKED_DIVISION = range(5)
EVENT_COLUMNS = ("time", "cell", "kind", "a", "b")

# Odd-r offset neighbour steps (dcol, drow), even rows then odd rows.
_EVEN_DC = np.array([1, 0, -1, -1, -1, 0], dtype=np.int64)
_EVEN_DR = np.array([0, -1, -1, 0, 1, 1], dtype=np.int64)
_ODD_DC = np.array([1, 1, 0, -1, 0, 1], dtype=np.int64)
_ODD_DR = np.array([0, -1, -1, 0, 1, 1], dtype=np.int64)


class InvasionError(Exception):
    """Custom exception for the cell invasion simulator."""
    pass


class DegenerateSummaryError(NonFiniteSummaryError):
    """Raised when a summary group (phase, side or residency) is empty."""
    pass


@dataclass(frozen=True)
class InvasionParams:
    R_r: float
    R_y: float
    R_g: float
    M_r: float
    M_y: float
    M_g: float
    horizon: float = 48.0

    def __post_init__(self):
        if any(v < 0 for v in self.rates()):
            raise InvasionError("Transition and movement rates must be non-negative.")
        if self.horizon <= 0:
            raise InvasionError("horizon must be positive.")

    @classmethod
    def from_theta(cls, theta: np.ndarray, horizon: float = 48.0) -> "InvasionParams":
        return cls(*(float(v) for v in np.asarray(theta, dtype=np.float64).reshape(-1)), horizon=horizon)

    def rates(self) -> np.ndarray:
        return np.array([self.R_r, self.R_y, self.R_g, self.M_r, self.M_y, self.M_g], dtype=np.float64)


@dataclass
class InvasionState:
    """
    Hexagonal lattice (odd-r offset layout, unit spacing) plus cell records.
    `occupancy[site]` is a cell id or −1; `dist[cell]` is the distance
    travelled in the cell's current phase residency.
    """
    width: int
    height: int
    occupancy: np.ndarray
    site_of: np.ndarray
    phase: np.ndarray
    dist: np.ndarray
    n_cells: int
    scratch_start: int = 0
    scratch_width: int = 0

    def copy(self) -> "InvasionState":
        return InvasionState(self.width, self.height, self.occupancy.copy(), self.site_of.copy(), self.phase.copy(),
                             self.dist.copy(), self.n_cells, self.scratch_start, self.scratch_width)

    @property
    def capacity(self) -> int:
        return self.width * self.height

    def sites(self) -> np.ndarray:
        return self.site_of[: self.n_cells]

    def phases(self) -> np.ndarray:
        return self.phase[: self.n_cells]

    def xy(self) -> np.ndarray:
        """Cartesian cell centres."""
        return site_xy(self.sites(), self.width)

    @property
    def scratch_centre(self) -> float:
        """Lateral coordinate splitting the lattice into left and right sides."""
        if self.scratch_width == 0:
            return 0.5 * (self.width - 1) + 0.25
        return self.scratch_start + 0.5 * (self.scratch_width - 1) + 0.25


@dataclass
class InvasionResult:
    state: InvasionState
    residency_sum: np.ndarray
    residency_count: np.ndarray
    events: np.ndarray
    events_overflow: bool
    n_events: int

    def events_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.events, columns=list(EVENT_COLUMNS))


def site_xy(sites: np.ndarray, width: int) -> np.ndarray:
    sites = np.asarray(sites, dtype=np.int64)
    row, col = sites // width, sites % width
    return np.column_stack([col + 0.5 * (row & 1), row * (math.sqrt(3.0) / 2.0)])


def site_axial(sites: np.ndarray, width: int) -> Tuple[np.ndarray, np.ndarray]:
    sites = np.asarray(sites, dtype=np.int64)
    row, col = sites // width, sites % width
    return col - (row - (row & 1)) // 2, row


def new_state(width: int, height: int, sites: np.ndarray, phases: np.ndarray,
              scratch_start: int = 0, scratch_width: int = 0) -> InvasionState:
    """Builds a lattice state from explicit cell sites and phases."""
    if width < 1 or height < 1:
        raise InvasionError("Lattice dimensions must be positive.")
    sites = np.asarray(sites, dtype=np.int64)
    phases = np.asarray(phases, dtype=np.int64)
    capacity = width * height
    if len(sites) != len(phases):
        raise InvasionError("sites and phases must have equal length.")
    if len(np.unique(sites)) != len(sites) or np.any(sites < 0) or np.any(sites >= capacity):
        raise InvasionError("Cell sites must be distinct lattice sites.")
    if np.any((phases < 0) | (phases > 2)):
        raise InvasionError("Phases must be 0 (red), 1 (yellow) or 2 (green).")
    occupancy = np.full(capacity, -1, dtype=np.int64)
    occupancy[sites] = np.arange(len(sites))
    site_of = np.full(capacity, -1, dtype=np.int64)
    site_of[: len(sites)] = sites
    phase = np.zeros(capacity, dtype=np.int64)
    phase[: len(sites)] = phases
    return InvasionState(width, height, occupancy, site_of, phase, np.zeros(capacity), len(sites),
                         scratch_start, scratch_width)


def init_scratch(width: int, height: int, density: float, scratch_width: int, rng: np.random.Generator,
                 phase_proportions: Tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)) -> InvasionState:
    """
    Seeds two lateral bands independently with probability `density`,
    leaving a central scratch of `scratch_width` columns empty.
    """
    if not 0 <= scratch_width < width:
        raise InvasionError(f"Scratch width must lie in [0, {width}), got {scratch_width}.")
    if not 0.0 <= density <= 1.0:
        raise InvasionError("density must lie in [0, 1].")
    props = np.asarray(phase_proportions, dtype=np.float64)
    if props.size != 3 or np.any(props < 0) or props.sum() <= 0:
        raise InvasionError("phase_proportions must be three non-negative weights.")
    start = (width - scratch_width) // 2
    cols = np.arange(width * height) % width
    band = np.flatnonzero((cols < start) | (cols >= start + scratch_width))
    occupied = band[rng.random(len(band)) < density]
    if len(occupied) == 0:
        raise InvasionError("Initial condition has no cells.")
    phases = rng.choice(3, size=len(occupied), p=props / props.sum())
    return new_state(width, height, occupied, phases, start, scratch_width)


@njit(nogil=True, cache=True)
def _move_member(members, counts, slot, cell, p_from, p_to):
    k = slot[cell]
    last = members[p_from, counts[p_from] - 1]
    members[p_from, k] = last
    slot[last] = k
    counts[p_from] -= 1
    members[p_to, counts[p_to]] = cell
    slot[cell] = counts[p_to]
    counts[p_to] += 1


@njit(nogil=True, cache=True)
def _neighbour(site, j, width, height, even_dc, even_dr, odd_dc, odd_dr):
    row = site // width
    col = site % width
    if row & 1:
        nc = col + odd_dc[j]
        nr = row + odd_dr[j]
    else:
        nc = col + even_dc[j]
        nr = row + even_dr[j]
    if nc < 0 or nc >= width or nr < 0 or nr >= height:
        return -1
    return nr * width + nc


@njit(nogil=True, cache=True)
def _gillespie_kernel(occupancy, site_of, phase, dist, n_cells, width, height, rates, horizon, seed,
                      max_events, log, even_dc, even_dr, odd_dc, odd_dr):
    np.random.seed(seed)
    capacity = site_of.shape[0]
    members = np.empty((3, capacity), np.int64)
    counts = np.zeros(3, np.int64)
    slot = np.empty(capacity, np.int64)
    for c in range(n_cells):
        p = phase[c]
        members[p, counts[p]] = c
        slot[c] = counts[p]
        counts[p] += 1

    res_sum = np.zeros(3)
    res_count = np.zeros(3, np.int64)
    empty_sites = np.empty(6, np.int64)
    weights = np.empty(3)
    t = 0.0
    n_logged = 0
    n_events = 0
    overflow = False

    while True:
        total = 0.0
        for p in range(3):
            weights[p] = counts[p] * (rates[p] + rates[3 + p])
            total += weights[p]
        if total <= 0.0:
            break
        t += -np.log(1.0 - np.random.random()) / total
        if t > horizon:
            break

        u = np.random.random() * total
        p = 0
        while p < 2 and (u >= weights[p] or counts[p] == 0):
            u -= weights[p]
            p += 1
        while weights[p] <= 0.0:
            p -= 1
        k = int(np.random.random() * counts[p])
        if k >= counts[p]:
            k = counts[p] - 1
        cell = members[p, k]
        site = site_of[cell]
        n_events += 1

        if np.random.random() * (rates[p] + rates[3 + p]) < rates[p]:
            if p == 2:
                n_empty = 0
                for j in range(6):
                    ns = _neighbour(site, j, width, height, even_dc, even_dr, odd_dc, odd_dr)
                    if ns >= 0 and occupancy[ns] < 0:
                        empty_sites[n_empty] = ns
                        n_empty += 1
                if n_empty == 0:
                    kind, a, b = 4, site, -1
                else:
                    j = int(np.random.random() * n_empty)
                    if j >= n_empty:
                        j = n_empty - 1
                    target = empty_sites[j]
                    res_sum[2] += dist[cell]
                    res_count[2] += 1
                    dist[cell] = 0.0
                    _move_member(members, counts, slot, cell, 2, 0)
                    phase[cell] = 0
                    child = n_cells
                    n_cells += 1
                    site_of[child] = target
                    occupancy[target] = child
                    phase[child] = 0
                    dist[child] = 0.0
                    members[0, counts[0]] = child
                    slot[child] = counts[0]
                    counts[0] += 1
                    kind, a, b = 2, site, target
            else:
                res_sum[p] += dist[cell]
                res_count[p] += 1
                dist[cell] = 0.0
                _move_member(members, counts, slot, cell, p, p + 1)
                phase[cell] = p + 1
                kind, a, b = 0, p, p + 1
        else:
            j = int(np.random.random() * 6)
            if j > 5:
                j = 5
            ns = _neighbour(site, j, width, height, even_dc, even_dr, odd_dc, odd_dr)
            if ns >= 0 and occupancy[ns] < 0:
                occupancy[site] = -1
                occupancy[ns] = cell
                site_of[cell] = ns
                dist[cell] += 1.0
                kind, a, b = 1, site, ns
            else:
                kind, a, b = 3, site, ns

        if n_logged < max_events:
            log[n_logged, 0] = t
            log[n_logged, 1] = cell
            log[n_logged, 2] = kind
            log[n_logged, 3] = a
            log[n_logged, 4] = b
            n_logged += 1
        elif max_events > 0:
            overflow = True

    for c in range(n_cells):
        res_sum[phase[c]] += dist[c]
        res_count[phase[c]] += 1
    return n_cells, n_logged, overflow, n_events, res_sum, res_count


def gillespie_run(state: InvasionState, params: InvasionParams, seed: int, record_events: bool = False,
                  max_events: int = 100_000) -> InvasionResult:
    """
    Exact stochastic simulation up to `params.horizon` hours.

    Each event picks a phase with probability proportional to n_p·(R_p + M_p),
    a uniform cell of that phase, then a transition with probability
    R_p/(R_p + M_p) and a move otherwise. Blocked moves and divisions with no
    empty neighbour change nothing but still consume time. The input state is
    not modified.
    """
    if state.n_cells < 1:
        raise InvasionError("gillespie_run needs at least one cell.")
    final = state.copy()
    capacity = max(int(max_events), 0) if record_events else 0
    log = np.zeros((max(capacity, 1), 5))
    n_cells, n_logged, overflow, n_events, res_sum, res_count = _gillespie_kernel(
        final.occupancy, final.site_of, final.phase, final.dist, final.n_cells, final.width, final.height,
        params.rates(), float(params.horizon), np.uint32(seed), capacity, log,
        _EVEN_DC, _EVEN_DR, _ODD_DC, _ODD_DR,
    )
    final.n_cells = int(n_cells)
    return InvasionResult(final, res_sum, res_count, log[:n_logged].copy(), bool(overflow), int(n_events))


def audit_occupancy(state: InvasionState) -> bool:
    """True when every cell sits on exactly one site and every site holds at most one cell."""
    sites = state.sites()
    if len(np.unique(sites)) != len(sites) or np.any(sites < 0):
        return False
    occupied = np.flatnonzero(state.occupancy >= 0)
    if len(occupied) != state.n_cells:
        return False
    return bool(np.all(state.occupancy[sites] == np.arange(state.n_cells)))


def replay_events(initial: InvasionState, events: np.ndarray) -> InvasionState:
    """
    Re-applies a complete event log to `initial`, checking occupancy
    exclusivity after every event.

    Raises:
        InvasionError: On the first event that breaks exclusivity or phase order.
    """
    state = initial.copy()
    for time, cell, kind, a, b in np.asarray(events):
        cell, kind, a, b = int(cell), int(kind), int(a), int(b)
        if kind == EVENT_MOVE:
            if state.occupancy[b] >= 0 or state.site_of[cell] != a:
                raise InvasionError(f"Move of cell {cell} at t={time} breaks occupancy.")
            state.occupancy[a], state.occupancy[b], state.site_of[cell] = -1, cell, b
        elif kind == EVENT_TRANSITION:
            if state.phase[cell] != a or b != (a + 1) % 3:
                raise InvasionError(f"Cell {cell} at t={time} left phase {PHASES[a]} out of order.")
            state.phase[cell] = b
        elif kind == EVENT_DIVISION:
            if state.phase[cell] != 2 or state.occupancy[b] >= 0:
                raise InvasionError(f"Division of cell {cell} at t={time} is invalid.")
            child = state.n_cells
            state.phase[cell] = 0
            state.site_of[child], state.phase[child], state.occupancy[b] = b, 0, child
            state.n_cells += 1
        if not audit_occupancy(state):
            raise InvasionError(f"Occupancy audit failed after event at t={time}.")
    return state


def summarize_counts(state: InvasionState) -> np.ndarray:
    """Cell counts per phase (red, yellow, green)."""
    return np.bincount(state.phases(), minlength=3).astype(np.float64)


def median_iqr(values: np.ndarray) -> Tuple[float, float]:
    """Median and interquartile range with linearly interpolated quartiles."""
    q1, q2, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25.0, 50.0, 75.0])
    return float(q2), float(q3 - q1)


def summarize_density(state: InvasionState, strict: bool = True) -> np.ndarray:
    """
    Counts followed by (median, IQR) of lateral position for each phase on
    each side of the scratch: red-left, red-right, yellow-left, ... (15 values).
    """
    x = state.xy()[:, 0]
    phases = state.phases()
    left = x < state.scratch_centre
    out = list(summarize_counts(state))
    for p in range(3):
        for side in (left, ~left):
            group = x[(phases == p) & side]
            if len(group) == 0:
                if strict:
                    raise DegenerateSummaryError(f"No {PHASES[p]} cells on one side of the scratch.")
                out.extend([np.nan, np.nan])
            else:
                out.extend(median_iqr(group))
    return np.array(out)


def summarize_trajectory(result: InvasionResult, strict: bool = True) -> np.ndarray:
    """Counts followed by the mean distance travelled per residency in each phase (6 values)."""
    counts = summarize_counts(result.state)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(result.residency_count > 0, result.residency_sum / np.maximum(result.residency_count, 1), np.nan)
    if strict and np.any(np.isnan(means)):
        missing = [PHASES[p] for p in range(3) if np.isnan(means[p])]
        raise DegenerateSummaryError(f"No residency observed for phase(s) {missing}.")
    return np.concatenate([counts, means])


def snapshot_frame(state: InvasionState) -> pd.DataFrame:
    q, r = site_axial(state.sites(), state.width)
    return pd.DataFrame({
        "cell_id": np.arange(state.n_cells),
        "phase": [PHASES[p] for p in state.phases()],
        "axial_q": q,
        "axial_r": r,
    })


def summary_frame(summaries: np.ndarray, family: str) -> pd.DataFrame:
    summaries = np.atleast_2d(summaries)
    frame = pd.DataFrame(summaries, columns=[f"s_{k + 1}" for k in range(summaries.shape[1])])
    frame.insert(0, "family", family)
    return frame


@dataclass(frozen=True)
class InvasionConfig:
    width: int = 200
    height: int = 200
    density: float = 0.3
    scratch_fraction: float = 1 / 3
    phase_proportions: Tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    horizon: float = 48.0
    summary: str = "counts"
    initial_seed: int = 0
    true_theta: Tuple[float, ...] = (0.04, 0.17, 0.08, 4.0, 4.0, 4.0)

    def __post_init__(self):
        if self.summary not in SUMMARY_FAMILIES:
            raise InvasionError(f"Unknown summary family '{self.summary}'. Valid choices: {', '.join(SUMMARY_FAMILIES)}.")
        if not 0.0 <= self.scratch_fraction < 1.0:
            raise InvasionError("scratch_fraction must lie in [0, 1).")
        object.__setattr__(self, "phase_proportions", tuple(float(p) for p in self.phase_proportions))
        object.__setattr__(self, "true_theta", tuple(float(t) for t in self.true_theta))

    @classmethod
    def from_settings(cls, settings: Optional[Mapping[str, Any]] = None) -> "InvasionConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (settings or {}).items() if k in known})


class InvasionModel(SimulatorModel):
    """Scratch-assay invasion model; every simulation starts from the same initial lattice."""
    name = "invasion"

    def __init__(self, config: InvasionConfig = InvasionConfig()):
        super().__init__(PriorSpec.uniform([0.0] * 6, [1.0] * 3 + [10.0] * 3, list(PARAM_NAMES)))
        self.config = config
        self.initial = init_scratch(config.width, config.height, config.density,
                                    int(round(config.scratch_fraction * config.width)),
                                    SeedStream(config.initial_seed).generator(), config.phase_proportions)

    @property
    def summary_dim(self) -> int:
        return SUMMARY_FAMILIES[self.config.summary]

    def simulate(self, theta: np.ndarray, seed: SeedStream) -> InvasionResult:
        return gillespie_run(self.initial, InvasionParams.from_theta(theta, self.config.horizon), seed.uint32())

    def summarize(self, raw: InvasionResult) -> np.ndarray:
        if self.config.summary == "counts":
            return summarize_counts(raw.state)
        if self.config.summary == "trajectory":
            return summarize_trajectory(raw)
        return summarize_density(raw.state)
