import numpy as np
import pytest
from scipy import linalg, stats

from src.core.rng import SeedStream
from src.modules.invasion import (EVENT_BLOCKED_DIVISION, EVENT_COLUMNS, DegenerateSummaryError, InvasionConfig,
                                  InvasionError, InvasionModel, InvasionParams, audit_occupancy, gillespie_run,
                                  init_scratch, median_iqr, new_state, replay_events, site_xy, snapshot_frame,
                                  summarize_counts, summarize_density, summarize_trajectory, summary_frame)

SMALL = InvasionConfig(width=30, height=20, density=0.5, horizon=12.0)


def _single_cell(width=41, height=41, phase=0):
    centre = (height // 2) * width + width // 2
    return new_state(width, height, [centre], [phase])


def test_neighbour_steps_have_unit_length():
    state = _single_cell()
    start = site_xy(state.sites(), state.width)[0]
    params = InvasionParams(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, horizon=200.0)
    result = gillespie_run(state, params, 3, record_events=True)
    moves = result.events[result.events[:, 2] == 1]
    xy = site_xy(moves[:, 4].astype(np.int64), state.width)
    prev = np.vstack([start, xy[:-1]])
    assert np.allclose(np.linalg.norm(xy - prev, axis=1), 1.0)


def test_mean_squared_displacement_grows_linearly():
    state = _single_cell()
    motility, horizon = 1.0, 10.0
    params = InvasionParams(0.0, 0.0, 0.0, motility, 0.0, 0.0, horizon=horizon)
    start = site_xy(state.sites(), state.width)[0]
    sq = []
    for rep in range(2000):
        final = gillespie_run(state, params, rep).state
        sq.append(np.sum((site_xy(final.sites(), final.width)[0] - start) ** 2))
    assert np.mean(sq) == pytest.approx(motility * horizon, rel=0.1)


def test_mean_phase_counts_follow_linear_ode():
    rr, ry, rg, horizon = 0.5, 0.4, 0.3, 4.0
    params = InvasionParams(rr, ry, rg, 1.0, 1.0, 1.0, horizon=horizon)
    state = _single_cell(width=61, height=61)
    counts = np.array([summarize_counts(gillespie_run(state, params, rep).state) for rep in range(4000)])
    generator = np.array([[-rr, 0.0, 2.0 * rg], [rr, -ry, 0.0], [0.0, ry, -rg]])
    expected = linalg.expm(generator * horizon) @ np.array([1.0, 0.0, 0.0])
    se = counts.std(axis=0, ddof=1) / np.sqrt(len(counts))
    assert np.all(np.abs(counts.mean(axis=0) - expected) < 4.0 * se + 1e-3)


def test_waiting_times_are_exponential():
    params = InvasionParams(0.0, 0.0, 0.0, 2.0, 0.0, 0.0, horizon=300.0)
    result = gillespie_run(_single_cell(21, 21), params, 11, record_events=True)
    gaps = np.diff(np.concatenate([[0.0], result.events[:, 0]]))
    assert len(gaps) == result.n_events
    assert stats.kstest(gaps, stats.expon(scale=0.5).cdf).pvalue > 1e-3


def test_event_log_replays_to_final_state():
    model = InvasionModel(SMALL)
    params = InvasionParams.from_theta(np.array([0.3, 0.3, 0.3, 2.0, 2.0, 2.0]), horizon=12.0)
    result = gillespie_run(model.initial, params, 5, record_events=True)
    assert not result.events_overflow
    assert audit_occupancy(result.state)
    replayed = replay_events(model.initial, result.events)
    assert np.array_equal(replayed.occupancy, result.state.occupancy)
    assert np.array_equal(replayed.phases(), result.state.phases())
    assert list(result.events_frame().columns) == list(EVENT_COLUMNS)


def test_input_state_is_not_modified():
    model = InvasionModel(SMALL)
    before = model.initial.copy()
    gillespie_run(model.initial, InvasionParams(0.5, 0.5, 0.5, 3.0, 3.0, 3.0, horizon=12.0), 1)
    assert np.array_equal(before.occupancy, model.initial.occupancy)
    assert before.n_cells == model.initial.n_cells


def test_without_green_transitions_cell_count_is_fixed():
    model = InvasionModel(SMALL)
    result = gillespie_run(model.initial, InvasionParams(0.5, 0.0, 0.5, 3.0, 3.0, 3.0, horizon=12.0), 2)
    assert result.state.n_cells == model.initial.n_cells
    assert np.sum(summarize_counts(result.state)) == model.initial.n_cells


def test_full_lattice_blocks_division():
    sites = np.arange(9)
    state = new_state(3, 3, sites, np.full(9, 2))
    result = gillespie_run(state, InvasionParams(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, horizon=5.0), 4, record_events=True)
    assert result.state.n_cells == 9
    assert np.all(result.events[:, 2] == EVENT_BLOCKED_DIVISION)
    assert np.array_equal(summarize_counts(result.state), [0.0, 0.0, 9.0])


def test_zero_rates_produce_no_events():
    result = gillespie_run(_single_cell(), InvasionParams(0.0, 0.0, 0.0, 0.0, 0.0, 0.0), 0)
    assert result.n_events == 0


def test_runs_are_reproducible():
    model = InvasionModel(SMALL)
    params = InvasionParams(0.2, 0.2, 0.2, 2.0, 2.0, 2.0, horizon=12.0)
    first, second = gillespie_run(model.initial, params, 9), gillespie_run(model.initial, params, 9)
    assert np.array_equal(first.state.occupancy, second.state.occupancy)


def test_scratch_leaves_central_columns_empty():
    state = init_scratch(30, 10, 1.0, 10, SeedStream(0).generator())
    cols = state.sites() % 30
    assert not np.any((cols >= 10) & (cols < 20))
    assert state.n_cells == 200
    with pytest.raises(InvasionError):
        init_scratch(30, 10, 0.5, 30, SeedStream(0).generator())


def test_median_iqr():
    assert median_iqr(np.array([1.0, 2.0, 3.0, 4.0])) == pytest.approx((2.5, 1.5))


@pytest.mark.parametrize("family, dim", [("counts", 3), ("trajectory", 6), ("density", 15)])
def test_summary_dimensions(family, dim):
    config = InvasionConfig(width=30, height=20, density=0.5, horizon=12.0, summary=family)
    model = InvasionModel(config)
    assert model.summary_dim == dim
    summary = model.simulate_summary(np.array(config.true_theta), SeedStream(1))
    assert summary.shape == (dim,)
    assert np.all(np.isfinite(summary))


def test_degenerate_groups_raise_or_give_nan():
    state = new_state(10, 4, [0, 9], [0, 0], scratch_start=4, scratch_width=2)
    with pytest.raises(DegenerateSummaryError):
        summarize_density(state)
    lenient = summarize_density(state, strict=False)
    assert lenient.shape == (15,)
    assert np.isnan(lenient[7]) and np.isfinite(lenient[3])

    result = gillespie_run(state, InvasionParams(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, horizon=1.0), 0)
    with pytest.raises(DegenerateSummaryError):
        summarize_trajectory(result)


def test_snapshot_frame_columns():
    frame = snapshot_frame(InvasionModel(SMALL).initial)
    assert list(frame.columns) == ["cell_id", "phase", "axial_q", "axial_r"]
    assert set(frame["phase"]) <= {"red", "yellow", "green"}


def test_invalid_inputs():
    with pytest.raises(InvasionError):
        InvasionParams(-0.1, 0.0, 0.0, 0.0, 0.0, 0.0)
    with pytest.raises(InvasionError):
        new_state(3, 3, [0, 0], [0, 1])
    with pytest.raises(InvasionError):
        InvasionConfig(summary="moments")


def test_summary_frame_tags_rows_with_the_family():
    frame = summary_frame(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), "counts")
    assert list(frame.columns) == ["family", "s_1", "s_2", "s_3"]
    assert frame["family"].tolist() == ["counts", "counts"]
    assert len(summary_frame(np.zeros(6), "trajectory")) == 1
