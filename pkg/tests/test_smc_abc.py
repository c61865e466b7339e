import math

import numpy as np
import pytest
from scipy import stats

from src.core.rng import SeedStream
from src.core.simulator import SimulationEngine
from src.modules.smc_abc import (BudgetExhaustedError, ParticlePopulation, SmcAbcError, SmcConfig, discard_count,
                                 adaptive_threshold, compute_num_mcmc_steps, proposal_cov_from_population,
                                 proposal_factor, resample_and_move, run_smc_abc)
from tests.conftest import ConstantModel, GaussianModel, IdentityModel


def _population(rhos):
    rhos = np.asarray(rhos, dtype=np.float64)
    thetas = np.arange(len(rhos), dtype=np.float64).reshape(-1, 1)
    return ParticlePopulation(thetas, rhos.reshape(-1, 1), rhos)


def _prior_population(model, observed, n, seed):
    rng = SeedStream(seed).generator()
    thetas = model.prior.sample(rng, n)
    summaries = np.vstack([model.simulate_summary(t, SeedStream(seed).child(i)) for i, t in enumerate(thetas)])
    rhos = np.linalg.norm(summaries - observed, axis=1)
    return ParticlePopulation(thetas, summaries, rhos)


def test_threshold_discards_worst_half():
    epsilon, survivors, discarded = adaptive_threshold(_population([3.0, 1.0, 4.0, 2.0]), 0.5)
    assert epsilon == 2.0
    assert set(discarded.tolist()) == {0, 2}
    assert set(survivors.tolist()) == {1, 3}


def test_threshold_on_thousand_particles():
    epsilon, survivors, discarded = adaptive_threshold(_population(np.arange(1, 1001)), 0.5)
    assert epsilon == 500.0
    assert len(survivors) == 500 and len(discarded) == 500


def test_threshold_with_ties_splits_by_rank():
    epsilon, survivors, discarded = adaptive_threshold(_population(np.ones(10)), 0.5)
    assert epsilon == 1.0
    assert len(survivors) == 5
    assert len(np.intersect1d(survivors, discarded)) == 0


def test_threshold_rejects_bad_fraction():
    with pytest.raises(SmcAbcError):
        adaptive_threshold(_population([1.0, 2.0]), 1.0)


@pytest.mark.parametrize("n, a, n_discard", [(10, 0.7, 7), (100, 0.29, 29), (10, 0.3, 3), (1000, 0.5, 500),
                                            (7, 0.5, 3), (3, 0.99, 2)])
def test_discard_count_is_floor_of_fraction(n, a, n_discard):
    assert discard_count(n, a) == n_discard
    epsilon, survivors, discarded = adaptive_threshold(_population(np.arange(1.0, n + 1.0)), a)
    assert len(discarded) == n_discard
    assert epsilon == float(n - n_discard)
    assert len(survivors) == n - n_discard
    SmcConfig(n_particles=n, a=a)


def test_discard_fraction_must_replace_a_particle():
    with pytest.raises(SmcAbcError):
        discard_count(10, 0.05)


@pytest.mark.parametrize("p_acc, expected", [(0.5, 7), (0.99, 1), (0.1, 44), (0.0, 500), (1.0, 1)])
def test_num_mcmc_steps_examples(p_acc, expected):
    assert compute_num_mcmc_steps(p_acc, 0.01) == expected


@pytest.mark.parametrize("p_acc", np.round(np.arange(0.01, 1.0, 0.01), 2).tolist())
def test_num_mcmc_steps_matches_direct_evaluation(p_acc):
    ratio = math.log(0.01) / math.log(1.0 - p_acc)
    expected = min(math.ceil(round(ratio, 9)), 500)
    assert compute_num_mcmc_steps(p_acc, 0.01) == expected


def test_num_mcmc_steps_cap():
    assert compute_num_mcmc_steps(0.0, 0.01, cap=50) == 50
    assert compute_num_mcmc_steps(1e-6, 0.01, cap=50) == 50


def test_proposal_factor_reproduces_covariance():
    cov = np.array([[2.0, 0.3], [0.3, 0.5]])
    factor = proposal_factor(cov)
    assert np.allclose(factor @ factor.T, cov)
    with pytest.raises(SmcAbcError):
        proposal_factor(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_zero_covariance_move_accepts_everything():
    model = IdentityModel()
    observed = np.array([0.5, 0.5])
    population = _prior_population(model, observed, 40, 3)
    _, survivors, _ = adaptive_threshold(population, 0.5)
    moved, p_acc = resample_and_move(population, np.inf, np.zeros((2, 2)), 3, SimulationEngine(model),
                                     observed, SeedStream(9))
    assert p_acc == 1.0
    kept = population.thetas[survivors]
    for theta in moved.thetas:
        assert np.min(np.abs(kept - theta).max(axis=1)) < 1e-9


def test_move_keeps_every_particle_within_tolerance():
    model = GaussianModel()
    observed = np.array([1.0, -1.0])
    population = _prior_population(model, observed, 200, 5)
    epsilon, survivors, _ = adaptive_threshold(population, 0.5)
    cov = proposal_cov_from_population(population, model.prior, survivors)
    moved, p_acc = resample_and_move(population, epsilon, cov, 5, SimulationEngine(model), observed, SeedStream(6))
    assert np.all(moved.rhos <= epsilon)
    assert 0.0 < p_acc <= 1.0
    assert np.allclose(np.linalg.norm(moved.summaries - observed, axis=1), moved.rhos)


def test_unbounded_tolerance_leaves_prior_invariant():
    model = IdentityModel()
    observed = np.array([0.5, 0.5])
    population = _prior_population(model, observed, 1000, 11)
    cov = proposal_cov_from_population(population, model.prior)
    moved, _ = resample_and_move(population, np.inf, cov, 30, SimulationEngine(model), observed, SeedStream(12))
    for k in range(2):
        assert stats.kstest(moved.thetas[:, k], stats.uniform(0, 1).cdf).pvalue > 1e-3


def test_toy_posterior_matches_analytic(toy_model, toy_observed):
    config = SmcConfig(n_particles=200, epsilon_target=0.05)
    engine = SimulationEngine(toy_model)
    population, trace = run_smc_abc(toy_model, toy_observed, config, seed=1, engine=engine)

    assert trace.termination_reason == "target_reached"
    assert trace.final_epsilon == pytest.approx(0.05)
    assert np.all(np.diff(trace.epsilons) < 0)
    assert np.all(population.rhos <= trace.final_epsilon)

    oracle = toy_model.analytic_posterior(toy_observed[0])
    assert population.thetas[:, 0].mean() == pytest.approx(oracle.mean(), abs=0.05)
    assert 0.07 < population.thetas[:, 0].std() < 0.15


def test_budget_accounting_matches_counter(toy_model, toy_observed):
    engine = SimulationEngine(toy_model)
    _, trace = run_smc_abc(toy_model, toy_observed, SmcConfig(n_particles=100, epsilon_target=0.2), seed=2,
                           engine=engine)
    assert trace.total_simulations == engine.counter.count
    assert trace.records[-1].cum_sims == engine.counter.count
    cum = [r.cum_sims for r in trace.records]
    assert all(b > a for a, b in zip(cum, cum[1:]))
    assert list(trace.to_frame().columns) == ["iter", "epsilon", "p_acc", "R_t", "cum_sims"]


def test_budget_stops_the_run(toy_model, toy_observed):
    config = SmcConfig(n_particles=100, max_total_simulations=250)
    _, trace = run_smc_abc(toy_model, toy_observed, config, seed=3)
    assert trace.termination_reason == "budget_exhausted"
    assert trace.total_simulations <= 250
    assert len(trace.records) >= 1


def test_budget_below_initial_population_raises(toy_model, toy_observed):
    with pytest.raises(BudgetExhaustedError):
        run_smc_abc(toy_model, toy_observed, SmcConfig(n_particles=100, max_total_simulations=50), seed=0)


def test_constant_simulator_stagnates():
    model = ConstantModel(value=(1.0,))
    population, trace = run_smc_abc(model, np.array([0.0]), SmcConfig(n_particles=20), seed=0)
    assert trace.termination_reason == "stagnation"
    assert trace.final_epsilon == 1.0
    assert len(population) == 20


def test_results_do_not_depend_on_thread_count(toy_model, toy_observed):
    config = SmcConfig(n_particles=60, epsilon_target=0.5)
    serial, _ = run_smc_abc(toy_model, toy_observed, config, seed=7, n_jobs=1)
    threaded, _ = run_smc_abc(toy_model, toy_observed, config, seed=7, n_jobs=4)
    assert np.array_equal(serial.thetas, threaded.thetas)
    assert np.array_equal(serial.rhos, threaded.rhos)


def test_progress_callback_reaches_hundred(toy_model, toy_observed):
    seen = []
    run_smc_abc(toy_model, toy_observed, SmcConfig(n_particles=40, epsilon_target=1.0), seed=4,
                progress_callback=lambda p, m: seen.append(p))
    assert seen[0] == 0 and seen[-1] == 100


@pytest.mark.parametrize("bad", [{"n_particles": 1}, {"n_particles": 10, "a": 0.05}, {"a": 0.0}, {"c": 1.0},
                                 {"epsilon_target": -1.0}, {"min_acceptance": 1.0}, {"max_total_simulations": 0}])
def test_config_rejects_invalid_values(bad):
    with pytest.raises(SmcAbcError):
        SmcConfig(**bad)


def test_config_from_settings_ignores_unknown_keys():
    config = SmcConfig.from_settings({"n_particles": 50, "unrelated": True})
    assert config.n_particles == 50
