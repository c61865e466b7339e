import sys

import numpy as np
import pytest

from src.core.priors import LaplaceMarginal, PriorSpec
from src.core.rng import SeedStream
from src.core.simulator import NonFiniteSummaryError, SimulationEngine, SimulatorError
from src.modules.external_simulator import (DimensionCalibration, ExternalDimensionMismatch, ExternalNonNumericOutput,
                                            ExternalSimulatorError, ExternalSimulatorFailed, ExternalSimulatorModel,
                                            ExternalSimulatorSpec, ExternalSimulatorTimeout, external_simulate,
                                            format_parameter_row, parse_summary_row, prior_from_settings)

ECHO = (sys.executable, "-c", "import sys; print(sys.stdin.readline().strip())")


def _script(code, *args, timeout=30.0):
    return ExternalSimulatorSpec((sys.executable, "-c", code) + tuple(args), timeout=timeout)


def test_echo_round_trips_parameters_exactly():
    theta = np.array([0.1, 1.0 / 3.0, -2.5e-7])
    summary = external_simulate(ExternalSimulatorSpec(ECHO), theta, SeedStream(0))
    assert np.array_equal(summary, theta)


def test_seed_reaches_argument_and_environment():
    spec = _script("import os, sys; sys.stdin.read(); print(sys.argv[1] + ',' + os.environ['SBI_SEED'])", "{seed}")
    seed = SeedStream(5).child(3)
    summary = external_simulate(spec, np.zeros(1), seed)
    assert summary.tolist() == [float(seed.uint32())] * 2


def test_last_nonempty_line_is_the_summary():
    spec = _script("import sys; sys.stdin.read(); print('progress: starting'); print('1.5, 2.5'); print('')")
    assert external_simulate(spec, np.zeros(1), SeedStream(1)).tolist() == [1.5, 2.5]


def test_nonzero_exit_carries_stderr():
    spec = _script("import sys; sys.stdin.read(); sys.stderr.write('model diverged'); sys.exit(3)")
    with pytest.raises(ExternalSimulatorFailed) as info:
        external_simulate(spec, np.zeros(1), SeedStream(2))
    assert info.value.returncode == 3
    assert "model diverged" in info.value.stderr
    assert isinstance(info.value, SimulatorError)


def test_missing_executable():
    spec = ExternalSimulatorSpec(("definitely-not-an-installed-simulator-7f3a",))
    with pytest.raises(ExternalSimulatorFailed):
        external_simulate(spec, np.zeros(1), SeedStream(3))


def test_timeout():
    spec = _script("import time; time.sleep(10)", timeout=0.5)
    with pytest.raises(ExternalSimulatorTimeout):
        external_simulate(spec, np.zeros(1), SeedStream(4))


def test_non_numeric_output():
    spec = _script("import sys; sys.stdin.read(); print('1.0,abc')")
    with pytest.raises(ExternalNonNumericOutput):
        external_simulate(spec, np.zeros(1), SeedStream(5))
    with pytest.raises(ExternalNonNumericOutput):
        parse_summary_row("\n  \n")


def test_dimension_is_calibrated_on_first_call():
    calibration = DimensionCalibration()
    spec = ExternalSimulatorSpec(ECHO)
    external_simulate(spec, np.zeros(3), SeedStream(6), calibration)
    assert calibration.dim == 3
    with pytest.raises(ExternalDimensionMismatch):
        external_simulate(spec, np.zeros(2), SeedStream(7), calibration)


def test_declared_dimension_is_enforced():
    calibration = DimensionCalibration(expected=2)
    with pytest.raises(ExternalDimensionMismatch):
        external_simulate(ExternalSimulatorSpec(ECHO), np.zeros(3), SeedStream(8), calibration)


def test_model_runs_through_the_engine():
    model = ExternalSimulatorModel(ExternalSimulatorSpec(ECHO), PriorSpec.uniform([0.0, 0.0], [1.0, 1.0]))
    with pytest.raises(ExternalSimulatorError):
        _ = model.summary_dim
    engine = SimulationEngine(model, n_jobs=2)
    thetas = [np.array([0.2, 0.4]), np.array([0.6, 0.8]), np.array([0.1, 0.9])]
    summaries = engine.simulate_summaries(thetas, [SeedStream(9).child(i) for i in range(3)])
    assert np.array_equal(summaries, np.vstack(thetas))
    assert model.summary_dim == 2
    assert engine.counter.count == 3


def test_nan_output_is_a_non_finite_summary():
    spec = _script("import sys; sys.stdin.read(); print('nan,1')")
    model = ExternalSimulatorModel(spec, PriorSpec.uniform([0.0], [1.0]))
    with pytest.raises(NonFiniteSummaryError):
        model.simulate_summary(np.array([0.5]), SeedStream(10))


def test_spec_from_settings_splits_command_strings():
    spec = ExternalSimulatorSpec.from_settings({"command": "./sim --seed {seed} --fast", "timeout": 5})
    assert spec.command == ("./sim", "--seed", "{seed}", "--fast")
    assert spec.argv(42) == ["./sim", "--seed", "42", "--fast"]
    assert spec.timeout == 5.0


def test_spec_validation():
    with pytest.raises(ExternalSimulatorError):
        ExternalSimulatorSpec(())
    with pytest.raises(ExternalSimulatorError):
        ExternalSimulatorSpec(ECHO, timeout=0.0)


def test_parameter_row_format():
    assert format_parameter_row(np.array([1.0, 0.5])) == "1,0.5\n"


def test_prior_from_settings_forms():
    uniform = prior_from_settings({"low": [0, 1], "high": [1, 3], "names": ["a", "b"]})
    assert uniform.names == ("a", "b")
    assert np.allclose(uniform.bounds()[1], [1.0, 3.0])

    mixed = prior_from_settings({"marginals": [
        {"name": "rate", "kind": "uniform", "low": 0, "high": 2},
        {"kind": "laplace", "location": 1.0, "scale": 0.5},
    ]})
    assert mixed.names == ("rate", "theta_2")
    assert isinstance(mixed.marginals[1], LaplaceMarginal)
    with pytest.raises(ExternalSimulatorError):
        prior_from_settings({"marginals": [{"kind": "beta"}]})


def test_model_from_settings():
    model = ExternalSimulatorModel.from_settings({
        "command": list(ECHO), "summary_dim": 1, "true_theta": [0.5],
        "prior": {"low": [0.0], "high": [1.0]},
    })
    assert model.summary_dim == 1
    assert model.true_theta == (0.5,)
    with pytest.raises(ExternalSimulatorError):
        ExternalSimulatorModel.from_settings({"command": list(ECHO)})
