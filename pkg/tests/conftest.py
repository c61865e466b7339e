import logging

import numpy as np
import pytest

from src.core.config_manager import ConfigManager
from src.core.logger import AppLogger
from src.core.priors import PriorSpec
from src.core.rng import SeedStream
from src.core.simulator import SimulationEngine, SimulatorModel
from src.modules.toy_gaussian import ToyGaussianConfig, ToyGaussianModel


@pytest.fixture(scope="session", autouse=True)
def toolkit_services(tmp_path_factory):
    """Logger and config singletons pointed at throwaway directories."""
    root = tmp_path_factory.mktemp("toolkit")
    AppLogger(log_dir=str(root / "logs"), log_level=logging.DEBUG, console=False)
    ConfigManager(config_dir=str(root / "config"))
    return root


class ConstantModel(SimulatorModel):
    """Ignores θ and the seed; always returns `value`."""
    name = "constant"

    def __init__(self, value=(1.0,), prior=None):
        super().__init__(prior or PriorSpec.uniform([0.0], [1.0]))
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def summary_dim(self):
        return self.value.size

    def simulate(self, theta, seed):
        return self.value.copy()

    def summarize(self, raw):
        return raw


class IdentityModel(SimulatorModel):
    """Summary equals θ."""
    name = "identity"

    def __init__(self, prior=None):
        super().__init__(prior or PriorSpec.uniform([0.0, 0.0], [1.0, 1.0]))

    @property
    def summary_dim(self):
        return self.prior.dim

    def simulate(self, theta, seed):
        return np.asarray(theta, dtype=np.float64).copy()

    def summarize(self, raw):
        return raw


class GaussianModel(SimulatorModel):
    """Summary ~ Normal(θ, sd²) independently per coordinate."""
    name = "gaussian"

    def __init__(self, prior=None, sd=1.0):
        super().__init__(prior or PriorSpec.uniform([-5.0, -5.0], [5.0, 5.0]))
        self.sd = sd

    @property
    def summary_dim(self):
        return self.prior.dim

    def simulate(self, theta, seed):
        return np.asarray(theta) + self.sd * seed.generator().standard_normal(self.prior.dim)

    def summarize(self, raw):
        return raw


class TwoPointModel(SimulatorModel):
    """Summary is ±1 with equal probability: bimodal by construction."""
    name = "two-point"

    def __init__(self):
        super().__init__(PriorSpec.uniform([0.0], [1.0]))

    @property
    def summary_dim(self):
        return 1

    def simulate(self, theta, seed):
        return np.array([1.0 if seed.generator().uniform() < 0.5 else -1.0])

    def summarize(self, raw):
        return raw


class FlakyModel(SimulatorModel):
    """Returns NaN for the first `failures` calls, then θ."""
    name = "flaky"

    def __init__(self, failures=1):
        super().__init__(PriorSpec.uniform([0.0], [1.0]))
        self.failures = failures
        self.calls = 0

    @property
    def summary_dim(self):
        return 1

    def simulate(self, theta, seed):
        self.calls += 1
        if self.calls <= self.failures:
            return np.array([np.nan])
        return np.asarray(theta, dtype=np.float64).copy()

    def summarize(self, raw):
        return raw


@pytest.fixture
def constant_model():
    return ConstantModel()


@pytest.fixture
def identity_model():
    return IdentityModel()


@pytest.fixture
def gaussian_model():
    return GaussianModel()


@pytest.fixture
def two_point_model():
    return TwoPointModel()


@pytest.fixture
def flaky_model():
    return FlakyModel()


@pytest.fixture
def toy_model():
    return ToyGaussianModel(ToyGaussianConfig())


@pytest.fixture
def toy_engine(toy_model):
    return SimulationEngine(toy_model)


@pytest.fixture
def toy_observed(toy_model):
    """Observed mean summary simulated at the default true θ = 2."""
    return toy_model.simulate_summary(np.array([2.0]), SeedStream(12345))
