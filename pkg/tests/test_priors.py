import numpy as np
import pytest

from src.core.priors import (BoundTransform, LaplaceMarginal, PriorError, PriorSpec, TransformDomainError,
                             UniformMarginal, as_parameter_vector, log_prior_density, sample_prior)
from src.core.rng import SeedStream


@pytest.fixture
def mixed_prior():
    return PriorSpec((UniformMarginal(2.0, 768.0), LaplaceMarginal(0.0, 0.5)), ("g_age", "gamma"))


def test_uniform_log_density_inside_and_outside():
    prior = PriorSpec.uniform([0.0, -1.0], [2.0, 1.0])
    assert log_prior_density(prior, [1.0, 0.0]) == pytest.approx(-np.log(4.0))
    assert log_prior_density(prior, [3.0, 0.0]) == -np.inf
    # closed support: boundary points are in
    assert np.isfinite(log_prior_density(prior, [0.0, 1.0]))


def test_laplace_log_density_matches_closed_form(mixed_prior):
    expected = -np.log(766.0) + (-np.log(1.0) - 0.3 / 0.5)
    assert log_prior_density(mixed_prior, [10.0, 0.3]) == pytest.approx(expected)


def test_dimension_mismatch_raises():
    prior = PriorSpec.uniform([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(PriorError):
        log_prior_density(prior, [0.5])


def test_samples_lie_in_support():
    prior = PriorSpec.uniform([2.0, 1.0, 2.0], [768.0, 32.0, 768.0])
    draws = prior.sample(SeedStream(3).generator(), 5000)
    assert draws.shape == (5000, 3)
    assert np.all(prior.in_support(draws))


def test_sample_prior_is_reproducible():
    prior = PriorSpec.uniform([0.0], [1.0])
    a = sample_prior(prior, SeedStream(7, 11))
    b = sample_prior(prior, SeedStream(7, 11))
    assert np.array_equal(a, b)
    assert not a.flags.writeable


def test_as_parameter_vector_rejects_nonfinite():
    with pytest.raises(PriorError):
        as_parameter_vector([1.0, np.nan])


def test_invalid_marginals_rejected():
    with pytest.raises(PriorError):
        UniformMarginal(1.0, 1.0)
    with pytest.raises(PriorError):
        LaplaceMarginal(0.0, 0.0)


def test_transform_round_trip_and_jacobian(mixed_prior):
    transform = mixed_prior.transform()
    theta = mixed_prior.sample(SeedStream(1).generator(), 200)
    z, log_fwd = transform.forward(theta)
    back, log_inv = transform.inverse(z)
    assert np.allclose(back, theta, rtol=1e-9, atol=1e-9)
    assert np.allclose(log_fwd, -log_inv, atol=1e-8)


def test_transform_jacobian_matches_finite_difference():
    transform = BoundTransform(("logit",), (0.0,), (10.0,))
    theta, h = np.array([3.7]), 1e-6
    z_plus, _ = transform.forward(theta + h)
    z_minus, _ = transform.forward(theta - h)
    _, log_jac = transform.forward(theta)
    numeric = np.log(abs((z_plus - z_minus)[0] / (2 * h)))
    assert float(log_jac) == pytest.approx(numeric, rel=1e-6)


@pytest.mark.parametrize("value", [0.0, 10.0, -1.0, 11.0])
def test_logit_transform_rejects_boundary(value):
    transform = BoundTransform(("logit",), (0.0,), (10.0,))
    with pytest.raises(TransformDomainError):
        transform.forward(np.array([value]))


def test_log_density_unbounded_integrates_to_one():
    prior = PriorSpec.uniform([0.0], [1.0])
    z = np.linspace(-40.0, 40.0, 200001)[:, None]
    density = np.exp(prior.log_density_unbounded(z))
    assert np.trapz(density, z[:, 0]) == pytest.approx(1.0, abs=1e-6)


def test_moments_and_central_point(mixed_prior):
    assert np.allclose(mixed_prior.mean(), [385.0, 0.0])
    assert np.allclose(mixed_prior.std(), [766.0 / np.sqrt(12.0), np.sqrt(2.0) * 0.5])
    assert mixed_prior.in_support(mixed_prior.central_point())
