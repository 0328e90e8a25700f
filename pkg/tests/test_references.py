import json
import math

import numpy as np
import pytest
from scipy.stats import kstest, norm

from app.features.potentials.models import LaplaceGaussianPosterior1D, QuadraticPotential
from app.features.references.models import GaussianTarget
from app.features.references.service import (
    approximate_reference,
    build_mixture,
    cdf,
    exact_target,
    export_json,
    has_exact_target,
    interval_log_density,
    log_density,
    moments,
    quadrature_expectation,
    quadrature_log_masses,
    quantile,
    reference_points,
    sample,
    stratified_quantiles,
    target_mean,
)
from app.infrastructure.errors import OutOfDomain, ReferenceUnavailable


def test_interval_masses_match_quadrature(posterior_1d):
    mix = build_mixture(posterior_1d)
    oracle = quadrature_log_masses(posterior_1d)
    np.testing.assert_allclose(np.exp(mix.log_masses), np.exp(oracle), rtol=1e-8)
    assert mix.normalizer == pytest.approx(np.exp(oracle).sum(), rel=1e-8)
    assert mix.weights.sum() == pytest.approx(1.0, abs=1e-14)


def test_masses_match_quadrature_at_other_temperature(posterior_1d):
    mix = build_mixture(posterior_1d, beta=3.0)
    oracle = quadrature_log_masses(posterior_1d, beta=3.0)
    np.testing.assert_allclose(mix.log_masses, oracle, rtol=1e-8, atol=1e-10)


def test_log_density_is_normalized_potential(posterior_1d):
    mix = build_mixture(posterior_1d)
    theta = np.array([-2.0, 0.3, 1.7])
    expected = -posterior_1d.value(theta[:, None]) - mix.log_normalizer
    np.testing.assert_allclose(log_density(mix, theta), expected, rtol=1e-12)


def test_no_observations_reduces_to_gaussian():
    post = LaplaceGaussianPosterior1D(observations=[], prior_mean=0.7, prior_sd=2.0, beta=4.0)
    mix = build_mixture(post)
    assert quantile(mix, 0.975) == pytest.approx(0.7 + 1.0 * 1.959963984540054, rel=1e-10)
    assert moments(mix, 1) == pytest.approx(0.7, abs=1e-12)
    variance = moments(mix, 2) - moments(mix, 1) ** 2
    assert variance == pytest.approx(4.0 / 4.0, rel=1e-10)


def test_quantile_inverts_cdf(posterior_1d):
    mix = build_mixture(posterior_1d)
    levels = np.array([1e-6, 0.1, 0.3, 0.5, 0.77, 0.999])
    np.testing.assert_allclose(cdf(mix, quantile(mix, levels)), levels, atol=1e-12)
    assert cdf(mix, 0.0) == pytest.approx(0.5, abs=1e-12)


def test_quantile_domain(posterior_1d):
    mix = build_mixture(posterior_1d)
    for bad in (0.0, 1.0, -0.1, float("nan")):
        with pytest.raises(OutOfDomain):
            quantile(mix, bad)


def test_sampled_draws_pass_ks(posterior_1d):
    mix = build_mixture(posterior_1d)
    n = 100_000
    draws = sample(mix, n, seed=21)
    assert draws.shape == (n, 1)
    statistic = kstest(draws[:, 0], lambda t: cdf(mix, t)).statistic
    assert statistic < 1.63 / math.sqrt(n)
    np.testing.assert_array_equal(draws, sample(mix, n, seed=21))


def test_asymmetric_mean_matches_quadrature():
    post = LaplaceGaussianPosterior1D(observations=[-1.0, 3.0])
    mix = build_mixture(post)
    assert moments(mix, 1) == pytest.approx(quadrature_expectation(post, lambda t: t), rel=1e-8)
    second = quadrature_expectation(post, lambda t: t * t)
    assert moments(mix, 2) == pytest.approx(second, rel=1e-8)


@pytest.mark.parametrize("observations", [[-1.0, 1.0], [-1.0, -1.0, 3.0], [0.2]])
def test_density_is_continuous_at_breakpoints(observations):
    mix = build_mixture(LaplaceGaussianPosterior1D(observations=observations, prior_sd=1.5))
    for i, y in enumerate(mix.breakpoints):
        left = interval_log_density(mix, i, y)
        right = interval_log_density(mix, i + 1, y)
        assert left == pytest.approx(right, abs=1e-10)


def test_sample_moments_within_four_standard_errors():
    mix = build_mixture(LaplaceGaussianPosterior1D(observations=[-1.0, 3.0]))
    n = 20_000
    draws = sample(mix, n, seed=5)[:, 0]
    m1, m2, m3, m4 = (moments(mix, k) for k in (1, 2, 3, 4))
    variance = m2 - m1**2
    central_fourth = m4 - 4 * m1 * m3 + 6 * m1**2 * m2 - 3 * m1**4
    assert abs(draws.mean() - m1) < 4.0 * math.sqrt(variance / n)
    assert abs(draws.var(ddof=1) - variance) < 4.0 * math.sqrt((central_fourth - variance**2) / n)


@pytest.mark.parametrize("scale", [0.5, 1.0, 3.0])
def test_symmetric_single_observation_median(scale):
    post = LaplaceGaussianPosterior1D(observations=[0.7], scale=scale, prior_mean=0.7)
    mix = build_mixture(post)
    assert mix.weights == pytest.approx([0.5, 0.5], abs=1e-12)
    assert quantile(mix, 0.5) == pytest.approx(0.7, abs=1e-9)


def test_moment_order_is_checked(posterior_1d):
    with pytest.raises(ValueError):
        moments(build_mixture(posterior_1d), 5)


def test_infinite_beta_has_no_density(posterior_1d):
    with pytest.raises(ValueError):
        build_mixture(posterior_1d, beta=float("inf"))


def test_export_json(posterior_1d):
    document = json.loads(export_json(build_mixture(posterior_1d)))
    assert document["breakpoints"] == [-1.0, 1.0]
    assert sum(document["weights"]) == pytest.approx(1.0)
    assert len(document["means"]) == 3


def test_stratified_points_are_sorted_quantiles(posterior_1d):
    mix = build_mixture(posterior_1d)
    points = stratified_quantiles(mix, 1000)
    assert points.shape == (1000, 1)
    assert np.all(np.diff(points[:, 0]) > 0)
    assert points[:, 0].mean() == pytest.approx(0.0, abs=1e-3)


def test_exact_targets(posterior_1d, posterior_2d):
    target = exact_target(QuadraticPotential(dimension=2, curvature=4.0, center=[1.0, 2.0]))
    assert isinstance(target, GaussianTarget)
    assert target.sd == pytest.approx(0.5)
    assert has_exact_target(posterior_1d)
    assert not has_exact_target(posterior_2d)
    with pytest.raises(ReferenceUnavailable):
        exact_target(posterior_2d)
    assert target_mean(exact_target(posterior_1d))[0] == pytest.approx(0.0, abs=1e-12)


def test_gaussian_reference_points(quadratic):
    target = exact_target(quadratic)
    points = reference_points(target, 2000, seed=0)
    expected = norm.ppf((np.arange(2000) + 0.5) / 2000)
    np.testing.assert_allclose(points[:, 0], expected, rtol=1e-12)
    two_d = reference_points(
        exact_target(QuadraticPotential(dimension=2)), 4000, seed=1
    )
    assert two_d.shape == (4000, 2)
    assert np.abs(two_d.mean(axis=0)).max() < 0.1


def test_approximate_reference(posterior_2d):
    reference = approximate_reference(
        posterior_2d, gamma_min=0.08, n_samples=500, n_steps=400, seed=3, init=[0.1, 0.1]
    )
    assert reference.points.shape == (500, 2)
    assert reference.gamma == pytest.approx(0.005)
    assert np.all(np.isfinite(reference.points))
