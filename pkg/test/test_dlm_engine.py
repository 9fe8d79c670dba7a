#!/usr/bin/env python3
"""
Tests for the discount DLM: filter recursions, agent densities and evolution draws
"""

import numpy as np
import pandas as pd
import pytest
from scipy import integrate, stats

from dlm_engine import (
    DensityPath,
    DiscountConfig,
    DLMPosterior,
    StudentTDensity,
    agent_density_path,
    evolve_draws,
    filter_step,
    forecast_density,
    run_expanding_filter,
    sample_evolution,
)
from errors import DataValidationError, NumericalError
from timeseries_data import SupervisedSlice

STATIC = DiscountConfig(delta=1.0, beta=1.0)


def _slice(X, y, k=1):
    dates = pd.period_range("2000-01", periods=len(y), freq="M")
    return SupervisedSlice(horizon=k, dates=dates, y=np.asarray(y, dtype=float), X=np.asarray(X, dtype=float),
                           columns=tuple(f"x{i}" for i in range(X.shape[1])), intercept=False)


def _batch_posterior(X, y, m0, n0, s0):
    """Conjugate normal/inverse-gamma regression with prior theta | v ~ N(m0, (v/s0) I)"""
    p = X.shape[1]
    prior_prec = s0 * np.eye(p)
    Lam = prior_prec + X.T @ X
    mu = np.linalg.solve(Lam, prior_prec @ m0 + X.T @ y)
    n = n0 + len(y)
    ns = n0 * s0 + y @ y + m0 @ prior_prec @ m0 - mu @ Lam @ mu
    s = ns / n
    return mu, s * np.linalg.inv(Lam), n, s


def test_hand_computed_scalar_step():
    post = DLMPosterior(m=np.zeros(1), C=np.eye(1), n=1.0, s=1.0)
    new, density, e = filter_step(post, np.ones(1), 1.0, STATIC)
    assert density.scale == 2.0
    assert density.location == 0.0
    assert e == 1.0
    assert new.n == 2.0
    assert new.s == 0.75
    assert new.m[0] == 0.5
    assert new.C[0, 0] == 0.375


def test_filter_matches_batch_oracle():
    """With delta = beta = 1 the sequential filter equals conjugate batch regression at every t"""
    rng = np.random.default_rng(11)
    for _ in range(50):
        p = int(rng.integers(1, 6))
        T = int(rng.integers(p + 2, 201))
        X = rng.standard_normal((T, p))
        y = X @ rng.standard_normal(p) + 0.5 * rng.standard_normal(T)
        m0 = rng.standard_normal(p) * 0.1
        n0, s0 = 5.0, 0.3

        post = DLMPosterior.initial(p, n0=n0, s0=s0, m0=m0)
        for t in range(T):
            post, _, _ = filter_step(post, X[t], y[t], STATIC)
            mu, C, n, s = _batch_posterior(X[: t + 1], y[: t + 1], m0, n0, s0)
            np.testing.assert_allclose(post.m, mu, rtol=1e-10, atol=1e-10)
            np.testing.assert_allclose(post.C, C, rtol=1e-10, atol=1e-10)
            assert post.n == pytest.approx(n, rel=1e-12)
            assert post.s == pytest.approx(s, rel=1e-10)


def test_filter_keeps_symmetry_and_positive_definiteness():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((150, 4))
    y = X @ np.array([0.5, -0.2, 0.1, 0.0]) + 0.1 * rng.standard_normal(150)
    path = run_expanding_filter(_slice(X, y), DLMPosterior.initial(4), DiscountConfig(0.95, 0.9))
    for _, post in path:
        post.check()


def test_dimension_mismatch():
    with pytest.raises(DataValidationError):
        filter_step(DLMPosterior.initial(2), np.ones(3), 0.0, STATIC)


def test_zero_predictive_variance_is_reported_with_date():
    post = DLMPosterior(m=np.zeros(1), C=np.zeros((1, 1)), n=1.0, s=0.0)
    with pytest.raises(NumericalError) as info:
        run_expanding_filter(_slice(np.ones((3, 1)), [1.0, 2.0, 3.0]), post, STATIC)
    assert info.value.date == "2000-01"


def test_forecast_density_steps_inflate_scale():
    post = DLMPosterior(m=np.array([1.0]), C=np.array([[2.0]]), n=8.0, s=0.5)
    disc = DiscountConfig(delta=0.8, beta=0.9)
    one = forecast_density(post, np.array([1.0]), disc, steps=1)
    three = forecast_density(post, np.array([1.0]), disc, steps=3)
    assert one.scale == pytest.approx(2.0 / 0.8 + 0.5)
    assert three.scale == pytest.approx(2.0 * (1 + 3 * 0.25) + 0.5)
    assert one.dof == three.dof == pytest.approx(7.2)


def test_one_step_agent_densities_equal_filter_densities():
    rng = np.random.default_rng(2)
    X = np.column_stack([np.ones(60), rng.standard_normal(60)])
    y = 0.3 * X[:, 1] + 0.2 * rng.standard_normal(60)
    disc = DiscountConfig(0.97, 0.93)
    prior = DLMPosterior.initial(2)
    path, _ = agent_density_path("g", _slice(X, y), prior, disc)
    filtered = run_expanding_filter(_slice(X, y), prior, disc)
    np.testing.assert_allclose(path.location, [d.location for d, _ in filtered], rtol=0, atol=1e-14)
    np.testing.assert_allclose(path.scale, [d.scale for d, _ in filtered], rtol=0, atol=1e-14)
    np.testing.assert_allclose(path.dof, [d.dof for d, _ in filtered])


def test_k_step_agent_densities_use_no_future_targets():
    rng = np.random.default_rng(4)
    k, T, cut = 3, 80, 40
    X = np.column_stack([np.ones(T), rng.standard_normal(T)])
    y = rng.standard_normal(T)
    y_perturbed = y.copy()
    y_perturbed[cut:] += 10.0
    disc = DiscountConfig(0.98, 0.95)
    base, _ = agent_density_path("g", _slice(X, y, k), DLMPosterior.initial(2), disc)
    moved, _ = agent_density_path("g", _slice(X, y_perturbed, k), DLMPosterior.initial(2), disc)
    # density for row i only sees targets up to row i - k
    np.testing.assert_array_equal(base.location[: cut + k], moved.location[: cut + k])
    np.testing.assert_array_equal(base.scale[: cut + k], moved.scale[: cut + k])
    assert not np.allclose(base.location[cut + k:], moved.location[cut + k:])


def test_student_t_density_basics():
    h = StudentTDensity(dof=5.0, location=1.0, scale=4.0)
    assert float(h.logpdf(1.0)) == pytest.approx(stats.t.logpdf(0.0, df=5.0) - np.log(2.0))
    assert h.variance() == pytest.approx(4.0 * 5.0 / 3.0)
    point = StudentTDensity(dof=5.0, location=2.0, scale=0.0)
    assert float(point.logpdf(2.0)) == 0.0
    assert float(point.logpdf(2.1)) == -np.inf
    assert np.all(point.sample(np.random.default_rng(0), 5) == 2.0)
    with pytest.raises(ValueError):
        StudentTDensity(dof=0.0, location=0.0, scale=1.0)


def test_density_path_window_and_lookup():
    dates = pd.period_range("2001-01", periods=6, freq="M")
    path = DensityPath(name="g", horizon=1, dates=dates, location=np.arange(6.0), scale=np.ones(6), dof=np.full(6, 4.0))
    window = path.window(pd.Period("2001-02", freq="M"), pd.Period("2001-04", freq="M"))
    assert len(window) == 3
    assert window.at(pd.Period("2001-03", freq="M")).location == 2.0
    with pytest.raises(DataValidationError):
        path.at(pd.Period("2002-01", freq="M"))


def test_evolution_is_exact_without_discounting():
    rng = np.random.default_rng(0)
    theta = rng.standard_normal((10, 3))
    v = rng.uniform(0.5, 2.0, 10)
    C = np.broadcast_to(np.eye(3), (10, 3, 3)).copy()
    theta_next, v_next = evolve_draws(theta, v, C, np.full(10, 20.0), np.ones(10), STATIC, rng, steps=4)
    np.testing.assert_array_equal(theta_next, theta)
    np.testing.assert_array_equal(v_next, v)


def test_volatility_evolution_preserves_expected_precision():
    """beta-gamma evolution: E[1/v_{t+1}] = 1/v_t"""
    rng = np.random.default_rng(1)
    S = 200_000
    disc = DiscountConfig(delta=1.0, beta=0.9)
    _, v_next = evolve_draws(np.zeros((S, 1)), np.full(S, 2.0), np.ones((S, 1, 1)), np.full(S, 15.0),
                             np.ones(S), disc, rng)
    precision = 1.0 / v_next
    se = precision.std() / np.sqrt(S)
    assert abs(precision.mean() - 0.5) < 4 * se


def test_state_evolution_covariance():
    rng = np.random.default_rng(7)
    S = 100_000
    disc = DiscountConfig(delta=0.8, beta=1.0)
    C = np.array([[2.0, 0.5], [0.5, 1.0]])
    theta_next, _ = evolve_draws(np.zeros((S, 2)), np.full(S, 3.0), np.broadcast_to(C, (S, 2, 2)).copy(),
                                 np.full(S, 10.0), np.full(S, 0.5), disc, rng)
    expected = 3.0 * C * (1 / 0.8 - 1) / 0.5
    np.testing.assert_allclose(np.cov(theta_next.T), expected, atol=0.06)


def test_sample_evolution_shapes():
    post = DLMPosterior.initial(3, n0=10, s0=0.2)
    theta, v = sample_evolution(post, DiscountConfig(0.95, 0.95), np.random.default_rng(0))
    assert theta.shape == (3,)
    assert v > 0


def test_one_step_density_integrates_to_one():
    post = DLMPosterior(m=np.array([0.2, -0.4]), C=np.array([[0.5, 0.1], [0.1, 0.3]]), n=6.0, s=0.2)
    _, density, _ = filter_step(post, np.array([1.0, 0.7]), 0.0, DiscountConfig(0.95, 0.9))
    sd = np.sqrt(density.variance())
    mass, _ = integrate.quad(lambda y: float(np.exp(density.logpdf(y))), density.location - 50 * sd,
                             density.location + 50 * sd, points=[density.location], limit=200)
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_forecast_location_ignores_regressor_order():
    rng = np.random.default_rng(12)
    X = rng.standard_normal((80, 4))
    y = X @ np.array([0.4, -0.3, 0.2, 0.1]) + 0.2 * rng.standard_normal(80)
    order = [2, 0, 3, 1]
    disc = DiscountConfig(0.97, 0.95)
    base = run_expanding_filter(_slice(X, y), DLMPosterior.initial(4), disc)
    swapped = run_expanding_filter(_slice(X[:, order], y), DLMPosterior.initial(4), disc)
    np.testing.assert_allclose([d.location for d, _ in swapped], [d.location for d, _ in base],
                               rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(swapped[-1][1].m, base[-1][1].m[order], rtol=1e-10, atol=1e-12)


def test_unit_volatility_discount_counts_observations():
    rng = np.random.default_rng(13)
    X = rng.standard_normal((25, 2))
    path = run_expanding_filter(_slice(X, rng.standard_normal(25)), DLMPosterior.initial(2, n0=10.0),
                                DiscountConfig(delta=0.9, beta=1.0))
    assert [post.n for _, post in path] == [10.0 + t for t in range(1, 26)]


def test_zero_forecast_error_keeps_the_mean():
    post = DLMPosterior(m=np.array([0.3, -1.2]), C=np.array([[1.0, 0.2], [0.2, 0.5]]), n=8.0, s=0.4)
    F = np.array([1.0, 0.6])
    new, density, e = filter_step(post, F, float(F @ post.m), DiscountConfig(0.95, 0.9))
    assert e == 0.0
    np.testing.assert_array_equal(new.m, post.m)
    assert new.s == pytest.approx(post.s * 0.9 * 8.0 / (0.9 * 8.0 + 1.0))


def test_single_row_design():
    prior = DLMPosterior.initial(2, n0=10.0, s0=0.01)
    disc = DiscountConfig(0.99, 0.95)
    slice_ = _slice(np.array([[1.0, 0.5]]), [0.3])
    path = run_expanding_filter(slice_, prior, disc)
    assert len(path) == 1
    expected_post, expected_density, _ = filter_step(prior, slice_.X[0], 0.3, disc)
    density, post = path[0]
    assert density == expected_density
    np.testing.assert_array_equal(post.m, expected_post.m)
    assert post.n == pytest.approx(0.95 * 10.0 + 1.0)
