import numpy as np
import pytest
from numpy.testing import assert_allclose

from l2calib.calibration import (estimate_theta, l2_loss, l2_loss_fn,
                                 l2_loss_grad, l2_loss_hess, linear_theta_hat,
                                 ols_loss, ols_loss_grad, ols_loss_hess)
from l2calib.models import make_scenario
from l2calib.numerics import build_rule
from l2calib.simharness import generate_replicate
from l2calib.smoother import Dataset, fit_smoother


def _rule(model, order=64):
    return build_rule(model.x_box.lower, model.x_box.upper, order)


def test_l2_loss_zero_when_mean_equals_model():
    model, _, _ = make_scenario("simple-linear")
    rule = _rule(model)
    mu = lambda pts: 4.0 * pts[:, 0]
    assert l2_loss([4.0], mu, model, rule) == pytest.approx(0.0, abs=1e-15)


def test_l2_loss_linear_closed_form():
    # mean 4x against theta x: loss = (4 - theta)^2 / 3
    model, _, _ = make_scenario("simple-linear")
    rule = _rule(model)
    mu = lambda pts: 4.0 * pts[:, 0]
    assert_allclose(l2_loss([1.0], mu, model, rule), 3.0, atol=1e-12)
    assert_allclose(l2_loss([-2.0], mu, model, rule), 12.0, atol=1e-12)


def test_l2_loss_quadratic_in_theta_for_linear_model():
    model, _, _ = make_scenario("simple-linear")
    rule = _rule(model)
    mu = lambda pts: 4.0 * pts[:, 0] + np.sin(pts[:, 0])
    loss = l2_loss_fn(mu, model, rule)
    h = 0.25
    second = (loss([2.0 + h]) - 2 * loss([2.0]) + loss([2.0 - h])) / h**2
    assert_allclose(second, 2.0 / 3.0, atol=1e-9)
    assert_allclose(l2_loss_hess([2.0], mu, model, rule), [[2.0 / 3.0]],
                    atol=1e-12)


def test_l2_loss_dense_grid_cross_check():
    # quadrature vs trapezoid on a fine grid, independent integration route
    model, system, _ = make_scenario("scenario2")
    rule = _rule(model)
    theta = np.array([1.3])
    val = l2_loss(theta, system.mu, model, rule)
    xs = np.linspace(0.0, 1.0, 200_001).reshape(-1, 1)
    integrand = (np.asarray(system.mu(xs)) - model.eta(theta, xs)) ** 2
    dense = np.trapezoid(integrand, xs[:, 0])
    assert_allclose(val, dense, rtol=1e-6)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for name in ("simple-linear", "scenario1", "scenario2", "scenario3"):
        model, system, _ = make_scenario(name)
        rule = _rule(model)
        loss = l2_loss_fn(system.mu, model, rule)
        p = model.n_params
        lo, hi = model.theta_box.lower, model.theta_box.upper
        h = 1e-6
        for _ in range(10):
            theta = lo + (0.05 + 0.9 * rng.random(p)) * (hi - lo)
            g = l2_loss_grad(theta, system.mu, model, rule)
            for j in range(p):
                d = np.zeros(p)
                d[j] = h * max(1.0, abs(theta[j]))
                fd = (loss(theta + d) - loss(theta - d)) / (2 * d[j])
                assert abs(fd - g[j]) <= 1e-5 * max(1.0, abs(fd))


def test_hessian_matches_finite_differences_of_gradient():
    model, system, _ = make_scenario("scenario1")
    rule = _rule(model)
    theta = np.array([0.12, 0.34])
    hmat = l2_loss_hess(theta, system.mu, model, rule)
    assert_allclose(hmat, hmat.T, atol=1e-12)
    h = 1e-6
    for j in range(2):
        d = np.zeros(2)
        d[j] = h
        col = (l2_loss_grad(theta + d, system.mu, model, rule)
               - l2_loss_grad(theta - d, system.mu, model, rule)) / (2 * h)
        assert_allclose(col, hmat[:, j], rtol=1e-5, atol=1e-7)


def test_discrepancy_term_shifts_hessian():
    # for a curved model the Hessian is not the gradient Gram matrix alone
    model, system, _ = make_scenario("scenario2")
    rule = _rule(model)
    theta = np.array([1.877])
    g = model.grad_eta(theta, rule.nodes)
    gram_only = 2.0 * (g * rule.weights[:, None]).T @ g
    full = l2_loss_hess(theta, system.mu, model, rule)
    assert abs(full[0, 0] - gram_only[0, 0]) > 1.0


def test_ols_loss_values():
    model, _, _ = make_scenario("simple-linear")
    one = Dataset(design=np.array([[1.0]]), responses=np.array([2.0]))
    assert ols_loss([1.0], one, model) == pytest.approx(1.0)
    x = np.linspace(0.1, 1.0, 5).reshape(-1, 1)
    exact = Dataset(design=x, responses=3.0 * x[:, 0])
    assert ols_loss([3.0], exact, model) == pytest.approx(0.0, abs=1e-15)
    rng = np.random.default_rng(1)
    noisy = Dataset(design=x, responses=rng.standard_normal(5))
    assert ols_loss([2.0], noisy, model) >= 0.0


def test_ols_derivatives_linear_model():
    model, _, _ = make_scenario("simple-linear")
    x = np.linspace(0.1, 1.0, 6).reshape(-1, 1)
    y = 2.0 + x[:, 0]
    data = Dataset(design=x, responses=y)
    theta = np.array([1.7])
    r = y - 1.7 * x[:, 0]
    assert_allclose(ols_loss_grad(theta, data, model),
                    [-2.0 * np.mean(r * x[:, 0])], atol=1e-14)
    assert_allclose(ols_loss_hess(theta, data, model),
                    [[2.0 * np.mean(x[:, 0] ** 2)]], atol=1e-14)


def test_estimate_matches_closed_form_linear():
    model, system, _ = make_scenario("simple-linear")
    rule = _rule(model)
    data = generate_replicate(system, 8, seed=3)
    fit = fit_smoother(data)
    est = estimate_theta(fit, model, rule, method="l2", seed=0)
    assert est.converged
    assert_allclose(est.theta, [linear_theta_hat(fit, rule)], atol=1e-6)
    grad = l2_loss_grad(est.theta, fit, model, rule)
    assert np.max(np.abs(grad)) < 1e-6


def test_estimate_ols_closed_form_linear():
    model, system, _ = make_scenario("simple-linear")
    data = generate_replicate(system, 8, seed=3)
    est = estimate_theta(data, model, method="ols", seed=0)
    x, y = data.design[:, 0], data.responses
    assert_allclose(est.theta, [float(x @ y) / float(x @ x)], atol=1e-8)


def test_population_minimiser_scenario1_exact():
    model, system, _ = make_scenario("scenario1")
    rule = _rule(model)
    est = estimate_theta(system.mu, model, rule, method="l2", seed=1, n_starts=20)
    assert_allclose(est.theta, [0.2, 0.3], atol=1e-4)


def test_population_minimiser_scenario2():
    model, system, _ = make_scenario("scenario2")
    rule = _rule(model)
    est = estimate_theta(system.mu, model, rule, method="l2", seed=1, n_starts=20)
    assert_allclose(est.theta, [1.8771], atol=2e-3)
    # frozen to full precision from an independent grid-refinement oracle
    assert_allclose(est.theta, [1.877202027], atol=1e-6)


def test_estimate_argument_validation():
    model, system, _ = make_scenario("simple-linear")
    with pytest.raises(ValueError, match="quadrature"):
        estimate_theta(system.mu, model, rule=None, method="l2")
    with pytest.raises(TypeError):
        estimate_theta(system.mu, model, method="ols")
    with pytest.raises(ValueError, match="unknown method"):
        estimate_theta(system.mu, model, _rule(model), method="map")


def test_loss_rejects_rule_outside_model_box():
    model, system, _ = make_scenario("scenario3")  # x box is [0, 1]
    wide = build_rule([0.0], [1.5], 16)
    with pytest.raises(ValueError, match="outside"):
        l2_loss([3.0], system.mu, model, wide)
