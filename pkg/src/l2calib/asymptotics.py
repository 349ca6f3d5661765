"""Sandwich covariance matrices for the calibration estimator.

With V the Hessian of the limiting loss at its minimiser, the estimator
satisfies theta_hat ~ N(theta_star, V^-1 W V^-1) where the middle matrix W
depends on the sampling frame:

* marginal over a uniform random design:
      W = (4 sigma^2 / (n vol(X))) int grad_eta grad_eta^T dx
* marginal, least squares loss: the same W plus a discrepancy inflation
      W_E = (4 / (n vol(X))) int (mu - eta)^2 grad_eta grad_eta^T dx
* conditional on the observed design and smoother settings, via the
  smoother weight rows g(x) (mu_hat(x) = g(x) . y):
      derived form   W = 4 sigma^2 J J^T,   J = int grad_eta(x) g(x)^T dx
      literal form   W = 4 sigma^2 int grad_eta grad_eta^T ||g(x)||^2 dx

The derived conditional form is exact for linear smoothers: J y has the
covariance of the loss gradient, so V^-1 W V^-1 reproduces the closed-form
variance of the estimator at fixed smoother settings. The literal form
collapses the double integral to a single one and is kept for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationEstimate
from .models import MathModel
from .numerics import QuadratureRule
from .smoother import SmootherFit

CONDITIONAL_FORMS = ("derived", "literal")


class SingularCurvatureError(ValueError):
    """Raised when the loss Hessian at the estimate is not positive definite."""


@dataclass(frozen=True)
class SandwichMatrices:
    """Curvature V, score-variance W, optional ls inflation W_E."""

    V: np.ndarray
    W: np.ndarray
    variant: str
    n: int
    sigma2: float
    W_E: np.ndarray | None = None

    @property
    def n_params(self) -> int:
        return self.V.shape[0]

    def w_total(self) -> np.ndarray:
        return self.W if self.W_E is None else self.W + self.W_E

    def estimator_cov(self) -> np.ndarray:
        """V^-1 W V^-1 with the total middle matrix."""
        vinv_w = np.linalg.solve(self.V, self.w_total())
        return np.linalg.solve(self.V, vinv_w.T).T


def _check_v(v: np.ndarray) -> np.ndarray:
    v = 0.5 * (v + v.T)
    eig = np.linalg.eigvalsh(v)
    if eig[0] <= 1e-12 * max(eig[-1], 1.0):
        raise SingularCurvatureError(
            "loss Hessian at the estimate is not positive definite; "
            f"eigenvalues {eig}")
    return v


def _check_psd(w: np.ndarray, what: str) -> np.ndarray:
    w = 0.5 * (w + w.T)
    eig = np.linalg.eigvalsh(w)
    if eig[0] < -1e-10 * max(abs(eig[-1]), 1.0):
        raise ValueError(f"{what} is not positive semidefinite; eigenvalues {eig}")
    return w


def _sigma2_from(fit: SmootherFit, sigma2) -> float:
    s2 = fit.sigma2_hat if sigma2 is None else float(sigma2)
    if not np.isfinite(s2) or s2 < 0:
        raise ValueError(f"invalid noise variance {s2}")
    return s2


def _weighted_gram(model: MathModel, theta: np.ndarray,
                   rule: QuadratureRule, extra: np.ndarray | None = None) -> np.ndarray:
    g = model.grad_eta(theta, rule.nodes)
    w = rule.weights if extra is None else rule.weights * extra
    return (g * w[:, None]).T @ g


def marginal_matrices(est: CalibrationEstimate, fit: SmootherFit, model: MathModel,
                      rule: QuadratureRule, sigma2=None) -> SandwichMatrices:
    """Design-marginal sandwich for the l2 estimator."""
    v = _check_v(est.hessian)
    s2 = _sigma2_from(fit, sigma2)
    n = fit.data.n
    scale = 4.0 * s2 / (n * model.x_box.volume)
    w = _check_psd(scale * _weighted_gram(model, est.theta, rule), "W")
    return SandwichMatrices(V=v, W=w, variant="marginal", n=n, sigma2=s2)


def ols_matrices(est: CalibrationEstimate, fit: SmootherFit, model: MathModel,
                 rule: QuadratureRule, sigma2=None) -> SandwichMatrices:
    """Design-marginal sandwich for the least squares estimator.

    The middle matrix gains a positive semidefinite discrepancy term driven
    by (mu - eta)^2; mu is taken from the smoothed mean.
    """
    if est.method != "ols":
        raise ValueError("ols_matrices expects an estimate fitted with method 'ols'")
    v = _check_v(est.hessian)
    s2 = _sigma2_from(fit, sigma2)
    n = fit.data.n
    scale = 4.0 / (n * model.x_box.volume)
    w = s2 * scale * _weighted_gram(model, est.theta, rule)
    bias2 = (fit.predict(rule.nodes) - model.eta(est.theta, rule.nodes)) ** 2
    w_e = scale * _weighted_gram(model, est.theta, rule, extra=bias2)
    return SandwichMatrices(V=v, W=_check_psd(w, "W"), variant="ols", n=n,
                            sigma2=s2, W_E=_check_psd(w_e, "W_E"))


def conditional_matrices(est: CalibrationEstimate, fit: SmootherFit, model: MathModel,
                         rule: QuadratureRule, form: str = "derived",
                         sigma2=None) -> SandwichMatrices:
    """Design-conditional sandwich at the fitted smoother settings."""
    if form not in CONDITIONAL_FORMS:
        raise ValueError(f"unknown conditional form {form!r}; choose from {CONDITIONAL_FORMS}")
    v = _check_v(est.hessian)
    s2 = _sigma2_from(fit, sigma2)
    n = fit.data.n
    g_nodes = fit.weights(rule.nodes)              # (m, n)
    grad = model.grad_eta(est.theta, rule.nodes)   # (m, p)
    if form == "derived":
        j = (grad * rule.weights[:, None]).T @ g_nodes  # (p, n)
        w = 4.0 * s2 * (j @ j.T)
    else:
        gnorm2 = np.sum(g_nodes * g_nodes, axis=1)
        w = 4.0 * s2 * _weighted_gram(model, est.theta, rule, extra=gnorm2)
    w = _check_psd(w, "W")
    return SandwichMatrices(V=v, W=w, variant=f"conditional-{form}", n=n, sigma2=s2)


def weight_decay_diagnostic(fit: SmootherFit, rule: QuadratureRule) -> float:
    """Average over x of sum_i g_i(x)^2 / i^2, reported as a health check.

    Small values indicate the smoother weights decay with the observation
    index, which the conditional asymptotics implicitly assume. Never
    enforced, only reported.
    """
    g = fit.weights(rule.nodes)
    idx2 = (np.arange(1, fit.data.n + 1, dtype=float)) ** 2
    per_node = np.sum(g * g / idx2[None, :], axis=1)
    return float(np.sum(rule.weights * per_node) / np.sum(rule.weights))
