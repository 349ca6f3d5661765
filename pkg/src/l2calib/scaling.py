"""Loss scalings that calibrate the spread of the generalised posterior.

Raw generalised posteriors exp(-n loss) ignore the sandwich structure of the
estimator and can be badly over- or under-dispersed. Two repairs:

* magnitude: multiply the loss by the scalar
      gamma = p / (n tr(V^-1 W)),
  which matches the expected scaled deviance at the loss minimiser to its
  degrees of freedom;
* curvature: remap the loss argument through a matrix Gamma chosen so the
  large-sample posterior covariance (n Gamma^T V Gamma)^-1 equals the
  estimator covariance V^-1 W V^-1. That requires
      Gamma^T V Gamma = V (n W)^-1 V,
  solved with symmetric PSD factors: Gamma = F1^-1 F2 where F1^T F1 = V and
  F2^T F2 = V (n W)^-1 V. For one parameter the two repairs coincide:
  Gamma^2 = gamma = V / (n W).

A variance-matching scalar for the single-parameter straight-line model is
also provided; it equates the posterior variance under a normal prior with
the closed-form sampling variance of the estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .asymptotics import SandwichMatrices
from .calibration import linear_theta_hat
from .models import DomainBox, MathModel
from .numerics import QuadratureRule, sym_psd_factor
from .smoother import SmootherFit, kernel_matrix


class ScalingError(ValueError):
    """Raised when a requested scaling is undefined for the given matrices."""


@dataclass(frozen=True)
class ScalingAdjustment:
    """A resolved loss adjustment.

    kind    : "none", "magnitude" or "curvature"
    gamma   : scalar multiplier (magnitude; 1.0 otherwise)
    Gamma   : (p, p) argument remap (curvature; None otherwise)
    anchor  : expansion point for the curvature remap
    source  : sandwich matrices the adjustment was derived from, if any
    """

    kind: str
    gamma: float = 1.0
    Gamma: np.ndarray | None = None
    anchor: np.ndarray | None = None
    source: SandwichMatrices | None = None

    def __post_init__(self):
        if self.kind not in ("none", "magnitude", "curvature"):
            raise ValueError(f"unknown scaling kind {self.kind!r}")
        if self.kind == "magnitude" and not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ScalingError(f"magnitude scaling needs a positive gamma, got {self.gamma}")
        if self.kind == "curvature":
            if self.Gamma is None or self.anchor is None:
                raise ScalingError("curvature scaling needs Gamma and an anchor point")


def no_scaling() -> ScalingAdjustment:
    return ScalingAdjustment(kind="none")


def fixed_gamma(gamma: float) -> ScalingAdjustment:
    return ScalingAdjustment(kind="magnitude", gamma=float(gamma))


def magnitude_gamma(sw: SandwichMatrices) -> float:
    """gamma = p / (n tr(V^-1 W))."""
    t = float(np.trace(np.linalg.solve(sw.V, sw.w_total())))
    if not np.isfinite(t) or t <= 0:
        raise ScalingError(f"tr(V^-1 W) = {t}; magnitude scaling undefined")
    return sw.n_params / (sw.n * t)


def magnitude_adjustment(sw: SandwichMatrices) -> ScalingAdjustment:
    return ScalingAdjustment(kind="magnitude", gamma=magnitude_gamma(sw), source=sw)


def curvature_adjustment(sw: SandwichMatrices, anchor) -> ScalingAdjustment:
    """Matrix remap with Gamma^T V Gamma = V (n W)^-1 V."""
    anchor = np.atleast_1d(np.asarray(anchor, dtype=float))
    w = sw.w_total()
    eig = np.linalg.eigvalsh(0.5 * (w + w.T))
    if eig[0] <= 1e-12 * max(abs(eig[-1]), 1.0):
        raise ScalingError(
            "W is singular; curvature scaling undefined, use magnitude scaling instead")
    target = sw.V @ np.linalg.solve(sw.n * w, sw.V)
    f2 = sym_psd_factor(0.5 * (target + target.T))
    f1 = sym_psd_factor(sw.V)
    gamma_mat = np.linalg.solve(f1, f2)
    return ScalingAdjustment(kind="curvature", Gamma=gamma_mat, anchor=anchor, source=sw)


def scaled_loss(adj: ScalingAdjustment, base_loss, theta_box: DomainBox | None = None):
    """Wrap a loss callable according to the adjustment.

    Curvature remaps theta -> anchor + Gamma (theta - anchor); arguments that
    land outside ``theta_box`` are evaluated at the box projection plus a
    quadratic overshoot penalty so the wrapped loss stays finite and repels
    samplers from the rim.
    """
    if adj.kind == "none":
        return base_loss
    if adj.kind == "magnitude":
        g = adj.gamma
        return lambda theta: g * base_loss(theta)
    if theta_box is None:
        raise ScalingError("curvature-scaled loss needs the parameter box")
    gamma_mat, anchor = adj.Gamma, adj.anchor

    def loss(theta):
        theta = np.asarray(theta, dtype=float)
        mapped = anchor + gamma_mat @ (theta - anchor)
        proj = theta_box.clip(mapped)
        over = mapped - proj
        base = base_loss(proj)
        if np.any(over != 0.0):
            base = base + float(over @ over) * 1e3 * (1.0 + abs(base))
        return base

    return loss


def variance_matching_gamma(fit: SmootherFit, model: MathModel, rule: QuadratureRule,
                            tau2: float, sigma2=None) -> float:
    """Scalar gamma equating posterior and sampling variance, eta = theta x.

    The sampling variance of the closed-form estimator is
        var = sigma^2 q^T Phi^-2 q / (int x^2 dx)^2,   q = int x k(x) dx,
    and with a N(0, tau2) prior the posterior variance under gamma-scaled
    loss is (2 n gamma int x^2 dx + 1/tau2)^-1. Matching the two gives
        gamma = (1 / (2 n int x^2 dx)) (1/var - 1/tau2).
    """
    if not model.scalar_linear:
        raise ScalingError("variance matching is defined for scalar linear models only")
    if tau2 <= 0:
        raise ScalingError("prior variance tau2 must be positive")
    s2 = fit.sigma2_hat if sigma2 is None else float(sigma2)
    x = rule.nodes[:, 0]
    den = float(np.sum(rule.weights * x * x))
    kq = kernel_matrix(fit.kernel, rule.nodes, fit.data.design)
    q = kq.T @ (rule.weights * x)
    phi_inv_q = fit.solve_phi(q)
    var = s2 * float(phi_inv_q @ phi_inv_q) / den**2
    if var >= tau2:
        raise ScalingError(
            f"estimator variance {var:.3g} is not below the prior variance {tau2:.3g}; "
            "variance matching undefined")
    n = fit.data.n
    return (1.0 / (2.0 * n * den)) * (1.0 / var - 1.0 / tau2)


def linear_estimator_variance(fit: SmootherFit, rule: QuadratureRule,
                              sigma2=None) -> float:
    """Closed-form sampling variance of the straight-line estimator.

    var( int x mu_hat dx / int x^2 dx ) at fixed smoother settings.
    """
    s2 = fit.sigma2_hat if sigma2 is None else float(sigma2)
    x = rule.nodes[:, 0]
    den = float(np.sum(rule.weights * x * x))
    kq = kernel_matrix(fit.kernel, rule.nodes, fit.data.design)
    q = kq.T @ (rule.weights * x)
    phi_inv_q = fit.solve_phi(q)
    return s2 * float(phi_inv_q @ phi_inv_q) / den**2


__all__ = [
    "ScalingAdjustment", "ScalingError", "no_scaling", "fixed_gamma",
    "magnitude_gamma", "magnitude_adjustment", "curvature_adjustment",
    "scaled_loss", "variance_matching_gamma", "linear_estimator_variance",
]
