"""Deterministic quadrature, box-constrained optimisation and matrix factors.

Everything downstream funnels its integrals and minimisations through this
module so that results are reproducible bit-for-bit for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.stats import qmc

DEFAULT_QUAD_ORDER = 64


class FactorError(ValueError):
    """Raised when a matrix fails the symmetry / positive-semidefinite checks."""


@dataclass
class QuadratureRule:
    """Tensor-product Gauss-Legendre rule over an axis-aligned box.

    nodes   : (m, k) array of evaluation points inside the box
    weights : (m,) array of positive weights summing to the box volume
    lower, upper : (k,) box bounds
    """

    nodes: np.ndarray
    weights: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]


def gauss_legendre_01(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped from [-1, 1] to [0, 1]."""
    if order < 1:
        raise ValueError(f"quadrature order must be >= 1, got {order}")
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def build_rule(lower, upper, order: int = DEFAULT_QUAD_ORDER) -> QuadratureRule:
    """Tensor-product rule for the box [lower, upper] in each coordinate."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != upper.shape or lower.ndim != 1:
        raise ValueError("lower and upper must be 1-d arrays of equal length")
    if np.any(upper <= lower):
        raise ValueError("box must have positive side lengths")
    x01, w01 = gauss_legendre_01(order)
    axes_nodes = [lower[j] + (upper[j] - lower[j]) * x01 for j in range(lower.size)]
    axes_weights = [(upper[j] - lower[j]) * w01 for j in range(lower.size)]
    grids = np.meshgrid(*axes_nodes, indexing="ij")
    nodes = np.column_stack([g.reshape(-1) for g in grids])
    wgrids = np.meshgrid(*axes_weights, indexing="ij")
    weights = np.ones(nodes.shape[0])
    for wg in wgrids:
        weights = weights * wg.reshape(-1)
    return QuadratureRule(nodes=nodes, weights=weights, lower=lower, upper=upper)


def integrate(f, rule: QuadratureRule):
    """Integrate a scalar- or array-valued function over the rule's box.

    ``f`` is called once per node with a (k,) point and must return a finite
    float or array of fixed shape.
    """
    total = None
    for i, (x, w) in enumerate(zip(rule.nodes, rule.weights)):
        val = np.asarray(f(x), dtype=float)
        if not np.all(np.isfinite(val)):
            raise ValueError(f"integrand returned a non-finite value at node {i}: x={x}")
        total = w * val if total is None else total + w * val
    if total is None:
        raise ValueError("empty quadrature rule")
    return float(total) if total.ndim == 0 else total


@dataclass
class MinimizeResult:
    x: np.ndarray
    value: float
    converged: bool
    n_starts: int


def _latin_starts(lower, upper, n, seed):
    # scrambled LHS keeps multistart coverage even for small n
    sampler = qmc.LatinHypercube(d=lower.size, seed=seed)
    u = sampler.random(n)
    return lower + u * (upper - lower)


def minimize_box(f, lower, upper, seed: int = 0, n_starts: int = 10,
                 polish: bool = True) -> MinimizeResult:
    """Multistart Nelder-Mead over a box, followed by a quasi-Newton polish.

    Starts are the box centre plus ``n_starts - 1`` Latin hypercube draws.
    The polish uses L-BFGS-B with central finite differences. Determinism:
    the same (f, box, seed, n_starts) always returns bit-identical output.
    Ties between starts are broken by loss value, then by lexicographically
    smallest argmin.
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if np.any(upper <= lower):
        raise ValueError("box must have positive side lengths")
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")

    starts = [0.5 * (lower + upper)]
    if n_starts > 1:
        starts.extend(_latin_starts(lower, upper, n_starts - 1, seed))

    bounds = list(zip(lower, upper))
    best = None
    for x0 in starts:
        res = optimize.minimize(f, x0, method="Nelder-Mead", bounds=bounds,
                                options={"xatol": 1e-10, "fatol": 1e-12,
                                         "maxiter": 2000 * lower.size})
        x, val, ok = np.clip(res.x, lower, upper), float(res.fun), bool(res.success)
        if polish:
            res2 = optimize.minimize(f, x, method="L-BFGS-B", jac="3-point",
                                     bounds=bounds,
                                     options={"ftol": 1e-15, "gtol": 1e-10,
                                              "maxiter": 500})
            if np.isfinite(res2.fun) and res2.fun <= val:
                x, val = np.clip(res2.x, lower, upper), float(res2.fun)
                ok = ok or bool(res2.success)
        cand = (val, tuple(x), ok)
        if best is None or cand[:2] < best[:2]:
            best = cand
    return MinimizeResult(x=np.array(best[1]), value=best[0],
                          converged=best[2], n_starts=n_starts)


def sym_psd_factor(a: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Factor F of a symmetric PSD matrix A with F.T @ F == A.

    Uses the singular value decomposition; for symmetric input the left
    singular basis diagonalises A, so F = diag(sqrt(s)) @ U.T. Row signs are
    fixed (nonnegative diagonal of F) to make the factor unique. Singular
    values below ``tol * max(s)`` are clipped to zero; values more negative
    than that raise FactorError.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise FactorError(f"expected a square matrix, got shape {a.shape}")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if scale > 0 and np.max(np.abs(a - a.T)) > tol * scale:
        raise FactorError("matrix is not symmetric within tolerance")
    a = 0.5 * (a + a.T)
    u, s, vt = np.linalg.svd(a)
    # realign SVD signs so u diagonalises a (u and v columns can differ in sign)
    flip = np.sign(np.sum(u * vt.T, axis=0))
    flip[flip == 0] = 1.0
    u = u * flip[None, :]
    eig = s * flip
    smax = s.max() if s.size else 0.0
    if np.any(eig < -tol * max(smax, 1.0)):
        raise FactorError("matrix has a negative eigenvalue beyond tolerance")
    eig = np.clip(eig, 0.0, None)
    f = np.sqrt(eig)[:, None] * u.T
    sign = np.sign(np.diag(f))
    sign[sign == 0] = 1.0
    f = sign[:, None] * f
    return f
