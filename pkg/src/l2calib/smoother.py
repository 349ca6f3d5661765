"""Kernel ridge smoothing of field data with generalised cross-validation.

The smoother is mu_hat(x) = sum_i u_i kappa(x, x_i) with u = (K + lam I)^-1 y.
Writing A = K (K + lam I)^-1 for the hat matrix, model selection minimises

    GCV(lam, rho) = n ||(I - A) y||^2 / tr(I - A)^2

over a grid of ridge and bandwidth values. The noise level is estimated by the
selected GCV score itself, sigma2_hat = n ||(I - A) y||^2 / tr(I - A)^2; the
naive residual estimator rss / (n - tr A) runs far low here because the
selected lam adapts to each noise draw. All linear algebra runs through one
symmetric eigendecomposition of the jittered kernel matrix per bandwidth, so
grid scores, coefficients and traces are mutually consistent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

JITTER = 1e-10
KERNEL_FAMILIES = ("gaussian", "matern52")
DEFAULT_LAMBDA_GRID = np.logspace(-8.0, 1.0, 19)
# bandwidth multipliers applied to the per-coordinate data range
DEFAULT_RHO_FACTORS = np.logspace(np.log10(0.05), np.log10(2.0), 13)


class DegenerateSmootherError(ValueError):
    """Raised when tr(I - A) is too close to zero for the GCV denominator."""


@dataclass(frozen=True)
class KernelSpec:
    """Stationary kernel family plus per-coordinate bandwidths."""

    family: str
    rho: np.ndarray

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(
                f"unknown kernel family {self.family!r}; choose from {KERNEL_FAMILIES}")
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        if np.any(rho <= 0) or not np.all(np.isfinite(rho)):
            raise ValueError("bandwidths must be positive and finite")
        object.__setattr__(self, "rho", rho)


def kernel_matrix(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross-kernel matrix between point sets a (ma, k) and b (mb, k)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != spec.rho.size or b.shape[1] != spec.rho.size:
        raise ValueError("points and bandwidth vector disagree in dimension")
    d2 = np.zeros((a.shape[0], b.shape[0]))
    for j in range(a.shape[1]):
        d2 += ((a[:, j, None] - b[None, :, j]) / spec.rho[j]) ** 2
    if spec.family == "gaussian":
        return np.exp(-d2)
    r = np.sqrt(np.maximum(d2, 0.0))
    s5r = np.sqrt(5.0) * r
    return (1.0 + s5r + (5.0 / 3.0) * r * r) * np.exp(-s5r)


@dataclass(frozen=True)
class Dataset:
    """Field observations: a design matrix and one response per row."""

    design: np.ndarray
    responses: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.design, dtype=float))
        y = np.atleast_1d(np.asarray(self.responses, dtype=float))
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.size:
            raise ValueError("design must be (n, k) with responses of length n")
        if x.shape[0] < 1:
            raise ValueError("dataset is empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        order = np.lexsort(x.T[::-1])
        gaps = np.linalg.norm(np.diff(x[order], axis=0), axis=1)
        if gaps.size and gaps.min() < 1e-12:
            raise ValueError("design contains duplicate rows (within 1e-12)")
        object.__setattr__(self, "design", x)
        object.__setattr__(self, "responses", y)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def k(self) -> int:
        return self.design.shape[1]


def read_dataset_csv(path) -> Dataset:
    """Load a Dataset from CSV with header columns x1..xk,y."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[-1] != "y":
            raise ValueError(f"{path}: header must be x1,...,xk,y")
        k = len(header) - 1
        if header[:-1] != [f"x{j + 1}" for j in range(k)]:
            raise ValueError(f"{path}: header must be x1,...,xk,y")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != k + 1:
                raise ValueError(f"{path}:{lineno}: expected {k + 1} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    return Dataset(design=arr[:, :k], responses=arr[:, k])


def write_dataset_csv(path, data: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j + 1}" for j in range(data.k)] + ["y"])
        for xi, yi in zip(data.design, data.responses):
            writer.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


@dataclass
class SmootherFit:
    """Fitted kernel ridge smoother.

    Stores the eigendecomposition of the jittered kernel matrix so that
    predictions, pointwise weights and downstream solves against
    Phi = K + lam I reuse one factorisation.
    """

    data: Dataset
    kernel: KernelSpec
    lam: float
    coef: np.ndarray
    sigma2_hat: float
    trace_hat: float
    gcv_value: float
    flags: tuple[str, ...] = ()
    eig_values: np.ndarray = field(default=None, repr=False)
    eig_vectors: np.ndarray = field(default=None, repr=False)

    def solve_phi(self, b: np.ndarray) -> np.ndarray:
        """Solve (K + lam I) z = b using the cached eigendecomposition."""
        d, q = self.eig_values, self.eig_vectors
        return q @ ((q.T @ b).T / (d + self.lam)).T

    def predict(self, x) -> np.ndarray:
        kx = kernel_matrix(self.kernel, np.atleast_2d(np.asarray(x, dtype=float)),
                           self.data.design)
        return kx @ self.coef

    def weights(self, x) -> np.ndarray:
        """Rows g(x) with mu_hat(x) = g(x) . y, one per evaluation point."""
        kx = kernel_matrix(self.kernel, np.atleast_2d(np.asarray(x, dtype=float)),
                           self.data.design)
        return self.solve_phi(kx.T).T


def predict_mean(fit: SmootherFit, x) -> np.ndarray:
    return fit.predict(x)


def smoother_weights(fit: SmootherFit, x) -> np.ndarray:
    return fit.weights(x)


def _eigen_gcv(d: np.ndarray, z: np.ndarray, lam: float, n: int):
    """(score, rss, tr(I-A)) from eigenvalues d and rotated data z = Q.T y."""
    shr = lam / (d + lam)
    rss = float(np.sum((shr * z) ** 2))
    trm = float(np.sum(shr))
    if trm < 1e-12:
        return np.inf, rss, trm
    return n * rss / trm**2, rss, trm


def default_rho_grid(design: np.ndarray) -> np.ndarray:
    """Bandwidth grid: factors of the per-coordinate data range, (g, k)."""
    design = np.atleast_2d(np.asarray(design, dtype=float))
    rng = design.max(axis=0) - design.min(axis=0)
    rng = np.where(rng > 0, rng, 1.0)
    return DEFAULT_RHO_FACTORS[:, None] * rng[None, :]


class GcvGrid:
    """GCV selection machinery for a fixed design.

    Precomputes one eigendecomposition of K + jitter per bandwidth so that
    repeated fits on new responses (same design) cost O(grid * n^2).
    """

    def __init__(self, design, family: str = "gaussian", lambda_grid=None,
                 rho_grid=None):
        self.design = np.atleast_2d(np.asarray(design, dtype=float))
        n = self.design.shape[0]
        if n < 3:
            raise ValueError("GCV selection needs at least 3 observations")
        lam = DEFAULT_LAMBDA_GRID if lambda_grid is None else np.asarray(lambda_grid, float)
        if np.any(lam <= 0):
            raise ValueError("ridge grid values must be positive")
        self.lambda_grid = np.sort(np.unique(lam))
        rho = default_rho_grid(self.design) if rho_grid is None else np.atleast_2d(
            np.asarray(rho_grid, dtype=float))
        if rho.shape[1] != self.design.shape[1]:
            raise ValueError("bandwidth grid has wrong dimension")
        # sort rows lexicographically so selection ignores input ordering
        self.rho_grid = rho[np.lexsort(rho.T[::-1])]
        self.family = family
        self._eig = []
        for r in self.rho_grid:
            spec = KernelSpec(family, r)
            k = kernel_matrix(spec, self.design, self.design) + JITTER * np.eye(n)
            d, q = np.linalg.eigh(k)
            self._eig.append((spec, d, q))

    def select(self, y: np.ndarray):
        """Grid-minimise GCV; ties go to the larger ridge value."""
        y = np.asarray(y, dtype=float)
        n = y.size
        best = None
        for idx, (spec, d, q) in enumerate(self._eig):
            z = q.T @ y
            for lam in self.lambda_grid:
                score, rss, trm = _eigen_gcv(d, z, lam, n)
                if best is None or score < best[0] or (score == best[0] and
                                                       idx == best[3] and lam > best[1]):
                    best = (score, lam, rss, idx, trm)
        score, lam, rss, idx, trm = best
        if not np.isfinite(score):
            raise DegenerateSmootherError("GCV denominator vanished on the whole grid")
        return idx, float(lam), float(score), float(rss), float(trm)

    def fit(self, y: np.ndarray) -> SmootherFit:
        y = np.asarray(y, dtype=float)
        idx, lam, score, rss, trm = self.select(y)
        spec, d, q = self._eig[idx]
        coef = q @ ((q.T @ y) / (d + lam))
        flags = []
        if trm < 1e-6 * y.size:
            flags.append("degenerate-smoother")
        sigma2 = y.size * rss / max(trm, 1e-12) ** 2
        data = Dataset(design=self.design, responses=y)
        return SmootherFit(data=data, kernel=spec, lam=lam, coef=coef,
                           sigma2_hat=sigma2, trace_hat=y.size - trm,
                           gcv_value=score, flags=tuple(flags),
                           eig_values=d, eig_vectors=q)


def gcv_score(data: Dataset, kernel: KernelSpec, lam: float) -> float:
    """GCV score for one (kernel, lam) pair."""
    if lam < 0:
        raise ValueError("ridge parameter must be nonnegative")
    n = data.n
    k = kernel_matrix(kernel, data.design, data.design) + JITTER * np.eye(n)
    d, q = np.linalg.eigh(k)
    score, _, trm = _eigen_gcv(d, q.T @ data.responses, lam, n)
    if trm < 1e-12:
        raise DegenerateSmootherError(
            "tr(I - A) below 1e-12; the smoother interpolates and GCV is undefined")
    return score


def fit_smoother(data: Dataset, family: str = "gaussian", lambda_grid=None,
                 rho_grid=None) -> SmootherFit:
    """Fit the smoother with (lam, rho) chosen by grid GCV."""
    grid = GcvGrid(data.design, family=family, lambda_grid=lambda_grid,
                   rho_grid=rho_grid)
    return grid.fit(data.responses)


def fit_smoother_fixed(data: Dataset, kernel: KernelSpec, lam: float) -> SmootherFit:
    """Fit the smoother at fixed (kernel, lam), no selection step."""
    if lam < 0:
        raise ValueError("ridge parameter must be nonnegative")
    n = data.n
    k = kernel_matrix(kernel, data.design, data.design) + JITTER * np.eye(n)
    d, q = np.linalg.eigh(k)
    z = q.T @ data.responses
    coef = q @ (z / (d + lam))
    shr = lam / (d + lam)
    rss = float(np.sum((shr * z) ** 2))
    trm = float(np.sum(shr))
    flags = []
    if trm < 1e-6 * n:
        flags.append("degenerate-smoother")
    sigma2 = n * rss / max(trm, 1e-12) ** 2
    score = n * rss / trm**2 if trm >= 1e-12 else np.inf
    return SmootherFit(data=data, kernel=kernel, lam=float(lam), coef=coef,
                       sigma2_hat=sigma2, trace_hat=n - trm, gcv_value=score,
                       flags=tuple(flags), eig_values=d, eig_vectors=q)
