"""Generalised posterior machinery: sampling, Laplace and conjugate forms.

The target density is  pi(theta | y) proportional to exp(-n loss(theta)) pi(theta),
with the loss already carrying any magnitude or curvature scaling. Three
engines are provided:

* an adaptive Gaussian random-walk Metropolis sampler (step size tuned to a
  0.35 acceptance rate during burn-in, frozen afterwards);
* a Laplace approximation N(theta_hat, (n H)^-1) with H the scaled loss
  Hessian at the estimate;
* the closed-form normal posterior for the straight-line model under a
  normal or flat prior.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .calibration import CalibrationEstimate, linear_theta_hat
from .models import DomainBox
from .numerics import QuadratureRule, build_rule
from .scaling import ScalingAdjustment
from .smoother import SmootherFit

MIN_INTERVAL_DRAWS = 100
ACCEPT_BAND = (0.1, 0.6)
RHAT_LIMIT = 1.05


@dataclass(frozen=True)
class Prior:
    """Uniform-on-a-box or independent normal prior."""

    kind: str
    box: DomainBox | None = None
    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @staticmethod
    def uniform(box: DomainBox) -> "Prior":
        return Prior(kind="uniform", box=box)

    @staticmethod
    def normal(mean, var) -> "Prior":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        var = np.atleast_1d(np.asarray(var, dtype=float))
        if mean.shape != var.shape or np.any(var <= 0):
            raise ValueError("normal prior needs matching mean/var with var > 0")
        return Prior(kind="normal", mean=mean, var=var)

    @property
    def dim(self) -> int:
        return self.box.dim if self.kind == "uniform" else self.mean.size

    def log_density(self, theta: np.ndarray) -> float:
        """Log prior density up to an additive constant."""
        if self.kind == "uniform":
            return 0.0 if self.box.contains(theta) else -np.inf
        d = theta - self.mean
        return float(-0.5 * np.sum(d * d / self.var))


def log_gen_posterior(theta, loss, prior: Prior, n: int) -> float:
    """Log generalised posterior up to an additive constant."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    lp = prior.log_density(theta)
    if not np.isfinite(lp):
        return -np.inf
    val = loss(theta)
    if not np.isfinite(val):
        return -np.inf
    return -n * val + lp


@dataclass
class SamplerSettings:
    chains: int = 4
    iterations: int = 20_000
    burnin_frac: float = 0.5
    thin: int = 4
    target_accept: float = 0.35
    init: np.ndarray | None = None
    init_cov: np.ndarray | None = None

    def __post_init__(self):
        if self.chains < 1 or self.iterations < 10:
            raise ValueError("need at least 1 chain and 10 iterations")
        if not 0.0 < self.burnin_frac < 1.0:
            raise ValueError("burnin_frac must be in (0, 1)")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


@dataclass
class PosteriorSample:
    draws: np.ndarray            # (m, p) kept draws, post burn-in, thinned
    chain_ids: np.ndarray        # (m,) chain index per draw
    acceptance_rate: float       # pooled post burn-in acceptance
    per_chain_accept: np.ndarray
    rhat: np.ndarray             # (p,) split statistic across chains
    seed: int
    flags: tuple[str, ...] = ()
    settings: SamplerSettings = field(default=None, repr=False)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]


def split_rhat(per_chain: list[np.ndarray]) -> np.ndarray:
    """Split-chain potential scale reduction factor, one value per coordinate."""
    halves = []
    for c in per_chain:
        half = c.shape[0] // 2
        if half < 2:
            raise ValueError("chains too short for the split diagnostic")
        halves.extend([c[:half], c[half:2 * half]])
    seqs = np.stack(halves)                      # (m, L, p)
    m, length = seqs.shape[0], seqs.shape[1]
    means = seqs.mean(axis=1)                    # (m, p)
    svars = seqs.var(axis=1, ddof=1)             # (m, p)
    w = svars.mean(axis=0)
    b = length * means.var(axis=0, ddof=1)
    var_plus = (length - 1) / length * w + b / length
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / w)
    return np.where(w > 0, r, 1.0)


def sample_posterior(loss, prior: Prior, n: int, seed: int = 0,
                     settings: SamplerSettings | None = None) -> PosteriorSample:
    """Adaptive random-walk Metropolis on the generalised posterior.

    Chain c uses an independent stream seeded by (seed, c), so results are
    reproducible and independent of how chains are scheduled. The proposal
    is x + s L z with L a Cholesky factor of ``init_cov`` (identity scale if
    absent) and s adapted by Robbins-Monro during burn-in only.
    """
    st = settings if settings is not None else SamplerSettings()
    p = prior.dim
    if st.init is None:
        raise ValueError("sampler needs an initial point (the loss minimiser)")
    init = np.atleast_1d(np.asarray(st.init, dtype=float))
    lp0 = log_gen_posterior(init, loss, prior, n)
    if not np.isfinite(lp0):
        raise ValueError("log posterior is not finite at the initial point")

    if st.init_cov is not None:
        cov = np.atleast_2d(np.asarray(st.init_cov, dtype=float))
        chol = np.linalg.cholesky(cov + 1e-12 * np.trace(cov) / p * np.eye(p))
    else:
        chol = np.eye(p)

    burn = int(st.burnin_frac * st.iterations)
    kept_per_chain = []
    accept_rates = np.empty(st.chains)
    target = st.target_accept
    for c in range(st.chains):
        rng = np.random.default_rng([seed, c])
        x = init + 0.01 * (chol @ rng.standard_normal(p))
        lp = log_gen_posterior(x, loss, prior, n)
        if not np.isfinite(lp):
            x, lp = init.copy(), lp0
        log_s = np.log(2.38 / np.sqrt(p))
        kept = []
        accepted_post = 0
        for t in range(st.iterations):
            s = np.exp(log_s)
            prop = x + s * (chol @ rng.standard_normal(p))
            lp_prop = log_gen_posterior(prop, loss, prior, n)
            delta = lp_prop - lp
            if delta >= 0 or np.log(rng.random()) < delta:
                x, lp = prop, lp_prop
                accepted = True
            else:
                accepted = False
            if t < burn:
                alpha = 1.0 if delta >= 0 else np.exp(max(delta, -50.0))
                log_s += (alpha - target) / (t + 1) ** 0.6
            else:
                accepted_post += accepted
                if (t - burn) % st.thin == 0:
                    kept.append(x.copy())
        kept_per_chain.append(np.asarray(kept))
        accept_rates[c] = accepted_post / max(st.iterations - burn, 1)

    rhat = split_rhat(kept_per_chain) if st.chains >= 2 else np.full(p, np.nan)
    flags = []
    pooled = float(accept_rates.mean())
    if not ACCEPT_BAND[0] <= pooled <= ACCEPT_BAND[1]:
        flags.append("acceptance-outside-band")
    if st.chains >= 2 and np.any(rhat > RHAT_LIMIT):
        flags.append("rhat-high")
    draws = np.concatenate(kept_per_chain, axis=0)
    chain_ids = np.concatenate([np.full(k.shape[0], i, dtype=int)
                                for i, k in enumerate(kept_per_chain)])
    return PosteriorSample(draws=draws, chain_ids=chain_ids,
                           acceptance_rate=pooled, per_chain_accept=accept_rates,
                           rhat=rhat, seed=seed, flags=tuple(flags), settings=st)


@dataclass(frozen=True)
class LaplaceApprox:
    """Normal approximation N(mean, cov) to a posterior."""

    mean: np.ndarray
    cov: np.ndarray
    flags: tuple[str, ...] = ()

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def laplace_approx(est: CalibrationEstimate, adj: ScalingAdjustment,
                   n: int) -> LaplaceApprox:
    """Laplace approximation under the given loss scaling.

    Covariance is (n H)^-1 with H = V, gamma V or Gamma^T V Gamma for the
    none / magnitude / curvature adjustments respectively.
    """
    v = 0.5 * (est.hessian + est.hessian.T)
    if adj.kind == "none":
        h = v
    elif adj.kind == "magnitude":
        h = adj.gamma * v
    else:
        h = adj.Gamma.T @ v @ adj.Gamma
    h = 0.5 * (h + h.T)
    eig = np.linalg.eigvalsh(h)
    if eig[0] <= 1e-12 * max(eig[-1], 1.0):
        raise ValueError("scaled Hessian is not positive definite at the estimate")
    cov = np.linalg.inv(n * h)
    flags = () if est.converged else ("estimate-not-converged",)
    return LaplaceApprox(mean=est.theta.copy(), cov=0.5 * (cov + cov.T), flags=flags)


def conjugate_posterior(fit: SmootherFit, n: int, tau2: float, gamma: float,
                        rule: QuadratureRule | None = None) -> LaplaceApprox:
    """Exact normal posterior for eta(theta, x) = theta x on [0, 1].

    The scaled loss is quadratic in theta, so with a N(0, tau2) prior the
    posterior is normal with
        precision = 2 n gamma int x^2 dx + 1/tau2,
        mean = 2 n gamma int x^2 dx * theta_hat / precision.
    ``tau2 = inf`` gives the flat-prior (pure loss) posterior.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if rule is None:
        rule = build_rule([0.0], [1.0])
    theta_hat = linear_theta_hat(fit, rule)
    x = rule.nodes[:, 0]
    den = float(np.sum(rule.weights * x * x))
    prior_prec = 0.0 if np.isinf(tau2) else 1.0 / tau2
    if prior_prec < 0:
        raise ValueError("tau2 must be positive or infinite")
    loss_prec = 2.0 * n * gamma * den
    prec = loss_prec + prior_prec
    mean = loss_prec * theta_hat / prec
    return LaplaceApprox(mean=np.array([mean]), cov=np.array([[1.0 / prec]]))


# ---------------------------------------------------------------------------
# intervals and Monte Carlo error
# ---------------------------------------------------------------------------

def _normal_quantile(q: float) -> float:
    return float(ndtri(q))


def _hpd_from_draws(x: np.ndarray, level: float) -> tuple[float, float]:
    xs = np.sort(x)
    m = xs.size
    k = int(np.ceil(level * m))
    if k >= m:
        return float(xs[0]), float(xs[-1])
    widths = xs[k:] - xs[: m - k]
    i = int(np.argmin(widths))
    return float(xs[i]), float(xs[i + k])


def credible_interval(obj, level: float = 0.95, mode: str = "quantile") -> np.ndarray:
    """Per-coordinate credible intervals, shape (p, 2).

    ``obj`` is a PosteriorSample or a LaplaceApprox. For normal posteriors
    the highest-density and equal-tailed intervals coincide. Sample-based
    intervals refuse to run on fewer than 100 draws.
    """
    if mode not in ("quantile", "hpd"):
        raise ValueError(f"unknown interval mode {mode!r}")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    if isinstance(obj, LaplaceApprox):
        z = _normal_quantile(0.5 + level / 2.0)
        sd = obj.sd
        return np.column_stack([obj.mean - z * sd, obj.mean + z * sd])
    if isinstance(obj, PosteriorSample):
        if obj.n_draws < MIN_INTERVAL_DRAWS:
            raise ValueError(
                f"need at least {MIN_INTERVAL_DRAWS} draws for an interval, "
                f"got {obj.n_draws}")
        draws = obj.draws
        if mode == "quantile":
            lo = np.quantile(draws, 0.5 - level / 2.0, axis=0)
            hi = np.quantile(draws, 0.5 + level / 2.0, axis=0)
            return np.column_stack([lo, hi])
        return np.array([_hpd_from_draws(draws[:, j], level)
                         for j in range(draws.shape[1])])
    raise TypeError("expected a PosteriorSample or LaplaceApprox")


def batch_mcse(x: np.ndarray, n_batches: int = 50) -> float:
    """Batch-means Monte Carlo standard error of the mean of a chain."""
    x = np.asarray(x, dtype=float)
    m = x.size // n_batches
    if m < 2:
        raise ValueError("chain too short for the requested number of batches")
    means = x[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def write_draws_csv(sample: PosteriorSample, path) -> None:
    """One row per kept draw: theta_1..theta_p, chain."""
    p = sample.draws.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"theta_{j + 1}" for j in range(p)] + ["chain"])
        for row, cid in zip(sample.draws, sample.chain_ids):
            writer.writerow([repr(float(v)) for v in row] + [int(cid)])
