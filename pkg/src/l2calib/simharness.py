"""Replicated coverage studies for the calibration pipeline.

Per replicate: draw data from a scenario's physical system, smooth it, locate
the loss minimiser, form sandwich matrices, scale the posterior and record
point summaries plus credible intervals. Aggregates report coverage of the
population minimiser, mean posterior summaries and interval lengths.

All randomness is indexed: replicate i uses seed ``base_seed + i`` for data
and the same seed for any sampling engine, so reports are byte-identical
across reruns and across worker counts.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtri

from . import __version__
from .asymptotics import conditional_matrices, marginal_matrices
from .calibration import estimate_theta, l2_loss_fn
from .models import make_scenario
from .numerics import build_rule
from .posterior import (Prior, SamplerSettings, conjugate_posterior,
                        credible_interval, laplace_approx, sample_posterior)
from .scaling import (ScalingError, curvature_adjustment, fixed_gamma,
                      magnitude_adjustment, no_scaling, scaled_loss)
from .smoother import Dataset, GcvGrid, kernel_matrix

DEFAULT_ANALYSES = ("marginal-magnitude", "marginal-curvature",
                    "conditional-magnitude", "conditional-curvature")
ENGINES = ("laplace", "mcmc", "conjugate")


@dataclass
class StudyConfig:
    scenario: str
    replicates: int
    n: int | None = None
    seed: int = 0
    analyses: tuple = DEFAULT_ANALYSES
    engine: str = "laplace"
    interval: str = "quantile"
    level: float = 0.95
    quad_order: int = 64
    kernel_family: str = "gaussian"
    conditional_form: str = "derived"
    n_starts: int = 10
    workers: int = 1
    mcmc_chains: int = 4
    mcmc_iterations: int = 20_000
    mcmc_thin: int = 4

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}; choose from {ENGINES}")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must be in (0, 1)")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        self.analyses = tuple(self.analyses)
        for a in self.analyses:
            parse_analysis(a)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["analyses"] = list(self.analyses)
        return d


def parse_analysis(name: str):
    """Split an analysis label into (variant, scaling, gamma)."""
    if name == "unscaled":
        return None, "none", None
    if name.startswith("fixed-gamma:"):
        try:
            g = float(name.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad fixed-gamma analysis {name!r}") from None
        if g <= 0:
            raise ValueError(f"fixed gamma must be positive in {name!r}")
        return None, "fixed", g
    parts = name.split("-")
    if len(parts) == 2 and parts[0] in ("marginal", "conditional") and \
            parts[1] in ("magnitude", "curvature"):
        return parts[0], parts[1], None
    raise ValueError(
        f"unknown analysis {name!r}; expected variant-scaling, 'unscaled' "
        "or 'fixed-gamma:<value>'")


def generate_replicate(system, n: int, seed: int) -> Dataset:
    """Draw one dataset from the system's design rule and noise level."""
    rule = system.design
    rng = np.random.default_rng(seed)
    if rule.kind == "uniform":
        k = rule.lower.size
        x = rule.lower + rng.random((n, k)) * (rule.upper - rule.lower)
    else:
        x = np.linspace(rule.lower[0], rule.upper[0], n).reshape(-1, 1)
    y = np.asarray(system.mu(x), dtype=float)
    if system.sigma > 0:
        y = y + system.sigma * rng.standard_normal(n)
    return Dataset(design=x, responses=y)


_ORACLE_CACHE: dict = {}


def oracle_theta(scenario: str, quad_order: int = 64) -> np.ndarray:
    """Population loss minimiser for a scenario, cached per quadrature order."""
    key = (scenario, quad_order)
    if key not in _ORACLE_CACHE:
        model, system, _ = make_scenario(scenario)
        rule = build_rule(model.x_box.lower, model.x_box.upper, quad_order)
        est = estimate_theta(system.mu, model, rule, method="l2", seed=1, n_starts=20)
        _ORACLE_CACHE[key] = est.theta
    return _ORACLE_CACHE[key].copy()


def brute_force_theta(scenario: str, quad_order: int = 64,
                      grid_size: int = 20001) -> np.ndarray:
    """Grid-search oracle for one-parameter scenarios, used as a cross-check."""
    model, system, _ = make_scenario(scenario)
    if model.n_params != 1:
        raise ValueError("grid oracle only supports one-parameter scenarios")
    rule = build_rule(model.x_box.lower, model.x_box.upper, quad_order)
    loss = l2_loss_fn(system.mu, model, rule)
    grid = np.linspace(model.theta_box.lower[0], model.theta_box.upper[0], grid_size)
    vals = np.array([loss(np.array([t])) for t in grid])
    return np.array([grid[int(np.argmin(vals))]])


def _sandwich_for(variant: str, form: str, est, fit, model, rule):
    if variant == "marginal":
        return marginal_matrices(est, fit, model, rule)
    return conditional_matrices(est, fit, model, rule, form=form)


def run_replicate(index: int, config: StudyConfig, model, system, rule,
                  theta_star: np.ndarray, n: int, grid: GcvGrid | None) -> dict:
    """One complete replicate; returns a plain-dict record."""
    seed_i = config.seed + index
    data = generate_replicate(system, n, seed_i)
    if grid is not None and system.design.kind == "equidistant":
        fit = grid.fit(data.responses)
    else:
        local = GcvGrid(data.design, family=config.kernel_family)
        fit = local.fit(data.responses)
    est = estimate_theta(fit, model, rule, method="l2", seed=seed_i,
                         n_starts=config.n_starts)
    base_loss = l2_loss_fn(fit, model, rule)
    record = {
        "index": index,
        "seed": seed_i,
        "theta_hat": est.theta.tolist(),
        "loss_value": est.value,
        "lambda": fit.lam,
        "rho": fit.kernel.rho.tolist(),
        "sigma2_hat": fit.sigma2_hat,
        "flags": sorted(set(fit.flags) | ({"estimate-not-converged"}
                                          if not est.converged else set())),
        "analyses": {},
    }
    for name in config.analyses:
        variant, kind, gval = parse_analysis(name)
        out = {"flags": []}
        try:
            if kind == "none":
                adj = no_scaling()
            elif kind == "fixed":
                adj = fixed_gamma(gval)
            else:
                sw = _sandwich_for(variant, config.conditional_form, est, fit,
                                   model, rule)
                adj = (magnitude_adjustment(sw) if kind == "magnitude"
                       else curvature_adjustment(sw, est.theta))
            if config.engine == "laplace":
                post = laplace_approx(est, adj, n)
                mean, sd = post.mean, post.sd
            elif config.engine == "conjugate":
                if not model.scalar_linear:
                    raise ValueError("conjugate engine needs a scalar linear model")
                geff = adj.gamma if adj.Gamma is None else float(adj.Gamma[0, 0]) ** 2
                post = conjugate_posterior(fit, n, tau2=np.inf, gamma=geff,
                                           rule=rule)
                mean, sd = post.mean, post.sd
            else:
                loss = scaled_loss(adj, base_loss, model.theta_box)
                prior = Prior.uniform(model.theta_box)
                init_cov = laplace_approx(est, adj, n).cov
                settings = SamplerSettings(chains=config.mcmc_chains,
                                           iterations=config.mcmc_iterations,
                                           thin=config.mcmc_thin,
                                           init=est.theta, init_cov=init_cov)
                post = sample_posterior(loss, prior, n, seed=seed_i,
                                        settings=settings)
                out["flags"].extend(post.flags)
                mean = post.draws.mean(axis=0)
                sd = post.draws.std(axis=0, ddof=1)
            ci = credible_interval(post, level=config.level, mode=config.interval)
            out.update({
                "post_mean": mean.tolist(),
                "post_sd": sd.tolist(),
                "interval": ci.tolist(),
                "length": (ci[:, 1] - ci[:, 0]).tolist(),
                "covers": [bool(lo <= t <= hi) for (lo, hi), t in zip(ci, theta_star)],
                "gamma": adj.gamma if adj.kind == "magnitude" else None,
            })
        except (ScalingError, ValueError) as exc:
            out["flags"].append(f"analysis-failed: {exc}")
            out["failed"] = True
        out["flags"] = sorted(set(out["flags"]))
        record["analyses"][name] = out
    return record


def _study_slice(config_dict: dict, indices: list[int]) -> list[dict]:
    config = StudyConfig(**{**config_dict, "analyses": tuple(config_dict["analyses"])})
    model, system, defaults = make_scenario(config.scenario)
    rule = build_rule(model.x_box.lower, model.x_box.upper, config.quad_order)
    theta_star = oracle_theta(config.scenario, config.quad_order)
    n = config.n if config.n is not None else defaults["n"]
    grid = None
    if system.design.kind == "equidistant":
        xs = np.linspace(system.design.lower[0], system.design.upper[0], n)
        grid = GcvGrid(xs.reshape(-1, 1), family=config.kernel_family)
    return [run_replicate(i, config, model, system, rule, theta_star, n, grid)
            for i in indices]


def aggregate_records(records: list[dict], analyses) -> dict:
    out = {}
    for name in analyses:
        rows = [r["analyses"][name] for r in records]
        ok = [r for r in rows if not r.get("failed")]
        n_ok = len(ok)
        agg = {"n_replicates": len(rows), "n_used": n_ok,
               "n_failed": len(rows) - n_ok}
        if n_ok:
            means = np.array([r["post_mean"] for r in ok])
            sds = np.array([r["post_sd"] for r in ok])
            lens = np.array([r["length"] for r in ok])
            cov = np.array([r["covers"] for r in ok], dtype=float)
            coverage = cov.mean(axis=0)
            agg.update({
                "mean_post_mean": means.mean(axis=0).tolist(),
                "mean_post_sd": sds.mean(axis=0).tolist(),
                "mean_length": lens.mean(axis=0).tolist(),
                "coverage": coverage.tolist(),
                "coverage_se": np.sqrt(coverage * (1 - coverage) / n_ok).tolist(),
            })
        flag_counts: dict = {}
        for r in rows:
            for fl in r["flags"]:
                key = fl.split(":", 1)[0]
                flag_counts[key] = flag_counts.get(key, 0) + 1
        agg["flag_counts"] = dict(sorted(flag_counts.items()))
        out[name] = agg
    return out


@dataclass
class SimulationReport:
    config: dict
    oracle_theta: list
    analyses: dict
    replicate_flags: dict
    records: list = field(repr=False)
    kind: str = "study"

    def to_dict(self, include_records: bool = False) -> dict:
        d = {
            "schema": 1,
            "kind": self.kind,
            "config": self.config,
            "oracle_theta": self.oracle_theta,
            "analyses": self.analyses,
            "replicate_flags": self.replicate_flags,
            "provenance": {
                "package": "l2calib",
                "version": __version__,
                "seed": self.config.get("seed"),
                "quad_order": self.config.get("quad_order"),
            },
        }
        if include_records:
            d["records"] = self.records
        return d

    def to_json(self, include_records: bool = False) -> str:
        return json.dumps(self.to_dict(include_records), sort_keys=True, indent=2)

    def summary_rows(self) -> list[dict]:
        rows = []
        for name, agg in self.analyses.items():
            if "coverage" not in agg:
                rows.append({"analysis": name, "coordinate": "",
                             "mean_post_mean": "", "mean_post_sd": "",
                             "coverage": "", "mean_length": "",
                             "n_used": agg.get("n_used", 0)})
                continue
            cov = agg["coverage"]
            if np.isscalar(cov):
                rows.append({"analysis": name, "coordinate": 1,
                             "mean_post_mean": agg["mean_post_mean"],
                             "mean_post_sd": "",
                             "coverage": cov, "mean_length": agg["mean_length"],
                             "n_used": agg["n_used"]})
                continue
            for j in range(len(cov)):
                rows.append({
                    "analysis": name,
                    "coordinate": j + 1,
                    "mean_post_mean": agg["mean_post_mean"][j],
                    "mean_post_sd": agg["mean_post_sd"][j],
                    "coverage": cov[j],
                    "mean_length": agg["mean_length"][j],
                    "n_used": agg["n_used"],
                })
        return rows


def _chunk(indices: list[int], workers: int) -> list[list[int]]:
    size = max(1, (len(indices) + workers - 1) // workers)
    return [indices[i:i + size] for i in range(0, len(indices), size)]


def run_study(config: StudyConfig) -> SimulationReport:
    indices = list(range(config.replicates))
    cd = config.to_dict()
    if config.workers > 1 and config.replicates > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            parts = list(pool.map(_study_slice_star,
                                  [(cd, ch) for ch in _chunk(indices, config.workers)]))
        records = [r for part in parts for r in part]
    else:
        records = _study_slice(cd, indices)
    records.sort(key=lambda r: r["index"])
    theta_star = oracle_theta(config.scenario, config.quad_order)
    analyses = aggregate_records(records, config.analyses)
    flag_counts: dict = {}
    for r in records:
        for fl in r["flags"]:
            flag_counts[fl] = flag_counts.get(fl, 0) + 1
    # worker count must not leak into the report: bytes are partition-invariant
    cd_report = {k: v for k, v in cd.items() if k != "workers"}
    return SimulationReport(config=cd_report, oracle_theta=theta_star.tolist(),
                            analyses=analyses, replicate_flags=dict(sorted(flag_counts.items())),
                            records=records)


def _study_slice_star(args):
    return _study_slice(*args)


# ---------------------------------------------------------------------------
# coverage study for the straight-line closed-form posterior
# ---------------------------------------------------------------------------

@dataclass
class ClosedFormStudyConfig:
    """Coverage study of the conjugate posterior on the straight-line scenario.

    For each replicate the smoother settings are chosen by GCV, the
    closed-form estimator and its sampling variance follow from the kernel
    weights, and three posteriors are summarised: gamma = 1, the
    variance-matched gamma (computed from ``tau2`` and the true noise level),
    and a fixed large gamma. Credible intervals use the flat-prior normal
    posterior; set ``prior_in_interval`` to keep the N(0, tau2) prior in the
    interval construction as well.
    """

    replicates: int = 10_000
    seed: int = 0
    sample_sizes: tuple = (4, 8)
    gamma_fixed: tuple = (1.0, 15.0)
    tau2: float = 1.0
    level: float = 0.95
    quad_order: int = 64
    kernel_family: str = "gaussian"
    prior_in_interval: bool = False
    workers: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sample_sizes"] = list(self.sample_sizes)
        d["gamma_fixed"] = list(self.gamma_fixed)
        return d


def _closed_form_slice(config_dict: dict, n: int, indices: list[int]) -> list[dict]:
    cfg = ClosedFormStudyConfig(**{**config_dict,
                                   "sample_sizes": tuple(config_dict["sample_sizes"]),
                                   "gamma_fixed": tuple(config_dict["gamma_fixed"])})
    model, system, _ = make_scenario("simple-linear")
    rule = build_rule(model.x_box.lower, model.x_box.upper, cfg.quad_order)
    xq, wq = rule.nodes[:, 0], rule.weights
    den = float(np.sum(wq * xq * xq))
    xs = np.linspace(0.0, 1.0, n)
    grid = GcvGrid(xs.reshape(-1, 1), family=cfg.kernel_family)
    # per-bandwidth pieces for the closed-form estimator and its variance
    qvecs = [kernel_matrix(spec, rule.nodes, grid.design).T @ (wq * xq)
             for (spec, d, qmat) in grid._eig]
    y0 = np.asarray(system.mu(xs.reshape(-1, 1)), dtype=float)
    sigma = system.sigma
    out = []
    for i in indices:
        rng = np.random.default_rng(cfg.seed + i)
        y = y0 + sigma * rng.standard_normal(n)
        idx, lam, score, rss, trm = grid.select(y)
        spec, d, qmat = grid._eig[idx]
        q = qvecs[idx]
        qt_q = qmat.T @ q
        theta_hat = float(qt_q @ ((qmat.T @ y) / (d + lam))) / den
        var_hat = sigma**2 * float(np.sum((qt_q / (d + lam)) ** 2)) / den**2
        rec = {"index": i, "theta_hat": theta_hat, "var_hat": var_hat,
               "lambda": lam, "flags": []}
        gammas = {f"gamma={g:g}": g for g in cfg.gamma_fixed}
        if var_hat < cfg.tau2:
            gammas["gamma=matched"] = (1.0 / (2.0 * n * den)) * (1.0 / var_hat - 1.0 / cfg.tau2)
        else:
            rec["flags"].append("variance-matching-undefined")
        rec["posteriors"] = {}
        for label, g in gammas.items():
            loss_prec = 2.0 * n * g * den
            prec = loss_prec + (1.0 / cfg.tau2 if cfg.prior_in_interval else 0.0)
            mean = loss_prec * theta_hat / prec
            rec["posteriors"][label] = {"mean": mean, "sd": float(np.sqrt(1.0 / prec)),
                                        "gamma": g}
        out.append(rec)
    return out


def _closed_form_slice_star(args):
    return _closed_form_slice(*args)


def run_closed_form_study(cfg: ClosedFormStudyConfig) -> SimulationReport:
    z = float(ndtri(0.5 + cfg.level / 2.0))
    theta_star = float(oracle_theta("simple-linear", cfg.quad_order)[0])
    cd = cfg.to_dict()
    tables = {}
    all_flags: dict = {}
    records = []
    for n in cfg.sample_sizes:
        indices = list(range(cfg.replicates))
        if cfg.workers > 1 and cfg.replicates > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                parts = list(pool.map(_closed_form_slice_star,
                                      [(cd, n, ch) for ch in _chunk(indices, cfg.workers)]))
            recs = [r for part in parts for r in part]
        else:
            recs = _closed_form_slice(cd, n, indices)
        recs.sort(key=lambda r: r["index"])
        labels = [f"gamma={g:g}" for g in cfg.gamma_fixed] + ["gamma=matched"]
        for label in labels:
            rows = [r["posteriors"][label] for r in recs if label in r["posteriors"]]
            if not rows:
                tables[f"n={n},{label}"] = {"n_used": 0}
                continue
            means = np.array([r["mean"] for r in rows])
            sds = np.array([r["sd"] for r in rows])
            lens = 2.0 * z * sds
            covers = (np.abs(means - theta_star) <= z * sds).astype(float)
            c = float(covers.mean())
            tables[f"n={n},{label}"] = {
                "n_used": len(rows),
                "coverage": c,
                "coverage_se": float(np.sqrt(c * (1 - c) / len(rows))),
                "mean_length": float(lens.mean()),
                "mean_post_mean": float(means.mean()),
                "mean_gamma": float(np.mean([r["gamma"] for r in rows])),
            }
        for r in recs:
            for fl in r["flags"]:
                key = f"n={n}:{fl}"
                all_flags[key] = all_flags.get(key, 0) + 1
        records.extend([{**r, "n": n} for r in recs])
    cd_report = {k: v for k, v in cd.items() if k != "workers"}
    return SimulationReport(config=cd_report, oracle_theta=[theta_star], analyses=tables,
                            replicate_flags=dict(sorted(all_flags.items())),
                            records=records, kind="closed-form-study")
