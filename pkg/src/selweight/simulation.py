"""Monte Carlo engine for the selection-bias study.

Populations are generated under four dependence scenarios (``dag`` 1-4)
crossed with three internal-selection-model forms (``setup`` 1-3), an
external probability sample is drawn alongside, and each replication fits
the requested weighting methods with their matching sandwich variances.
Replication streams are keyed by (seed, replication index) on a
counter-based generator, and normal variates come from the inverse CDF, so
studies are bit-reproducible at any degree of parallelism.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    AllReplicationsFailedError,
    SelweightError,
    SparseBinError,
    StudyError,
    ValidationError,
)
from .fitters import DesignMatrix, FittedModel, expit, fit_weighted_logistic
from .solver import SolveConfig
from .variance import normal_quantile, vcov_cl, vcov_known_weights, vcov_pl
from .weights import (
    PopulationSummary,
    WeightSet,
    estimate_weights_cl,
    estimate_weights_pl,
    estimate_weights_ps,
    estimate_weights_sr,
    overlap_labels,
    quantile_cutoffs,
)

METHODS = ("unweighted", "pl", "sr", "ps", "cl", "oracle_weights")

# Scenario tables: disease-to-selection coupling per dag, interaction terms
# per (dag, setup).
DAG_GAMMA = {1: (0.0, 0.0, 0.0), 2: (0.0, 1.0, 0.0),
             3: (0.0, 1.0, 0.0), 4: (1.0, 1.0, 1.0)}
DAG_ALPHA1 = {1: 0.0, 2: 0.0, 3: 0.7, 4: 0.7}
DAG_SETUP3_INTERACTIONS = {1: (0.0, 0.4), 2: (0.0, 0.4),
                           3: (0.5, 0.4), 4: (0.5, 0.4)}
DEFAULT_POPULATION_SIZE = {1: 50_000, 2: 125_000, 3: 50_000}


@dataclass(frozen=True)
class SimulationConfig:
    """Generative constants for one scenario; defaults follow the study design."""

    dag: int
    setup: int
    n_population: Optional[int] = None
    replications: int = 500
    seed: int = 0
    theta: tuple = (-2.0, 0.5, 0.5)
    alpha0: float = -0.8
    alpha2: float = 0.3
    alpha3: float = 1.0
    nu: tuple = (-0.6, 1.2, 0.4, 0.5)
    external_scale: float = 0.75
    setup2_scale: float = 0.4
    z_correlation: float = 0.5

    def __post_init__(self):
        if self.dag not in (1, 2, 3, 4):
            raise ValidationError("dag must be 1, 2, 3, or 4")
        if self.setup not in (1, 2, 3):
            raise ValidationError("setup must be 1, 2, or 3")
        if self.replications < 1:
            raise ValidationError("replications must be at least 1")
        if not (0 <= self.seed < 2**63):
            raise ValidationError("seed must be a nonnegative 63-bit integer")
        if self.n_population is not None and self.n_population < 1:
            raise ValidationError("n_population must be positive")

    @property
    def population_size(self):
        if self.n_population is not None:
            return self.n_population
        return DEFAULT_POPULATION_SIZE[self.setup]

    @property
    def gamma(self):
        return DAG_GAMMA[self.dag]

    @property
    def alpha1(self):
        return DAG_ALPHA1[self.dag]

    @property
    def interactions(self):
        """(alpha4, alpha5): zero outside setup 3."""
        if self.setup == 3:
            return DAG_SETUP3_INTERACTIONS[self.dag]
        return (0.0, 0.0)

    @property
    def selection_scale(self):
        return self.setup2_scale if self.setup == 2 else 1.0

    def parameter_table(self):
        """Every resolved numeric constant, for snapshot comparison."""
        return {
            "dag": self.dag,
            "setup": self.setup,
            "n_population": self.population_size,
            "theta": list(self.theta),
            "gamma": list(self.gamma),
            "alpha": [self.alpha0, self.alpha1, self.alpha2, self.alpha3],
            "interactions": list(self.interactions),
            "selection_scale": self.selection_scale,
            "nu": list(self.nu),
            "external_scale": self.external_scale,
            "z_correlation": self.z_correlation,
        }


@dataclass
class Population:
    """One simulated target population with both sampling mechanisms realized."""

    z1: np.ndarray
    z2: np.ndarray
    w: np.ndarray
    d: np.ndarray
    s: np.ndarray
    s_ext: np.ndarray
    pi_true: np.ndarray
    pi_ext: np.ndarray

    @property
    def n(self):
        return self.z1.size


def _replication_rng(seed, replication_index):
    key = np.array([seed, replication_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _standard_normal(rng, n):
    # Inverse-CDF sampling keeps draws identical across platforms.
    u = np.clip(rng.random(n), 1e-300, 1.0 - 1e-16)
    return normal_quantile(u)


def generate_population(cfg, replication_index=0):
    """Simulate one population under the configured scenario.

    Draw order is fixed (z1, z2 innovation, disease, w innovation, internal
    selection, external selection) so a (seed, replication) pair always
    yields the same arrays.
    """
    rng = _replication_rng(cfg.seed, replication_index)
    n = cfg.population_size
    rho = cfg.z_correlation

    z1 = _standard_normal(rng, n)
    z2 = rho * z1 + math.sqrt(1.0 - rho**2) * _standard_normal(rng, n)

    t0, t1, t2 = cfg.theta
    d = (rng.random(n) < expit(t0 + t1 * z1 + t2 * z2)).astype(float)

    g1, g2, g3 = cfg.gamma
    w = g1 * d + g2 * z1 + g3 * z2 + _standard_normal(rng, n)

    a4, a5 = cfg.interactions
    eta = (cfg.alpha0 + cfg.alpha1 * z2 + cfg.alpha2 * w + cfg.alpha3 * d
           + a4 * d * z2 + a5 * d * w)
    pi_true = cfg.selection_scale * expit(eta)
    s = (rng.random(n) < pi_true).astype(float)

    v0, v1, v2, v3 = cfg.nu
    pi_ext = cfg.external_scale * expit(v0 + v1 * z2 + v2 * w + v3 * d)
    s_ext = (rng.random(n) < pi_ext).astype(float)

    return Population(z1, z2, w, d, s, s_ext, pi_true, pi_ext)


@dataclass
class LogRatioBins:
    """Binned estimates of the log selection-probability ratio by disease status."""

    z1_mean: np.ndarray
    z2_mean: np.ndarray
    z1_bin: np.ndarray
    z2_bin: np.ndarray
    log_ratio: np.ndarray
    variance: np.ndarray
    n_disease: np.ndarray
    n_control: np.ndarray
    skipped: list = field(default_factory=list)


def estimate_r_offset_mc(population, z1_cutoffs=None, z2_cutoffs=None,
                         n_bins=(5, 5), min_class_count=50):
    """Estimate log P(S=1|D=1,bin) - log P(S=1|D=0,bin) over a (z1, z2) grid.

    Default bins are equiprobable per axis.  Bins with fewer than
    ``min_class_count`` units in either disease class, or with no selected
    unit in one class, are skipped and reported in ``skipped``.
    """
    z1, z2 = population.z1, population.z2
    if z1_cutoffs is None:
        z1_cutoffs = np.quantile(z1, np.arange(1, n_bins[0]) / n_bins[0])
    if z2_cutoffs is None:
        z2_cutoffs = np.quantile(z2, np.arange(1, n_bins[1]) / n_bins[1])
    z1_cutoffs = np.asarray(z1_cutoffs, dtype=float)
    z2_cutoffs = np.asarray(z2_cutoffs, dtype=float)
    k1, k2 = z1_cutoffs.size + 1, z2_cutoffs.size + 1

    b1 = np.searchsorted(z1_cutoffs, z1, side="right")
    b2 = np.searchsorted(z2_cutoffs, z2, side="right")
    bin_id = b1 * k2 + b2
    nb = k1 * k2
    d = population.d
    s = population.s

    n_dis = np.bincount(bin_id, weights=d, minlength=nb)
    n_con = np.bincount(bin_id, weights=1.0 - d, minlength=nb)
    sel_dis = np.bincount(bin_id, weights=d * s, minlength=nb)
    sel_con = np.bincount(bin_id, weights=(1.0 - d) * s, minlength=nb)
    z1_sum = np.bincount(bin_id, weights=z1, minlength=nb)
    z2_sum = np.bincount(bin_id, weights=z2, minlength=nb)
    n_all = n_dis + n_con

    rows = {k: [] for k in ("z1_mean", "z2_mean", "z1_bin", "z2_bin",
                            "log_ratio", "variance", "n_disease", "n_control")}
    skipped = []
    for idx in range(nb):
        i1, i2 = divmod(idx, k2)
        if n_all[idx] == 0:
            continue
        if n_dis[idx] < min_class_count or n_con[idx] < min_class_count:
            skipped.append(SparseBinError(
                f"bin ({i1}, {i2}) has class counts "
                f"({int(n_dis[idx])}, {int(n_con[idx])}) below {min_class_count}"
            ))
            continue
        if sel_dis[idx] == 0 or sel_con[idx] == 0:
            skipped.append(SparseBinError(
                f"bin ({i1}, {i2}) has an empty selected class"
            ))
            continue
        p1 = sel_dis[idx] / n_dis[idx]
        p0 = sel_con[idx] / n_con[idx]
        rows["z1_mean"].append(z1_sum[idx] / n_all[idx])
        rows["z2_mean"].append(z2_sum[idx] / n_all[idx])
        rows["z1_bin"].append(i1)
        rows["z2_bin"].append(i2)
        rows["log_ratio"].append(math.log(p1) - math.log(p0))
        rows["variance"].append(
            1.0 / sel_dis[idx] - 1.0 / n_dis[idx]
            + 1.0 / sel_con[idx] - 1.0 / n_con[idx]
        )
        rows["n_disease"].append(n_dis[idx])
        rows["n_control"].append(n_con[idx])
    return LogRatioBins(
        **{k: np.asarray(v) for k, v in rows.items()}, skipped=skipped
    )


@dataclass
class MethodResult:
    """One method's output for one replication."""

    method: str
    model: Optional[FittedModel] = None
    weight_set: Optional[WeightSet] = None
    error: Optional[str] = None

    @property
    def failed(self):
        return self.error is not None


def _disease_design(population, mask):
    return DesignMatrix(
        np.column_stack([np.ones(int(mask.sum())),
                         population.z1[mask], population.z2[mask]]),
        ["intercept", "z1", "z2"],
    )


def _selection_design(population, mask):
    return DesignMatrix(
        np.column_stack([np.ones(int(mask.sum())), population.z2[mask],
                         population.w[mask], population.d[mask]]),
        ["intercept", "z2", "w", "d"],
    )


def _poststratification_inputs(population, int_mask):
    z2_cuts = quantile_cutoffs(population.z2)
    w_cuts = quantile_cutoffs(population.w)
    z2_bins = np.searchsorted(z2_cuts, population.z2, side="right")
    w_bins = np.searchsorted(w_cuts, population.w, side="right")
    cells_all = np.column_stack([population.d.astype(int), z2_bins, w_bins])
    keys, counts = np.unique(cells_all, axis=0, return_counts=True)
    table = {tuple(int(v) for v in key): cnt / population.n
             for key, cnt in zip(keys, counts)}
    summary = PopulationSummary("joint_cells", cells=table,
                                population_size=population.n)
    return cells_all[int_mask], summary


def _calibration_summary(population):
    return PopulationSummary(
        "marginal_means",
        means=np.array([population.z2.mean(), population.w.mean(),
                        population.d.mean()]),
        names=["z2", "w", "d"],
        population_size=population.n,
    )


def run_replication(cfg, replication_index, methods=METHODS, solve_cfg=None):
    """Generate one population and fit every requested method on it.

    Per-method failures are captured in the returned results rather than
    raised, so a single separation or convergence failure does not abort a
    study.
    """
    methods = tuple(methods)
    if not methods:
        raise ValidationError("at least one method is required")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValidationError(f"unknown methods {unknown}")
    solve_cfg = solve_cfg or SolveConfig()

    pop = generate_population(cfg, replication_index)
    int_mask = pop.s == 1.0
    ext_mask = pop.s_ext == 1.0
    n_pop = pop.n

    z_design = _disease_design(pop, int_mask)
    x_int = _selection_design(pop, int_mask)
    x_ext = _selection_design(pop, ext_mask)
    d_int = pop.d[int_mask]
    pi_ext_ext = pop.pi_ext[ext_mask]

    results = {}
    for method in methods:
        try:
            results[method] = _fit_one_method(
                method, cfg, pop, int_mask, ext_mask, z_design, x_int, x_ext,
                d_int, pi_ext_ext, n_pop, solve_cfg)
        except SelweightError as exc:
            results[method] = MethodResult(method, error=f"{type(exc).__name__}: {exc}")
    return results


def _fit_one_method(method, cfg, pop, int_mask, ext_mask, z_design, x_int,
                    x_ext, d_int, pi_ext_ext, n_pop, solve_cfg):
    weight_set = None
    if method == "unweighted":
        pi = np.ones(int(int_mask.sum()))
    elif method == "oracle_weights":
        pi = pop.pi_true[int_mask]
        weight_set = WeightSet(pi, "known", diagnostics={"source": "true"})
    elif method == "pl":
        weight_set = estimate_weights_pl(x_int, x_ext, pi_ext_ext, solve_cfg)
        pi = weight_set.pi_hat
    elif method == "sr":
        labels = overlap_labels(pop.s_ext[int_mask] == 1.0,
                                pop.s[ext_mask] == 1.0)
        weight_set = estimate_weights_sr(x_int, x_ext, pi_ext_ext, labels,
                                         solve_cfg)
        pi = weight_set.pi_hat
    elif method == "ps":
        int_cells, summary = _poststratification_inputs(pop, int_mask)
        weight_set = estimate_weights_ps(int_cells, summary)
        pi = weight_set.pi_hat
    elif method == "cl":
        weight_set = estimate_weights_cl(x_int, _calibration_summary(pop),
                                         solve_cfg)
        pi = weight_set.pi_hat
    else:  # pragma: no cover - guarded by run_replication
        raise ValidationError(f"unknown method {method!r}")

    model = fit_weighted_logistic(z_design, d_int, pi, solve_cfg)
    theta = model.coefficients
    if method == "pl":
        model.vcov = vcov_pl(
            theta, weight_set.alpha_hat, z_design, d_int, x_int, x_ext,
            pi_ext_ext, n_pop,
            internal_in_external=pop.s_ext[int_mask] == 1.0,
            internal_pi_ext=pop.pi_ext[int_mask])
    elif method == "cl":
        model.vcov = vcov_cl(theta, weight_set.alpha_hat, z_design, d_int,
                             x_int, n_pop)
    else:
        model.vcov = vcov_known_weights(theta, z_design, d_int, pi, n_pop)
    return MethodResult(method, model=model, weight_set=weight_set)


@dataclass
class StudyMetric:
    """Aggregated performance of one method for one parameter."""

    method: str
    parameter: str
    bias: float
    relative_bias_pct: float
    rmse_relative: float
    coverage: float
    mean_est_var: float
    mc_var: float
    failures: int
    n_used: int


@dataclass
class StudyResult:
    """Study-level summary over replications, one row per method and parameter.

    ``alpha_means`` holds the average fitted selection-model coefficients for
    the methods that estimate them (PL, CL); ``clamp_counts`` the total
    number of clamped probabilities per method across replications.
    """

    rows: list
    dag: int
    setup: int
    replications: int
    seed: int
    alpha_means: dict = field(default_factory=dict)
    clamp_counts: dict = field(default_factory=dict)

    def metric(self, method, parameter):
        for row in self.rows:
            if row.method == method and row.parameter == parameter:
                return row
        raise KeyError(f"no row for ({method}, {parameter})")

    def to_records(self):
        return [
            {
                "method": r.method,
                "parameter": r.parameter,
                "bias": r.bias,
                "relative_bias_pct": r.relative_bias_pct,
                "rmse_relative": r.rmse_relative,
                "coverage": r.coverage,
                "mean_est_var": r.mean_est_var,
                "mc_var": r.mc_var,
                "failures": r.failures,
                "n_used": r.n_used,
            }
            for r in self.rows
        ]


def _run_replication_task(args):
    cfg, index, methods = args
    results = run_replication(cfg, index, methods)
    compact = {}
    for method, res in results.items():
        if res.failed:
            compact[method] = res.error
        else:
            ws = res.weight_set
            alpha = ws.alpha_hat if ws is not None else None
            clamps = 0
            if ws is not None:
                clamps = (ws.diagnostics.get("clamped_low", 0)
                          + ws.diagnostics.get("clamped_high", 0))
            compact[method] = (res.model.coefficients,
                               np.diag(res.model.vcov).copy(), alpha, clamps)
    return index, compact


def run_study(cfg, methods=("unweighted", "pl", "sr", "ps", "cl"),
              parallelism=1, ci_level=0.95):
    """Run the configured number of replications and aggregate the metrics.

    Parallel execution farms replications out to worker processes; the
    aggregation is a deterministic reduction in replication order, so the
    result is identical for every ``parallelism`` value.
    """
    methods = tuple(methods)
    r_total = cfg.replications
    if r_total < 2:
        raise ValidationError("at least two replications are required")
    tasks = [(cfg, r, methods) for r in range(r_total)]
    if parallelism and parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(_run_replication_task, tasks,
                                     chunksize=max(1, r_total // (8 * parallelism))))
    else:
        outcomes = [_run_replication_task(t) for t in tasks]
    outcomes.sort(key=lambda item: item[0])

    estimates = {m: [] for m in methods}
    variances = {m: [] for m in methods}
    alphas = {m: [] for m in methods}
    clamp_totals = {m: 0 for m in methods}
    failures = {m: 0 for m in methods}
    for _, compact in outcomes:
        for method in methods:
            value = compact[method]
            if isinstance(value, str):
                failures[method] += 1
            else:
                theta, var_diag, alpha, clamps = value
                estimates[method].append(theta)
                variances[method].append(var_diag)
                clamp_totals[method] += clamps
                if alpha is not None:
                    alphas[method].append(alpha)

    for method in methods:
        if not estimates[method]:
            raise AllReplicationsFailedError(
                f"all {r_total} replications failed for {method}"
            )
        if failures[method] > 0.10 * r_total:
            raise StudyError(
                f"{failures[method]} of {r_total} replications failed for {method}"
            )

    true_theta = np.asarray(cfg.theta)
    parameters = {"theta1": 1, "theta2": 2}
    z = normal_quantile(0.5 * (1.0 + ci_level))

    mse = {}
    rows = []
    for method in methods:
        est = np.asarray(estimates[method])
        var = np.asarray(variances[method])
        for name, j in parameters.items():
            mse[(method, name)] = float(np.mean((est[:, j] - true_theta[j]) ** 2))

    for method in methods:
        est = np.asarray(estimates[method])
        var = np.asarray(variances[method])
        for name, j in parameters.items():
            truth = true_theta[j]
            bias = float(np.mean(est[:, j]) - truth)
            rel = 100.0 * abs(bias) / abs(truth)
            half = z * np.sqrt(var[:, j])
            covered = (est[:, j] - half <= truth) & (truth <= est[:, j] + half)
            rmse_rel = (mse[(method, name)] / mse[("unweighted", name)]
                        if "unweighted" in methods else float("nan"))
            rows.append(StudyMetric(
                method=method,
                parameter=name,
                bias=bias,
                relative_bias_pct=rel,
                rmse_relative=rmse_rel,
                coverage=float(np.mean(covered)),
                mean_est_var=float(np.mean(var[:, j])),
                mc_var=float(np.var(est[:, j], ddof=1)),
                failures=failures[method],
                n_used=est.shape[0],
            ))
    alpha_means = {m: np.mean(np.asarray(a), axis=0)
                   for m, a in alphas.items() if a}
    return StudyResult(rows=rows, dag=cfg.dag, setup=cfg.setup,
                       replications=r_total, seed=cfg.seed,
                       alpha_means=alpha_means, clamp_counts=clamp_totals)
