"""Selection-probability estimators and weight post-processing.

Four estimators are provided.  Two use individual-level external data:
the pseudolikelihood estimating equation (PL) and the simplex-regression
composite (SR).  Two use summary-level data: post-stratification over joint
cell probabilities (PS) and calibration to marginal totals (CL).  All four
return per-unit selection probabilities for the internal sample plus
diagnostics.  Winsorization, outcome augmentation, and quantile coarsening
support the weight-stabilization workflow.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DegenerateCutoffsError,
    DegenerateDenominatorError,
    InfeasibleTotalsError,
    NonConvergenceError,
    RankDeficientDesignError,
    SingularJacobianError,
    UnmatchedCellError,
    ValidationError,
)
from .fitters import (
    DesignMatrix,
    expit,
    fit_multinomial,
    fit_simplex_regression,
    multinomial_probabilities,
)
from .solver import solve_estimating_equation

# Estimated probabilities are clamped into [PI_FLOOR, 1]; every clamp is
# counted in the WeightSet diagnostics, never applied silently.
PI_FLOOR = 1e-10

# Overlap labels for the combined internal/external sample.
BOTH_SAMPLES = 0
INTERNAL_ONLY = 1
EXTERNAL_ONLY = 2

# Calibration residuals above this fraction of the population size after a
# full iteration budget indicate infeasible totals rather than slow progress.
INFEASIBLE_RESIDUAL_FRACTION = 1e-4


@dataclass
class WeightSet:
    """Estimated selection probabilities for the internal-sample units."""

    pi_hat: np.ndarray
    method: str
    alpha_hat: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pi_hat = np.asarray(self.pi_hat, dtype=float)
        if np.any(self.pi_hat <= 0.0) or np.any(self.pi_hat > 1.0):
            raise ValidationError("pi_hat entries must lie in (0, 1]")
        needs_alpha = self.method in ("PL", "CL")
        if needs_alpha != (self.alpha_hat is not None):
            raise ValidationError(
                f"alpha_hat must be present exactly for PL/CL, got method={self.method}"
            )

    @property
    def weights(self):
        """Inverse-probability weights, one per internal unit."""
        return 1.0 / self.pi_hat


@dataclass
class PopulationSummary:
    """Target-population summary: joint cells or marginal means plus size.

    ``cells`` maps tuples of discretized selection-variable levels to joint
    probabilities summing to one.  ``means`` holds marginal means aligned
    with ``names``; ``population_size`` is required for marginal summaries
    and optional (but needed by post-stratification scaling) for joint ones.
    """

    kind: str
    cells: Optional[dict] = None
    means: Optional[np.ndarray] = None
    names: Optional[list] = None
    population_size: Optional[int] = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind == "joint_cells":
            if not self.cells:
                raise ValidationError("joint_cells summary requires a cell table")
            total = float(sum(self.cells.values()))
            if abs(total - 1.0) > 1e-9:
                raise ValidationError(
                    f"joint cell probabilities sum to {total!r}, expected 1"
                )
            if any(p < 0.0 for p in self.cells.values()):
                raise ValidationError("cell probabilities must be nonnegative")
        elif self.kind == "marginal_means":
            if self.means is None or self.population_size is None:
                raise ValidationError(
                    "marginal_means summary requires means and population_size"
                )
            self.means = np.asarray(self.means, dtype=float)
            if not np.all(np.isfinite(self.means)):
                raise ValidationError("marginal means must be finite")
            if self.names is not None and len(self.names) != self.means.size:
                raise ValidationError("names length does not match means")
        else:
            raise ValidationError(f"unknown summary kind {self.kind!r}")


@dataclass
class CoarseningRule:
    """Strictly increasing cutoffs splitting one variable into len+1 bins."""

    variable: str
    cutoffs: np.ndarray

    def __post_init__(self):
        self.cutoffs = np.asarray(self.cutoffs, dtype=float).ravel()
        if self.cutoffs.size == 0:
            raise ValidationError("at least one cutoff is required")
        if np.any(np.diff(self.cutoffs) <= 0.0):
            raise DegenerateCutoffsError("cutoffs must be strictly increasing")


DEFAULT_COARSEN_QUANTILES = (0.15, 0.85)


def quantile_cutoffs(values, levels=DEFAULT_COARSEN_QUANTILES):
    """Type-7 quantile cutoffs (linear interpolation of order statistics)."""
    values = np.asarray(values, dtype=float)
    cuts = np.quantile(values, np.asarray(levels, dtype=float))
    if np.any(np.diff(cuts) <= 0.0):
        raise DegenerateCutoffsError(
            "quantile cutoffs are not strictly increasing; "
            "input has too little spread"
        )
    return cuts


def coarsen(values, rule=None, quantiles=DEFAULT_COARSEN_QUANTILES):
    """Bin a continuous variable into ordered integer labels.

    ``rule`` may be a :class:`CoarseningRule`, an explicit cutoff array, or
    None, in which case cutoffs are placed at the requested quantiles of
    ``values`` (default 15th/85th percentiles, giving three bins).  Label k
    covers the half-open interval [cutoff_k, cutoff_{k+1}).
    """
    values = np.asarray(values, dtype=float)
    if isinstance(rule, CoarseningRule):
        cuts = rule.cutoffs
    elif rule is not None:
        cuts = np.asarray(rule, dtype=float).ravel()
        if cuts.size == 0 or np.any(np.diff(cuts) <= 0.0):
            raise DegenerateCutoffsError("cutoffs must be strictly increasing")
    else:
        cuts = quantile_cutoffs(values, quantiles)
    return np.searchsorted(cuts, values, side="right").astype(int)


def winsorize_weights(w, lower_q=0.025, upper_q=0.975):
    """Clip weights to an order-statistic band at the given quantile levels.

    The lower bound is the order statistic at position ceil(1 + (n-1) q_lo)
    and the upper bound the one at floor(1 + (n-1) q_hi), so applying the
    operation twice returns the same vector (the band endpoints are fixed
    points of the clipping).
    """
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0.0):
        raise ValidationError("weights must be positive")
    if not (0.0 <= lower_q < upper_q <= 1.0):
        raise ValidationError("need 0 <= lower_q < upper_q <= 1")
    ws = np.sort(w)
    n = w.size
    i_lo = int(np.ceil((n - 1) * lower_q))
    i_hi = int(np.floor((n - 1) * upper_q))
    i_lo = min(i_lo, i_hi)
    return np.clip(w, ws[i_lo], ws[i_hi])


def augment_weights_with_outcome(w0, outcome, p_pop, p_int):
    """Fold the outcome into selection weights built without it.

    Multiplies each weight by the ratio of the population outcome
    probability to the sample-conditional one, evaluated at the unit's
    realized outcome.
    """
    w0 = np.asarray(w0, dtype=float)
    d = np.asarray(outcome, dtype=float)
    p_pop = np.asarray(p_pop, dtype=float)
    p_int = np.asarray(p_int, dtype=float)
    if not (w0.shape == d.shape == p_pop.shape == p_int.shape):
        raise ValidationError("augmentation inputs must share one shape")
    if np.any(w0 <= 0.0):
        raise ValidationError("weights must be positive")
    if not np.all((d == 0.0) | (d == 1.0)):
        raise ValidationError("outcome must be coded 0/1")
    for name, p in (("p_pop", p_pop), ("p_int", p_int)):
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise ValidationError(f"{name} must lie strictly inside (0, 1)")
    ratio = np.where(d == 1.0, p_pop / p_int, (1.0 - p_pop) / (1.0 - p_int))
    return w0 * ratio


def _design_pair(internal_X, external_X):
    if not isinstance(internal_X, DesignMatrix):
        internal_X = DesignMatrix(np.asarray(internal_X, dtype=float),
                                  [f"x{i}" for i in range(np.asarray(internal_X).shape[1])],
                                  has_intercept=False)
    if not isinstance(external_X, DesignMatrix):
        external_X = DesignMatrix(np.asarray(external_X, dtype=float),
                                  list(internal_X.column_names),
                                  has_intercept=False)
    if internal_X.p != external_X.p:
        raise ValidationError("internal and external designs have different widths")
    if internal_X.column_names != external_X.column_names:
        raise ValidationError("internal and external designs name different columns")
    return internal_X, external_X


def _clamp_pi(pi):
    clamped = np.clip(pi, PI_FLOOR, 1.0)
    n_low = int(np.sum(pi < PI_FLOOR))
    n_high = int(np.sum(pi > 1.0))
    return clamped, n_low, n_high


def _check_pi_ext(pi_ext, n):
    pi_ext = np.asarray(pi_ext, dtype=float).ravel()
    if pi_ext.size != n:
        raise ValidationError("pi_ext length does not match external rows")
    if np.any(pi_ext <= 0.0) or np.any(pi_ext > 1.0):
        raise ValidationError("external design probabilities must lie in (0, 1]")
    return pi_ext


def estimate_weights_pl(internal_X, external_X, pi_ext, cfg=None):
    """Pseudolikelihood selection-model fit from an external probability sample.

    Solves, for a logistic selection model pi(x, alpha),

        sum_internal x_i - sum_external (1 / pi_ext_i) pi(x_i, alpha) x_i = 0,

    normalized by the design-weighted external population size so the
    reported residual norm is scale-free.
    """
    internal_X, external_X = _design_pair(internal_X, external_X)
    xi = internal_X.matrix
    xe = external_X.matrix
    pi_ext = _check_pi_ext(pi_ext, xe.shape[0])
    ext_w = 1.0 / pi_ext
    n_hat = float(np.sum(ext_w))
    internal_total = xi.sum(axis=0)

    def residual(alpha):
        return (internal_total - xe.T @ (ext_w * expit(xe @ alpha))) / n_hat

    def jacobian(alpha):
        p = expit(xe @ alpha)
        return -(xe.T * (ext_w * p * (1.0 - p))) @ xe / n_hat

    try:
        report = solve_estimating_equation(residual, jacobian,
                                           np.zeros(xi.shape[1]), cfg)
    except SingularJacobianError as exc:
        raise RankDeficientDesignError(
            f"selection design is rank deficient: {exc}"
        ) from exc
    if not report.converged:
        raise NonConvergenceError(
            f"pseudolikelihood selection fit did not converge: {report.message}"
        )
    pi_hat, n_low, n_high = _clamp_pi(expit(xi @ report.solution))
    return WeightSet(
        pi_hat, "PL", alpha_hat=report.solution,
        diagnostics={
            "iterations": report.iterations,
            "residual_norm": report.final_residual_norm,
            "clamped_low": n_low,
            "clamped_high": n_high,
        },
    )


def overlap_labels(internal_in_external, external_in_internal):
    """Build combined-sample membership labels from two overlap masks.

    ``internal_in_external`` flags internal units that also belong to the
    external sample; ``external_in_internal`` flags external units that also
    belong to the internal sample.  The result aligns with the rows of the
    stacked (internal, external) design.
    """
    a = np.asarray(internal_in_external, dtype=bool)
    b = np.asarray(external_in_internal, dtype=bool)
    return np.concatenate([
        np.where(a, BOTH_SAMPLES, INTERNAL_ONLY),
        np.where(b, BOTH_SAMPLES, EXTERNAL_ONLY),
    ])


def estimate_weights_sr(internal_X, external_X, pi_ext, overlap, cfg=None):
    """Simplex-regression composite estimator of internal selection probabilities.

    The external design probabilities are modeled with a simplex-distribution
    regression on the external rows, the three-way sample membership with a
    multinomial regression on the combined sample, and the two are composed
    into P(internal selection | x) via the membership-probability ratio.

    ``overlap`` labels each row of the stacked (internal, external) design
    as ``BOTH_SAMPLES``, ``INTERNAL_ONLY``, or ``EXTERNAL_ONLY``.  External
    rows labeled ``BOTH_SAMPLES`` duplicate an internal row and are dropped
    from the multinomial sample so each unit enters once.
    """
    internal_X, external_X = _design_pair(internal_X, external_X)
    xi = internal_X.matrix
    xe = external_X.matrix
    n_int, n_ext = xi.shape[0], xe.shape[0]
    pi_ext = _check_pi_ext(pi_ext, n_ext)
    overlap = np.asarray(overlap)
    if overlap.size != n_int + n_ext:
        raise ValidationError("overlap labels must cover internal plus external rows")
    lab_int, lab_ext = overlap[:n_int], overlap[n_int:]
    if not np.all(np.isin(lab_int, (BOTH_SAMPLES, INTERNAL_ONLY))):
        raise ValidationError("internal rows must be labeled BOTH or INTERNAL_ONLY")
    if not np.all(np.isin(lab_ext, (BOTH_SAMPLES, EXTERNAL_ONLY))):
        raise ValidationError("external rows must be labeled BOTH or EXTERNAL_ONLY")
    if np.sum(lab_int == BOTH_SAMPLES) != np.sum(lab_ext == BOTH_SAMPLES):
        raise ValidationError("mismatched BOTH_SAMPLES counts between blocks")

    simplex = fit_simplex_regression(external_X, pi_ext, cfg)

    ext_only = lab_ext == EXTERNAL_ONLY
    combined = np.vstack([xi, xe[ext_only]])
    labels = np.concatenate([lab_int, np.full(int(ext_only.sum()), EXTERNAL_ONLY)])
    multinomial = fit_multinomial(
        DesignMatrix(combined, list(internal_X.column_names),
                     internal_X.has_intercept),
        labels, cfg)

    probs = multinomial_probabilities(multinomial.coefficients, xi)
    p_both = probs[:, BOTH_SAMPLES]
    p_int_only = probs[:, INTERNAL_ONLY]
    p_ext_only = probs[:, EXTERNAL_ONLY]
    denom = p_both + p_ext_only
    bad = np.flatnonzero(denom < 1e-12)
    if bad.size:
        raise DegenerateDenominatorError(
            f"membership-probability denominator vanished for units {bad[:5].tolist()}",
            unit_indices=bad,
        )
    pi_raw = expit(xi @ simplex.coefficients) * (p_both + p_int_only) / denom
    pi_hat, n_low, n_high = _clamp_pi(pi_raw)
    return WeightSet(
        pi_hat, "SR",
        diagnostics={
            "simplex_coefficients": simplex.coefficients,
            "simplex_dispersion": simplex.dispersion,
            "multinomial_coefficients": multinomial.coefficients,
            "iterations": simplex.report.iterations + multinomial.report.iterations,
            "clamped_low": n_low,
            "clamped_high": n_high,
        },
    )


def estimate_weights_ps(internal_cells, summary, population_size=None):
    """Post-stratification weights from joint cell probabilities.

    ``internal_cells`` holds one discretized selection-variable tuple per
    internal unit (2-d integer array or sequence of tuples).  Raw weight
    ratios P(cell) / P_hat(cell | selected) are rescaled so the weights sum
    to the population size, and probabilities are their inverses.
    """
    if summary.kind != "joint_cells":
        raise ValidationError("post-stratification requires a joint_cells summary")
    n_pop = summary.population_size if summary.population_size is not None else population_size
    if n_pop is None:
        raise ValidationError(
            "population size is required to scale post-stratification weights"
        )
    cells = np.asarray(internal_cells)
    if cells.ndim == 1:
        cells = cells[:, None]
    n = cells.shape[0]
    if n_pop < n:
        raise ValidationError("population size is smaller than the internal sample")

    keys = [tuple(int(v) for v in row) for row in cells]
    counts = {}
    for key in keys:
        counts[key] = counts.get(key, 0) + 1

    ratio = np.empty(n)
    for i, key in enumerate(keys):
        pop_prob = summary.cells.get(key, 0.0)
        if pop_prob <= 0.0:
            raise UnmatchedCellError(
                f"internal unit {i} falls in cell {key} with no positive "
                "population probability"
            )
        ratio[i] = pop_prob / (counts[key] / n)

    w = ratio * (n_pop / ratio.sum())
    pi_hat, n_low, n_high = _clamp_pi(1.0 / w)
    return WeightSet(
        pi_hat, "PS",
        diagnostics={
            "n_cells": len(counts),
            "clamped_low": n_low,
            "clamped_high": n_high,
        },
    )


def estimate_weights_cl(internal_X, summary, cfg=None):
    """Calibration weights matching weighted internal totals to the population.

    Solves ``sum_internal x_i / pi(x_i, alpha) = population totals`` for a
    logistic selection model.  The summary must supply the population size
    (the intercept total) and marginal means for every non-intercept column
    of the selection design.
    """
    if summary.kind != "marginal_means":
        raise ValidationError("calibration requires a marginal_means summary")
    if not isinstance(internal_X, DesignMatrix):
        internal_X = DesignMatrix(
            np.asarray(internal_X, dtype=float),
            [f"x{i}" for i in range(np.asarray(internal_X).shape[1])],
            has_intercept=False,
        )
    x = internal_X.matrix
    n, p = x.shape
    n_pop = float(summary.population_size)
    if n_pop < n:
        raise ValidationError("population size is smaller than the internal sample")

    covariate_names = list(internal_X.column_names)
    offset = 1 if internal_X.has_intercept else 0
    means = summary.means
    if summary.names is not None:
        name_to_mean = dict(zip(summary.names, summary.means))
        if all(c in name_to_mean for c in covariate_names[offset:]):
            means = np.array([name_to_mean[c] for c in covariate_names[offset:]])
        elif len(summary.means) != p - offset:
            missing = [c for c in covariate_names[offset:] if c not in name_to_mean]
            raise ValidationError(f"summary lacks means for columns {missing}")
    if means is None or len(means) != p - offset:
        raise ValidationError(
            f"summary supplies {0 if means is None else len(means)} means "
            f"for {p - offset} covariates"
        )
    totals = np.concatenate([[n_pop] if offset else [], n_pop * np.asarray(means)])

    def residual(alpha):
        pi = np.clip(expit(x @ alpha), PI_FLOOR, 1.0)
        return (x.T @ (1.0 / pi) - totals) / n_pop

    def jacobian(alpha):
        pi = np.clip(expit(x @ alpha), PI_FLOOR, 1.0)
        return -(x.T * ((1.0 - pi) / pi)) @ x / n_pop

    try:
        report = solve_estimating_equation(residual, jacobian, np.zeros(p), cfg)
    except SingularJacobianError as exc:
        raise RankDeficientDesignError(
            f"selection design is rank deficient: {exc}"
        ) from exc
    if not report.converged:
        if report.final_residual_norm > INFEASIBLE_RESIDUAL_FRACTION:
            raise InfeasibleTotalsError(
                "no logistic weighting matches the population totals "
                f"(scaled residual {report.final_residual_norm:.3e})"
            )
        raise NonConvergenceError(
            f"calibration fit did not converge: {report.message}"
        )
    pi_hat, n_low, n_high = _clamp_pi(expit(x @ report.solution))
    return WeightSet(
        pi_hat, "CL", alpha_hat=report.solution,
        diagnostics={
            "iterations": report.iterations,
            "residual_norm": report.final_residual_norm,
            "clamped_low": n_low,
            "clamped_high": n_high,
        },
    )
