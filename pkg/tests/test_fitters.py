import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import selweight as sw
from selweight.fitters import simplex_log_density, simplex_unit_deviance

from conftest import grid_search_logistic


def refine_grid_argmax(objective, bounds, steps=9, points=13):
    """Coordinate grid refinement for smooth strictly concave objectives."""
    lows = np.array([b[0] for b in bounds], dtype=float)
    highs = np.array([b[1] for b in bounds], dtype=float)
    best = None
    for _ in range(steps):
        axes = [np.linspace(lo, hi, points) for lo, hi in zip(lows, highs)]
        mesh = np.meshgrid(*axes, indexing="ij")
        flat = np.column_stack([m.ravel() for m in mesh])
        values = np.array([objective(row) for row in flat])
        best = flat[int(np.argmax(values))]
        span = (highs - lows) / (points - 1)
        lows = best - 2 * span
        highs = best + 2 * span
    return best


# ---------------------------------------------------------------------------
# weighted logistic


def test_intercept_only_balanced_outcome_gives_zero():
    design = sw.DesignMatrix(np.ones((4, 1)), ["intercept"])
    model = sw.fit_weighted_logistic(design, [1, 0, 1, 0])
    assert model.coefficients[0] == pytest.approx(0.0, abs=1e-9)


def test_weighted_fit_matches_weighted_grid_search():
    x = np.array([-2.0, -1.2, -0.4, 0.1, 0.6, 1.1, 1.7, 2.3])
    d = np.array([0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0])
    pi = np.array([0.9, 0.4, 0.7, 0.2, 0.5, 0.8, 0.3, 0.6])
    design = sw.DesignMatrix(np.column_stack([np.ones(8), x]),
                             ["intercept", "x"])
    model = sw.fit_weighted_logistic(design, d, pi)
    oracle = grid_search_logistic(x, d, 1.0 / pi)
    assert np.max(np.abs(model.coefficients - oracle)) <= 1e-3


def test_score_residual_below_tolerance_at_solution():
    rng = np.random.default_rng(5)
    x = np.column_stack([np.ones(60), rng.normal(size=60)])
    d = (rng.random(60) < sw.expit(0.3 + 0.8 * x[:, 1])).astype(float)
    pi = rng.uniform(0.2, 1.0, size=60)
    design = sw.DesignMatrix(x, ["intercept", "x"])
    cfg = sw.SolveConfig()
    model = sw.fit_weighted_logistic(design, d, pi, cfg)
    score = x.T @ ((d - sw.expit(x @ model.coefficients)) / pi) / 60
    assert np.max(np.abs(score)) <= cfg.tol_score


@settings(max_examples=20, deadline=None)
@given(st.floats(min_value=0.05, max_value=1.0))
def test_constant_probabilities_cancel(c):
    rng = np.random.default_rng(11)
    x = np.column_stack([np.ones(40), rng.normal(size=40)])
    d = (rng.random(40) < sw.expit(-0.2 + x[:, 1])).astype(float)
    design = sw.DesignMatrix(x, ["intercept", "x"])
    base = sw.fit_weighted_logistic(design, d)
    scaled = sw.fit_weighted_logistic(design, d, np.full(40, c))
    assert np.allclose(base.coefficients, scaled.coefficients, atol=1e-7)


def test_degenerate_outcome_rejected():
    design = sw.DesignMatrix(np.ones((5, 1)), ["intercept"])
    with pytest.raises(sw.DegenerateOutcomeError):
        sw.fit_weighted_logistic(design, np.ones(5))


def test_separated_data_raises():
    x = np.array([-2.0, -1.0, -0.5, 0.5, 1.0, 2.0])
    d = (x > 0).astype(float)
    design = sw.DesignMatrix(np.column_stack([np.ones(6), x]),
                             ["intercept", "x"])
    with pytest.raises(sw.SeparationError):
        sw.fit_weighted_logistic(design, d)


def test_outcome_and_probability_validation():
    design = sw.DesignMatrix(np.ones((4, 1)), ["intercept"])
    with pytest.raises(sw.ValidationError):
        sw.fit_weighted_logistic(design, [0, 1, 2, 0])
    with pytest.raises(sw.ValidationError):
        sw.fit_weighted_logistic(design, [0, 1, 1, 0], [0.5, 0.5, 0.5, 1.5])


def test_true_weight_fit_recovers_generative_coefficients():
    cfg = sw.SimulationConfig(dag=1, setup=1, seed=123)
    pop = sw.generate_population(cfg, 0)
    mask = pop.s == 1.0
    design = sw.DesignMatrix(
        np.column_stack([np.ones(int(mask.sum())), pop.z1[mask], pop.z2[mask]]),
        ["intercept", "z1", "z2"])
    model = sw.fit_weighted_logistic(design, pop.d[mask], pop.pi_true[mask])
    model.vcov = sw.vcov_known_weights(model.coefficients, design,
                                       pop.d[mask], pop.pi_true[mask], pop.n)
    se = np.sqrt(np.diag(model.vcov))
    assert np.all(np.abs(model.coefficients - np.array(cfg.theta)) <= 3 * se)


# ---------------------------------------------------------------------------
# multinomial


def test_intercept_only_multinomial_recovers_frequencies():
    design = sw.DesignMatrix(np.ones((10, 1)), ["intercept"])
    category = np.array([0] * 5 + [1] * 3 + [2] * 2)
    model = sw.fit_multinomial(design, category)
    probs = sw.multinomial_probabilities(model.coefficients, design)
    assert np.allclose(probs[0], [0.5, 0.3, 0.2], atol=1e-9)


def test_multinomial_matches_grid_search_maximizer():
    x = np.array([0., 0., 0., 0., 0., 0., 1., 1., 1., 1., 1., 1.])
    category = np.array([0, 0, 1, 1, 2, 0, 1, 1, 2, 2, 0, 2])
    design = sw.DesignMatrix(np.column_stack([np.ones(12), x]),
                             ["intercept", "x"])
    model = sw.fit_multinomial(design, category)

    xmat = design.matrix

    def loglik(beta):
        probs = sw.multinomial_probabilities(beta.reshape(2, 2), xmat)
        return float(np.sum(np.log(probs[np.arange(12), category])))

    oracle = refine_grid_argmax(loglik, [(-5, 5)] * 4)
    assert np.max(np.abs(model.coefficients.ravel() - oracle)) <= 2e-3


def test_multinomial_probabilities_sum_to_one():
    rng = np.random.default_rng(2)
    x = np.column_stack([np.ones(200), rng.normal(size=200),
                         rng.normal(size=200)])
    design = sw.DesignMatrix(x, ["intercept", "a", "b"])
    category = rng.integers(0, 3, size=200)
    model = sw.fit_multinomial(design, category)
    probs = sw.multinomial_probabilities(model.coefficients, design)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_multinomial_empty_category_raises():
    design = sw.DesignMatrix(np.ones((6, 1)), ["intercept"])
    with pytest.raises(sw.EmptyCategoryError):
        sw.fit_multinomial(design, np.array([0, 0, 1, 1, 0, 1]))


# ---------------------------------------------------------------------------
# simplex regression


def sample_simplex(mu, sigma2, rng, grid_size=4096):
    """Accept-reject sampler against the simplex density (test oracle)."""
    mu = np.asarray(mu, dtype=float)
    out = np.empty(mu.size)
    ygrid = np.linspace(1e-4, 1 - 1e-4, grid_size)
    pending = np.arange(mu.size)
    dens_grid = np.exp(simplex_log_density(ygrid[None, :], mu[:, None], sigma2))
    bound = 1.3 * dens_grid.max(axis=1)
    while pending.size:
        y = rng.uniform(1e-6, 1 - 1e-6, size=pending.size)
        u = rng.uniform(0, 1, size=pending.size)
        dens = np.exp(simplex_log_density(y, mu[pending], sigma2))
        accept = u * bound[pending] < dens
        out[pending[accept]] = y[accept]
        pending = pending[~accept]
    return out


def test_constant_response_interpolates():
    design = sw.DesignMatrix(np.ones((20, 1)), ["intercept"])
    model = sw.fit_simplex_regression(design, np.full(20, 0.75))
    assert model.coefficients[0] == pytest.approx(sw.logit(0.75), abs=1e-8)
    mu = model.probabilities(design)
    assert np.max(simplex_unit_deviance(np.full(20, 0.75), mu)) <= 1e-12
    assert model.dispersion <= 1e-12


def test_simplex_sampler_recovery_over_seeds():
    delta = np.array([-0.5, 1.0])
    sigma2 = 0.5
    errors = []
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        x = rng.normal(size=2000)
        design = sw.DesignMatrix(np.column_stack([np.ones(2000), x]),
                                 ["intercept", "x"])
        mu = sw.expit(design.matrix @ delta)
        y = sample_simplex(mu, sigma2, rng)
        model = sw.fit_simplex_regression(design, y)
        errors.append(np.max(np.abs(model.coefficients - delta)))
    errors = np.asarray(errors)
    assert errors.mean() <= 0.1
    assert errors.max() <= 0.2


def test_external_design_probability_model_fit():
    # The scaled-logistic external model is misspecified for a logit mean
    # model, so the contract is prediction quality, not coefficient recovery.
    cfg = sw.SimulationConfig(dag=1, setup=1, seed=99)
    pop = sw.generate_population(cfg, 0)
    mask = pop.s_ext == 1.0
    design = sw.DesignMatrix(
        np.column_stack([np.ones(int(mask.sum())), pop.z2[mask],
                         pop.w[mask], pop.d[mask]]),
        ["intercept", "z2", "w", "d"])
    model = sw.fit_simplex_regression(design, pop.pi_ext[mask])
    pred = model.probabilities(design)
    corr = np.corrcoef(pred, pop.pi_ext[mask])[0, 1]
    assert corr > 0.97


def test_boundary_response_rejected():
    design = sw.DesignMatrix(np.ones((3, 1)), ["intercept"])
    with pytest.raises(sw.ResponseOnBoundaryError):
        sw.fit_simplex_regression(design, np.array([0.5, 1.0, 0.25]))


def test_simplex_dispersion_is_mean_unit_deviance():
    rng = np.random.default_rng(8)
    x = np.column_stack([np.ones(300), rng.normal(size=300)])
    y = np.clip(rng.beta(2.0, 3.0, size=300), 1e-3, 1 - 1e-3)
    design = sw.DesignMatrix(x, ["intercept", "x"])
    model = sw.fit_simplex_regression(design, y)
    mu = model.probabilities(design)
    assert model.dispersion == pytest.approx(
        float(np.mean(simplex_unit_deviance(y, mu))), rel=1e-12)


# ---------------------------------------------------------------------------
# design matrix plumbing


def test_design_matrix_validation():
    with pytest.raises(sw.ValidationError):
        sw.DesignMatrix(np.array([[1.0, np.nan]]), ["intercept", "x"])
    with pytest.raises(sw.ValidationError):
        sw.DesignMatrix(np.array([[2.0, 1.0]]), ["intercept", "x"],
                        has_intercept=True)
    design = sw.build_design([np.array([1.0, 2.0])], ["x"])
    assert design.column_names == ["intercept", "x"]
    assert design.matrix.shape == (2, 2)
