"""Model fitting core: WLS, logistic, multinomial, and their error contract.

Every solver is checked against an independent computation: closed forms,
brute-force normal equations, or a zooming grid-search likelihood maximizer
that never touches the Newton code paths.
"""

from __future__ import annotations

import numpy as np
import pytest
import scipy.linalg
import scipy.special
from hypothesis import given, settings
from hypothesis import strategies as st

from dmar.glm import (
    ColumnMismatchError,
    DesignMatrix,
    MissingCategoryError,
    NonFiniteError,
    RankDeficientError,
    SingleClassError,
    fit_logistic,
    fit_multinomial,
    fit_wls,
    logistic_log_likelihood,
    multinomial_log_likelihood,
    multinomial_score,
    predict_proba,
)


def grid_maximize(loglik, start: np.ndarray, width: float, rounds: int, points: int) -> np.ndarray:
    """Zooming grid search: recenters on the best grid point and halves the box.

    For a concave objective whose maximizer starts inside the box, the final
    center is within one final-grid spacing of the optimum per coordinate.
    """
    center = np.asarray(start, dtype=float)
    w = float(width)
    for _ in range(rounds):
        axes = [np.linspace(c - w, c + w, points) for c in center]
        grids = np.meshgrid(*axes, indexing="ij")
        flat = np.stack([g.ravel() for g in grids], axis=1)
        values = loglik(flat)
        center = flat[int(np.argmax(values))]
        w = 2.0 * w / (points - 1)
    return center


# ---------------------------------------------------------------------------
# Weighted least squares
# ---------------------------------------------------------------------------


def test_wls_single_point():
    X = DesignMatrix(("x",), np.array([[1.0]]))
    fit = fit_wls(X, np.array([2.0]))
    assert fit.coefficients == pytest.approx([2.0], abs=1e-14)


def test_wls_three_point_line():
    X = DesignMatrix(("intercept", "x"), np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]]))
    fit = fit_wls(X, np.array([1.0, 2.0, 4.0]))
    assert fit.coefficients == pytest.approx([5 / 6, 1.5], abs=1e-12)
    assert fit.converged and fit.kind == "wls"


def test_wls_matches_brute_force_normal_equations():
    rng = np.random.default_rng(17)
    for trial in range(20):
        m, p = int(rng.integers(20, 200)), int(rng.integers(2, 8))
        X = DesignMatrix(
            ("intercept", *[f"x{j}" for j in range(p - 1)]),
            np.column_stack([np.ones(m), rng.normal(size=(m, p - 1))]),
        )
        y = rng.normal(size=m)
        w = rng.uniform(0.05, 4.0, size=m)
        fit = fit_wls(X, y, w)
        Xw = X.values * w[:, None]
        brute = scipy.linalg.solve(X.values.T @ Xw, X.values.T @ (w * y))
        assert np.max(np.abs(fit.coefficients - brute)) <= 1e-8


def test_wls_weight_scale_invariance():
    rng = np.random.default_rng(0)
    X = DesignMatrix(
        ("intercept", "a", "b"), np.column_stack([np.ones(50), rng.normal(size=(50, 2))])
    )
    y = rng.normal(size=50)
    w = rng.uniform(0.1, 2.0, size=50)
    b1 = fit_wls(X, y, w).coefficients
    b2 = fit_wls(X, y, w * 7.3).coefficients
    assert np.max(np.abs(b1 - b2)) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10**6))
def test_wls_weighted_residuals_are_orthogonal_to_design(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(10, 60))
    X = DesignMatrix(
        ("intercept", "x1", "x2"),
        np.column_stack([np.ones(m), rng.normal(size=(m, 2))]),
    )
    y = rng.normal(size=m)
    w = rng.uniform(0.1, 3.0, size=m)
    beta = fit_wls(X, y, w).coefficients
    resid = y - X.values @ beta
    score = X.values.T @ (w * resid)
    assert np.max(np.abs(score)) <= 1e-7 * max(1.0, np.abs(y).max()) * m


def test_wls_rank_deficiency_names_columns():
    X = DesignMatrix(
        ("intercept", "a", "a2"),
        np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)]),
    )
    with pytest.raises(RankDeficientError) as err:
        fit_wls(X, np.arange(10.0))
    assert set(err.value.columns) & {"a", "a2"}
    ridge = fit_wls(X, np.arange(10.0), ridge_fallback=True)
    assert np.isfinite(ridge.coefficients).all()


def test_wls_rejects_nonfinite_response():
    X = DesignMatrix(("x",), np.ones((3, 1)))
    with pytest.raises(ValueError):
        fit_wls(X, np.array([1.0, np.nan, 2.0]))


def test_wls_rejects_negative_weights():
    X = DesignMatrix(("x",), np.ones((3, 1)))
    with pytest.raises(ValueError):
        fit_wls(X, np.ones(3), np.array([1.0, -0.5, 1.0]))


def test_wls_classical_covariance_on_known_problem():
    rng = np.random.default_rng(3)
    m = 4000
    X = DesignMatrix(("intercept", "x"), np.column_stack([np.ones(m), rng.normal(size=m)]))
    y = 2.0 + 0.5 * X.values[:, 1] + rng.normal(size=m)
    fit = fit_wls(X, y)
    se = np.sqrt(np.diag(fit.covariance))
    assert se == pytest.approx([1 / np.sqrt(m), 1 / np.sqrt(m)], rel=0.1)
    assert abs(fit.coefficients[0] - 2.0) < 4 * se[0]
    assert abs(fit.coefficients[1] - 0.5) < 4 * se[1]


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------


def test_logistic_intercept_only_closed_form():
    X = DesignMatrix(("intercept",), np.ones((8, 1)))
    y = np.array([1.0, 0.0, 0.0, 0.0] * 2)
    fit = fit_logistic(X, y)
    assert fit.coefficients[0] == pytest.approx(np.log(0.25 / 0.75), abs=1e-8)
    assert fit.converged


def test_logistic_single_class_raises():
    X = DesignMatrix(("intercept",), np.ones((8, 1)))
    with pytest.raises(SingleClassError):
        fit_logistic(X, np.ones(8))
    with pytest.raises(SingleClassError):
        fit_logistic(X, np.zeros(8))


def test_logistic_matches_grid_search_on_two_covariates():
    rng = np.random.default_rng(21)
    m = 400
    Z = rng.normal(size=(m, 2))
    eta = -0.3 + 0.8 * Z[:, 0] - 0.6 * Z[:, 1]
    y = (rng.random(m) < 1 / (1 + np.exp(-eta))).astype(float)
    X = DesignMatrix(("intercept", "z1", "z2"), np.column_stack([np.ones(m), Z]))
    fit = fit_logistic(X, y)

    def loglik(thetas: np.ndarray) -> np.ndarray:
        etas = X.values @ thetas.T  # (m, G)
        return (y[:, None] * etas - np.logaddexp(0.0, etas)).sum(axis=0)

    best = grid_maximize(loglik, start=np.zeros(3), width=3.0, rounds=18, points=9)
    assert np.max(np.abs(fit.coefficients - best)) <= 1e-4


def test_logistic_score_vanishes_at_optimum_by_finite_differences():
    rng = np.random.default_rng(4)
    m = 300
    Z = rng.normal(size=(m, 1))
    y = (rng.random(m) < 0.4).astype(float)
    X = DesignMatrix(("intercept", "z"), np.column_stack([np.ones(m), Z]))
    fit = fit_logistic(X, y)
    h = 1e-5
    for j in range(2):
        up, down = fit.coefficients.copy(), fit.coefficients.copy()
        up[j] += h
        down[j] -= h
        deriv = (logistic_log_likelihood(X, y, up) - logistic_log_likelihood(X, y, down)) / (2 * h)
        assert abs(deriv) < 1e-3 * m


def test_logistic_fitted_mean_matches_empirical_rate():
    rng = np.random.default_rng(9)
    m = 500
    X = DesignMatrix(("intercept", "z"), np.column_stack([np.ones(m), rng.normal(size=m)]))
    y = (rng.random(m) < 0.3).astype(float)
    fit = fit_logistic(X, y)
    fitted = predict_proba(fit, X)[:, 0]
    assert fitted.mean() == pytest.approx(y.mean(), abs=1e-8)


def test_logistic_weights_replicate_rows():
    X = DesignMatrix(("intercept", "z"), np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]]))
    y = np.array([0.0, 1.0, 1.0])
    w = np.array([3.0, 2.0, 1.0])
    weighted = fit_logistic(X, y, w)
    Xrep = DesignMatrix(
        ("intercept", "z"),
        np.repeat(X.values, w.astype(int), axis=0),
    )
    yrep = np.repeat(y, w.astype(int))
    replicated = fit_logistic(Xrep, yrep)
    assert np.max(np.abs(weighted.coefficients - replicated.coefficients)) <= 1e-8


def test_logistic_separation_is_reported_with_finite_coefficients():
    X = DesignMatrix(("intercept", "z"), np.column_stack([np.ones(10), np.arange(10.0)]))
    y = (np.arange(10) >= 5).astype(float)
    fit = fit_logistic(X, y)
    assert np.isfinite(fit.coefficients).all()
    assert fit.separation


# ---------------------------------------------------------------------------
# Multinomial regression
# ---------------------------------------------------------------------------


def test_multinomial_intercept_only_closed_form():
    y = np.array([0] * 5 + [1] * 3 + [2] * 2)
    X = DesignMatrix(("intercept",), np.ones((10, 1)))
    fit = fit_multinomial(X, y)
    expected = [np.log(0.3 / 0.5), np.log(0.2 / 0.5)]
    assert fit.coefficients.ravel() == pytest.approx(expected, abs=1e-8)


def test_multinomial_fitted_category_means_match_frequencies():
    rng = np.random.default_rng(13)
    m = 600
    X = DesignMatrix(("intercept", "u"), np.column_stack([np.ones(m), rng.normal(size=m)]))
    y = rng.integers(0, 3, size=m)
    fit = fit_multinomial(X, y)
    P = predict_proba(fit, X)
    for k in range(3):
        assert P[:, k].mean() == pytest.approx(np.mean(y == k), abs=1e-8)
    assert np.max(np.abs(P.sum(axis=1) - 1)) < 1e-12


def test_multinomial_matches_grid_search_on_two_covariates():
    rng = np.random.default_rng(29)
    m = 300
    Z = rng.normal(size=(m, 2))
    X = DesignMatrix(("intercept", "z1", "z2"), np.column_stack([np.ones(m), Z]))
    B_true = np.array([[0.4, -0.7, 0.3], [-0.2, 0.5, 0.6]])
    eta = np.column_stack([np.zeros(m), X.values @ B_true.T])
    probs = np.exp(eta - eta.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    y = np.array([rng.choice(3, p=p) for p in probs])
    fit = fit_multinomial(X, y)

    def loglik(thetas: np.ndarray) -> np.ndarray:
        out = np.empty(thetas.shape[0])
        for chunk in range(0, thetas.shape[0], 4096):
            block = thetas[chunk : chunk + 4096]
            etas = np.einsum("mp,gkp->gmk", X.values, block.reshape(-1, 2, 3))
            full = np.concatenate([np.zeros(etas.shape[:2] + (1,)), etas], axis=2)
            logz = scipy.special.logsumexp(full, axis=2)
            picked = np.take_along_axis(full, y[None, :, None], axis=2)[:, :, 0]
            out[chunk : chunk + 4096] = (picked - logz).sum(axis=1)
        return out

    best = grid_maximize(loglik, start=np.zeros(6), width=2.0, rounds=22, points=5)
    assert np.max(np.abs(fit.coefficients.ravel() - best)) <= 1e-4


def test_multinomial_recovers_coefficients_within_three_ses():
    rng = np.random.default_rng(31)
    m = 5000
    Z = rng.normal(size=(m, 2))
    X = DesignMatrix(("intercept", "z1", "z2"), np.column_stack([np.ones(m), Z]))
    B_true = np.array([[0.5, -0.8, 0.2], [-0.4, 0.3, 0.7]])
    eta = np.column_stack([np.zeros(m), X.values @ B_true.T])
    probs = np.exp(eta - eta.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(m)
    y = (u[:, None] > probs.cumsum(axis=1)).sum(axis=1)
    fit = fit_multinomial(X, y)
    se = np.sqrt(np.diag(fit.covariance)).reshape(2, 3)
    assert np.all(np.abs(fit.coefficients - B_true) < 3 * se)


def test_multinomial_score_matches_finite_differences():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, size=120)
    X = DesignMatrix(("intercept", "u"), np.column_stack([np.ones(120), rng.normal(size=120)]))
    B = rng.normal(scale=0.3, size=(2, 2))
    g = multinomial_score(X, y, B)
    h = 1e-6
    fd = np.zeros_like(g)
    for i in range(g.size):
        up, down = B.ravel().copy(), B.ravel().copy()
        up[i] += h
        down[i] -= h
        fd[i] = (
            multinomial_log_likelihood(X, y, up.reshape(2, 2))
            - multinomial_log_likelihood(X, y, down.reshape(2, 2))
        ) / (2 * h)
    assert np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(g))) < 1e-5


def test_two_category_multinomial_equals_binary_logistic():
    rng = np.random.default_rng(0)
    y = (rng.uniform(size=200) < 0.3).astype(int)
    X = DesignMatrix(("intercept", "z"), np.column_stack([np.ones(200), rng.normal(size=200)]))
    multi = fit_multinomial(X, y)
    binary = fit_logistic(X, y.astype(float))
    assert np.max(np.abs(multi.coefficients.ravel() - binary.coefficients)) <= 1e-6


def test_multinomial_missing_category_raises():
    X = DesignMatrix(("intercept",), np.ones((10, 1)))
    with pytest.raises(MissingCategoryError) as err:
        fit_multinomial(X, np.array([0] * 5 + [1] * 5), n_categories=3)
    assert 2 in err.value.missing


# ---------------------------------------------------------------------------
# Prediction contract
# ---------------------------------------------------------------------------


def test_predict_zero_coefficients_give_uniform_categories():
    X = DesignMatrix(("intercept",), np.ones((4, 1)))
    from dmar.glm import FitResult

    fit = FitResult(
        kind="multinomial",
        names=("intercept",),
        coefficients=np.zeros((2, 1)),
        converged=True,
        iterations=0,
        categories=(0, 1, 2),
    )
    P = predict_proba(fit, X)
    assert P == pytest.approx(np.full((4, 3), 1 / 3), abs=1e-15)
    binary = FitResult(
        kind="logistic",
        names=("intercept",),
        coefficients=np.zeros(1),
        converged=True,
        iterations=0,
    )
    assert predict_proba(binary, X)[:, 0] == pytest.approx(np.full(4, 0.5), abs=1e-15)


def test_predict_rejects_mismatched_columns():
    X = DesignMatrix(("intercept",), np.ones((10, 1)))
    fit = fit_multinomial(X, np.array([0] * 4 + [1] * 3 + [2] * 3))
    with pytest.raises(ColumnMismatchError):
        predict_proba(fit, DesignMatrix(("const",), np.ones((3, 1))))


def test_design_matrix_rejects_nonfinite_and_duplicate_names():
    with pytest.raises(NonFiniteError) as err:
        DesignMatrix(("a",), np.array([[1.0], [np.nan]]))
    assert err.value.columns == ["a"]
    with pytest.raises(ValueError):
        DesignMatrix(("a", "a"), np.ones((2, 2)))
