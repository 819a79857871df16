"""Deterministic numerical fitting kernels.

Three fitters shared by every estimator in the package:

* :func:`fit_wls` — weighted least squares through a pivoted QR
  factorization, with explicit rank-deficiency reporting and an optional
  tiny-ridge fallback;
* :func:`fit_logistic` — weighted binary logistic regression by iteratively
  reweighted least squares with step-halving;
* :func:`fit_multinomial` — multinomial logistic regression (reference
  category 0) by Newton iterations on the stacked score, with step-halving.

All fits are pure functions of their inputs.  Log-likelihood, score, and
observed-information helpers are exported so variance estimators and tests
can reuse the exact same likelihood arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.special

__all__ = [
    "DesignMatrix",
    "FitResult",
    "NonFiniteError",
    "RankDeficientError",
    "SingleClassError",
    "MissingCategoryError",
    "ColumnMismatchError",
    "fit_wls",
    "fit_logistic",
    "fit_multinomial",
    "predict_proba",
    "logistic_log_likelihood",
    "logistic_score",
    "multinomial_log_likelihood",
    "multinomial_probabilities",
    "multinomial_score",
    "multinomial_information",
]

LOGISTIC_TOL = 1e-8
LOGISTIC_MAX_ITER = 100
MULTINOMIAL_TOL = 1e-8
MULTINOMIAL_MAX_ITER = 200
SEPARATION_BOUND = 30.0
RIDGE_LAMBDA = 1e-8


class NonFiniteError(ValueError):
    """A design matrix holds NaN or infinite entries."""

    def __init__(self, columns: Sequence[str]):
        self.columns = tuple(columns)
        super().__init__(f"non-finite values in design columns: {', '.join(self.columns)}")


class RankDeficientError(ValueError):
    """The (weighted) normal equations are rank deficient."""

    def __init__(self, columns: Sequence[str]):
        self.columns = tuple(columns)
        super().__init__(
            "rank-deficient design; linearly dependent columns: " + ", ".join(self.columns)
        )


class SingleClassError(ValueError):
    """A binary fit received only one outcome class."""


class MissingCategoryError(ValueError):
    """A declared category has no observations."""

    def __init__(self, missing: Sequence[int]):
        self.missing = tuple(int(m) for m in missing)
        super().__init__(f"categories absent from the data: {self.missing}")


class ColumnMismatchError(ValueError):
    """Prediction design columns do not match the fitted design."""


@dataclass(frozen=True)
class DesignMatrix:
    """A finite real matrix with ordered, unique column names."""

    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "names", names)
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("design matrix must be two-dimensional")
        if values.shape[1] != len(names):
            raise ValueError(
                f"design matrix has {values.shape[1]} columns but {len(names)} names"
            )
        if len(set(names)) != len(names):
            raise ValueError("design matrix column names must be unique")
        finite = np.isfinite(values)
        if not finite.all():
            bad = [names[j] for j in range(len(names)) if not finite[:, j].all()]
            raise NonFiniteError(bad)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def with_intercept(cls, names: Sequence[str], values: np.ndarray) -> "DesignMatrix":
        values = np.asarray(values, dtype=float)
        m = values.shape[0]
        return cls(("intercept", *names), np.column_stack([np.ones(m), values]))


@dataclass(frozen=True)
class FitResult:
    """Coefficients plus convergence metadata from one model fit."""

    kind: str  # "wls" | "logistic" | "multinomial"
    names: tuple[str, ...]
    coefficients: np.ndarray  # (p,) for wls/logistic, (n_categories-1, p) for multinomial
    converged: bool
    iterations: int
    rss: float | None = None
    log_likelihood: float | None = None
    categories: tuple[int, ...] | None = None
    separation: bool = False
    covariance: np.ndarray | None = field(default=None, repr=False)

    def coefficient(self, name: str, category: int | None = None) -> float:
        j = self.names.index(name)
        if self.coefficients.ndim == 1:
            return float(self.coefficients[j])
        if category is None:
            raise ValueError("multinomial fits need a category to extract a coefficient")
        return float(self.coefficients[category - 1, j])


def _check_weights(w: np.ndarray | None, m: int) -> np.ndarray:
    if w is None:
        return np.ones(m)
    w = np.asarray(w, dtype=float)
    if w.shape != (m,):
        raise ValueError(f"weights have shape {w.shape}, expected ({m},)")
    if not np.isfinite(w).all():
        raise ValueError("weights must be finite")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if not np.any(w > 0):
        raise ValueError("at least one weight must be positive")
    return w


def fit_wls(
    X: DesignMatrix,
    y: np.ndarray,
    w: np.ndarray | None = None,
    ridge_fallback: bool = False,
) -> FitResult:
    """Weighted least squares via pivoted QR.

    Solves the weighted normal equations exactly.  A rank-deficient weighted
    design raises :class:`RankDeficientError` naming the dependent columns,
    unless ``ridge_fallback`` is set, in which case a tiny ridge penalty
    (lambda = 1e-8) regularizes the solve.
    """
    y = np.asarray(y, dtype=float)
    m, p = X.shape
    if y.shape != (m,):
        raise ValueError(f"response has shape {y.shape}, expected ({m},)")
    if not np.isfinite(y).all():
        raise ValueError("response must be finite")
    w = _check_weights(w, m)
    sw = np.sqrt(w)
    Xw = X.values * sw[:, None]
    yw = y * sw
    Q, R, piv = scipy.linalg.qr(Xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    scale = diag[0] if diag.size and diag[0] > 0 else 0.0
    tol = max(m, p) * np.finfo(float).eps * scale
    rank = int(np.sum(diag > tol))
    if rank < p:
        deficient = [X.names[j] for j in piv[rank:]]
        if not ridge_fallback:
            raise RankDeficientError(deficient)
        gram = Xw.T @ Xw + RIDGE_LAMBDA * np.eye(p)
        beta = scipy.linalg.solve(gram, Xw.T @ yw, assume_a="pos")
    else:
        z = scipy.linalg.solve_triangular(R[:p, :], Q.T[:p, :] @ yw, lower=False)
        beta = np.empty(p)
        beta[piv] = z
    resid = y - X.values @ beta
    rss = float(np.sum(w * resid**2))
    dof = m - p
    covariance = None
    if rank == p and dof > 0:
        xtwx_inv = scipy.linalg.solve(Xw.T @ Xw, np.eye(p), assume_a="pos")
        covariance = (rss / dof) * xtwx_inv
    return FitResult(
        kind="wls",
        names=X.names,
        coefficients=beta,
        converged=True,
        iterations=0,
        rss=rss,
        covariance=covariance,
    )


def _expit(eta: np.ndarray) -> np.ndarray:
    return scipy.special.expit(eta)


def logistic_log_likelihood(
    X: DesignMatrix | np.ndarray, y: np.ndarray, beta: np.ndarray, w: np.ndarray | None = None
) -> float:
    """Weighted Bernoulli log-likelihood at ``beta``."""
    values = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(values.shape[0]) if w is None else np.asarray(w, dtype=float)
    eta = values @ np.asarray(beta, dtype=float)
    # log p and log(1-p) written via log1p(exp(.)) for numerical stability
    ll = y * eta - np.logaddexp(0.0, eta)
    return float(np.sum(w * ll))


def logistic_score(
    X: DesignMatrix | np.ndarray, y: np.ndarray, beta: np.ndarray, w: np.ndarray | None = None
) -> np.ndarray:
    """Gradient of the weighted Bernoulli log-likelihood at ``beta``."""
    values = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(values.shape[0]) if w is None else np.asarray(w, dtype=float)
    p = _expit(values @ np.asarray(beta, dtype=float))
    return values.T @ (w * (y - p))


def fit_logistic(X: DesignMatrix, y: np.ndarray, w: np.ndarray | None = None) -> FitResult:
    """Weighted binary logistic regression by IRLS with step-halving.

    Converges when the largest absolute coefficient change falls below 1e-8,
    capped at 100 iterations.  Complete or quasi-complete separation is
    reported through the ``separation`` flag (coefficient magnitude above
    30), never silently clipped.
    """
    y = np.asarray(y, dtype=float)
    m, p = X.shape
    if y.shape != (m,):
        raise ValueError(f"response has shape {y.shape}, expected ({m},)")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("logistic response must be 0/1")
    w = _check_weights(w, m)
    active = w > 0
    classes = np.unique(y[active])
    if classes.size < 2:
        raise SingleClassError(f"single-class response (only {classes.tolist()} present)")

    beta = np.zeros(p)
    ll = logistic_log_likelihood(X, y, beta, w)
    converged = False
    iterations = 0
    for iterations in range(1, LOGISTIC_MAX_ITER + 1):
        prob = _expit(X.values @ beta)
        irls_w = np.clip(w * prob * (1.0 - prob), 1e-12, None)
        grad = X.values.T @ (w * (y - prob))
        hess = X.values.T @ (X.values * irls_w[:, None])
        try:
            delta = scipy.linalg.solve(hess, grad, assume_a="pos")
        except scipy.linalg.LinAlgError:
            delta = np.linalg.lstsq(hess, grad, rcond=None)[0]
        step = 1.0
        for _ in range(40):
            candidate = beta + step * delta
            cand_ll = logistic_log_likelihood(X, y, candidate, w)
            if cand_ll >= ll - 1e-12 or not np.isfinite(ll):
                break
            step /= 2.0
        change = float(np.max(np.abs(candidate - beta)))
        beta, ll = candidate, cand_ll
        if change < LOGISTIC_TOL:
            converged = True
            break
    separation = bool(np.any(np.abs(beta) > SEPARATION_BOUND))
    covariance = None
    try:
        prob = _expit(X.values @ beta)
        info = X.values.T @ (X.values * (w * prob * (1.0 - prob))[:, None])
        covariance = scipy.linalg.solve(info, np.eye(p), assume_a="pos")
    except scipy.linalg.LinAlgError:
        pass
    return FitResult(
        kind="logistic",
        names=X.names,
        coefficients=beta,
        converged=converged,
        iterations=iterations,
        log_likelihood=ll,
        categories=(0, 1),
        separation=separation,
        covariance=covariance,
    )


def multinomial_probabilities(
    X: DesignMatrix | np.ndarray, coefficients: np.ndarray
) -> np.ndarray:
    """Category probabilities (reference category 0) under a stable softmax."""
    values = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    B = np.atleast_2d(np.asarray(coefficients, dtype=float))
    eta = values @ B.T  # (m, K-1)
    full = np.column_stack([np.zeros(values.shape[0]), eta])
    full -= full.max(axis=1, keepdims=True)
    ex = np.exp(full)
    probs = ex / ex.sum(axis=1, keepdims=True)
    np.clip(probs, 1e-300, None, out=probs)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs


def multinomial_log_likelihood(
    X: DesignMatrix | np.ndarray, y: np.ndarray, coefficients: np.ndarray
) -> float:
    probs = multinomial_probabilities(X, coefficients)
    rows = np.arange(probs.shape[0])
    return float(np.sum(np.log(probs[rows, np.asarray(y, dtype=int)])))


def multinomial_score(
    X: DesignMatrix | np.ndarray, y: np.ndarray, coefficients: np.ndarray
) -> np.ndarray:
    """Stacked score vector, category-major: d loglik / d vec(coefficients)."""
    values = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    probs = multinomial_probabilities(values, coefficients)
    K = probs.shape[1]
    pieces = []
    for k in range(1, K):
        resid = (y == k).astype(float) - probs[:, k]
        pieces.append(values.T @ resid)
    return np.concatenate(pieces)


def multinomial_information(X: DesignMatrix | np.ndarray, coefficients: np.ndarray) -> np.ndarray:
    """Fisher information of the multinomial log-likelihood (stacked layout)."""
    values = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    probs = multinomial_probabilities(values, coefficients)
    K = probs.shape[1]
    p = values.shape[1]
    info = np.zeros(((K - 1) * p, (K - 1) * p))
    for k in range(1, K):
        for l in range(1, K):
            wkl = probs[:, k] * ((k == l) - probs[:, l])
            block = values.T @ (values * wkl[:, None])
            info[(k - 1) * p : k * p, (l - 1) * p : l * p] = block
    return info


def fit_multinomial(
    X: DesignMatrix, y: np.ndarray, n_categories: int | None = None
) -> FitResult:
    """Multinomial logistic regression with reference category 0.

    Newton iterations on the stacked score with step-halving; convergence at
    gradient max-norm below 1e-8, capped at 200 iterations (a cap hit is
    flagged, not raised).  With exactly two categories present the model
    reduces to binary logistic regression.  A declared-but-absent category
    raises :class:`MissingCategoryError`.
    """
    y = np.asarray(y, dtype=int)
    m, p = X.shape
    if y.shape != (m,):
        raise ValueError(f"response has shape {y.shape}, expected ({m},)")
    present = np.unique(y)
    if present.min() < 0:
        raise ValueError("categories must be nonnegative integers")
    K = int(n_categories) if n_categories is not None else int(present.max()) + 1
    missing = sorted(set(range(K)) - set(int(v) for v in present))
    if missing:
        raise MissingCategoryError(missing)
    if K < 2:
        raise SingleClassError("multinomial fit needs at least two categories")

    B = np.zeros((K - 1, p))
    ll = multinomial_log_likelihood(X, y, B)
    converged = False
    iterations = 0
    for iterations in range(1, MULTINOMIAL_MAX_ITER + 1):
        grad = multinomial_score(X, y, B)
        if float(np.max(np.abs(grad))) < MULTINOMIAL_TOL:
            converged = True
            break
        info = multinomial_information(X, B)
        try:
            delta = scipy.linalg.solve(info, grad, assume_a="pos")
        except scipy.linalg.LinAlgError:
            delta = np.linalg.lstsq(info, grad, rcond=None)[0]
        step = 1.0
        for _ in range(40):
            candidate = B + step * delta.reshape(K - 1, p)
            cand_ll = multinomial_log_likelihood(X, y, candidate)
            if cand_ll >= ll - 1e-12:
                break
            step /= 2.0
        B, ll = candidate, cand_ll
    covariance = None
    try:
        covariance = scipy.linalg.solve(
            multinomial_information(X, B), np.eye((K - 1) * p), assume_a="pos"
        )
    except scipy.linalg.LinAlgError:
        pass
    return FitResult(
        kind="multinomial",
        names=X.names,
        coefficients=B,
        converged=converged,
        iterations=iterations,
        log_likelihood=ll,
        categories=tuple(range(K)),
        covariance=covariance,
    )


def predict_proba(fit: FitResult, X: DesignMatrix) -> np.ndarray:
    """Predicted probabilities from a logistic or multinomial fit.

    Binary fits return one column; multinomial fits return one column per
    category, each row summing to 1 within 1e-12.  Raises
    :class:`ColumnMismatchError` when the prediction design columns differ
    from the fitted design.
    """
    if X.names != fit.names:
        raise ColumnMismatchError(
            f"design columns {X.names} do not match fitted columns {fit.names}"
        )
    if fit.kind == "logistic":
        return _expit(X.values @ fit.coefficients)[:, None]
    if fit.kind == "multinomial":
        return multinomial_probabilities(X, fit.coefficients)
    raise ValueError(f"predictions are not defined for fit kind {fit.kind!r}")
