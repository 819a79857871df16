"""Propensity, balancing, and censoring weights.

Treatment strategies at each decision time form three categories
(no visit / visit only / visit with add-on).  This module estimates the
category propensities, turns them into per-subject weights, and provides
inverse-probability-of-censoring weights plus covariate-balance
diagnostics:

* :func:`estimate_propensities_joint` — one multinomial model over the
  three categories;
* :func:`estimate_propensities_factorized` — a visit logistic model and an
  add-on logistic model fitted among visitors, composed into category
  probabilities;
* :func:`overlap_weights` — generalized overlap weights, bounded in (0, 1);
* :func:`ipt_weights` — inverse probability of treatment, optionally
  truncated;
* :func:`ipcw_time_fixed` / :func:`ipcw_time_dependent` — inverse
  probability of remaining uncensored, from baseline covariates or from a
  pooled person-time hazard model (optionally stabilized);
* :func:`balance_diagnostics` — weighted means/SDs and standardized mean
  differences per covariate and category pair.

Weights for censored subjects are always zero: estimation downstream runs
on completers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .glm import (
    DesignMatrix,
    FitResult,
    SingleClassError,
    fit_logistic,
    fit_multinomial,
    predict_proba,
)
from .panel import Cohort, StrategyCode

__all__ = [
    "PROPENSITY_CLIP",
    "PropensityEstimates",
    "WeightVector",
    "BalanceTable",
    "estimate_propensities_joint",
    "estimate_propensities_factorized",
    "overlap_weights",
    "ipt_weights",
    "ipcw_time_fixed",
    "ipcw_time_dependent",
    "product_weights",
    "balance_diagnostics",
]

logger = logging.getLogger(__name__)

PROPENSITY_CLIP = 1e-6

DEFAULT_CENSOR_BASELINE_TERMS = ("A0", "Y@0", "K1@0")
DEFAULT_CENSOR_TIMEVARYING_TERMS = ("A@t", "Y@t", "K1@t")


@dataclass(frozen=True)
class PropensityEstimates:
    """Estimated category probabilities at one decision time.

    ``probs`` has one row per subject and three columns (no visit, visit
    only, visit with add-on); rows where the probabilities are unavailable
    (censored subjects, missing covariates) are NaN.
    """

    t: int
    probs: np.ndarray
    source: str  # "joint-multinomial" | "factorized"
    fits: tuple[FitResult, ...]
    covariate_names: tuple[str, ...]
    clipped_rows: int
    fit_rows: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 2 or probs.shape[1] != 3:
            raise ValueError("propensity matrix must have three category columns")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True)
class WeightVector:
    """Per-subject nonnegative weights with provenance."""

    values: np.ndarray
    kind: str  # "overlap" | "ipt" | "ipcw" | "product" | "unit"
    t: int | None = None
    clipped_rows: int = 0
    note: str = ""

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise ValueError("weights must be one-dimensional")
        if not np.isfinite(values).all():
            raise ValueError("weights must be finite")
        if np.any(values < 0):
            raise ValueError("weights must be nonnegative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _term_design(cohort: Cohort, terms: Sequence[str], t: int) -> tuple[np.ndarray, tuple[str, ...]]:
    matrix, names = cohort.term_matrix(tuple(terms), t)
    return matrix, names


def _completers_with_covariates(cohort: Cohort, matrix: np.ndarray) -> np.ndarray:
    return cohort.completers & np.isfinite(matrix).all(axis=1)


def _clip_and_renormalize(probs: np.ndarray) -> tuple[np.ndarray, int]:
    clipped = probs.copy()
    lo, hi = PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP
    touched = (clipped < lo) | (clipped > hi)
    np.clip(clipped, lo, hi, out=clipped)
    clipped /= clipped.sum(axis=1, keepdims=True)
    return clipped, int(np.any(touched, axis=1).sum())


def estimate_propensities_joint(
    cohort: Cohort, t: int, covariates: Sequence[str] | None = None
) -> PropensityEstimates:
    """Three-category propensities from one multinomial model.

    The model is fitted on completers with fully observed covariates; the
    response is the strategy category actually received at time ``t``.
    Predicted probabilities are clipped to [1e-6, 1 - 1e-6] and renormalized,
    with the number of affected rows recorded.
    """
    terms = tuple(covariates) if covariates is not None else cohort.roles.propensity_terms
    matrix, names = _term_design(cohort, terms, t)
    fit_rows = _completers_with_covariates(cohort, matrix)
    if not fit_rows.any():
        raise ValueError(f"no usable rows to fit propensities at time {t}")
    design = DesignMatrix.with_intercept(names, matrix[fit_rows])
    y = cohort.strategy_category(t)[fit_rows]
    fit = fit_multinomial(design, y.astype(int), n_categories=3)

    probs = np.full((cohort.n, 3), np.nan)
    pred_rows = np.isfinite(matrix).all(axis=1)
    pred_design = DesignMatrix.with_intercept(names, matrix[pred_rows])
    raw = predict_proba(fit, pred_design)
    clipped, n_clipped = _clip_and_renormalize(raw)
    probs[pred_rows] = clipped
    return PropensityEstimates(
        t=t,
        probs=probs,
        source="joint-multinomial",
        fits=(fit,),
        covariate_names=design.names,
        clipped_rows=n_clipped,
        fit_rows=fit_rows,
    )


def estimate_propensities_factorized(
    cohort: Cohort,
    t: int,
    visit_covariates: Sequence[str] | None = None,
    addon_covariates: Sequence[str] | None = None,
) -> PropensityEstimates:
    """Three-category propensities from two sequential logistic models.

    The visit model is fitted on all completers; the add-on model on
    completers who visited.  Category probabilities compose as
    (1 - p_visit, p_visit * (1 - p_addon), p_visit * p_addon), then are
    clipped and renormalized like the joint estimate.
    """
    visit_terms = (
        tuple(visit_covariates) if visit_covariates is not None else cohort.roles.propensity_terms
    )
    addon_terms = tuple(addon_covariates) if addon_covariates is not None else visit_terms
    vmat, vnames = _term_design(cohort, visit_terms, t)
    amat, anames = _term_design(cohort, addon_terms, t)

    fit_rows = _completers_with_covariates(cohort, vmat)
    if not fit_rows.any():
        raise ValueError(f"no usable rows to fit propensities at time {t}")
    visit = cohort.dn[:, t].astype(float)
    addon = cohort.a[:, t].astype(float)

    vdesign = DesignMatrix.with_intercept(vnames, vmat[fit_rows])
    visit_fit = fit_logistic(vdesign, visit[fit_rows])

    addon_rows = fit_rows & (cohort.dn[:, t] == 1) & np.isfinite(amat).all(axis=1)
    if not addon_rows.any():
        raise SingleClassError(f"no visitors at time {t}; add-on model cannot be fitted")
    adesign = DesignMatrix.with_intercept(anames, amat[addon_rows])
    addon_fit = fit_logistic(adesign, addon[addon_rows])

    pred_rows = np.isfinite(vmat).all(axis=1) & np.isfinite(amat).all(axis=1)
    p_visit = predict_proba(visit_fit, DesignMatrix.with_intercept(vnames, vmat[pred_rows]))[:, 0]
    p_addon = predict_proba(addon_fit, DesignMatrix.with_intercept(anames, amat[pred_rows]))[:, 0]
    raw = np.column_stack([1.0 - p_visit, p_visit * (1.0 - p_addon), p_visit * p_addon])
    clipped, n_clipped = _clip_and_renormalize(raw)
    probs = np.full((cohort.n, 3), np.nan)
    probs[pred_rows] = clipped
    return PropensityEstimates(
        t=t,
        probs=probs,
        source="factorized",
        fits=(visit_fit, addon_fit),
        covariate_names=vdesign.names,
        clipped_rows=n_clipped,
        fit_rows=fit_rows,
    )


def _received_categories(received) -> np.ndarray:
    if isinstance(received, np.ndarray) and received.dtype != object:
        cats = np.asarray(received, dtype=int)
    else:
        cats = np.array(
            [r.category if isinstance(r, StrategyCode) else int(r) for r in received], dtype=int
        )
    if not np.isin(cats, (0, 1, 2)).all():
        raise ValueError("received strategies must be categories 0, 1, or 2")
    return cats


def _probs_of(e: PropensityEstimates | np.ndarray) -> np.ndarray:
    probs = e.probs if isinstance(e, PropensityEstimates) else np.asarray(e, dtype=float)
    if probs.ndim == 1:
        probs = probs[None, :]
    if probs.shape[1] != 3:
        raise ValueError("expected three category-probability columns")
    return probs


def overlap_weights(e: PropensityEstimates | np.ndarray, received) -> WeightVector:
    """Generalized overlap weights for three categories.

    Each subject's weight is the harmonic-style tilting factor
    ``1 / sum_k (1/e_k)`` divided by the probability of the strategy
    actually received.  Weights are strictly inside (0, 1) whenever all
    three probabilities are; rows with unavailable probabilities get 0.
    """
    probs = _probs_of(e)
    cats = _received_categories(received)
    if cats.shape[0] != probs.shape[0]:
        raise ValueError("received strategies and probabilities differ in length")
    ok = np.isfinite(probs).all(axis=1)
    values = np.zeros(probs.shape[0])
    if ok.any():
        p = probs[ok]
        tilt = 1.0 / (1.0 / p).sum(axis=1)
        values[ok] = tilt / p[np.arange(p.shape[0]), cats[ok]]
    t = e.t if isinstance(e, PropensityEstimates) else None
    return WeightVector(values=values, kind="overlap", t=t)


def ipt_weights(
    e: PropensityEstimates | np.ndarray,
    received,
    truncation: tuple[float, float] | None = None,
) -> WeightVector:
    """Inverse-probability-of-treatment weights (1 / e_received).

    ``truncation``, when given as a ``(low, high)`` percentile pair in
    [0, 100], clamps weights to those empirical percentiles of the positive
    weights, counting the affected rows.  Rows with unavailable
    probabilities get weight 0.
    """
    probs = _probs_of(e)
    cats = _received_categories(received)
    if cats.shape[0] != probs.shape[0]:
        raise ValueError("received strategies and probabilities differ in length")
    ok = np.isfinite(probs).all(axis=1)
    values = np.zeros(probs.shape[0])
    values[ok] = 1.0 / probs[ok][np.arange(int(ok.sum())), cats[ok]]
    clipped_rows = 0
    if truncation is not None:
        low_pct, high_pct = truncation
        if not (0.0 <= low_pct <= high_pct <= 100.0):
            raise ValueError("truncation percentiles must satisfy 0 <= low <= high <= 100")
        positive = values[values > 0]
        if positive.size:
            low, high = np.percentile(positive, [low_pct, high_pct])
            out_of_band = (values > 0) & ((values < low) | (values > high))
            clipped_rows = int(out_of_band.sum())
            values[values > 0] = np.clip(values[values > 0], low, high)
    t = e.t if isinstance(e, PropensityEstimates) else None
    return WeightVector(values=values, kind="ipt", t=t, clipped_rows=clipped_rows)


def ipcw_time_fixed(
    cohort: Cohort, baseline_covariates: Sequence[str] = DEFAULT_CENSOR_BASELINE_TERMS
) -> WeightVector:
    """Censoring weights from one baseline logistic model.

    Models the probability of being censored by the final time as a
    function of baseline covariates; completers get weight
    1 / (1 - p_censored), censored subjects get 0.  A cohort with no
    censoring returns unit weights with an explanatory note.
    """
    completers = cohort.completers
    censored = ~completers
    if not censored.any():
        logger.info("no censoring present; censoring weights are all 1")
        return WeightVector(
            values=np.ones(cohort.n), kind="ipcw", note="no censoring present; unit weights"
        )
    if not completers.any():
        raise SingleClassError("every subject is censored; censoring weights are undefined")
    matrix, names = _term_design(cohort, tuple(baseline_covariates), t=None)
    if not np.isfinite(matrix).all():
        raise ValueError("baseline covariates for the censoring model must be fully observed")
    design = DesignMatrix.with_intercept(names, matrix)
    fit = fit_logistic(design, censored.astype(float))
    p_cens = predict_proba(fit, design)[:, 0]
    p_cens = np.clip(p_cens, PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP)
    values = np.where(completers, 1.0 / (1.0 - p_cens), 0.0)
    return WeightVector(values=values, kind="ipcw", note="time-fixed")


def ipcw_time_dependent(
    cohort: Cohort,
    timevarying_covariates: Sequence[str] = DEFAULT_CENSOR_TIMEVARYING_TERMS,
    stabilized: bool = False,
) -> WeightVector:
    """Censoring weights from a pooled time-dependent hazard model.

    Builds a person-time data set over censoring events
    s = 1, ..., final-1: subjects still in the study at s are at risk, and
    the event indicator marks exit before s+1.  One logistic model with
    shared coefficients across s gives hazards h(s); completers get weight
    1 / prod_s (1 - h(s)).  With ``stabilized`` set, the numerator is the
    same product from an intercept-only pooled model.
    """
    completers = cohort.completers
    censored = ~completers
    if not censored.any():
        logger.info("no censoring present; censoring weights are all 1")
        return WeightVector(
            values=np.ones(cohort.n), kind="ipcw", note="no censoring present; unit weights"
        )
    if not completers.any():
        raise SingleClassError("every subject is censored; censoring weights are undefined")

    terms = tuple(timevarying_covariates)
    rows_x: list[np.ndarray] = []
    rows_y: list[np.ndarray] = []
    rows_subject: list[np.ndarray] = []
    rows_time: list[np.ndarray] = []
    names: tuple[str, ...] = ()
    for s in range(1, cohort.tau):
        at_risk = cohort.xi[:, s] == 1
        event = at_risk & (cohort.xi[:, s + 1] == 0)
        matrix, names = _term_design(cohort, terms, t=s)
        usable = at_risk & np.isfinite(matrix).all(axis=1)
        if not usable.any():
            continue
        rows_x.append(matrix[usable])
        rows_y.append(event[usable].astype(float))
        rows_subject.append(np.flatnonzero(usable))
        rows_time.append(np.full(int(usable.sum()), s))
    if not rows_x:
        raise ValueError("no usable person-time rows for the censoring hazard model")
    X = np.vstack(rows_x)
    y = np.concatenate(rows_y)
    subj = np.concatenate(rows_subject)

    design = DesignMatrix.with_intercept(names, X)
    fit = fit_logistic(design, y)
    hazard = predict_proba(fit, design)[:, 0]
    hazard = np.clip(hazard, PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP)
    log_surv = np.zeros(cohort.n)
    np.add.at(log_surv, subj, np.log1p(-hazard))

    if stabilized:
        null_design = DesignMatrix(("intercept",), np.ones((X.shape[0], 1)))
        null_fit = fit_logistic(null_design, y)
        null_hazard = predict_proba(null_fit, null_design)[:, 0]
        null_hazard = np.clip(null_hazard, PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP)
        log_num = np.zeros(cohort.n)
        np.add.at(log_num, subj, np.log1p(-null_hazard))
    else:
        log_num = np.zeros(cohort.n)

    values = np.where(completers, np.exp(log_num - log_surv), 0.0)
    note = "time-dependent, stabilized" if stabilized else "time-dependent"
    return WeightVector(values=values, kind="ipcw", note=note)


def product_weights(*weight_vectors: WeightVector) -> WeightVector:
    """Elementwise product of weight vectors (e.g. overlap x censoring)."""
    if not weight_vectors:
        raise ValueError("at least one weight vector is required")
    n = weight_vectors[0].n
    values = np.ones(n)
    for wv in weight_vectors:
        if wv.n != n:
            raise ValueError("weight vectors differ in length")
        values = values * wv.values
    kinds = "*".join(wv.kind for wv in weight_vectors)
    return WeightVector(values=values, kind="product", note=kinds)


@dataclass(frozen=True)
class BalanceTable:
    """Weighted covariate balance across the three strategy groups."""

    t: int
    covariates: tuple[str, ...]
    rows: tuple[dict, ...]

    HEADER = "covariate,group,weighted_mean,weighted_sd,smd_01,smd_02,smd_12"

    @property
    def max_abs_smd(self) -> float:
        worst = 0.0
        for row in self.rows:
            for key in ("smd_01", "smd_02", "smd_12"):
                if row[key] == row[key]:  # skip NaN
                    worst = max(worst, abs(row[key]))
        return worst

    def to_csv(self, path=None) -> str:
        lines = [self.HEADER]
        for row in self.rows:
            lines.append(
                ",".join(
                    [
                        row["covariate"],
                        str(row["group"]),
                        repr(float(row["weighted_mean"])),
                        repr(float(row["weighted_sd"])),
                        repr(float(row["smd_01"])),
                        repr(float(row["smd_02"])),
                        repr(float(row["smd_12"])),
                    ]
                )
            )
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def _weighted_mean_sd(x: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    total = w.sum()
    mean = float((w * x).sum() / total)
    var = float((w * (x - mean) ** 2).sum() / total)
    return mean, float(np.sqrt(max(var, 0.0)))


def balance_diagnostics(
    cohort: Cohort,
    t: int,
    weights: WeightVector | np.ndarray,
    covariates: Sequence[str] | None = None,
) -> BalanceTable:
    """Weighted means, SDs, and standardized mean differences at time ``t``.

    Standardized differences divide the weighted mean gap by the pooled
    weighted SD ``sqrt((s_g^2 + s_h^2)/2)``; a 0/0 gap counts as balanced
    (0).  A strategy group with no positive weight is an error.
    """
    w = weights.values if isinstance(weights, WeightVector) else np.asarray(weights, dtype=float)
    if w.shape != (cohort.n,):
        raise ValueError("weights must have one value per subject")
    terms = tuple(covariates) if covariates is not None else cohort.roles.propensity_terms
    matrix, names = cohort.term_matrix(terms, t)
    cats = cohort.strategy_category(t)
    usable = (w > 0) & np.isfinite(matrix).all(axis=1) & (cats >= 0)
    group_stats: dict[int, list[tuple[float, float]]] = {}
    for g in (0, 1, 2):
        members = usable & (cats == g)
        if not members.any():
            raise ValueError(f"strategy group {g} at time {t} has no weighted observations")
        group_stats[g] = [
            _weighted_mean_sd(matrix[members, j], w[members]) for j in range(len(names))
        ]
    rows = []
    for j, name in enumerate(names):
        smd = {}
        for pair, key in (((0, 1), "smd_01"), ((0, 2), "smd_02"), ((1, 2), "smd_12")):
            (m_g, s_g), (m_h, s_h) = group_stats[pair[0]][j], group_stats[pair[1]][j]
            pooled = np.sqrt((s_g**2 + s_h**2) / 2.0)
            diff = m_g - m_h
            smd[key] = 0.0 if (diff == 0.0 and pooled == 0.0) else float(diff / pooled) if pooled > 0 else float("nan")
        for g in (0, 1, 2):
            mean, sd = group_stats[g][j]
            rows.append(
                {
                    "covariate": name,
                    "group": g,
                    "weighted_mean": mean,
                    "weighted_sd": sd,
                    **smd,
                }
            )
    return BalanceTable(t=t, covariates=names, rows=tuple(rows))
