"""Completion of partially observed effect-modifier panels.

Two strategies for cohorts where time-varying modifiers are missing when no
visit happened:

* :func:`locf_complete` — carry each subject's most recent observed value
  forward into missing cells (single completed cohort);
* :func:`sequential_impute` — multiple imputation by time-ascending
  normal-linear regression: for each time in order, each partially observed
  column is regressed on everything already completed at earlier times plus
  the fully observed columns at the current time (the visit indicator is
  never a predictor), and missing cells are filled with the prediction plus
  a draw from the fitted residual distribution.  Repeating with ``m``
  independent seeds yields ``m`` completed cohorts.

:func:`pool_regimes` averages fitted-regime coefficients across completed
datasets.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .engine import FittedRegime, StageFit
from .glm import DesignMatrix, RankDeficientError, fit_wls
from .panel import FILL_IMPUTED, FILL_LOCF, Cohort

__all__ = [
    "ImputationConfig",
    "ImputationError",
    "locf_complete",
    "sequential_impute",
    "pool_regimes",
]

logger = logging.getLogger(__name__)


class ImputationError(ValueError):
    """Missing-data completion failed."""


@dataclass(frozen=True)
class ImputationConfig:
    """Settings for :func:`sequential_impute`.

    ``m`` completed datasets are generated; predictors follow a fixed
    policy — everything completed at earlier times plus fully observed
    current-time columns, never the visit indicator.  ``noise`` adds a
    residual-SD draw to each fill (turning it off gives ``m`` identical
    conditional-mean completions); ``seed`` makes the whole procedure
    reproducible.
    """

    m: int = 25
    noise: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("the number of imputations m must be >= 1")


def locf_complete(cohort: Cohort) -> Cohort:
    """Fill missing cells with the last observed value of the same column.

    Applies to every time-varying column, on cells up to each subject's
    censoring time.  A missing value with nothing earlier to carry forward
    (a missing baseline) is an error.
    """
    new_columns: dict[str, np.ndarray] = {}
    new_observed: dict[str, np.ndarray] = {}
    new_filled: dict[str, np.ndarray] = {}
    alive = cohort.xi == 1
    for name in cohort.column_names:
        values = cohort.column(name).copy()
        observed = cohort.observed(name).copy()
        filled = cohort.filled(name).copy()
        # time-varying measurements live at 0..tau-1; the final time only
        # carries the outcome, so its structurally absent cells stay empty
        for t in range(cohort.tau):
            need = alive[:, t] & ~observed[:, t]
            if not need.any():
                continue
            if t == 0:
                raise ImputationError(
                    f"column {name!r} is missing at time 0 for some subjects; "
                    "nothing earlier to carry forward"
                )
            values[need, t] = values[need, t - 1]
            if not np.isfinite(values[need, t]).all():
                raise ImputationError(
                    f"column {name!r} has a missing run reaching time 0 for some subjects"
                )
            filled[need, t] = FILL_LOCF
        new_columns[name] = values
        new_observed[name] = observed
        new_filled[name] = filled
    return cohort.with_updates(columns=new_columns, observed=new_observed, filled=new_filled)


def _imputation_predictors(
    cohort: Cohort,
    columns: dict[str, np.ndarray],
    target: str,
    t: int,
    observed: dict[str, np.ndarray],
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Predictor matrix for imputing ``target`` at time ``t``.

    Baseline strategy assignment, every measured column and the add-on
    indicator at earlier times (already completed by the sweep), plus the
    add-on indicator and fully observed columns at the current time, other
    than the target.  The visit indicator is never included.
    """
    pieces: list[np.ndarray] = [cohort.a0]
    names: list[str] = ["A0"]
    for s in range(t):
        for name in sorted(columns):
            pieces.append(columns[name][:, s])
            names.append(f"{name}@{s}")
        if s >= 1:  # the time-0 add-on indicator duplicates A0
            pieces.append(cohort.a[:, s].astype(float))
            names.append(f"A@{s}")
    alive_t = cohort.alive(t)
    for name in sorted(columns):
        if name == target:
            continue
        fully_observed = bool((observed[name][:, t] | ~alive_t).all())
        if fully_observed:
            pieces.append(columns[name][:, t])
            names.append(f"{name}@{t}")
    pieces.append(cohort.a[:, t].astype(float))
    names.append(f"A@{t}")
    return np.column_stack(pieces), tuple(names)


def sequential_impute(
    cohort: Cohort, config: ImputationConfig | None = None, manifest_path=None
) -> list[Cohort]:
    """Multiple imputation by time-ordered normal-linear regression.

    Returns ``m`` completed cohorts.  Each replicate sweeps times in
    ascending order; within a time, partially observed columns are imputed
    in sorted name order.  Each fill model is fitted on subjects originally
    observed at that cell, with residual SD ``sqrt(RSS / (n_obs - p))``;
    noise draws come from an independent generator per replicate, seeded
    deterministically from ``(config.seed, replicate)``.

    A column with no observed values at some live time, or a degenerate
    (rank-deficient) predictor design, is an error.  When ``manifest_path``
    is given, a JSON manifest of seeds and per-cell fill counts is written.
    """
    config = config if config is not None else ImputationConfig()
    alive = cohort.xi == 1
    targets: list[tuple[int, str]] = []
    for t in range(cohort.tau):
        for name in sorted(cohort.column_names):
            missing = alive[:, t] & ~cohort.observed(name)[:, t]
            if missing.any():
                targets.append((t, name))
    if targets and min(t for t, _ in targets) == 0:
        raise ImputationError("baseline (time 0) values must be fully observed")

    completed: list[Cohort] = []
    manifest: dict[str, object] = {
        "m": config.m,
        "noise": config.noise,
        "seed": config.seed,
        "fills": [],
    }
    for j in range(config.m):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((config.seed, j))))
        columns = {name: cohort.column(name).copy() for name in cohort.column_names}
        observed = {name: cohort.observed(name).copy() for name in cohort.column_names}
        filled = {name: cohort.filled(name).copy() for name in cohort.column_names}
        fill_counts: dict[str, int] = {}
        for t, name in targets:
            missing = alive[:, t] & ~observed[name][:, t]
            obs_rows = alive[:, t] & observed[name][:, t]
            if not obs_rows.any():
                raise ImputationError(
                    f"column {name!r} has no observed values at time {t}; cannot impute"
                )
            X, pred_names = _imputation_predictors(cohort, columns, name, t, observed)
            usable_obs = obs_rows & np.isfinite(X).all(axis=1)
            usable_fill = missing & np.isfinite(X).all(axis=1)
            if not usable_obs.any():
                raise ImputationError(
                    f"no complete predictor rows to fit the fill model for {name!r} at time {t}"
                )
            if usable_fill.sum() != missing.sum():
                raise ImputationError(
                    f"predictors incomplete for some missing cells of {name!r} at time {t}"
                )
            design = DesignMatrix.with_intercept(pred_names, X[usable_obs])
            try:
                fit = fit_wls(design, columns[name][usable_obs, t])
            except RankDeficientError as exc:
                raise ImputationError(
                    f"degenerate fill-model design for {name!r} at time {t}: {exc}"
                ) from exc
            dof = int(usable_obs.sum()) - design.shape[1]
            sigma = float(np.sqrt(fit.rss / dof)) if dof > 0 else 0.0
            pred_design = np.column_stack([np.ones(int(usable_fill.sum())), X[usable_fill]])
            fill_values = pred_design @ fit.coefficients
            if config.noise:
                fill_values = fill_values + sigma * rng.standard_normal(fill_values.shape[0])
            columns[name][usable_fill, t] = fill_values
            filled[name][usable_fill, t] = FILL_IMPUTED
            fill_counts[f"{name}@{t}"] = int(usable_fill.sum())
        completed.append(
            cohort.with_updates(
                columns=columns,
                observed=observed,
                filled=filled,
                meta={**cohort.meta, "imputation_replicate": j},
            )
        )
        manifest["fills"].append({"replicate": j, "counts": fill_counts})
    if manifest_path is not None:
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
    return completed


def pool_regimes(regimes: list[FittedRegime]) -> FittedRegime:
    """Average fitted-regime coefficients across completed datasets.

    All inputs must share method, weight kind, stages, and coefficient
    structure; every coefficient is replaced by its arithmetic mean.  The
    result's metadata records how many fits were pooled.
    """
    if not regimes:
        raise ValueError("nothing to pool")
    first = regimes[0]
    for other in regimes[1:]:
        if other.method != first.method or other.weight_kind != first.weight_kind:
            raise ValueError("regimes disagree on method or weight kind; cannot pool")
        if other.spec.stages != first.spec.stages:
            raise ValueError("regimes disagree on decision stages; cannot pool")
        for sf_a, sf_b in zip(first.stage_fits, other.stage_fits):
            for block in ("treatment_free", "visit_blip", "addon_blip"):
                if tuple(getattr(sf_a, block)) != tuple(getattr(sf_b, block)):
                    raise ValueError(
                        f"regimes disagree on the {block} coefficient names at time {sf_a.t}"
                    )
    m = len(regimes)
    pooled_fits = []
    for i, sf in enumerate(first.stage_fits):
        blocks = {}
        for block in ("treatment_free", "visit_blip", "addon_blip"):
            names = tuple(getattr(sf, block))
            blocks[block] = {
                name: float(np.mean([getattr(r.stage_fits[i], block)[name] for r in regimes]))
                for name in names
            }
        pooled_fits.append(
            StageFit(
                t=sf.t,
                treatment_free=blocks["treatment_free"],
                visit_blip=blocks["visit_blip"],
                addon_blip=blocks["addon_blip"],
                diagnostics={"pooled_from": m},
            )
        )
    return FittedRegime(
        method=first.method,
        weight_kind=first.weight_kind,
        ipcw_applied=first.ipcw_applied,
        spec=first.spec,
        stage_fits=tuple(pooled_fits),
        meta={**first.meta, "pooled_m": m},
    )
