"""Backward-induction estimation of optimal visit/add-on regimes.

The estimand is a sequence of decision rules over three strategies per
decision time — no visit, visit only, visit with add-on.  Each stage models
the (pseudo-)outcome as

    [treatment-free block h(t)]
  + visit indicator  x (1, visit modifiers)      -> visit-effect coefficients
  + visit x add-on   x (1, add-on modifiers)     -> add-on-effect coefficients

by (optionally weighted) least squares, then walks backward in time,
replacing the outcome with a pseudo-outcome that credits every subject with
the estimated value of the optimal strategy at already-fitted later stages.

Two estimator families share this machinery:

* the weighted estimator combines balancing weights (overlap or inverse
  probability of treatment) with censoring weights and is doubly robust —
  consistent when either the treatment-free model or the strategy-assignment
  model is correct;
* the unweighted analog (Q-learning style) relies on the outcome model
  alone, with censoring weights still applied under censoring.

:func:`sandwich_variance_one_stage` provides a two-step M-estimation
variance for single-stage fits that propagates the uncertainty of the
strategy-assignment model into the stage coefficients.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.special

from .glm import DesignMatrix, FitResult, NonFiniteError, fit_wls
from .panel import Cohort, PositivityError, StrategyCode, parse_term, resolve_term_name, validate_cohort
from .weights import (
    PropensityEstimates,
    WeightVector,
    estimate_propensities_factorized,
    ipt_weights,
    overlap_weights,
)

__all__ = [
    "BlipSpec",
    "StageFit",
    "FittedRegime",
    "RegimeDecisions",
    "StageFitError",
    "blip_visit",
    "blip_addon",
    "decide",
    "stage_design",
    "fit_stage",
    "pseudo_outcome",
    "fit_regime",
    "apply_regime",
    "regime_to_json",
    "regime_from_json",
    "save_regime",
    "load_regime",
    "policy_from_regime",
    "sandwich_variance_one_stage",
]

logger = logging.getLogger(__name__)

REGIME_FORMAT = "dmar-regime-v1"
FD_RELATIVE_STEP = 1e-5


@dataclass(frozen=True)
class BlipSpec:
    """Model structure for one regime fit.

    ``stages`` are the decision times, strictly increasing within
    ``1..tau-1``; ``visit_modifiers`` / ``addon_modifiers`` are the effect
    modifiers entering the visit and add-on effect blocks; ``treatment_free``
    maps each stage to the predictor terms of its treatment-free block.
    """

    stages: tuple[int, ...]
    visit_modifiers: tuple[str, ...]
    addon_modifiers: tuple[str, ...]
    treatment_free: Mapping[int, tuple[str, ...]]

    def __post_init__(self) -> None:
        stages = tuple(int(t) for t in self.stages)
        if not stages:
            raise ValueError("at least one decision stage is required")
        if any(t < 1 for t in stages):
            raise ValueError("decision stages start at time 1")
        if any(b <= a for a, b in zip(stages, stages[1:])):
            raise ValueError("stages must be strictly increasing")
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "visit_modifiers", tuple(self.visit_modifiers))
        object.__setattr__(self, "addon_modifiers", tuple(self.addon_modifiers))
        tf = {int(k): tuple(v) for k, v in dict(self.treatment_free).items()}
        missing = [t for t in stages if t not in tf]
        if missing:
            raise ValueError(f"treatment-free terms missing for stages {missing}")
        object.__setattr__(self, "treatment_free", tf)

    @classmethod
    def from_cohort(cls, cohort: Cohort, stages: Sequence[int] | None = None) -> "BlipSpec":
        roles = cohort.roles
        stages = tuple(stages) if stages is not None else tuple(range(1, cohort.tau))
        tf = {t: roles.treatment_free.get(t, ()) for t in stages}
        return cls(
            stages=stages,
            visit_modifiers=roles.visit_modifiers,
            addon_modifiers=roles.addon_modifiers,
            treatment_free=tf,
        )


@dataclass(frozen=True)
class StageFit:
    """Fitted coefficients for one decision stage.

    Coefficient mappings are keyed by resolved absolute term names (plus
    ``"intercept"``), in design order, so a stage fit is self-describing:
    the design can be reconstructed from the keys alone.
    """

    t: int
    treatment_free: Mapping[str, float]
    visit_blip: Mapping[str, float]
    addon_blip: Mapping[str, float]
    diagnostics: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "treatment_free", dict(self.treatment_free))
        object.__setattr__(self, "visit_blip", dict(self.visit_blip))
        object.__setattr__(self, "addon_blip", dict(self.addon_blip))
        object.__setattr__(self, "diagnostics", dict(self.diagnostics))
        for name, block in (("visit", self.visit_blip), ("add-on", self.addon_blip)):
            if "intercept" not in block:
                raise ValueError(f"{name} effect block must include an intercept")

    @property
    def visit_coefficients(self) -> np.ndarray:
        return np.array(list(self.visit_blip.values()))

    @property
    def addon_coefficients(self) -> np.ndarray:
        return np.array(list(self.addon_blip.values()))

    def visit_modifier_names(self) -> tuple[str, ...]:
        return tuple(k for k in self.visit_blip if k != "intercept")

    def addon_modifier_names(self) -> tuple[str, ...]:
        return tuple(k for k in self.addon_blip if k != "intercept")


@dataclass(frozen=True)
class FittedRegime:
    """A complete fitted decision regime: one stage fit per decision time."""

    method: str  # "WOMA" | "QLOMA"
    weight_kind: str  # "overlap" | "ipt" | "none"
    ipcw_applied: bool
    spec: BlipSpec
    stage_fits: tuple[StageFit, ...]
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_fits", tuple(self.stage_fits))
        object.__setattr__(self, "meta", dict(self.meta))
        times = [sf.t for sf in self.stage_fits]
        if times != sorted(times) or len(set(times)) != len(times):
            raise ValueError("stage fits must be in strictly increasing time order")
        if tuple(times) != self.spec.stages:
            raise ValueError("stage fits do not cover the declared stages")
        if self.method not in ("WOMA", "QLOMA"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.weight_kind not in ("overlap", "ipt", "none"):
            raise ValueError(f"unknown weight kind {self.weight_kind!r}")

    def stage(self, t: int) -> StageFit:
        for sf in self.stage_fits:
            if sf.t == t:
                return sf
        raise KeyError(f"no stage fit at time {t}")


class StageFitError(RuntimeError):
    """A stage regression failed; earlier (later-time) fits are attached."""

    def __init__(self, t: int, cause: Exception, partial: tuple[StageFit, ...]):
        self.t = t
        self.cause = cause
        self.partial = partial
        super().__init__(f"stage fit failed at time {t}: {cause}")


def blip_visit(coefficients: Sequence[float], modifiers: Sequence[float]) -> float:
    """Visit-effect value: intercept plus modifier contrast.

    ``coefficients`` is (intercept, one slope per modifier); the caller
    multiplies by the visit indicator.
    """
    coefficients = np.asarray(coefficients, dtype=float)
    modifiers = np.asarray(modifiers, dtype=float)
    if coefficients.shape[0] != modifiers.shape[0] + 1:
        raise ValueError(
            f"{coefficients.shape[0]} coefficients do not match {modifiers.shape[0]} modifiers"
        )
    return float(coefficients[0] + coefficients[1:] @ modifiers)


def blip_addon(coefficients: Sequence[float], modifiers: Sequence[float]) -> float:
    """Add-on-effect value; same contract as :func:`blip_visit`."""
    return blip_visit(coefficients, modifiers)


def decide(b_v: float, b_va: float, tie: str = "least-intervention") -> StrategyCode:
    """Optimal strategy from the two effect values.

    Maximizes over the candidate values {0, b_v, b_v + b_va} for
    (no visit, visit only, visit + add-on).  Exact ties resolve toward the
    least intervention: no visit over visit, visit over visit + add-on.
    """
    if tie != "least-intervention":
        raise ValueError(f"unknown tie-break policy {tie!r}")
    if not (np.isfinite(b_v) and np.isfinite(b_va)):
        raise ValueError("effect values must be finite")
    both = b_v + b_va
    if both > 0 and both > b_v:
        return StrategyCode(1, 1)
    if b_v > 0:
        return StrategyCode(1, 0)
    return StrategyCode(0, 0)


def _decide_categories(b_v: np.ndarray, b_va: np.ndarray) -> np.ndarray:
    both = b_v + b_va
    addon = (both > 0) & (both > b_v)
    visit = addon | (b_v > 0)
    return visit.astype(np.int8) + addon.astype(np.int8)


def _interaction_names(prefix: str, modifier_names: Sequence[str]) -> list[str]:
    return [prefix, *(f"{prefix}*{m}" for m in modifier_names)]


def stage_design(
    cohort: Cohort, t: int, spec: BlipSpec, rows: np.ndarray | None = None
) -> DesignMatrix:
    """The stage-``t`` regression design.

    Fixed column order: intercept, treatment-free block, visit indicator
    with its modifier interactions, then visit x add-on with its modifier
    interactions.  Unimputed missing values in any required column raise
    :class:`~dmar.glm.NonFiniteError` naming the offending columns.
    """
    rows = cohort.completers if rows is None else np.asarray(rows, dtype=bool)
    h_terms = spec.treatment_free[t]
    h_matrix, h_names = cohort.term_matrix(h_terms, t)
    qv_matrix, qv_names = cohort.term_matrix(spec.visit_modifiers, t)
    qa_matrix, qa_names = cohort.term_matrix(spec.addon_modifiers, t)
    dn = cohort.dn[:, t].astype(float)
    a = cohort.a[:, t].astype(float)
    visit_block = dn[:, None] * np.column_stack([np.ones(cohort.n), qv_matrix])
    addon_block = (dn * a)[:, None] * np.column_stack([np.ones(cohort.n), qa_matrix])
    values = np.column_stack(
        [np.ones(cohort.n), h_matrix, visit_block, addon_block]
    )[rows]
    dn_name = f"dN@{t}"
    dna_name = f"dN@{t}*A@{t}"
    names = (
        "intercept",
        *h_names,
        *_interaction_names(dn_name, qv_names),
        *_interaction_names(dna_name, qa_names),
    )
    return DesignMatrix(names, values)


def _split_stage_coefficients(fit: FitResult, t: int, spec: BlipSpec) -> StageFit:
    h_terms = spec.treatment_free[t]
    n_h = len(h_terms)
    n_v = 1 + len(spec.visit_modifiers)
    n_a = 1 + len(spec.addon_modifiers)
    coefs = fit.coefficients
    tf_names = ("intercept", *(resolve_term_name(term, t) for term in h_terms))
    treatment_free = {name: float(coefs[j]) for j, name in enumerate(tf_names)}
    v_start = 1 + n_h
    visit_names = ("intercept", *(resolve_term_name(m, t) for m in spec.visit_modifiers))
    visit_blip = {name: float(coefs[v_start + j]) for j, name in enumerate(visit_names)}
    a_start = v_start + n_v
    addon_names = ("intercept", *(resolve_term_name(m, t) for m in spec.addon_modifiers))
    addon_blip = {name: float(coefs[a_start + j]) for j, name in enumerate(addon_names)}
    diagnostics = {
        "converged": fit.converged,
        "rss": fit.rss,
        "n_columns": len(fit.names),
    }
    return StageFit(
        t=t,
        treatment_free=treatment_free,
        visit_blip=visit_blip,
        addon_blip=addon_blip,
        diagnostics=diagnostics,
    )


def fit_stage(
    cohort: Cohort,
    t: int,
    pseudo_y: np.ndarray,
    spec: BlipSpec,
    w: WeightVector | np.ndarray | None = None,
) -> StageFit:
    """One stage regression of the (pseudo-)outcome on the stage design.

    Fits on completers with positive weight; ``w`` of ``None`` means unit
    weights.  Censored subjects never enter (their weight is zero).
    """
    pseudo_y = np.asarray(pseudo_y, dtype=float)
    if pseudo_y.shape != (cohort.n,):
        raise ValueError("pseudo-outcome must have one value per subject")
    weights = None
    if w is not None:
        weights = w.values if isinstance(w, WeightVector) else np.asarray(w, dtype=float)
        if weights.shape != (cohort.n,):
            raise ValueError("weights must have one value per subject")
    rows = cohort.completers.copy()
    if weights is not None:
        rows &= weights > 0
    design = stage_design(cohort, t, spec, rows)
    fit = fit_wls(design, pseudo_y[rows], None if weights is None else weights[rows])
    stage = _split_stage_coefficients(fit, t, spec)
    stage.diagnostics["n_rows"] = int(rows.sum())
    return stage


def _stage_blip_values(
    cohort: Cohort, stage: StageFit, rows: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Visit and add-on effect values per subject at one fitted stage."""

    def block_values(block: Mapping[str, float]) -> np.ndarray:
        out = np.full(cohort.n, float(block["intercept"]))
        for name, coef in block.items():
            if name == "intercept":
                continue
            vals = cohort.term_values(name)
            out = out + coef * vals
        return out

    b_v = block_values(stage.visit_blip)
    b_va = block_values(stage.addon_blip)
    bad_v = rows & ~np.isfinite(b_v)
    bad_a = rows & ~np.isfinite(b_va)
    if bad_v.any() or bad_a.any():
        missing = sorted(
            {n for n in stage.visit_modifier_names() if not np.isfinite(cohort.term_values(n)[rows]).all()}
            | {n for n in stage.addon_modifier_names() if not np.isfinite(cohort.term_values(n)[rows]).all()}
        )
        raise NonFiniteError(missing or [f"effect modifiers at time {stage.t}"])
    return b_v, b_va


def pseudo_outcome(
    y: np.ndarray,
    later_stages: Sequence[StageFit],
    cohort: Cohort,
    spec: BlipSpec,
) -> np.ndarray:
    """Outcome credited with optimal-versus-received effects at later stages.

    For each later stage, adds ``max(0, b_v, b_v + b_va)`` minus the effect
    of the strategy actually received.  Subjects with missing outcome stay
    missing; a finite outcome with missing later-stage modifiers is an
    error.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (cohort.n,):
        raise ValueError("outcome must have one value per subject")
    stages = sorted(later_stages, key=lambda sf: sf.t)
    out = y.copy()
    has_y = np.isfinite(y)
    for stage in stages:
        t = stage.t
        b_v, b_va = _stage_blip_values(cohort, stage, has_y)
        dn = cohort.dn[:, t].astype(float)
        a = cohort.a[:, t].astype(float)
        both = b_v + b_va
        optimal = np.maximum(0.0, np.maximum(b_v, both))
        received = dn * b_v + dn * a * b_va
        out[has_y] += optimal[has_y] - received[has_y]
    return out


def _stage_weights(
    cohort: Cohort,
    t: int,
    weight_kind: str,
    ipcw: WeightVector | None,
    propensity_covariates: Sequence[str] | None,
    truncation: tuple[float, float] | None = None,
) -> tuple[np.ndarray, PropensityEstimates | None]:
    base = np.where(cohort.completers, 1.0, 0.0)
    if ipcw is not None:
        base = base * ipcw.values
    if weight_kind == "none":
        return base, None
    if weight_kind == "overlap":
        props = estimate_propensities_factorized(cohort, t, propensity_covariates)
        wv = overlap_weights(props, _observed_categories(cohort, t))
    elif weight_kind == "ipt":
        props = estimate_propensities_factorized(cohort, t, propensity_covariates)
        wv = ipt_weights(props, _observed_categories(cohort, t), truncation=truncation)
    else:
        raise ValueError(f"unknown weight kind {weight_kind!r}")
    return base * wv.values, props


def _observed_categories(cohort: Cohort, t: int) -> np.ndarray:
    cats = cohort.dn[:, t].astype(int) + cohort.dn[:, t].astype(int) * cohort.a[:, t].astype(int)
    return cats


def fit_regime(
    cohort: Cohort,
    spec: BlipSpec | None = None,
    method: str = "WOMA",
    weight_kind: str = "overlap",
    ipcw: WeightVector | None = None,
    propensity_covariates: Sequence[str] | None = None,
    positivity_floor: float = 0.01,
    override_positivity: bool = False,
    truncation: tuple[float, float] | None = None,
) -> FittedRegime:
    """Backward induction over all decision stages.

    The weighted method ("WOMA") builds balancing weights per stage from
    the factorized visit/add-on assignment models — either overlap weights
    or inverse probability of treatment — multiplied by censoring weights
    when given.  The unweighted method
    ("QLOMA") uses unit weights (censoring weights still apply).  Stages are
    fitted from the last decision time backward, each earlier stage using
    the pseudo-outcome implied by the later fits.

    Positivity is checked first; strategy categories rarer than
    ``positivity_floor`` at any stage raise
    :class:`~dmar.panel.PositivityError` unless ``override_positivity`` is
    set.
    """
    if method not in ("WOMA", "QLOMA"):
        raise ValueError(f"unknown method {method!r}")
    if method == "WOMA" and weight_kind not in ("overlap", "ipt"):
        raise ValueError("the weighted method needs weight_kind 'overlap' or 'ipt'")
    spec = spec if spec is not None else BlipSpec.from_cohort(cohort)
    report = validate_cohort(cohort, positivity_floor=positivity_floor)
    if report.positivity_flags and not override_positivity:
        raise PositivityError(
            "positivity concerns at (time, category, frequency): "
            + ", ".join(f"({t}, {c}, {f:.4f})" for t, c, f in report.positivity_flags)
        )

    effective_kind = weight_kind if method == "WOMA" else "none"
    y_tilde = cohort.y_final.copy()
    fits_desc: list[StageFit] = []
    for t in reversed(spec.stages):
        try:
            w, props = _stage_weights(
                cohort, t, effective_kind, ipcw, propensity_covariates, truncation
            )
            stage = fit_stage(cohort, t, y_tilde, spec, w)
            if props is not None:
                stage.diagnostics["propensity_source"] = props.source
                stage.diagnostics["propensity_clipped_rows"] = props.clipped_rows
        except Exception as exc:  # attach partial fits for diagnosis
            raise StageFitError(t, exc, tuple(reversed(fits_desc))) from exc
        fits_desc.append(stage)
        if t != spec.stages[0]:
            y_tilde = pseudo_outcome(y_tilde, (stage,), cohort, spec)
    return FittedRegime(
        method=method,
        weight_kind="none" if method == "QLOMA" else weight_kind,
        ipcw_applied=ipcw is not None,
        spec=spec,
        stage_fits=tuple(reversed(fits_desc)),
        meta={"n": cohort.n, "positivity_flags": len(report.positivity_flags)},
    )


@dataclass(frozen=True)
class RegimeDecisions:
    """Per-subject optimal strategies plus received-vs-optimal tables.

    ``decisions[t]`` holds the optimal category per subject (-1 when the
    subject is no longer in the study at ``t``); ``contingency[t]`` is the
    3x3 count table of received (rows) versus optimal (columns) among
    subjects in the study.
    """

    decisions: Mapping[int, np.ndarray]
    contingency: Mapping[int, np.ndarray]

    def __post_init__(self) -> None:
        object.__setattr__(self, "decisions", dict(self.decisions))
        object.__setattr__(self, "contingency", dict(self.contingency))

    @property
    def stages(self) -> tuple[int, ...]:
        return tuple(sorted(self.decisions))


def apply_regime(regime: FittedRegime, cohort: Cohort) -> RegimeDecisions:
    """Evaluate the fitted decision rules on a cohort.

    Needs the effect-modifier values at each stage for every subject still
    in the study; missing modifier values are an error.
    """
    decisions: dict[int, np.ndarray] = {}
    contingency: dict[int, np.ndarray] = {}
    for stage in regime.stage_fits:
        t = stage.t
        alive = cohort.alive(t)
        b_v, b_va = _stage_blip_values(cohort, stage, alive)
        cats = _decide_categories(b_v, b_va)
        out = np.full(cohort.n, -1, dtype=np.int8)
        out[alive] = cats[alive]
        decisions[t] = out
        received = _observed_categories(cohort, t)
        table = np.zeros((3, 3), dtype=np.int64)
        for r in range(3):
            for c in range(3):
                table[r, c] = int(np.sum(alive & (received == r) & (cats == c)))
        contingency[t] = table
    return RegimeDecisions(decisions=decisions, contingency=contingency)


def regime_to_json(regime: FittedRegime) -> str:
    """Serialize a fitted regime to structured text (bit-exact floats)."""
    payload = {
        "format": REGIME_FORMAT,
        "method": regime.method,
        "weight_kind": regime.weight_kind,
        "ipcw_applied": regime.ipcw_applied,
        "spec": {
            "stages": list(regime.spec.stages),
            "visit_modifiers": list(regime.spec.visit_modifiers),
            "addon_modifiers": list(regime.spec.addon_modifiers),
            "treatment_free": {str(t): list(v) for t, v in regime.spec.treatment_free.items()},
        },
        "stage_fits": [
            {
                "t": sf.t,
                "treatment_free": sf.treatment_free,
                "visit_blip": sf.visit_blip,
                "addon_blip": sf.addon_blip,
                "diagnostics": {
                    k: v for k, v in sf.diagnostics.items() if _json_safe(v)
                },
            }
            for sf in regime.stage_fits
        ],
        "meta": {k: v for k, v in regime.meta.items() if _json_safe(v)},
    }
    return json.dumps(payload, indent=2)


def _json_safe(value) -> bool:
    return isinstance(value, (bool, int, float, str, type(None)))


def regime_from_json(text: str) -> FittedRegime:
    payload = json.loads(text)
    if payload.get("format") != REGIME_FORMAT:
        raise ValueError(f"unrecognized regime file format {payload.get('format')!r}")
    spec = BlipSpec(
        stages=tuple(payload["spec"]["stages"]),
        visit_modifiers=tuple(payload["spec"]["visit_modifiers"]),
        addon_modifiers=tuple(payload["spec"]["addon_modifiers"]),
        treatment_free={int(k): tuple(v) for k, v in payload["spec"]["treatment_free"].items()},
    )
    fits = tuple(
        StageFit(
            t=int(sf["t"]),
            treatment_free=sf["treatment_free"],
            visit_blip=sf["visit_blip"],
            addon_blip=sf["addon_blip"],
            diagnostics=sf.get("diagnostics", {}),
        )
        for sf in payload["stage_fits"]
    )
    return FittedRegime(
        method=payload["method"],
        weight_kind=payload["weight_kind"],
        ipcw_applied=bool(payload["ipcw_applied"]),
        spec=spec,
        stage_fits=fits,
        meta=payload.get("meta", {}),
    )


def save_regime(regime: FittedRegime, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(regime_to_json(regime))
        fh.write("\n")


def load_regime(path) -> FittedRegime:
    with open(path, "r", encoding="utf-8") as fh:
        return regime_from_json(fh.read())


def policy_from_regime(regime: FittedRegime) -> Callable[[int, Mapping[str, float]], StrategyCode]:
    """Wrap a fitted regime as a state-feedback policy.

    The returned callable maps ``(t, state)`` to a strategy, where ``state``
    holds absolute-named values (e.g. ``"K1@2"``, ``"A0"``) for every
    modifier the stage-``t`` rules reference.
    """
    by_stage = {sf.t: sf for sf in regime.stage_fits}

    def term_value(name: str, state: Mapping[str, float]) -> float:
        if name in state:
            return float(state[name])
        value = 1.0
        for factor_name, time_part in parse_term(name):
            if time_part is None:
                key = factor_name
            elif isinstance(time_part, tuple):
                raise KeyError(f"term {name!r} is stage-relative; fitted rules use absolute names")
            else:
                key = f"{factor_name}@{time_part}"
            if key not in state:
                raise KeyError(f"state is missing a value for {key!r} (term {name!r})")
            value *= float(state[key])
        return value

    def policy(t: int, state: Mapping[str, float]) -> StrategyCode:
        if t not in by_stage:
            raise KeyError(f"the regime has no decision rule at time {t}")
        stage = by_stage[t]
        b_v = stage.visit_blip["intercept"] + sum(
            coef * term_value(name, state)
            for name, coef in stage.visit_blip.items()
            if name != "intercept"
        )
        b_va = stage.addon_blip["intercept"] + sum(
            coef * term_value(name, state)
            for name, coef in stage.addon_blip.items()
            if name != "intercept"
        )
        return decide(b_v, b_va)

    return policy


# --------------------------------------------------------------------------
# One-stage sandwich variance
# --------------------------------------------------------------------------


def _design_from_stage_fit(cohort: Cohort, fit: StageFit, rows: np.ndarray) -> DesignMatrix:
    t = fit.t
    h_names = [k for k in fit.treatment_free if k != "intercept"]
    spec = BlipSpec(
        stages=(t,),
        visit_modifiers=fit.visit_modifier_names(),
        addon_modifiers=fit.addon_modifier_names(),
        treatment_free={t: tuple(h_names)},
    )
    return stage_design(cohort, t, spec, rows)


def _full_coefficient_vector(fit: StageFit) -> np.ndarray:
    return np.concatenate(
        [
            list(fit.treatment_free.values()),
            list(fit.visit_blip.values()),
            list(fit.addon_blip.values()),
        ]
    )


def _propensity_weight_function(
    cohort: Cohort,
    t: int,
    propensities: PropensityEstimates,
    weight_kind: str,
    rows: np.ndarray,
):
    """Weights on ``rows`` as a function of the propensity parameter vector."""
    cats = _observed_categories(cohort, t)[rows]
    idx = np.arange(int(rows.sum()))
    if propensities.source == "joint-multinomial":
        fit = propensities.fits[0]
        covariate_names = fit.names[1:]
        matrix, _ = cohort.term_matrix(covariate_names, None)
        X = np.column_stack([np.ones(cohort.n), matrix])[rows]
        shape = fit.coefficients.shape

        def weights_at(phi: np.ndarray) -> np.ndarray:
            B = phi.reshape(shape)
            eta = X @ B.T
            full = np.column_stack([np.zeros(X.shape[0]), eta])
            full -= full.max(axis=1, keepdims=True)
            ex = np.exp(full)
            probs = ex / ex.sum(axis=1, keepdims=True)
            e_received = probs[idx, cats]
            if weight_kind == "overlap":
                tilt = 1.0 / (1.0 / probs).sum(axis=1)
                return tilt / e_received
            return 1.0 / e_received

        phi_hat = fit.coefficients.ravel().copy()
        return weights_at, phi_hat, X
    # factorized: visit model then add-on model among visitors
    visit_fit, addon_fit = propensities.fits
    vmat, _ = cohort.term_matrix(visit_fit.names[1:], None)
    amat, _ = cohort.term_matrix(addon_fit.names[1:], None)
    Xv = np.column_stack([np.ones(cohort.n), vmat])[rows]
    Xa = np.column_stack([np.ones(cohort.n), amat])[rows]
    pv_len = len(visit_fit.names)

    def weights_at(phi: np.ndarray) -> np.ndarray:
        pv = scipy.special.expit(Xv @ phi[:pv_len])
        pa = scipy.special.expit(Xa @ phi[pv_len:])
        probs = np.column_stack([1.0 - pv, pv * (1.0 - pa), pv * pa])
        e_received = probs[idx, cats]
        if weight_kind == "overlap":
            tilt = 1.0 / (1.0 / probs).sum(axis=1)
            return tilt / e_received
        return 1.0 / e_received

    phi_hat = np.concatenate([visit_fit.coefficients, addon_fit.coefficients])
    return weights_at, phi_hat, (Xv, Xa)


def sandwich_variance_one_stage(
    cohort: Cohort,
    fit: StageFit,
    propensities: PropensityEstimates | None = None,
    weight_kind: str = "overlap",
    ipcw: WeightVector | None = None,
) -> np.ndarray:
    """Two-step M-estimation covariance for a single-stage fit.

    Returns the estimated covariance of the stage coefficient vector
    (treatment-free block, then visit block, then add-on block), accounting
    for the estimation of the strategy-assignment model when
    ``propensities`` is given.  The correction term differentiates the
    weights with respect to the propensity parameters by central finite
    differences (relative step 1e-5).  Without ``propensities`` the result
    is the robust (heteroskedasticity-consistent) covariance under the
    weights implied by ``ipcw`` alone.

    Only valid for one-stage regimes, where the stage response is the raw
    final outcome.
    """
    rows = cohort.completers
    n_used = int(rows.sum())
    n = cohort.n
    design = _design_from_stage_fit(cohort, fit, rows)
    X = design.values
    theta = _full_coefficient_vector(fit)
    y = cohort.y_final[rows]
    resid = y - X @ theta

    base = np.ones(n_used)
    if ipcw is not None:
        base = base * ipcw.values[rows]

    if propensities is not None:
        weights_at, phi_hat, _ = _propensity_weight_function(
            cohort, fit.t, propensities, weight_kind, rows
        )
        w_hat = base * weights_at(phi_hat)
    else:
        w_hat = base

    p = X.shape[1]
    g = X * (w_hat * resid)[:, None]  # (m, p) estimating-function contributions
    G_theta = -(X.T @ (X * w_hat[:, None])) / n

    if propensities is None:
        meat = (g.T @ g) / n
    else:
        m_rows, M = _propensity_score_pieces(cohort, fit.t, propensities, rows, n)
        q = phi_hat.shape[0]
        G_phi = np.zeros((p, q))
        for j in range(q):
            h = FD_RELATIVE_STEP * max(1.0, abs(phi_hat[j]))
            plus = phi_hat.copy()
            plus[j] += h
            minus = phi_hat.copy()
            minus[j] -= h
            dw = (weights_at(plus) - weights_at(minus)) / (2.0 * h)
            G_phi[:, j] = (X * (base * dw * resid)[:, None]).sum(axis=0) / n
        try:
            Minv_m = scipy.linalg.solve(M, m_rows.T, assume_a="sym")
        except scipy.linalg.LinAlgError as exc:
            raise ValueError("singular propensity information matrix") from exc
        corrected = g - (G_phi @ Minv_m).T
        meat = (corrected.T @ corrected) / n

    try:
        Ginv = scipy.linalg.solve(G_theta, np.eye(p))
    except scipy.linalg.LinAlgError as exc:
        raise ValueError("singular stage design (bread matrix not invertible)") from exc
    sigma = Ginv @ meat @ Ginv.T
    sigma = (sigma + sigma.T) / 2.0
    return sigma / n


def _propensity_score_pieces(
    cohort: Cohort,
    t: int,
    propensities: PropensityEstimates,
    rows: np.ndarray,
    n: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row score contributions and information for the propensity step."""
    cats = _observed_categories(cohort, t)[rows]
    if propensities.source == "joint-multinomial":
        fit = propensities.fits[0]
        matrix, _ = cohort.term_matrix(fit.names[1:], None)
        X = np.column_stack([np.ones(cohort.n), matrix])[rows]
        B = fit.coefficients
        eta = X @ B.T
        full = np.column_stack([np.zeros(X.shape[0]), eta])
        full -= full.max(axis=1, keepdims=True)
        ex = np.exp(full)
        probs = ex / ex.sum(axis=1, keepdims=True)
        K = probs.shape[1]
        pieces = [X * (((cats == k).astype(float) - probs[:, k]))[:, None] for k in range(1, K)]
        m_rows = np.column_stack(pieces)
        pdim = X.shape[1]
        info = np.zeros(((K - 1) * pdim, (K - 1) * pdim))
        for k in range(1, K):
            for l in range(1, K):
                wkl = probs[:, k] * ((k == l) - probs[:, l])
                info[(k - 1) * pdim : k * pdim, (l - 1) * pdim : l * pdim] = X.T @ (
                    X * wkl[:, None]
                )
        return m_rows, info / n
    visit_fit, addon_fit = propensities.fits
    vmat, _ = cohort.term_matrix(visit_fit.names[1:], None)
    amat, _ = cohort.term_matrix(addon_fit.names[1:], None)
    Xv = np.column_stack([np.ones(cohort.n), vmat])[rows]
    Xa = np.column_stack([np.ones(cohort.n), amat])[rows]
    dn = cohort.dn[:, t].astype(float)[rows]
    a = cohort.a[:, t].astype(float)[rows]
    pv = scipy.special.expit(Xv @ visit_fit.coefficients)
    pa = scipy.special.expit(Xa @ addon_fit.coefficients)
    m_v = Xv * (dn - pv)[:, None]
    m_a = Xa * (dn * (a - pa))[:, None]
    m_rows = np.column_stack([m_v, m_a])
    info_v = Xv.T @ (Xv * (pv * (1 - pv))[:, None])
    info_a = Xa.T @ (Xa * (dn * pa * (1 - pa))[:, None])
    M = scipy.linalg.block_diag(info_v, info_a) / n
    return m_rows, M
