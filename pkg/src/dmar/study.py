"""Monte Carlo studies of the decision-rule estimators.

Runs repeated generate-and-fit cycles over a simulation scenario and
summarizes bias and spread of the fitted decision-effect coefficients for a
panel of estimator variants, which differ along three axes:

* outcome working model: includes the confounder ("Oc") or omits it ("On");
* strategy-assignment weights: correctly specified ("Wc"), misspecified
  ("Wn"), or absent (no suffix — the unweighted regression estimator);
* weighting flavor when weights are present: bounded overlap weights or
  inverse-probability weights.

Censoring scenarios add drop-out weights to every variant; missingness
scenarios first complete the data (carry-forward or sequential multiple
imputation with pooling).
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import simulate
from .engine import FittedRegime, fit_regime
from .missing import ImputationConfig, locf_complete, pool_regimes, sequential_impute
from .panel import Cohort
from .weights import WeightVector, ipcw_time_dependent, ipcw_time_fixed

__all__ = [
    "EstimatorSpec",
    "standard_estimators",
    "StudyConfig",
    "StudyBundle",
    "StudyError",
    "run_study",
    "emit_bias_table",
    "ValueRow",
    "value_report",
    "emit_value_report",
]

logger = logging.getLogger(__name__)

MISSING_HANDLERS = ("none", "locf", "mice")


class StudyError(RuntimeError):
    """Raised when too many replicates fail to produce estimates."""


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator variant: working-model choices plus weighting flavor.

    ``weight_kind`` None means the unweighted regression estimator;
    ``weight_model`` is ignored in that case.
    """

    label: str
    outcome_model: str
    weight_model: str | None = None
    weight_kind: str | None = None

    @property
    def method(self) -> str:
        return "QLOMA" if self.weight_kind is None else "WOMA"


def standard_estimators(weight_kind: str = "overlap") -> tuple[EstimatorSpec, ...]:
    """The six-variant panel used throughout the bias studies."""
    return (
        EstimatorSpec("On", outcome_model="wrong"),
        EstimatorSpec("Oc", outcome_model="correct"),
        EstimatorSpec("On-Wc", outcome_model="wrong", weight_model="correct", weight_kind=weight_kind),
        EstimatorSpec("Oc-Wn", outcome_model="correct", weight_model="wrong", weight_kind=weight_kind),
        EstimatorSpec("Oc-Wc", outcome_model="correct", weight_model="correct", weight_kind=weight_kind),
        EstimatorSpec("On-Wn", outcome_model="wrong", weight_model="wrong", weight_kind=weight_kind),
    )


@dataclass(frozen=True)
class StudyConfig:
    """Settings for one Monte Carlo run."""

    preset: str = "A"
    n: int = 50_000
    replicates: int = 100
    seed: int = 0
    weight_kind: str = "overlap"
    missing_handler: str = "none"
    imputations: int = 25
    stabilized_ipcw: bool = False
    estimators: tuple[EstimatorSpec, ...] | None = None
    max_failure_fraction: float = 0.01

    def __post_init__(self) -> None:
        if self.preset not in simulate.SCENARIO_PRESETS:
            raise ValueError(f"unknown scenario preset {self.preset!r}")
        if self.missing_handler not in MISSING_HANDLERS:
            raise ValueError(f"missing_handler must be one of {MISSING_HANDLERS}")
        if self.replicates < 1 or self.n < 1:
            raise ValueError("replicates and n must be positive")
        if self.weight_kind not in ("overlap", "ipt"):
            raise ValueError("weight_kind must be 'overlap' or 'ipt'")
        missing_allowed = simulate.SCENARIO_PRESETS[self.preset]["missingness"] != "none"
        if self.missing_handler != "none" and not missing_allowed:
            raise ValueError(
                f"scenario {self.preset!r} has no missingness; missing_handler must be 'none'"
            )
        if missing_allowed and self.missing_handler == "none":
            raise ValueError(
                f"scenario {self.preset!r} produces missing values; choose a missing_handler"
            )

    def estimator_panel(self) -> tuple[EstimatorSpec, ...]:
        if self.estimators is not None:
            return self.estimators
        return standard_estimators(self.weight_kind)


@dataclass
class StudyBundle:
    """Replication-level estimates for every estimator in a study.

    ``estimates[label][parameter]`` is a replicate-length array (NaN where
    that replicate failed for that estimator).  Parameters are named
    ``visit@t:<coefficient>`` / ``addon@t:<coefficient>``.
    """

    config: StudyConfig
    labels: tuple[str, ...]
    parameters: tuple[str, ...]
    estimates: dict[str, dict[str, np.ndarray]]
    failures: list[dict[str, object]] = field(default_factory=list)

    def mean(self, label: str, parameter: str) -> float:
        vals = self.estimates[label][parameter]
        return float(np.nanmean(vals))

    def sd(self, label: str, parameter: str) -> float:
        vals = self.estimates[label][parameter]
        return float(np.nanstd(vals, ddof=1))

    def bias(self, label: str, parameter: str) -> float:
        return self.mean(label, parameter) - _true_value(parameter)

    def to_json(self) -> str:
        doc = {
            "format": "dmar-study-v1",
            "config": asdict(self.config),
            "labels": list(self.labels),
            "parameters": list(self.parameters),
            "estimates": {
                label: {p: [repr(float(v)) for v in vals] for p, vals in per.items()}
                for label, per in self.estimates.items()
            },
            "failures": self.failures,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "StudyBundle":
        doc = json.loads(text)
        if doc.get("format") != "dmar-study-v1":
            raise ValueError("not a study bundle file")
        cfg = dict(doc["config"])
        if cfg.get("estimators") is not None:
            cfg["estimators"] = tuple(EstimatorSpec(**e) for e in cfg["estimators"])
        config = StudyConfig(**cfg)
        estimates = {
            label: {p: np.array([float(v) for v in vals]) for p, vals in per.items()}
            for label, per in doc["estimates"].items()
        }
        return cls(
            config=config,
            labels=tuple(doc["labels"]),
            parameters=tuple(doc["parameters"]),
            estimates=estimates,
            failures=list(doc["failures"]),
        )


def _true_value(parameter: str) -> float:
    kind, _, coef = parameter.partition(":")
    base, _, t_str = kind.partition("@")
    blips = simulate.TRUE_BLIPS[int(t_str)]
    coefs = blips.visit if base == "visit" else blips.addon
    if coef == "intercept":
        return coefs[0]
    if coef.startswith("K1@"):
        return coefs[1]
    if coef.startswith("Y@"):
        return coefs[2]
    raise ValueError(f"unknown parameter {parameter!r}")


def _replicate_seed(seed: int, r: int) -> int:
    return int(np.random.SeedSequence((seed, r)).generate_state(1)[0])


def _stage_parameters(regime: FittedRegime) -> dict[str, float]:
    out: dict[str, float] = {}
    for sf in regime.stage_fits:
        for name, value in sf.visit_blip.items():
            out[f"visit@{sf.t}:{name}"] = value
        for name, value in sf.addon_blip.items():
            out[f"addon@{sf.t}:{name}"] = value
    return out


def _censoring_weights(cohort: Cohort, config: StudyConfig) -> WeightVector | None:
    mode = simulate.SCENARIO_PRESETS[config.preset]["censoring"]
    if mode == "none":
        return None
    if mode == "time-fixed":
        return ipcw_time_fixed(cohort)
    return ipcw_time_dependent(cohort, stabilized=config.stabilized_ipcw)


def _fit_one(
    cohort: Cohort,
    est: EstimatorSpec,
    config: StudyConfig,
    ipcw: WeightVector | None,
) -> FittedRegime:
    spec = simulate.blip_spec(est.outcome_model)
    if est.weight_kind is None:
        return fit_regime(cohort, spec=spec, method="QLOMA", ipcw=ipcw)
    return fit_regime(
        cohort,
        spec=spec,
        method="WOMA",
        weight_kind=est.weight_kind,
        ipcw=ipcw,
        propensity_covariates=simulate.propensity_terms(est.weight_model),
    )


def _run_replicate(config: StudyConfig, r: int) -> tuple[int, dict[str, dict[str, float]], list[dict[str, object]]]:
    rep_seed = _replicate_seed(config.seed, r)
    scn = simulate.scenario(config.preset, n=config.n, seed=rep_seed)
    cohort = simulate.generate_cohort(scn)
    failures: list[dict[str, object]] = []
    results: dict[str, dict[str, float]] = {}

    completed: list[Cohort] | None = None
    if config.missing_handler == "locf":
        completed = [locf_complete(cohort)]
    elif config.missing_handler == "mice":
        completed = sequential_impute(
            cohort, ImputationConfig(m=config.imputations, noise=True, seed=rep_seed)
        )

    ipcw = None
    try:
        ipcw = _censoring_weights(cohort, config)
    except Exception as exc:  # propagated as a whole-replicate failure
        for est in config.estimator_panel():
            failures.append({"replicate": r, "estimator": est.label, "error": f"censoring weights: {exc}"})
        return r, results, failures

    for est in config.estimator_panel():
        try:
            if completed is None:
                regime = _fit_one(cohort, est, config, ipcw)
            elif len(completed) == 1:
                regime = _fit_one(completed[0], est, config, ipcw)
            else:
                fits = [_fit_one(c, est, config, ipcw) for c in completed]
                regime = pool_regimes(fits)
            results[est.label] = _stage_parameters(regime)
        except Exception as exc:
            failures.append({"replicate": r, "estimator": est.label, "error": str(exc)})
    return r, results, failures


def run_study(config: StudyConfig) -> StudyBundle:
    """Run the Monte Carlo study, in parallel when DMAR_WORKERS > 1.

    Results are independent of the worker count: every replicate derives
    its own seed from the study seed and its index.
    """
    panel = config.estimator_panel()
    labels = tuple(est.label for est in panel)
    if len(set(labels)) != len(labels):
        raise ValueError("estimator labels must be unique")

    workers = int(os.environ.get("DMAR_WORKERS", "1"))
    outputs: list[tuple[int, dict[str, dict[str, float]], list[dict[str, object]]]] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_replicate, config, r) for r in range(config.replicates)]
            outputs = [f.result() for f in futures]
    else:
        for r in range(config.replicates):
            outputs.append(_run_replicate(config, r))
            logger.info("replicate %d/%d done", r + 1, config.replicates)

    parameters: tuple[str, ...] | None = None
    for _, results, _ in outputs:
        for label in labels:
            if label in results:
                parameters = tuple(results[label])
                break
        if parameters is not None:
            break
    if parameters is None:
        raise StudyError("every replicate failed for every estimator")

    estimates = {
        label: {p: np.full(config.replicates, np.nan) for p in parameters} for label in labels
    }
    failures: list[dict[str, object]] = []
    for r, results, fails in outputs:
        failures.extend(fails)
        for label, params in results.items():
            for p, v in params.items():
                estimates[label][p][r] = v

    attempted = config.replicates * len(labels)
    if len(failures) > config.max_failure_fraction * attempted:
        raise StudyError(
            f"{len(failures)} of {attempted} fits failed "
            f"(more than {config.max_failure_fraction:.0%}); first: {failures[0]}"
        )
    if failures:
        logger.warning("%d of %d fits failed", len(failures), attempted)
    return StudyBundle(
        config=config,
        labels=labels,
        parameters=parameters,
        estimates=estimates,
        failures=failures,
    )


def emit_bias_table(bundle: StudyBundle) -> str:
    """CSV of bias and replicate SD per parameter, one column pair per estimator."""
    header = (
        ["parameter"]
        + [f"bias:{label}" for label in bundle.labels]
        + [f"sd:{label}" for label in bundle.labels]
    )
    lines = [",".join(header)]
    for p in bundle.parameters:
        cells = [p]
        cells += [repr(bundle.bias(label, p)) for label in bundle.labels]
        cells += [repr(bundle.sd(label, p)) for label in bundle.labels]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Policy-value comparison
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ValueRow:
    policy: str
    value: float
    gain_vs_observational: float
    mc_se: float


def value_report(
    preset: str = "A",
    n: int = 50_000,
    seed: int = 0,
    n_eval: int = 200_000,
    outcome_model: str = "correct",
    weight_model: str = "correct",
    policy_inputs: str = "true",
) -> list[ValueRow]:
    """Fit regimes on one cohort and compare mean outcomes on a fresh cohort.

    Rows: the observational assignment, the fitted regime under each
    weighting flavor, and the generator's true optimal rules — all
    evaluated with common random numbers.
    """
    scn = simulate.scenario(preset, n=n, seed=seed)
    cohort = simulate.generate_cohort(scn)
    spec = simulate.blip_spec(outcome_model)
    prop_terms = simulate.propensity_terms(weight_model)
    regimes = {
        "fitted-overlap": fit_regime(
            cohort, spec=spec, method="WOMA", weight_kind="overlap", propensity_covariates=prop_terms
        ),
        "fitted-ipt": fit_regime(
            cohort, spec=spec, method="WOMA", weight_kind="ipt", propensity_covariates=prop_terms
        ),
    }
    rows: list[ValueRow] = []
    base = simulate.value_function(scn, policy=None, n_eval=n_eval)
    rows.append(ValueRow("observational", base.value, 0.0, base.mc_se))
    for name, regime in regimes.items():
        pv = simulate.value_function(scn, policy=regime, n_eval=n_eval, policy_inputs=policy_inputs)
        rows.append(ValueRow(name, pv.value, pv.value - base.value, pv.mc_se))
    opt = simulate.value_function(
        scn, policy=simulate.true_optimal_policy(), n_eval=n_eval, policy_inputs=policy_inputs
    )
    rows.append(ValueRow("true-optimal", opt.value, opt.value - base.value, opt.mc_se))
    return rows


def emit_value_report(rows: Sequence[ValueRow]) -> str:
    lines = ["policy,value,gain_vs_observational,mc_se"]
    for row in rows:
        lines.append(
            f"{row.policy},{repr(row.value)},{repr(row.gain_vs_observational)},{repr(row.mc_se)}"
        )
    return "\n".join(lines) + "\n"
