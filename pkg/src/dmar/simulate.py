"""Synthetic longitudinal cohorts with known optimal visit/add-on rules.

Generates three-month panels (decisions at months 1 and 2, outcome at month
3) from a fixed structural model chosen so the true decision-rule
coefficients are known constants, enabling bias studies and value-function
comparisons:

* time-varying measurements ``K1`` (effect modifier), ``K2`` (confounder
  withheld from "wrong" working models), and ``Y`` (intermediate outcome);
* visit and add-on assignment from logistic models of the previous month's
  state (or from a caller-supplied policy, sharing the same covariate random
  streams so policy comparisons use common random numbers);
* optional missingness (modifiers unmeasured on no-visit months) and
  censoring (time-fixed or time-dependent drop-out);
* value-function evaluation on large fresh cohorts.

Every random quantity draws from its own named substream, so cohorts are
bit-reproducible and any two scenarios with the same seed share every draw
they have in common.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.special

from .engine import BlipSpec, FittedRegime
from .panel import Cohort, ColumnRoleMap

__all__ = [
    "TAU",
    "STAGES",
    "GEN_SALT",
    "EVAL_SALT",
    "TRUE_BLIPS",
    "TrueBlipParams",
    "DgmScenario",
    "SCENARIO_PRESETS",
    "scenario",
    "generate_cohort",
    "apply_mar_missingness",
    "treatment_free_terms",
    "propensity_terms",
    "blip_spec",
    "default_roles",
    "true_optimal_policy",
    "vectorized_policy",
    "PolicyValue",
    "value_function",
]

TAU = 3
STAGES = (1, 2)

GEN_SALT = 777
EVAL_SALT = 900900

STREAM_NAMES = (
    "K1@0",
    "K2@0",
    "Y@0",
    "A0",
    "K1@1",
    "K2@1",
    "Y@1",
    "visit@1",
    "addon@1",
    "K1@2",
    "K2@2",
    "Y@2",
    "visit@2",
    "addon@2",
    "Y@3",
    "censor@1",
    "censor@2",
)

# Structural coefficient tables.  Keys are covariate terms (absolute names,
# products via '*'); "intercept" is the constant.  "_sd" is the residual SD
# of a linear model; assignment models are logistic ("_logit" suffix).
BASELINE = {
    "K1@0": {"mean": 4.0, "sd": 3.0},
    "K2@0": {"mean": 5.0, "sd": 1.4},
    "Y@0": {"mean": 120.0, "sd": 13.0},
    "A0": {"p": 0.5},
}

MONTH1 = {
    "K1@1": ({"intercept": -23.0, "K1@0": 0.8, "Y@0": 0.2, "A0": 0.1}, 3.0),
    "K2@1": ({"intercept": -43.0, "K2@0": 1.0, "Y@0": 0.2, "A0": -0.1}, 3.0),
    "Y@1": (
        {
            "intercept": 118.0,
            "A0": 0.05,
            "Y@0": -0.005,
            "K1@0": 0.02,
            "A0*K1@0": 0.02,
            "A0*Y@0": 0.004,
            "Y@0*K1@0": 0.02,
        },
        3.0,
    ),
}

VISIT_LOGIT = {
    1: {"intercept": -2.0, "K1@0": 0.3, "K2@0": -0.8, "A0": 0.1, "Y@0": 0.02},
    2: {"intercept": -18.0, "K1@1": 0.3, "K2@1": -0.8, "A@1": 0.1, "Y@1": 0.02},
}

ADDON_LOGIT = {
    1: {"K1@0": 0.4, "K2@0": -0.05, "A0": 0.2, "Y@0": -0.04},
    2: {"K1@1": 0.4, "K2@1": -0.05, "A@1": 0.2, "Y@1": -0.04},
}

MONTH2 = {
    "K1@2": (
        {"intercept": -26.0, "K1@1": 0.8, "Y@1": 0.2, "A@1": 0.1, "dN@1": 0.1},
        3.0,
    ),
    "K2@2": (
        {"intercept": -43.0, "K2@1": 1.0, "Y@1": 0.2, "A@1": 0.1, "dN@1": -0.1},
        3.0,
    ),
    "Y@2": (
        {
            "intercept": 122.0 - 0.0005,
            "A0": 0.05,
            "Y@0": -0.005,
            "K1@0": 0.02,
            "A0*K1@0": 0.02,
            "A0*Y@0": 0.004,
            "Y@0*K1@0": 0.02,
            "K1@1": 0.02,
            "dN@1*A@1": -1.4,
            "dN@1*K1@1": 1.0,
            "Y@1": 1.0,
            "dN@1*Y@1": 0.002,
            "dN@1*A@1*K1@1": 0.1,
            "dN@1*A@1*Y@1": 0.04,
        },
        3.0,
    ),
}

OUTCOME = (
    {
        "intercept": 134.0,
        "A0": 0.05,
        "Y@0": -0.005,
        "K1@0": 0.02,
        "K2@0": -0.6,
        "A0*K1@0": 0.02,
        "A0*Y@0": 0.004,
        "Y@0*K1@0": 0.02,
        "K1@1": 0.02,
        "K2@1": -1.5,
        "dN@1*A@1": -1.4,
        "Y@1": -0.005,
        "dN@1*K1@1": 0.18,
        "dN@1*Y@1": 0.002,
        "dN@1*A@1*K1@1": 0.1,
        "dN@1*A@1*Y@1": 0.04,
        "Y@2": -0.005,
        "K1@2": 0.02,
        "K2@2": -1.5,
        "dN@2": 1.0,
        "dN@2*K1@2": 1.0,
        "dN@2*Y@2": 0.01,
        "dN@2*A@2": 1.5,
        "dN@2*A@2*K1@2": -1.2,
        "dN@2*A@2*Y@2": 0.01,
    },
    3.0,
)

# Drop-out models.  "time-fixed": two baseline-driven censoring events
# (before month 2 and before month 3).  "time-dependent": the same form
# driven by the most recent month's state.
CENSOR_TIME_FIXED = (
    {"intercept": 10.0, "A0": -0.2, "Y@0": -0.1, "K1@0": 0.1},
    {"intercept": 8.0, "A0": 0.2, "Y@0": -0.1, "K1@0": 0.2},
)
CENSOR_TIME_DEPENDENT = (
    {"intercept": 10.0, "A@1": -0.2, "Y@1": -0.1, "K1@1": 0.1},
    {"intercept": 10.0, "A@2": -0.2, "Y@2": -0.1, "K1@2": 0.1},
)


@dataclass(frozen=True)
class TrueBlipParams:
    """The generator's decision-effect coefficients at one stage.

    ``visit`` is (intercept, modifier slopes...) for the visit effect;
    ``addon`` likewise for the add-on effect, both over modifiers
    (K1 at the decision time, Y at the decision time).
    """

    visit: tuple[float, ...]
    addon: tuple[float, ...]


def _lookup_interaction(terms: Mapping[str, float], *factors: str) -> float:
    """Coefficient of the product of ``factors``, in any written order."""
    want = frozenset(factors)
    for name, coef in terms.items():
        if name != "intercept" and frozenset(name.split("*")) == want:
            return coef
    return 0.0


def _true_blips_from_outcome(t: int) -> TrueBlipParams:
    terms = OUTCOME[0]
    visit = (
        _lookup_interaction(terms, f"dN@{t}"),
        _lookup_interaction(terms, f"dN@{t}", f"K1@{t}"),
        _lookup_interaction(terms, f"dN@{t}", f"Y@{t}"),
    )
    addon = (
        _lookup_interaction(terms, f"dN@{t}", f"A@{t}"),
        _lookup_interaction(terms, f"dN@{t}", f"A@{t}", f"K1@{t}"),
        _lookup_interaction(terms, f"dN@{t}", f"A@{t}", f"Y@{t}"),
    )
    return TrueBlipParams(visit=visit, addon=addon)


TRUE_BLIPS = {t: _true_blips_from_outcome(t) for t in STAGES}

# The final-stage decision effects are the study's headline parameters;
# pin them at import so the tables cannot drift silently.
assert TRUE_BLIPS[2].visit == (1.0, 1.0, 0.01), TRUE_BLIPS[2]
assert TRUE_BLIPS[2].addon == (1.5, -1.2, 0.01), TRUE_BLIPS[2]
assert TRUE_BLIPS[1].visit == (0.0, 0.18, 0.002), TRUE_BLIPS[1]
assert TRUE_BLIPS[1].addon == (-1.4, 0.1, 0.04), TRUE_BLIPS[1]


MISSINGNESS_MODES = ("none", "MAR")
CENSORING_MODES = ("none", "time-fixed", "time-dependent")
MODEL_FLAGS = ("correct", "wrong")


@dataclass(frozen=True)
class DgmScenario:
    """One simulation configuration.

    ``missingness`` "MAR" removes the effect modifiers (K1, Y) on months
    without a visit; ``censoring`` selects the drop-out mechanism;
    ``outcome_model`` / ``weight_model`` say whether downstream working
    models include the confounder K2 ("correct") or omit it ("wrong").
    """

    n: int
    seed: int
    missingness: str = "none"
    censoring: str = "none"
    outcome_model: str = "correct"
    weight_model: str = "correct"

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("cohort size must be positive")
        if self.missingness not in MISSINGNESS_MODES:
            raise ValueError(f"missingness must be one of {MISSINGNESS_MODES}")
        if self.censoring not in CENSORING_MODES:
            raise ValueError(f"censoring must be one of {CENSORING_MODES}")
        if self.outcome_model not in MODEL_FLAGS or self.weight_model not in MODEL_FLAGS:
            raise ValueError(f"model flags must be one of {MODEL_FLAGS}")


SCENARIO_PRESETS = {
    "A": {"missingness": "none", "censoring": "none"},
    "B": {"missingness": "MAR", "censoring": "none"},
    "C": {"missingness": "none", "censoring": "time-fixed"},
    "D": {"missingness": "none", "censoring": "time-dependent"},
}


def scenario(
    preset: str,
    n: int,
    seed: int,
    outcome_model: str = "correct",
    weight_model: str = "correct",
) -> DgmScenario:
    """A preset scenario: A none/none, B MAR/none, C fixed-censoring, D time-dependent."""
    if preset not in SCENARIO_PRESETS:
        raise ValueError(f"unknown scenario preset {preset!r}; choose from {sorted(SCENARIO_PRESETS)}")
    modes = SCENARIO_PRESETS[preset]
    return DgmScenario(
        n=n,
        seed=seed,
        outcome_model=outcome_model,
        weight_model=weight_model,
        **modes,
    )


def _streams(seed: int) -> dict[str, np.random.Generator]:
    root = np.random.SeedSequence((seed, GEN_SALT))
    children = root.spawn(len(STREAM_NAMES))
    return {
        name: np.random.Generator(np.random.Philox(child))
        for name, child in zip(STREAM_NAMES, children)
    }


def _eval_terms(terms: Mapping[str, float], ctx: Mapping[str, np.ndarray], n: int) -> np.ndarray:
    out = np.zeros(n)
    for name, coef in terms.items():
        if name == "intercept":
            out += coef
            continue
        value = np.ones(n)
        for factor in name.split("*"):
            value = value * ctx[factor]
        out += coef * value
    return out


PolicyFunction = Callable[[int, Mapping[str, np.ndarray]], tuple[np.ndarray, np.ndarray]]


def generate_cohort(config: DgmScenario, policy: PolicyFunction | None = None) -> Cohort:
    """Generate one cohort under the structural model.

    ``policy``, when given, replaces the observational visit/add-on draws:
    it is called as ``policy(t, state)`` with a mapping of absolute-named
    arrays for everything measured so far, and must return integer 0/1
    arrays ``(visit, addon)`` with addon only where visit is 1.  Covariate
    and outcome noise streams are identical with and without a policy, so
    policy comparisons at the same seed use common random numbers.
    """
    n = config.n
    rngs = _streams(config.seed)
    ctx: dict[str, np.ndarray] = {}
    ctx["K1@0"] = BASELINE["K1@0"]["mean"] + BASELINE["K1@0"]["sd"] * rngs["K1@0"].standard_normal(n)
    ctx["K2@0"] = BASELINE["K2@0"]["mean"] + BASELINE["K2@0"]["sd"] * rngs["K2@0"].standard_normal(n)
    ctx["Y@0"] = BASELINE["Y@0"]["mean"] + BASELINE["Y@0"]["sd"] * rngs["Y@0"].standard_normal(n)
    ctx["A0"] = (rngs["A0"].random(n) < BASELINE["A0"]["p"]).astype(float)

    for name, (terms, sd) in MONTH1.items():
        ctx[name] = _eval_terms(terms, ctx, n) + sd * rngs[name].standard_normal(n)
    ctx["dN@1"], ctx["A@1"] = _assign_strategies(1, ctx, rngs, policy, n)

    for name, (terms, sd) in MONTH2.items():
        ctx[name] = _eval_terms(terms, ctx, n) + sd * rngs[name].standard_normal(n)
    ctx["dN@2"], ctx["A@2"] = _assign_strategies(2, ctx, rngs, policy, n)

    outcome_terms, outcome_sd = OUTCOME
    y_final = _eval_terms(outcome_terms, ctx, n) + outcome_sd * rngs["Y@3"].standard_normal(n)

    xi = np.ones((n, TAU + 1), dtype=np.int8)
    meta: dict[str, object] = {
        "scenario": {
            "n": config.n,
            "seed": config.seed,
            "missingness": config.missingness,
            "censoring": config.censoring,
        },
        "policy": "observational" if policy is None else "supplied",
    }
    if config.censoring != "none":
        tables = CENSOR_TIME_FIXED if config.censoring == "time-fixed" else CENSOR_TIME_DEPENDENT
        p1 = scipy.special.expit(_eval_terms(tables[0], ctx, n))
        p2 = scipy.special.expit(_eval_terms(tables[1], ctx, n))
        event1 = rngs["censor@1"].random(n) < p1
        event2 = rngs["censor@2"].random(n) < p2
        xi[event1, 2:] = 0
        xi[event2, 3] = 0
        meta["censoring_rate"] = float((event1 | event2).mean())

    dn = np.zeros((n, TAU + 1), dtype=np.int8)
    a = np.zeros((n, TAU + 1), dtype=np.int8)
    dn[:, 0] = 1
    a[:, 0] = ctx["A0"].astype(np.int8)
    for t in STAGES:
        alive = xi[:, t] == 1
        dn[alive, t] = ctx[f"dN@{t}"][alive].astype(np.int8)
        a[alive, t] = ctx[f"A@{t}"][alive].astype(np.int8)

    columns: dict[str, np.ndarray] = {}
    for base in ("K1", "K2", "Y"):
        grid = np.full((n, TAU + 1), np.nan)
        for t in range(TAU):
            alive = xi[:, t] == 1
            grid[alive, t] = ctx[f"{base}@{t}"][alive]
        columns[base] = grid

    completers = xi[:, TAU] == 1
    y_out = np.where(completers, y_final, np.nan)

    cohort = Cohort(
        ids=np.arange(1, n + 1),
        dn=dn,
        a=a,
        xi=xi,
        columns=columns,
        a0=ctx["A0"],
        y_final=y_out,
        roles=default_roles(config.outcome_model),
        meta=meta,
    )
    if config.missingness == "MAR":
        cohort = apply_mar_missingness(cohort)
    return cohort


def _assign_strategies(
    t: int,
    ctx: Mapping[str, np.ndarray],
    rngs: Mapping[str, np.random.Generator],
    policy: PolicyFunction | None,
    n: int,
) -> tuple[np.ndarray, np.ndarray]:
    if policy is None:
        p_visit = scipy.special.expit(_eval_terms(VISIT_LOGIT[t], ctx, n))
        p_addon = scipy.special.expit(_eval_terms(ADDON_LOGIT[t], ctx, n))
        visit = (rngs[f"visit@{t}"].random(n) < p_visit).astype(float)
        addon = visit * (rngs[f"addon@{t}"].random(n) < p_addon).astype(float)
        return visit, addon
    visit, addon = policy(t, dict(ctx))
    visit = np.asarray(visit, dtype=float)
    addon = np.asarray(addon, dtype=float)
    if visit.shape != (n,) or addon.shape != (n,):
        raise ValueError(f"policy at time {t} returned arrays of the wrong shape")
    if not (np.isin(visit, (0.0, 1.0)).all() and np.isin(addon, (0.0, 1.0)).all()):
        raise ValueError(f"policy at time {t} returned non-binary strategies")
    if np.any(addon > visit):
        raise ValueError(f"policy at time {t} assigned an add-on without a visit")
    return visit, addon


def apply_mar_missingness(cohort: Cohort) -> Cohort:
    """Remove effect modifiers (K1 and Y) on months without a visit.

    Baseline (time 0) stays fully observed; confounder K2 stays observed
    everywhere, matching a registry where the confounder comes from an
    external source while the modifiers require a visit to be measured.
    """
    new_cols = {}
    new_obs = {}
    for name in cohort.column_names:
        new_cols[name] = cohort.column(name).copy()
        new_obs[name] = cohort.observed(name).copy()
    for t in STAGES:
        no_visit = (cohort.dn[:, t] == 0) & (cohort.xi[:, t] == 1)
        for name in ("K1", "Y"):
            new_cols[name][no_visit, t] = np.nan
            new_obs[name][no_visit, t] = False
    meta = {**cohort.meta, "missingness": "MAR"}
    return cohort.with_updates(columns=new_cols, observed=new_obs, meta=meta)


# --------------------------------------------------------------------------
# Working-model term sets
# --------------------------------------------------------------------------

_STAGE1_TREATMENT_FREE = (
    "A0",
    "Y@0",
    "K1@0",
    "A0*K1@0",
    "A0*Y@0",
    "Y@0*K1@0",
)
_STAGE1_CONFOUNDER_TERMS = ("K2@0",)
_STAGE2_TREATMENT_FREE = (
    "A0",
    "Y@0",
    "K1@0",
    "A0*K1@0",
    "A0*Y@0",
    "Y@0*K1@0",
    "K1@1",
    "dN@1*A@1",
    "Y@1",
    "dN@1*K1@1",
    "dN@1*Y@1",
    "dN@1*A@1*K1@1",
    "dN@1*A@1*Y@1",
    "Y@2",
    "K1@2",
)
_STAGE2_CONFOUNDER_TERMS = ("K2@0", "K2@1", "K2@2")


def treatment_free_terms(outcome_model: str = "correct") -> dict[int, tuple[str, ...]]:
    """Stage-wise treatment-free predictor sets.

    The "correct" variant includes the confounder K2 at every measured
    time; the "wrong" variant omits K2 entirely.
    """
    if outcome_model not in MODEL_FLAGS:
        raise ValueError(f"outcome_model must be one of {MODEL_FLAGS}")
    extra1 = _STAGE1_CONFOUNDER_TERMS if outcome_model == "correct" else ()
    extra2 = _STAGE2_CONFOUNDER_TERMS if outcome_model == "correct" else ()
    return {
        1: _STAGE1_TREATMENT_FREE + extra1,
        2: _STAGE2_TREATMENT_FREE + extra2,
    }


def propensity_terms(weight_model: str = "correct") -> tuple[str, ...]:
    """Strategy-assignment covariates (stage-relative terms).

    The "wrong" variant omits the confounder K2.
    """
    if weight_model not in MODEL_FLAGS:
        raise ValueError(f"weight_model must be one of {MODEL_FLAGS}")
    if weight_model == "correct":
        return ("K1@t-1", "K2@t-1", "A@t-1", "Y@t-1")
    return ("K1@t-1", "A@t-1", "Y@t-1")


def blip_spec(outcome_model: str = "correct") -> BlipSpec:
    """The study's two-stage model specification."""
    return BlipSpec(
        stages=STAGES,
        visit_modifiers=("K1@t", "Y@t"),
        addon_modifiers=("K1@t", "Y@t"),
        treatment_free=treatment_free_terms(outcome_model),
    )


def default_roles(outcome_model: str = "correct") -> ColumnRoleMap:
    return ColumnRoleMap(
        confounders=("K1@t-1", "K2@t-1"),
        visit_covariates=("A@t-1", "Y@t-1"),
        visit_modifiers=("K1@t", "Y@t"),
        addon_modifiers=("K1@t", "Y@t"),
        treatment_free=treatment_free_terms(outcome_model),
    )


# --------------------------------------------------------------------------
# Policies and value
# --------------------------------------------------------------------------


def _decide_vector(b_v: np.ndarray, b_va: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    both = b_v + b_va
    addon = (both > 0) & (both > b_v)
    visit = addon | (b_v > 0)
    return visit.astype(float), addon.astype(float)


def true_optimal_policy() -> PolicyFunction:
    """The generator's own optimal rules (decision effects known exactly)."""

    def policy(t: int, state: Mapping[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        blips = TRUE_BLIPS[t]
        k1 = state[f"K1@{t}"]
        y = state[f"Y@{t}"]
        b_v = blips.visit[0] + blips.visit[1] * k1 + blips.visit[2] * y
        b_va = blips.addon[0] + blips.addon[1] * k1 + blips.addon[2] * y
        return _decide_vector(b_v, b_va)

    return policy


def vectorized_policy(regime: FittedRegime) -> PolicyFunction:
    """A fitted regime as a vectorized simulation policy."""
    by_stage = {sf.t: sf for sf in regime.stage_fits}

    def term_vector(name: str, state: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        value = np.ones(n)
        for factor in name.split("*"):
            if factor not in state:
                raise KeyError(f"policy state is missing {factor!r}")
            value = value * state[factor]
        return value

    def policy(t: int, state: Mapping[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        if t not in by_stage:
            raise KeyError(f"the regime has no decision rule at time {t}")
        stage = by_stage[t]
        n = state["A0"].shape[0]
        b_v = np.full(n, stage.visit_blip["intercept"])
        for name, coef in stage.visit_blip.items():
            if name != "intercept":
                b_v = b_v + coef * term_vector(name, state, n)
        b_va = np.full(n, stage.addon_blip["intercept"])
        for name, coef in stage.addon_blip.items():
            if name != "intercept":
                b_va = b_va + coef * term_vector(name, state, n)
        return _decide_vector(b_v, b_va)

    return policy


@dataclass(frozen=True)
class PolicyValue:
    """Mean final outcome under a policy, with its Monte Carlo uncertainty."""

    value: float
    mc_se: float
    n: int


def _carry_forward_inputs(policy: PolicyFunction) -> PolicyFunction:
    """Wrap a policy so it sees modifiers only as of the last visit.

    Mimics deployment where K1 and Y are measured at visits: on months the
    wrapped policy declined a visit, later decisions see the carried-forward
    values rather than the true current ones.  The true values still drive
    the underlying dynamics.
    """
    memory: dict[str, np.ndarray] = {}

    def wrapped(t: int, state: Mapping[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        if t == min(STAGES):
            memory["K1"] = np.array(state["K1@0"])
            memory["Y"] = np.array(state["Y@0"])
        view = dict(state)
        view[f"K1@{t}"] = memory["K1"]
        view[f"Y@{t}"] = memory["Y"]
        visit, addon = policy(t, view)
        seen = np.asarray(visit) == 1
        memory["K1"] = np.where(seen, state[f"K1@{t}"], memory["K1"])
        memory["Y"] = np.where(seen, state[f"Y@{t}"], memory["Y"])
        return visit, addon

    return wrapped


def value_function(
    config: DgmScenario,
    policy: PolicyFunction | FittedRegime | None = None,
    n_eval: int = 200_000,
    policy_inputs: str = "true",
) -> PolicyValue:
    """Mean final outcome over a fresh evaluation cohort.

    The evaluation cohort is drawn with a seed derived from the scenario
    seed (so it is disjoint from estimation cohorts at the same seed) and
    with missingness and censoring disabled — the value of a policy is a
    property of the full-data dynamics.  ``policy`` may be ``None``
    (observational assignment), a fitted regime, or a vectorized policy
    function; all use the same covariate draws (common random numbers).

    ``policy_inputs`` "true" (default) feeds the policy the true current
    modifiers; "carry-forward" feeds it the values as of its own last
    visit, mimicking deployment where declining a visit forgoes the
    measurement.
    """
    if policy_inputs not in ("true", "carry-forward"):
        raise ValueError("policy_inputs must be 'true' or 'carry-forward'")
    eval_seed = int(np.random.SeedSequence((config.seed, EVAL_SALT)).generate_state(1)[0])
    eval_config = replace(
        config, n=n_eval, seed=eval_seed, missingness="none", censoring="none"
    )
    if isinstance(policy, FittedRegime):
        policy = vectorized_policy(policy)
    if policy is not None and policy_inputs == "carry-forward":
        policy = _carry_forward_inputs(policy)
    cohort = generate_cohort(eval_config, policy=policy)
    y = cohort.y_final
    value = float(y.mean())
    mc_se = float(y.std(ddof=1) / np.sqrt(n_eval))
    return PolicyValue(value=value, mc_se=mc_se, n=n_eval)
