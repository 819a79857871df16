"""The structural data generator: determinism, moments, mechanisms, value."""

from __future__ import annotations

import numpy as np
import pytest
import scipy.special

from dmar import simulate
from dmar.engine import fit_regime
from dmar.simulate import (
    ADDON_LOGIT,
    STAGES,
    TRUE_BLIPS,
    VISIT_LOGIT,
    DgmScenario,
    generate_cohort,
    scenario,
    true_optimal_policy,
    value_function,
    vectorized_policy,
)

# ---------------------------------------------------------------------------
# Configuration validation and fixed truths
# ---------------------------------------------------------------------------


def test_scenario_presets_and_validation():
    cfg = scenario("B", n=10, seed=1)
    assert cfg.missingness == "MAR" and cfg.censoring == "none"
    assert scenario("C", n=10, seed=1).censoring == "time-fixed"
    assert scenario("D", n=10, seed=1).censoring == "time-dependent"
    with pytest.raises(ValueError):
        scenario("E", n=10, seed=1)
    with pytest.raises(ValueError):
        DgmScenario(n=0, seed=1)
    with pytest.raises(ValueError):
        DgmScenario(n=10, seed=1, missingness="MCAR")
    with pytest.raises(ValueError):
        DgmScenario(n=10, seed=1, censoring="sometimes")
    with pytest.raises(ValueError):
        DgmScenario(n=10, seed=1, outcome_model="other")


def test_generating_decision_effects_are_pinned():
    assert TRUE_BLIPS[2].visit == (1.0, 1.0, 0.01)
    assert TRUE_BLIPS[2].addon == (1.5, -1.2, 0.01)
    assert TRUE_BLIPS[1].visit == (0.0, 0.18, 0.002)
    assert TRUE_BLIPS[1].addon == (-1.4, 0.1, 0.04)


def test_working_model_term_sets():
    tf = simulate.treatment_free_terms("correct")
    assert len(tf[1]) == 7 and "K2@0" in tf[1]
    assert len(tf[2]) == 18 and {"K2@0", "K2@1", "K2@2"} <= set(tf[2])
    wrong = simulate.treatment_free_terms("wrong")
    assert len(wrong[1]) == 6 and len(wrong[2]) == 15
    assert not any("K2" in term for terms in wrong.values() for term in terms)
    assert simulate.propensity_terms("correct") == ("K1@t-1", "K2@t-1", "A@t-1", "Y@t-1")
    assert simulate.propensity_terms("wrong") == ("K1@t-1", "A@t-1", "Y@t-1")
    spec = simulate.blip_spec("correct")
    assert spec.stages == (1, 2)
    assert spec.visit_modifiers == ("K1@t", "Y@t")


# ---------------------------------------------------------------------------
# Determinism
# ---------------------------------------------------------------------------


def assert_cohorts_identical(a, b):
    assert np.array_equal(a.dn, b.dn) and np.array_equal(a.a, b.a)
    assert np.array_equal(a.xi, b.xi)
    assert np.array_equal(a.a0, b.a0)
    assert np.array_equal(a.y_final, b.y_final, equal_nan=True)
    for name in a.column_names:
        assert np.array_equal(a.column(name), b.column(name), equal_nan=True)


def test_generation_is_bit_identical_for_a_fixed_seed():
    cfg = scenario("A", n=3000, seed=123)
    assert_cohorts_identical(generate_cohort(cfg), generate_cohort(cfg))


def test_different_seeds_differ():
    a = generate_cohort(scenario("A", n=1000, seed=1))
    b = generate_cohort(scenario("A", n=1000, seed=2))
    assert not np.array_equal(a.y_final, b.y_final)


def test_policy_mode_is_deterministic_and_labeled():
    cfg = scenario("A", n=2000, seed=9)
    pol = true_optimal_policy()
    one = generate_cohort(cfg, policy=pol)
    two = generate_cohort(cfg, policy=true_optimal_policy())
    assert_cohorts_identical(one, two)
    assert one.meta["policy"] == "supplied"
    assert generate_cohort(cfg).meta["policy"] == "observational"


def test_policy_and_observational_share_covariate_noise():
    cfg = scenario("A", n=2000, seed=9)
    obs = generate_cohort(cfg)
    pol = generate_cohort(cfg, policy=true_optimal_policy())
    # baseline and month-1 state precede any decision, so they are shared
    assert np.array_equal(obs.a0, pol.a0)
    assert np.array_equal(obs.column("K1")[:, :2], pol.column("K1")[:, :2])
    assert np.array_equal(obs.column("Y")[:, :2], pol.column("Y")[:, :2])


# ---------------------------------------------------------------------------
# Marginal moments and assignment mechanisms
# ---------------------------------------------------------------------------


def test_baseline_moments(cohort_a_full):
    c = cohort_a_full
    assert c.n == 50_000
    assert abs(c.column("Y")[:, 0].mean() - 120.0) < 0.2
    assert abs(c.column("K1")[:, 0].mean() - 4.0) < 0.06
    assert abs(c.column("K2")[:, 0].mean() - 5.0) < 0.03
    assert abs(c.a0.mean() - 0.5) < 0.01
    assert np.array_equal(c.dn[:, 0], np.ones(c.n, dtype=np.int8))
    assert np.array_equal(c.a[:, 0].astype(float), c.a0)


def test_visit_rates_match_the_assignment_model(cohort_a_full):
    c = cohort_a_full
    for t in STAGES:
        state = {
            "K1@0": c.column("K1")[:, 0],
            "K2@0": c.column("K2")[:, 0],
            "Y@0": c.column("Y")[:, 0],
            "A0": c.a0,
            f"K1@{t - 1}": c.column("K1")[:, t - 1],
            f"K2@{t - 1}": c.column("K2")[:, t - 1],
            f"Y@{t - 1}": c.column("Y")[:, t - 1],
            f"A@{t - 1}": c.a[:, t - 1].astype(float),
        }
        p_visit = scipy.special.expit(simulate._eval_terms(VISIT_LOGIT[t], state, c.n))
        observed_rate = c.dn[:, t].mean()
        assert abs(observed_rate - p_visit.mean()) < 4 * np.sqrt(0.25 / c.n)
        visited = c.dn[:, t] == 1
        state_t = dict(state)
        state_t.update(
            {
                f"K1@{t}": c.column("K1")[:, t],
                f"K2@{t}": c.column("K2")[:, t],
                f"Y@{t}": c.column("Y")[:, t],
            }
        )
        p_addon = scipy.special.expit(simulate._eval_terms(ADDON_LOGIT[t], state_t, c.n))
        addon_rate = c.a[visited, t].mean()
        assert abs(addon_rate - p_addon[visited].mean()) < 4 * np.sqrt(
            0.25 / visited.sum()
        )


def test_all_three_strategies_clear_the_positivity_floor(cohort_a_full):
    for t in STAGES:
        cats = cohort_a_full.strategy_category(t)
        freqs = np.bincount(cats, minlength=3) / cohort_a_full.n
        assert freqs.min() > 0.01


# ---------------------------------------------------------------------------
# Missingness and censoring mechanisms
# ---------------------------------------------------------------------------


def test_scenario_a_is_fully_observed(cohort_a_full):
    c = cohort_a_full
    for name in c.column_names:
        assert c.observed(name)[:, : c.tau].all()
    assert np.isfinite(c.y_final).all()
    assert (c.xi == 1).all()


def test_mar_missingness_exactly_on_unvisited_months():
    c = generate_cohort(scenario("B", n=5000, seed=31))
    assert c.meta["missingness"] == "MAR"
    for t in STAGES:
        no_visit = c.dn[:, t] == 0
        for name in ("K1", "Y"):
            assert not c.observed(name)[no_visit, t].any()
            assert c.observed(name)[~no_visit, t].all()
            assert np.isnan(c.column(name)[no_visit, t]).all()
        assert c.observed("K2")[:, t].all()
    assert c.observed("K1")[:, 0].all() and c.observed("Y")[:, 0].all()
    missing_frac = (~c.observed("K1")[:, 2]).mean()
    assert missing_frac == pytest.approx(1 - c.dn[:, 2].mean(), abs=1e-12)


def test_mar_pattern_depends_only_on_visits():
    # identical covariate streams: scenario B is scenario A with cells hidden
    a = generate_cohort(scenario("A", n=4000, seed=77))
    b = generate_cohort(scenario("B", n=4000, seed=77))
    assert np.array_equal(a.dn, b.dn)
    obs = b.observed("K1")
    assert np.array_equal(
        a.column("K1")[obs], b.column("K1")[obs]
    )


def test_time_fixed_censoring_mechanics():
    c = generate_cohort(scenario("C", n=20_000, seed=6))
    rate = c.meta["censoring_rate"]
    assert rate == pytest.approx((c.xi[:, 3] == 0).mean(), abs=1e-12)
    assert 0.18 < rate < 0.32
    early = c.xi[:, 2] == 0
    assert early.any()
    assert np.isnan(c.column("K1")[early, 2]).all()
    assert np.isnan(c.y_final[c.xi[:, 3] == 0]).all()
    assert np.isfinite(c.y_final[c.xi[:, 3] == 1]).all()
    # censoring is monotone: out at 2 implies out at 3
    assert not ((c.xi[:, 2] == 0) & (c.xi[:, 3] == 1)).any()


def test_time_dependent_censoring_mechanics():
    c = generate_cohort(scenario("D", n=20_000, seed=6))
    rate = c.meta["censoring_rate"]
    assert rate == pytest.approx((c.xi[:, 3] == 0).mean(), abs=1e-12)
    assert 0.02 < rate < 0.2
    assert (c.xi[:, 2] == 0).any()
    assert not ((c.xi[:, 2] == 0) & (c.xi[:, 3] == 1)).any()


def test_uncensored_scenarios_have_no_censoring_metadata():
    c = generate_cohort(scenario("A", n=200, seed=0))
    assert "censoring_rate" not in c.meta


# ---------------------------------------------------------------------------
# Supplied-policy validation
# ---------------------------------------------------------------------------


def test_policy_output_validation():
    cfg = scenario("A", n=50, seed=3)

    def wrong_shape(t, state):
        return np.ones(10), np.zeros(10)

    def non_binary(t, state):
        n = state["A0"].shape[0]
        return np.full(n, 0.5), np.zeros(n)

    def addon_without_visit(t, state):
        n = state["A0"].shape[0]
        return np.zeros(n), np.ones(n)

    for bad in (wrong_shape, non_binary, addon_without_visit):
        with pytest.raises(ValueError):
            generate_cohort(cfg, policy=bad)


def test_carry_forward_views_lag_unvisited_measurements():
    views = {}

    def recording_never_visit(t, state):
        views[t] = state
        n = state["A0"].shape[0]
        return np.zeros(n), np.zeros(n)

    value_function(
        scenario("A", n=500, seed=8),
        policy=recording_never_visit,
        n_eval=500,
        policy_inputs="carry-forward",
    )
    assert np.array_equal(views[1]["K1@1"], views[1]["K1@0"])
    assert np.array_equal(views[2]["K1@2"], views[2]["K1@0"])
    assert np.array_equal(views[2]["Y@2"], views[2]["Y@0"])

    views.clear()

    def recording_always_visit(t, state):
        views[t] = state
        n = state["A0"].shape[0]
        return np.ones(n), np.zeros(n)

    value_function(
        scenario("A", n=500, seed=8),
        policy=recording_always_visit,
        n_eval=500,
        policy_inputs="carry-forward",
    )
    # visiting at month 1 reveals the month-1 values to the month-2 decision
    assert np.array_equal(views[2]["K1@2"], views[2]["K1@1"])


# ---------------------------------------------------------------------------
# Policy value
# ---------------------------------------------------------------------------


def test_value_function_is_deterministic():
    cfg = scenario("A", n=100, seed=5)
    one = value_function(cfg, None, n_eval=20_000)
    two = value_function(cfg, None, n_eval=20_000)
    assert one.value == two.value and one.mc_se == two.mc_se
    assert one.mc_se > 0 and one.n == 20_000


def test_value_ignores_estimation_scenario_nuisances():
    # the value of a policy is a full-data property: the evaluation cohort
    # drops missingness and censoring, so all presets agree at a seed
    for preset in ("B", "C", "D"):
        v = value_function(scenario(preset, n=100, seed=5), None, n_eval=5000)
        assert v.value == value_function(scenario("A", n=100, seed=5), None, n_eval=5000).value


def test_true_optimal_policy_beats_observational_assignment():
    cfg = scenario("A", n=100, seed=14)
    obs = value_function(cfg, None, n_eval=60_000)
    opt = value_function(cfg, true_optimal_policy(), n_eval=60_000)
    assert opt.value > obs.value + 5.0


def test_mimicking_the_observational_assignment_reproduces_its_value():
    cfg = scenario("A", n=100, seed=25)

    def mimic(t, state):
        rng = np.random.default_rng((555, t))
        n = state["A0"].shape[0]
        p_visit = scipy.special.expit(simulate._eval_terms(VISIT_LOGIT[t], state, n))
        p_addon = scipy.special.expit(simulate._eval_terms(ADDON_LOGIT[t], state, n))
        visit = (rng.random(n) < p_visit).astype(float)
        addon = visit * (rng.random(n) < p_addon).astype(float)
        return visit, addon

    obs = value_function(cfg, None, n_eval=100_000)
    mim = value_function(cfg, mimic, n_eval=100_000)
    assert abs(obs.value - mim.value) < 0.25


def test_value_accepts_fitted_regimes_directly():
    cohort = generate_cohort(scenario("A", n=8000, seed=33))
    regime = fit_regime(cohort, simulate.blip_spec("correct"), method="QLOMA")
    cfg = scenario("A", n=8000, seed=33)
    direct = value_function(cfg, regime, n_eval=20_000)
    wrapped = value_function(cfg, vectorized_policy(regime), n_eval=20_000)
    assert direct.value == wrapped.value
    assert direct.value > value_function(cfg, None, n_eval=20_000).value


def test_carry_forward_inputs_cannot_beat_true_inputs():
    cfg = scenario("A", n=100, seed=14)
    pol = true_optimal_policy()
    true_in = value_function(cfg, pol, n_eval=60_000)
    stale_in = value_function(cfg, pol, n_eval=60_000, policy_inputs="carry-forward")
    assert stale_in.value < true_in.value + 0.1
    with pytest.raises(ValueError):
        value_function(cfg, pol, n_eval=100, policy_inputs="lagged")
