"""Carry-forward completion, sequential multiple imputation, and pooling."""

from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import make_cohort
from dmar import simulate
from dmar.engine import fit_regime
from dmar.missing import (
    ImputationConfig,
    ImputationError,
    locf_complete,
    pool_regimes,
    sequential_impute,
)
from dmar.panel import FILL_IMPUTED, FILL_LOCF, FILL_NONE

# ---------------------------------------------------------------------------
# Last observation carried forward
# ---------------------------------------------------------------------------


def gappy_cohort():
    n, tau = 3, 3
    y = np.array(
        [
            [5.0, np.nan, np.nan, np.nan],
            [3.0, np.nan, 7.0, np.nan],
            [1.0, 2.0, 3.0, np.nan],
        ]
    )
    columns = {
        "K1": np.tile([0.5, 1.5, 2.5, np.nan], (n, 1)),
        "K2": np.tile([10.0, 11.0, 12.0, np.nan], (n, 1)),
        "Y": y,
    }
    return make_cohort(n=n, tau=tau, columns=columns)


def test_locf_fills_forward_hand_values():
    done = locf_complete(gappy_cohort())
    y = done.column("Y")
    assert y[0, :3].tolist() == [5.0, 5.0, 5.0]
    assert y[1, :3].tolist() == [3.0, 3.0, 7.0]
    assert y[2, :3].tolist() == [1.0, 2.0, 3.0]
    assert np.isnan(y[:, 3]).all()  # outcome-time cells stay empty


def test_locf_marks_fills_and_preserves_observed_flags():
    before = gappy_cohort()
    done = locf_complete(before)
    fills = done.filled("Y")
    assert fills[0].tolist() == [FILL_NONE, FILL_LOCF, FILL_LOCF, FILL_NONE]
    assert fills[1].tolist() == [FILL_NONE, FILL_LOCF, FILL_NONE, FILL_NONE]
    assert fills[2].tolist() == [FILL_NONE] * 4
    assert np.array_equal(done.observed("Y"), before.observed("Y"))
    assert np.array_equal(done.filled("K1"), np.zeros((3, 4), dtype=fills.dtype))
    # original cohort untouched
    assert np.isnan(before.column("Y")[0, 1])


def test_locf_skips_cells_after_exit():
    xi = np.array([[1, 1, 0, 0]])
    y = np.array([[4.0, np.nan, np.nan, np.nan]])
    k = np.array([[0.0, 1.0, np.nan, np.nan]])
    c = make_cohort(
        n=1, xi=xi, columns={"K1": k, "K2": k.copy(), "Y": y}, y_final=np.array([np.nan])
    )
    done = locf_complete(c)
    assert done.column("Y")[0].tolist()[:2] == [4.0, 4.0]
    assert np.isnan(done.column("Y")[0, 2])  # out of the study: not filled
    assert done.filled("Y")[0].tolist() == [FILL_NONE, FILL_LOCF, FILL_NONE, FILL_NONE]


def test_locf_missing_baseline_is_an_error():
    y = np.array([[np.nan, 2.0, 3.0, np.nan]])
    k = np.array([[0.0, 1.0, 2.0, np.nan]])
    c = make_cohort(n=1, columns={"K1": k, "K2": k.copy(), "Y": y})
    with pytest.raises(ImputationError):
        locf_complete(c)


def test_locf_on_fully_observed_cohort_changes_nothing():
    c = simulate.generate_cohort(simulate.scenario("A", n=500, seed=1))
    done = locf_complete(c)
    for name in c.column_names:
        a, b = c.column(name), done.column(name)
        assert np.array_equal(np.isnan(a), np.isnan(b))
        assert np.allclose(a[~np.isnan(a)], b[~np.isnan(b)], rtol=0, atol=0)
        assert not done.filled(name).any()


# ---------------------------------------------------------------------------
# Sequential multiple imputation
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cohort_b():
    return simulate.generate_cohort(simulate.scenario("B", n=2500, seed=13))


def test_mar_cohort_has_missing_modifiers(cohort_b):
    assert not cohort_b.observed("K1")[:, 1].all()
    assert not cohort_b.observed("Y")[:, 2].all()
    assert cohort_b.observed("K2").all() or cohort_b.observed("K2")[:, :3].all()


def test_impute_returns_m_completed_cohorts(cohort_b):
    cfg = ImputationConfig(m=3, noise=True, seed=11)
    done = sequential_impute(cohort_b, cfg)
    assert len(done) == 3
    for j, c in enumerate(done):
        assert c.meta["imputation_replicate"] == j
        for name in c.column_names:
            vals = c.column(name)
            alive = c.xi == 1
            assert np.isfinite(vals[:, :3][alive[:, :3]]).all()


def test_impute_touches_only_originally_missing_cells(cohort_b):
    cfg = ImputationConfig(m=2, noise=True, seed=11)
    done = sequential_impute(cohort_b, cfg)
    for c in done:
        for name in cohort_b.column_names:
            before = cohort_b.column(name)
            after = c.column(name)
            obs = cohort_b.observed(name)
            assert np.array_equal(before[obs], after[obs])
            tau = cohort_b.tau
            was_missing = ~obs[:, :tau] & (cohort_b.xi[:, :tau] == 1)
            assert np.array_equal(c.filled(name)[:, :tau] == FILL_IMPUTED, was_missing)
            assert np.array_equal(c.observed(name), obs)
    # two replicates draw different noise
    assert not np.array_equal(done[0].column("K1"), done[1].column("K1"), equal_nan=True)


def test_impute_is_deterministic_in_the_seed(cohort_b):
    cfg = ImputationConfig(m=2, noise=True, seed=21)
    one = sequential_impute(cohort_b, cfg)
    two = sequential_impute(cohort_b, cfg)
    for a, b in zip(one, two):
        for name in a.column_names:
            assert np.array_equal(a.column(name), b.column(name), equal_nan=True)
    other = sequential_impute(cohort_b, ImputationConfig(m=2, noise=True, seed=22))
    assert not np.array_equal(
        one[0].column("K1"), other[0].column("K1"), equal_nan=True
    )


def test_impute_without_noise_gives_identical_replicates(cohort_b):
    done = sequential_impute(cohort_b, ImputationConfig(m=3, noise=False, seed=5))
    for name in cohort_b.column_names:
        assert np.array_equal(done[0].column(name), done[1].column(name), equal_nan=True)
        assert np.array_equal(done[0].column(name), done[2].column(name), equal_nan=True)


def test_impute_recovers_exact_linear_truth_without_noise():
    n = 400
    rng = np.random.default_rng(3)
    k1 = rng.normal(size=(n, 4))
    k2 = rng.normal(size=(n, 4))
    a0 = rng.integers(0, 2, n).astype(float)
    a = np.zeros((n, 4), dtype=np.int8)
    a[:, 1] = rng.integers(0, 2, n)
    a[:, 2] = rng.integers(0, 2, n)
    y = np.empty((n, 4))
    y[:, 0] = rng.normal(size=n)
    y[:, 1] = 2.0 + 0.5 * a0 + 0.3 * k1[:, 0] - 0.7 * k2[:, 0] + 0.2 * y[:, 0]
    y[:, 2] = rng.normal(size=n)
    k1[:, 3] = k2[:, 3] = y[:, 3] = np.nan
    truth = y[:, 1].copy()
    hidden = np.zeros((n, 4), dtype=bool)
    hidden[rng.random(n) < 0.4, 1] = True
    y_obs = y.copy()
    y_obs[hidden] = np.nan
    c = make_cohort(n=n, a=a, columns={"K1": k1, "K2": k2, "Y": y_obs}, a0=a0)
    done = sequential_impute(c, ImputationConfig(m=1, noise=False, seed=0))[0]
    assert np.allclose(done.column("Y")[:, 1], truth, atol=1e-8)


def test_impute_on_fully_observed_cohort_is_a_no_op():
    c = simulate.generate_cohort(simulate.scenario("A", n=400, seed=9))
    done = sequential_impute(c, ImputationConfig(m=2, noise=True, seed=0))
    for rep in done:
        for name in c.column_names:
            assert np.array_equal(rep.column(name), c.column(name), equal_nan=True)
            assert not rep.filled(name).any()


def test_impute_missing_baseline_is_an_error():
    y = np.array([[np.nan, 2.0, 3.0, np.nan], [1.0, 2.0, 3.0, np.nan]])
    k = np.array([[0.0, 1.0, 2.0, np.nan], [0.0, 1.0, 2.0, np.nan]])
    c = make_cohort(n=2, columns={"K1": k, "K2": k.copy(), "Y": y})
    with pytest.raises(ImputationError):
        sequential_impute(c, ImputationConfig(m=1))


def test_impute_needs_some_observed_values_per_cell():
    y = np.array([[1.0, np.nan, 3.0, np.nan], [1.0, np.nan, 3.0, np.nan]])
    k = np.array([[0.0, 1.0, 2.0, np.nan], [0.5, 1.0, 2.0, np.nan]])
    c = make_cohort(n=2, columns={"K1": k, "K2": k.copy(), "Y": y})
    with pytest.raises(ImputationError):
        sequential_impute(c, ImputationConfig(m=1))


def test_impute_writes_manifest(cohort_b, tmp_path):
    path = tmp_path / "fills.json"
    sequential_impute(cohort_b, ImputationConfig(m=2, noise=True, seed=4), manifest_path=path)
    doc = json.loads(path.read_text())
    assert doc["m"] == 2 and doc["seed"] == 4 and doc["noise"] is True
    assert len(doc["fills"]) == 2
    missing_k1_t1 = int((~cohort_b.observed("K1")[:, 1] & (cohort_b.xi[:, 1] == 1)).sum())
    assert doc["fills"][0]["counts"]["K1@1"] == missing_k1_t1


def test_invalid_imputation_count_rejected():
    with pytest.raises(ValueError):
        ImputationConfig(m=0)


# ---------------------------------------------------------------------------
# Pooling fitted regimes across completed datasets
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def imputed_regimes(cohort_b):
    spec = simulate.blip_spec("correct")
    done = sequential_impute(cohort_b, ImputationConfig(m=2, noise=True, seed=3))
    return [fit_regime(c, spec, method="QLOMA") for c in done]


def test_pool_averages_coefficients(imputed_regimes):
    pooled = pool_regimes(imputed_regimes)
    r1, r2 = imputed_regimes
    for i, sf in enumerate(pooled.stage_fits):
        for block in ("treatment_free", "visit_blip", "addon_blip"):
            for name, value in getattr(sf, block).items():
                a = getattr(r1.stage_fits[i], block)[name]
                b = getattr(r2.stage_fits[i], block)[name]
                assert value == pytest.approx((a + b) / 2, rel=1e-12)
        assert sf.diagnostics["pooled_from"] == 2
    assert pooled.meta["pooled_m"] == 2
    assert pooled.method == "QLOMA"


def test_pool_is_order_invariant(imputed_regimes):
    r1, r2 = imputed_regimes
    a = pool_regimes([r1, r2])
    b = pool_regimes([r2, r1])
    for sf_a, sf_b in zip(a.stage_fits, b.stage_fits):
        assert sf_a.visit_blip == sf_b.visit_blip
        assert sf_a.addon_blip == sf_b.addon_blip
        assert sf_a.treatment_free == sf_b.treatment_free


def test_pool_of_one_is_identity(imputed_regimes):
    r1 = imputed_regimes[0]
    pooled = pool_regimes([r1])
    for sf_a, sf_b in zip(pooled.stage_fits, r1.stage_fits):
        assert sf_a.visit_blip == sf_b.visit_blip


def test_pool_rejects_mismatched_inputs(cohort_b, imputed_regimes):
    spec = simulate.blip_spec("correct")
    done = sequential_impute(cohort_b, ImputationConfig(m=1, noise=True, seed=3))
    woma = fit_regime(done[0], spec, method="WOMA", weight_kind="overlap")
    with pytest.raises(ValueError):
        pool_regimes([imputed_regimes[0], woma])
    wrong_spec = simulate.blip_spec("wrong")
    other = fit_regime(done[0], wrong_spec, method="QLOMA")
    with pytest.raises(ValueError):
        pool_regimes([imputed_regimes[0], other])
    with pytest.raises(ValueError):
        pool_regimes([])
