import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from survitr.core import Cohort, LinearRule, SmoothedLinearRule, StaticRule
from survitr.dgp import CovariateModel, generate_cohort, get_scenario, optimal_rule
from survitr.nuisance import CoxModel, PropensityModel, fit_nuisances
from survitr.value import (
    BatchValue,
    IPWWeights,
    OutcomePredictions,
    compute_weights,
    outcome_predictions,
    prepare_weights,
    value_hajek,
    value_ipw_ht,
    value_ipw_km,
    value_ipw_km_augmented,
)

TAU = 60


def unit_weights(n, tau=TAU, c=1.0):
    return IPWWeights(np.ones(n), np.full((n, tau), c), np.full(n, c), np.ones(n), tau)


def unweighted_km(z, delta, tau):
    s = 1.0
    for t in range(1, tau + 1):
        r = np.sum(z >= t)
        if r:
            s *= 1 - np.sum((z == t) & (delta == 1)) / r
    return s


def half_propensity():
    return PropensityModel(np.zeros(20))


def no_censoring():
    return CoxModel(np.zeros(20), np.zeros(61), 19)


def toy_cohort(n=3):
    return Cohort(np.arange(1, n + 1), np.ones(n, int), np.ones(n, int), np.zeros((n, 19)))


@pytest.fixture(scope="module")
def sim():
    c, _ = generate_cohort(get_scenario(2), CovariateModel(), 1200, np.random.default_rng(0))
    return c, fit_nuisances(c, with_outcome=True)


# weights


def test_weight_arithmetic():
    c = Cohort([5, 9], [1, 0], [1, 0], np.zeros((2, 19)))
    w = compute_weights(c, StaticRule(1), half_propensity(), no_censoring())
    np.testing.assert_array_equal(w.values[0], 2.0)
    np.testing.assert_array_equal(w.values[1], 0.0)
    assert w.alive.tolist() == [2.0, 0.0]


def test_weights_partition_under_complement_rule(sim):
    c, nuis = sim
    theta = np.random.default_rng(1).normal(size=20)
    w = compute_weights(c, LinearRule(theta), nuis.propensity, nuis.censor)
    wc = compute_weights(c, LinearRule(-theta), nuis.propensity, nuis.censor)
    pos, pos_c = w.values[:, 0] > 0, wc.values[:, 0] > 0
    assert np.all(pos ^ pos_c)
    assert np.all(w.values >= 0)
    # non-decreasing in s because P(C >= s) is non-increasing
    assert np.all(np.diff(w.values, axis=1) >= 0)


def test_weights_respect_clipping(sim):
    c, nuis = sim
    base = prepare_weights(c, nuis.propensity, nuis.censor)
    assert base.inv_treat.max() <= 100 and base.inv_censor.max() <= 100
    with pytest.raises(ValueError):
        prepare_weights(c, nuis.propensity, nuis.censor, tau=61)
    with pytest.raises(ValueError):
        compute_weights(c, StaticRule(1), base=base, tau=30)


# IPW-KM


def test_km_hand_example():
    assert value_ipw_km(toy_cohort(), unit_weights(3, 2), 2) == pytest.approx(1 / 3, abs=1e-15)


def test_km_without_events_is_one():
    c = Cohort([10, 61], [0, 0], [1, 1], np.zeros((2, 19)))
    assert value_ipw_km(c, unit_weights(2)) == 1.0


def test_km_all_weights_zero_is_missing():
    w = IPWWeights(np.zeros(3), np.zeros((3, 2)), np.zeros(3), np.ones(3), 2)
    assert np.isnan(value_ipw_km(toy_cohort(), w, 2))


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_km_constant_weights_equal_unweighted_km(seed, c):
    rng = np.random.default_rng(seed)
    n = 40
    z, d = rng.integers(1, 62, n), rng.integers(0, 2, n)
    cohort = Cohort(z, d, np.ones(n, int), np.zeros((n, 19)))
    assert value_ipw_km(cohort, unit_weights(n, c=c)) == pytest.approx(
        unweighted_km(z, d, TAU), rel=1e-12, abs=1e-15)


def test_km_without_censoring_is_survival_fraction():
    rng = np.random.default_rng(2)
    z = rng.integers(1, 62, 100)
    c = Cohort(z, (z <= 60).astype(int), np.ones(100, int), np.zeros((100, 19)))
    assert value_ipw_km(c, unit_weights(100)) == pytest.approx(np.mean(z > TAU), abs=1e-14)


# HT and Hajek


def test_ht_can_exceed_one_and_hajek_normalises():
    c = Cohort([61, 61], [0, 0], [1, 1], np.zeros((2, 19)))
    w = IPWWeights(np.ones(2), np.full((2, TAU), 2.0), np.full(2, 2.0), np.full(2, 2.0), TAU)
    assert value_ipw_ht(c, w) == 2.0
    assert value_hajek(c, w) == 1.0


def test_ht_zero_when_all_censored_before_tau():
    c = Cohort([3, 40], [0, 0], [1, 1], np.zeros((2, 19)))
    assert value_ipw_ht(c, unit_weights(2)) == 0.0


def test_hajek_equals_ht_when_mass_is_n(sim):
    c, nuis = sim
    w = compute_weights(c, StaticRule(1), nuis.propensity, nuis.censor)
    unit = IPWWeights(w.match, w.values, w.alive, np.ones(c.n) * c.n / w.match.sum(), TAU)
    assert value_hajek(c, unit) == pytest.approx(value_ipw_ht(c, unit), rel=1e-14)
    zero = IPWWeights(np.zeros(2), np.zeros((2, TAU)), np.zeros(2), np.ones(2), TAU)
    assert np.isnan(value_hajek(toy_cohort(2), zero))


def test_estimator_bounds(sim):
    c, nuis = sim
    for rule in (StaticRule(0), StaticRule(1), optimal_rule(get_scenario(2))):
        w = compute_weights(c, rule, nuis.propensity, nuis.censor)
        assert 0 <= value_ipw_km(c, w) <= 1
        assert value_ipw_ht(c, w) >= 0
        assert value_hajek(c, w) >= 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(sim, seed):
    c, nuis = sim
    perm = np.random.default_rng(seed).permutation(c.n)
    cp = c.subset(perm)
    rule = optimal_rule(get_scenario(2))
    w = compute_weights(c, rule, nuis.propensity, nuis.censor)
    wp = compute_weights(cp, rule, nuis.propensity, nuis.censor)
    for f in (value_ipw_km, value_ipw_ht, value_hajek):
        assert f(cp, wp) == pytest.approx(f(c, w), rel=1e-12)


# augmentation


def test_augmentation_vanishes_with_zero_predictor(sim):
    c, nuis = sim
    rule = optimal_rule(get_scenario(2))
    w = compute_weights(c, rule, nuis.propensity, nuis.censor)
    z = np.zeros((c.n, TAU))
    zero = OutcomePredictions(z, z, z, z, np.ones(c.n))
    assert value_ipw_km_augmented(c, rule, w, zero) == pytest.approx(value_ipw_km(c, w), rel=1e-12)


def test_augmentation_vanishes_with_unit_weights(sim):
    c, nuis = sim
    preds = outcome_predictions(c, nuis.outcome, nuis.censor)
    got = value_ipw_km_augmented(c, StaticRule(1), unit_weights(c.n), preds)
    assert got == pytest.approx(unweighted_km(c.z, c.delta, TAU), rel=1e-12)


def test_augmented_close_to_plain_at_optimum():
    spec = get_scenario(2)
    rule = optimal_rule(spec)
    diffs = []
    for rep in range(4):
        c, _ = generate_cohort(spec, CovariateModel(), 2500, np.random.default_rng([3, rep]))
        nuis = fit_nuisances(c, with_outcome=True)
        w = compute_weights(c, rule, nuis.propensity, nuis.censor)
        aug = value_ipw_km_augmented(c, rule, w, nuis.outcome, nuis.censor)
        diffs.append(aug - value_ipw_km(c, w))
    assert abs(np.mean(diffs)) < 0.02


def test_augmented_requires_censor_model_for_raw_outcome(sim):
    c, nuis = sim
    w = compute_weights(c, StaticRule(1), nuis.propensity, nuis.censor)
    with pytest.raises(ValueError):
        value_ipw_km_augmented(c, StaticRule(1), w, nuis.outcome)


def test_soft_rule_weights_are_mixtures(sim):
    c, nuis = sim
    theta = np.random.default_rng(4).normal(size=20) * 0.05
    soft = SmoothedLinearRule(theta, 0.5)
    w = compute_weights(c, soft, nuis.propensity, nuis.censor, soft=True)
    d = soft.soft(c.x)
    np.testing.assert_allclose(w.match, np.where(c.a == 1, d, 1 - d))
    hard = compute_weights(c, soft, nuis.propensity, nuis.censor)
    assert set(np.unique(hard.match)) <= {0.0, 1.0}


# batch evaluation


@pytest.mark.parametrize("augmented", [False, True])
@pytest.mark.parametrize("smooth", [False, True])
def test_batch_matches_direct(sim, augmented, smooth):
    c, nuis = sim
    base = prepare_weights(c, nuis.propensity, nuis.censor)
    preds = outcome_predictions(c, nuis.outcome, nuis.censor) if augmented else None
    batch = BatchValue(c, base, preds)
    rng = np.random.default_rng(5)
    thetas = rng.normal(size=(6, 20)) * 0.05
    rules = [SmoothedLinearRule(t, 0.3) for t in thetas]
    decisions = np.array([r.soft(c.x) if smooth else r.decide(c.x) for r in rules], dtype=float)
    got = batch.evaluate(decisions)
    for r, v in zip(rules, got):
        w = compute_weights(c, r, base=base, soft=smooth)
        if augmented:
            want = value_ipw_km_augmented(c, r, w, preds, soft=smooth)
        else:
            want = value_ipw_km(c, w)
        assert v == pytest.approx(want, rel=1e-12, abs=1e-14)


def test_batch_reports_missing_for_empty_match():
    c = Cohort([5, 9], [1, 0], [1, 1], np.zeros((2, 19)))
    base = prepare_weights(c, half_propensity(), no_censoring())
    assert np.isnan(BatchValue(c, base).evaluate(np.zeros((1, 2)))[0])
