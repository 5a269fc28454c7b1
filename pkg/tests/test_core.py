import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from survitr.core import (
    Cohort,
    CrossFitRule,
    FoldAssignment,
    LinearRule,
    ObservedRecord,
    SmoothedLinearRule,
    StaticRule,
    StepSurvivalCurve,
    decide_cohort,
    evaluate_rule,
    evaluate_rule_soft,
    normal_cdf,
    rule_from_dict,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def phi_erf(z):
    """Independent standard normal CDF."""
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def make_cohort(n=6, seed=0):
    rng = np.random.default_rng(seed)
    x = np.column_stack([rng.integers(0, 2, (n, 15)), rng.normal(size=(n, 4))])
    return Cohort(rng.integers(1, 62, n), rng.integers(0, 2, n), rng.integers(0, 2, n), x)


# records and cohorts


def test_observed_record_validation():
    ObservedRecord(1, 0, (0.0,) * 15 + (1.2,) * 4, 1)
    with pytest.raises(ValueError):
        ObservedRecord(0, 0, (0.0,) * 19, 1)
    with pytest.raises(ValueError):
        ObservedRecord(62, 0, (0.0,) * 19, 1)
    with pytest.raises(ValueError):
        ObservedRecord(5, 2, (0.0,) * 19, 1)
    with pytest.raises(ValueError):
        ObservedRecord(5, 1, (0.0,) * 19, -1)
    with pytest.raises(ValueError):
        ObservedRecord(5, 1, (0.5,) + (0.0,) * 18, 0)


def test_cohort_rejects_bad_input():
    with pytest.raises(ValueError):
        Cohort([1], [0], [0], np.zeros((1, 19)))
    with pytest.raises(ValueError):
        Cohort([1, 2], [0, 1], [0], np.zeros((2, 19)))
    with pytest.raises(ValueError):
        Cohort([1, 70], [0, 1], [0, 1], np.zeros((2, 19)))
    with pytest.raises(ValueError):
        Cohort.from_records([ObservedRecord(1, 0, (0.0,) * 19, 0),
                             ObservedRecord(1, 0, (0.0,) * 18, 0)])


def test_cohort_is_read_only_and_records_roundtrip():
    c = make_cohort()
    with pytest.raises(ValueError):
        c.z[0] = 3
    back = Cohort.from_records(c.records)
    np.testing.assert_array_equal(back.x, c.x)
    np.testing.assert_array_equal(back.z, c.z)
    assert c.subset([0, 2]).n == 2


def test_cohort_csv_roundtrip(tmp_path):
    c = make_cohort(20)
    path = tmp_path / "c.csv"
    c.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "z,delta,a," + ",".join(f"x{j}" for j in range(1, 20))
    first = path.read_text().splitlines()[1].split(",")
    assert all("." not in v for v in first[:18])  # integer columns
    back = Cohort.from_csv(path)
    np.testing.assert_array_equal(back.x, c.x)  # repr floats round-trip exactly
    np.testing.assert_array_equal(back.a, c.a)


# rules


def test_static_rule():
    x = np.random.default_rng(1).normal(size=(5, 19))
    assert StaticRule(1).decide(x).tolist() == [1] * 5
    assert evaluate_rule(StaticRule(0), x[0]) == 0
    with pytest.raises(ValueError):
        StaticRule(2)


def test_zero_theta_goes_to_treatment_0():
    assert evaluate_rule(LinearRule(np.zeros(20)), np.ones(19)) == 0


def test_linear_rule_matches_scenario_1_interaction():
    # h = -1.9 - 0.2 x18 + 0.7 x19, so only the constant remains at x18 = x19 = 0
    from survitr.dgp import get_scenario, optimal_rule

    spec = get_scenario(1)
    x = np.zeros(19)
    assert spec.interaction_fn(x[None])[0] == pytest.approx(-1.9)
    assert evaluate_rule(optimal_rule(spec), x) == 1


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        LinearRule(np.ones(20)).decide(np.ones((2, 5)))


def test_soft_evaluation_against_erf():
    theta = np.zeros(20)
    theta[1] = 1.0
    x = np.zeros(19)
    x[0] = 0.3
    rule = SmoothedLinearRule(theta, 0.3)
    assert evaluate_rule_soft(rule, x) == pytest.approx(phi_erf(1.0), abs=1e-12)
    assert evaluate_rule_soft(rule, x) == pytest.approx(0.8413447460685429, abs=1e-12)
    x[0] = 0.0
    assert evaluate_rule_soft(rule, x) == 0.5
    x[0] = 0.01
    assert evaluate_rule_soft(SmoothedLinearRule(theta, 1e-6), x) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        SmoothedLinearRule(theta, 0.0)


@given(st.floats(-8, 8))
def test_normal_cdf_matches_erf(z):
    assert abs(normal_cdf(z) - phi_erf(z)) < 1e-12


@settings(max_examples=50)
@given(arrays(float, 20, elements=finite), arrays(float, (8, 19), elements=finite),
       st.floats(1e-3, 1e3))
def test_linear_rule_scale_invariance(theta, x, c):
    a = LinearRule(theta).decide(x)
    b = LinearRule(c * theta).decide(x)
    score = theta[0] + x @ theta[1:]
    ok = np.abs(score) > 1e-9 * (1 + np.abs(theta).sum() * 50)
    np.testing.assert_array_equal(a[ok], b[ok])


@settings(max_examples=50)
@given(arrays(float, 20, elements=st.floats(-3, 3)), arrays(float, (8, 19), elements=st.floats(-3, 3)))
def test_soft_rule_approaches_hard_rule(theta, x):
    rule = LinearRule(theta)
    score = rule.score(x)
    soft = SmoothedLinearRule(theta, 1e-9).soft(x)
    away = np.abs(score) > 1e-6
    np.testing.assert_allclose(soft[away], rule.decide(x)[away], atol=1e-12)


def test_crossfit_rule_dispatch_and_index_requirement():
    folds = FoldAssignment(2, np.array([1, 2, 1, 2]))
    rule = CrossFitRule((StaticRule(0), StaticRule(1)), folds)
    x = np.zeros((4, 19))
    # record i uses the rule trained without its fold, i.e. rule k for fold k
    assert rule.decide(x, np.arange(4)).tolist() == [0, 1, 0, 1]
    assert evaluate_rule(rule, x[1], index=1) == 1
    with pytest.raises(ValueError):
        evaluate_rule(rule, x[0])
    with pytest.raises(ValueError):
        CrossFitRule((StaticRule(0),), folds)
    c = Cohort([1, 2, 3, 4], [0] * 4, [0] * 4, x)
    assert decide_cohort(rule, c).tolist() == [0, 1, 0, 1]


def test_rule_serialization_roundtrip():
    theta = np.linspace(-1, 1, 20)
    rules = [StaticRule(1), LinearRule(theta), SmoothedLinearRule(theta, 0.2),
             CrossFitRule((StaticRule(0), LinearRule(theta)),
                          FoldAssignment(2, np.array([1, 2, 2, 1])))]
    x = np.random.default_rng(2).normal(size=(4, 19))
    for r in rules:
        back = rule_from_dict(json.loads(json.dumps(r.to_dict())))
        if isinstance(r, CrossFitRule):
            np.testing.assert_array_equal(back.decide(x, np.arange(4)), r.decide(x, np.arange(4)))
        else:
            np.testing.assert_array_equal(back.decide(x), r.decide(x))


# curves and folds


def test_step_survival_curve():
    curve = StepSurvivalCurve([1, 3, 5], [0.9, 0.5, 0.2])
    assert curve(0) == 1.0
    assert curve(1) == 0.9  # right-continuous
    assert curve(4) == 0.5
    np.testing.assert_array_equal(curve(np.array([2, 5, 9])), [0.9, 0.2, 0.2])
    with pytest.raises(ValueError):
        StepSurvivalCurve([1, 2], [0.5, 0.6])
    with pytest.raises(ValueError):
        StepSurvivalCurve([2, 1], [0.5, 0.4])
    with pytest.raises(ValueError):
        StepSurvivalCurve([1], [1.2])


@given(st.integers(2, 300), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_fold_sizes_balanced(n, k, seed):
    if n < k:
        with pytest.raises(ValueError):
            FoldAssignment.random(n, k, np.random.default_rng(seed))
        return
    folds = FoldAssignment.random(n, k, np.random.default_rng(seed))
    sizes = [folds.members(j).size for j in range(1, k + 1)]
    assert max(sizes) - min(sizes) <= 1
    assert sum(sizes) == n
    assert set(folds.complement(1)).isdisjoint(folds.members(1))


def test_fold_assignment_rejects_k1_and_unbalanced():
    with pytest.raises(ValueError):
        FoldAssignment(1, np.ones(4, int))
    with pytest.raises(ValueError):
        FoldAssignment(2, np.array([1, 1, 1, 2]))
