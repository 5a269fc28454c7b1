"""Inverse probability weighted estimators of the value of a treatment rule.

All estimators share the weight

    w_i(s; d) = I(A_i = d(X_i)) / ([pi(X_i) A_i + (1 - pi(X_i))(1 - A_i)] P(C_i >= s | X_i, A_i))

on the month grid. ``P(C >= s)`` means the subject was still uncensored at
the start of month ``s``; an event and a censoring in the same month count
as an event, so this is exactly the condition for being in the risk set at
``s``. Alive-at-horizon status (``Z > tau``) additionally requires surviving
censoring through month ``tau`` and is weighted with ``P(C >= tau + 1)``.

Smoothed rules replace the matching indicator with the soft-match
probability ``d A + (1 - d)(1 - A)`` for ``d`` in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Cohort, SmoothedLinearRule, TreatmentRule, decide_cohort
from .nuisance import CLIP, CoxModel, PropensityModel, predict_censor_survival

HORIZON = 60


@dataclass(frozen=True, eq=False)
class WeightBase:
    """Rule-independent part of the weights for one cohort.

    ``inv_treat[i]`` is 1 / P(A = A_i | X_i); ``inv_censor[i, s - 1]`` is
    1 / P(C_i >= s | X_i, A_i) for s = 1..tau+1. Both use clipped probabilities.
    """

    inv_treat: np.ndarray
    inv_censor: np.ndarray
    tau: int


def prepare_weights(cohort: Cohort, propensity: PropensityModel, censor: CoxModel,
                    tau: int = HORIZON, clip: float = CLIP) -> WeightBase:
    if not 1 <= tau < censor.max_time:
        raise ValueError(f"tau must lie in [1, {censor.max_time - 1}]")
    pi = propensity.predict(cohort.x, clip)
    p_arm = np.where(cohort.a == 1, pi, 1 - pi)
    grid = np.arange(1, tau + 2)
    lp = np.exp(censor.linear_predictor(cohort.x, cohort.a))
    cum = censor.cumulative_hazard[grid - 1]
    g = np.exp(-np.outer(lp, cum))
    g = np.maximum(g, clip)
    return WeightBase(1.0 / p_arm, 1.0 / g, tau)


@dataclass(frozen=True, eq=False)
class IPWWeights:
    """Per-record, per-month weights under one rule.

    ``values[i, s - 1] = w_i(s; d)`` for s = 1..tau; ``alive`` is the weight used
    for records observed alive past tau; ``match`` is the (soft) matching indicator.
    """

    match: np.ndarray
    values: np.ndarray
    alive: np.ndarray
    inv_treat: np.ndarray
    tau: int


def match_indicator(cohort: Cohort, rule: TreatmentRule | np.ndarray, soft: bool = False):
    """I(A_i = d(X_i)), or the soft version when ``soft`` and the rule is smoothed."""
    if isinstance(rule, np.ndarray):
        d = rule.astype(float)
    elif soft and isinstance(rule, SmoothedLinearRule):
        d = rule.soft(cohort.x)
    else:
        d = decide_cohort(rule, cohort).astype(float)
    return np.where(cohort.a == 1, d, 1.0 - d)


def compute_weights(cohort: Cohort, rule: TreatmentRule | np.ndarray, propensity=None,
                    censor=None, tau: int = HORIZON, *, base: WeightBase | None = None,
                    soft: bool = False) -> IPWWeights:
    """Weights for ``rule`` (a TreatmentRule, or an array of per-record decisions in [0, 1])."""
    if base is None:
        if propensity is None or censor is None:
            raise ValueError("need fitted propensity and censoring models, or a WeightBase")
        base = prepare_weights(cohort, propensity, censor, tau)
    if base.tau != tau:
        raise ValueError("weight base was prepared for a different horizon")
    match = match_indicator(cohort, rule, soft)
    scale = match * base.inv_treat
    values = scale[:, None] * base.inv_censor[:, :tau]
    alive = scale * base.inv_censor[:, tau]
    return IPWWeights(match, values, alive, base.inv_treat, tau)


def _counting(cohort: Cohort, tau: int):
    grid = np.arange(1, tau + 1)
    at_risk = cohort.z[:, None] >= grid[None, :]
    events = (cohort.z[:, None] == grid[None, :]) & (cohort.delta[:, None] == 1)
    return events, at_risk


def value_ipw_km(cohort: Cohort, weights: IPWWeights, tau: int = HORIZON) -> float:
    """Weighted Kaplan-Meier survival past ``tau``; NaN when every weight is zero."""
    if not np.any(weights.match > 0):
        return float("nan")
    events, at_risk = _counting(cohort, tau)
    w = weights.values[:, :tau]
    deaths = (w * events).sum(axis=0)
    risk = (w * at_risk).sum(axis=0)
    factors = np.where(risk > 0, 1.0 - deaths / np.where(risk > 0, risk, 1.0), 1.0)
    return float(np.prod(factors))


def value_ipw_ht(cohort: Cohort, weights: IPWWeights, tau: int = HORIZON) -> float:
    """Horvitz-Thompson mean of alive-past-``tau`` indicators; may exceed 1."""
    alive = cohort.z > tau
    return float(np.sum(weights.alive * alive) / cohort.n)


def value_hajek(cohort: Cohort, weights: IPWWeights, tau: int = HORIZON) -> float:
    """Horvitz-Thompson estimate normalised by the treatment-matching mass."""
    mass = float(np.sum(weights.match * weights.inv_treat))
    if mass <= 0:
        return float("nan")
    return cohort.n / mass * value_ipw_ht(cohort, weights, tau)


@dataclass(frozen=True, eq=False)
class OutcomePredictions:
    """Outcome-model survival and hazard increments for months 1..tau under each arm."""

    surv0: np.ndarray
    surv1: np.ndarray
    haz0: np.ndarray
    haz1: np.ndarray
    censor_at_tau: np.ndarray


def outcome_predictions(cohort: Cohort, outcome: CoxModel, censor: CoxModel,
                        tau: int = HORIZON, clip: float = CLIP) -> OutcomePredictions:
    zeros, ones = np.zeros(cohort.n), np.ones(cohort.n)
    s0 = outcome.survival_matrix(cohort.x, zeros)[:, :tau]
    s1 = outcome.survival_matrix(cohort.x, ones)[:, :tau]
    h0 = outcome.hazard_matrix(cohort.x, zeros)[:, :tau]
    h1 = outcome.hazard_matrix(cohort.x, ones)[:, :tau]
    g_tau = np.maximum(predict_censor_survival(censor, cohort.x, cohort.a, tau), clip)
    return OutcomePredictions(s0, s1, h0, h1, g_tau)


def value_ipw_km_augmented(cohort: Cohort, rule: TreatmentRule | np.ndarray,
                           weights: IPWWeights, outcome: CoxModel | OutcomePredictions,
                           censor: CoxModel | None = None, tau: int = HORIZON,
                           soft: bool = False) -> float:
    """IPW Kaplan-Meier with outcome-model augmentation in numerator and denominator.

    Each month's factor is ``1 - num / den`` with

        num = sum_i w_i dN_i(s) + (1 - w_i) S_i(s) G_i(tau) h_i(s)
        den = sum_i w_i Y_i(s)  + (1 - w_i) S_i(s) G_i(tau)

    where ``S`` and ``h`` are the outcome model's survival and hazard under the
    rule's treatment and ``G(tau) = P(C >= tau)``.
    """
    if not np.any(weights.match > 0):
        return float("nan")
    if isinstance(outcome, CoxModel):
        if censor is None:
            raise ValueError("need the censoring model to build the augmentation term")
        outcome = outcome_predictions(cohort, outcome, censor, tau)
    if isinstance(rule, np.ndarray):
        d = rule.astype(float)
    elif soft and isinstance(rule, SmoothedLinearRule):
        d = rule.soft(cohort.x)
    else:
        d = decide_cohort(rule, cohort).astype(float)
    d = d[:, None]
    surv = d * outcome.surv1 + (1 - d) * outcome.surv0
    surv_haz = d * outcome.surv1 * outcome.haz1 + (1 - d) * outcome.surv0 * outcome.haz0
    g_tau = outcome.censor_at_tau[:, None]
    events, at_risk = _counting(cohort, tau)
    w = weights.values[:, :tau]
    num = (w * events + (1 - w) * surv_haz * g_tau).sum(axis=0)
    den = (w * at_risk + (1 - w) * surv * g_tau).sum(axis=0)
    factors = np.where(den > 0, 1.0 - num / np.where(den > 0, den, 1.0), 1.0)
    return float(np.prod(factors))


ESTIMATORS = {
    "ipw_km": value_ipw_km,
    "ipw_ht": value_ipw_ht,
    "ipw_hajek": value_hajek,
}


class BatchValue:
    """Evaluate the (augmented) IPW-KM value of many decision vectors at once.

    Used by direct search, where each generation scores a whole population.
    ``evaluate`` takes an (m, n) array of decisions in [0, 1] (hard or soft) and
    returns m values. Gives the same numbers as ``value_ipw_km`` /
    ``value_ipw_km_augmented`` up to floating-point summation order.
    """

    def __init__(self, cohort: Cohort, base: WeightBase,
                 outcome: OutcomePredictions | None = None):
        tau = base.tau
        events, at_risk = _counting(cohort, tau)
        b = base.inv_treat[:, None] * base.inv_censor[:, :tau]
        self.a = cohort.a.astype(float)
        self.tau = tau
        self.ev_w = events * b
        self.risk_w = at_risk * b
        self.outcome = outcome
        if outcome is not None:
            g = outcome.censor_at_tau[:, None]
            self.p0 = outcome.surv0 * g
            self.p1 = outcome.surv1 * g
            self.q0 = self.p0 * outcome.haz0
            self.q1 = self.p1 * outcome.haz1
            # augmentation pieces that do not depend on the rule, and their
            # products with the inverse weights
            self.bp0, self.bp1 = b * self.p0, b * self.p1
            self.bq0, self.bq1 = b * self.q0, b * self.q1

    def match(self, d: np.ndarray) -> np.ndarray:
        return np.where(self.a[None, :] == 1, d, 1.0 - d)

    def evaluate(self, d: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(np.asarray(d, dtype=float))
        m = self.match(d)
        num = m @ self.ev_w
        den = m @ self.risk_w
        if self.outcome is not None:
            # (1 - m_i b_i) [d_i q1_i + (1 - d_i) q0_i], expanded so every term is a matmul
            md = m * d
            num = num + self.q0.sum(axis=0) + d @ (self.q1 - self.q0) - m @ self.bq0 \
                - md @ (self.bq1 - self.bq0)
            den = den + self.p0.sum(axis=0) + d @ (self.p1 - self.p0) - m @ self.bp0 \
                - md @ (self.bp1 - self.bp0)
        ok = den > 0
        factors = np.where(ok, 1.0 - num / np.where(ok, den, 1.0), 1.0)
        out = np.prod(factors, axis=1)
        out[~np.any(m > 0, axis=1)] = np.nan
        return out
