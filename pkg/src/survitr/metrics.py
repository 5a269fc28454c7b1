"""Performance metrics of rule and value estimators against the simulation truth."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .core import Cohort, CrossFitRule, TreatmentRule, decide_cohort
from .dgp import ScenarioSpec, value_on_draws


@dataclass(frozen=True)
class ReplicationMetrics:
    """One output row: a (scenario, replication, method, mode, value estimator) cell.

    metric_i   = Vhat(d_opt) - V(d_opt)
    metric_ii  = V(d_hat) - V(d_opt)
    metric_iii = Vhat(d_hat) - V(d_opt)
    """

    scenario: int
    replication: int
    method: str
    mode: str
    estimator: str
    metric_i: float
    metric_ii: float
    metric_iii: float
    misclassification: float
    value_estimate: float
    value_estimate_dopt: float
    oracle_value_dhat: float
    oracle_value_dopt: float
    chosen: str = ""
    status: str = "ok"

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> list[str]:
        out = []
        for value in asdict(self).values():
            if isinstance(value, float):
                out.append("" if math.isnan(value) else repr(value))
            else:
                out.append(str(value))
        return out

    @classmethod
    def from_row(cls, row: dict) -> ReplicationMetrics:
        kwargs = {}
        for f in fields(cls):
            raw = row[f.name]
            if f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw) if raw != "" else float("nan")
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


def _require(*values):
    for v in values:
        if v is None or not np.isfinite(v):
            raise ValueError("metric inputs must be finite numbers")


def metric_i(value_estimate_at_dopt: float, oracle_value_dopt: float) -> float:
    _require(value_estimate_at_dopt, oracle_value_dopt)
    return value_estimate_at_dopt - oracle_value_dopt


def metric_ii(oracle_value_dhat: float, oracle_value_dopt: float) -> float:
    _require(oracle_value_dhat, oracle_value_dopt)
    return oracle_value_dhat - oracle_value_dopt


def metric_iii(value_estimate_at_dhat: float, oracle_value_dopt: float) -> float:
    _require(value_estimate_at_dhat, oracle_value_dopt)
    return value_estimate_at_dhat - oracle_value_dopt


def misclassification(rule: TreatmentRule, oracle_rule: TreatmentRule, cohort: Cohort) -> float:
    """Fraction of the cohort's records where the two rules disagree."""
    return float(np.mean(decide_cohort(rule, cohort) != decide_cohort(oracle_rule, cohort)))


def true_value(scenario: ScenarioSpec, rule: TreatmentRule, x_draws: np.ndarray) -> float:
    """Oracle value on fixed covariate draws.

    A cross-fitted rule applies fold k's rule to a new subject with probability
    |fold k| / n, so its value is the size-weighted mean of the fold rules' values.
    """
    if isinstance(rule, CrossFitRule):
        sizes = np.bincount(rule.folds.fold_of, minlength=rule.folds.k_folds + 1)[1:]
        vals = [value_on_draws(scenario, r.decide(x_draws), x_draws) for r in rule.rules]
        return float(np.dot(sizes, vals) / sizes.sum())
    return value_on_draws(scenario, rule.decide(x_draws), x_draws)
