"""Estimators of the optimal treatment rule.

Outcome regression fits a penalized Cox model with treatment interactions
and plugs in the predicted survival under each arm. Direct search runs a
genetic algorithm over unit-norm linear rules to maximise the (augmented,
optionally smoothed) IPW Kaplan-Meier value. Outcome weighted learning
solves a weighted hinge-loss classification of the received treatment.
Any estimator can be cross-fitted, and several can be combined by picking
the one with the highest estimated value.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import (
    Cohort,
    CrossFitRule,
    FoldAssignment,
    LinearRule,
    PlugInRule,
    SmoothedLinearRule,
    StaticRule,
    TreatmentRule,
    normal_cdf,
)
from .nuisance import Nuisances, Penalty, fit_cox, fit_nuisances
from .value import (
    BatchValue,
    compute_weights,
    outcome_predictions,
    prepare_weights,
    value_ipw_km,
)

logger = logging.getLogger(__name__)

HORIZON = 60

COX_METHODS = {
    "cox_ridge": lambda: Penalty.ridge(),
    "cox_lasso": lambda: Penalty.lasso(),
    "cox_enet": lambda: Penalty.elastic_net(alpha=0.5),
}
GA_METHODS = {
    "ga_plain": (False, False),
    "ga_augmented": (True, False),
    "ga_smoothed": (False, True),
    "ga_aug_smoothed": (True, True),
}
STATIC_METHODS = {"static_0": 0, "static_1": 1}
METHODS = (*STATIC_METHODS, *COX_METHODS, *GA_METHODS, "owl_linear")


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GAParams:
    population: int = 50
    generations: int = 100
    tournament: int = 3
    mutation_sd: float = 0.1
    mutation_prob: float = 0.2
    crossover_prob: float = 0.7
    patience: int = 20
    bandwidth: float = 0.1

    def __post_init__(self):
        if self.population < 4 or self.generations < 1 or self.patience < 1:
            raise ValueError("population >= 4, generations >= 1 and patience >= 1 required")
        if not 2 <= self.tournament <= self.population:
            raise ValueError("tournament size must lie in [2, population]")
        for name in ("mutation_prob", "crossover_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.mutation_sd <= 0 or self.bandwidth <= 0:
            raise ValueError("mutation_sd and bandwidth must be positive")


@dataclass(frozen=True)
class OWLParams:
    reg: float = 1e-3
    steps: int = 50_000
    step_size: float = 0.5

    def __post_init__(self):
        if self.reg < 0 or self.steps < 1 or self.step_size <= 0:
            raise ValueError("reg >= 0, steps >= 1 and step_size > 0 required")


@dataclass(frozen=True)
class RuleEstimatorSpec:
    method: str
    ga: GAParams = field(default_factory=GAParams)
    owl: OWLParams = field(default_factory=OWLParams)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")

    @property
    def needs_outcome_model(self) -> bool:
        return self.method in ("ga_augmented", "ga_aug_smoothed")


@dataclass(frozen=True, eq=False)
class RuleFit:
    """An estimated rule plus estimator-specific details (objective, diagnostics)."""

    rule: TreatmentRule
    method: str
    objective: float = float("nan")
    diagnostics: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EnsembleResult:
    chosen: str
    values: dict[str, float]

    def __post_init__(self):
        finite = [v for v in self.values.values() if np.isfinite(v)]
        if finite and self.values[self.chosen] < max(finite):
            raise ValueError("chosen method must attain the maximum estimate")

    @property
    def value(self) -> float:
        return self.values[self.chosen]


def method_rng(rng_or_seed, method: str) -> np.random.Generator:
    """Independent child stream per method name (stable across method lists)."""
    tag = zlib.crc32(method.encode())
    if isinstance(rng_or_seed, np.random.Generator):
        seed = int(rng_or_seed.integers(2**63))
        return np.random.default_rng([seed, tag])
    return np.random.default_rng([int(rng_or_seed), tag])


def _standardize(x):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return mu, sd


def _to_original_scale(theta_s, mu, sd):
    """Map intercept+slopes on standardized covariates to the raw covariate scale."""
    slopes = theta_s[1:] / sd
    return np.concatenate([[theta_s[0] - slopes @ mu], slopes])


def _arm_km(cohort: Cohort, arm: int, tau: int) -> float:
    mask = cohort.a == arm
    if not mask.any():
        return float("-inf")
    z, d = cohort.z[mask], cohort.delta[mask]
    surv = 1.0
    for s in range(1, tau + 1):
        risk = (z >= s).sum()
        if risk:
            surv *= 1 - ((z == s) & (d == 1)).sum() / risk
    return surv


def _fallback_static(cohort: Cohort, tau: int, why: str, method: str) -> RuleFit:
    arm = int(_arm_km(cohort, 1, tau) > _arm_km(cohort, 0, tau))
    logger.info("%s fell back to static %d: %s", method, arm, why)
    return RuleFit(StaticRule(arm), method, diagnostics=(f"fallback to static {arm}: {why}",))


# --------------------------------------------------------------------------
# outcome regression


def estimate_rule_outcome_regression(cohort: Cohort, penalty: Penalty | str = "lasso",
                                     tau: int = HORIZON, rng=None,
                                     method: str | None = None) -> RuleFit:
    """Plug-in rule from a penalized Cox model on ``[x, a, a*x]``."""
    if isinstance(penalty, str):
        method = method or f"cox_{penalty}"
        penalty = COX_METHODS[f"cox_{penalty}"]()
    method = method or "cox"
    for arm in (0, 1):
        if not np.any((cohort.a == arm) & (cohort.delta == 1)):
            return _fallback_static(cohort, tau, f"no events in arm {arm}", method)
    try:
        model = fit_cox(cohort.z, cohort.delta, cohort.x, cohort.a, penalty, interactions=True,
                        max_time=max(tau, int(cohort.z.max())), rng=rng)
    except (ValueError, np.linalg.LinAlgError) as exc:
        return _fallback_static(cohort, tau, f"Cox fit failed ({exc})", method)
    if not np.all(np.isfinite(model.coefficients)):
        return _fallback_static(cohort, tau, "non-finite Cox coefficients", method)
    return RuleFit(PlugInRule(model, tau), method, diagnostics=model.diagnostics,
                   extra={"lambda": model.penalty.lam,
                          "nonzero": int(np.count_nonzero(model.coefficients))})


# --------------------------------------------------------------------------
# genetic algorithm


def _unit_rows(m):
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return m / norms


def estimate_rule_genetic(cohort: Cohort, variant: str, nuisances: Nuisances,
                          tau: int = HORIZON, params: GAParams | None = None,
                          rng: np.random.Generator | None = None) -> RuleFit:
    """Genetic-algorithm search over unit-norm linear rules on standardized covariates.

    ``variant`` is one of plain, augmented, smoothed, aug_smoothed. The returned
    rule is always the hard threshold rule; ``objective`` is the best objective
    found (smoothed objectives for smoothed variants).
    """
    method = variant if variant.startswith("ga_") else f"ga_{variant}"
    if method not in GA_METHODS:
        raise ValueError(f"unknown GA variant {variant!r}")
    augmented, smoothed = GA_METHODS[method]
    params = params or GAParams()
    rng = rng if rng is not None else np.random.default_rng(0)

    base = prepare_weights(cohort, nuisances.propensity, nuisances.censor, tau)
    preds = None
    if augmented:
        outcome = nuisances.outcome
        if outcome is None:
            outcome = fit_cox(cohort.z, cohort.delta, cohort.x, cohort.a, interactions=True,
                              max_time=max(tau, int(cohort.z.max())))
        preds = outcome_predictions(cohort, outcome, nuisances.censor, tau)
    batch = BatchValue(cohort, base, preds)

    mu, sd = _standardize(cohort.x)
    design = np.column_stack([np.ones(cohort.n), (cohort.x - mu) / sd])
    dim = design.shape[1]
    h = params.bandwidth

    def fitness(pop):
        scores = design @ pop.T
        d = normal_cdf(scores / h) if smoothed else (scores > 0).astype(float)
        vals = batch.evaluate(d.T)
        return np.where(np.isfinite(vals), vals, -np.inf)

    pop = _unit_rows(rng.standard_normal((params.population, dim)))
    # seed the two static rules (intercept only)
    pop[0] = 0.0
    pop[0, 0] = 1.0
    pop[1] = 0.0
    pop[1, 0] = -1.0
    fit = fitness(pop)
    if not np.any(np.isfinite(fit)):
        raise EstimationError("GA objective undefined for every candidate")
    best_i = int(np.argmax(fit))
    best, best_fit = pop[best_i].copy(), float(fit[best_i])
    stagnant = 0
    generations = 0
    n_pop = params.population
    for generations in range(1, params.generations + 1):
        # tournament selection
        entrants = rng.integers(0, n_pop, size=(n_pop, params.tournament))
        winners = entrants[np.arange(n_pop), np.argmax(fit[entrants], axis=1)]
        parents = pop[winners]
        children = parents.copy()
        # uniform crossover on consecutive pairs
        for i in range(0, n_pop - 1, 2):
            if rng.random() < params.crossover_prob:
                swap = rng.random(dim) < 0.5
                children[i, swap], children[i + 1, swap] = parents[i + 1, swap], parents[i, swap]
        mutate = rng.random(children.shape) < params.mutation_prob
        children = children + mutate * rng.normal(0.0, params.mutation_sd, children.shape)
        children = _unit_rows(children)
        children[0] = best  # elitism
        pop = children
        fit = fitness(pop)
        gen_best = int(np.argmax(fit))
        if fit[gen_best] > best_fit + 1e-12:
            best, best_fit = pop[gen_best].copy(), float(fit[gen_best])
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= params.patience:
                break
    theta = _to_original_scale(best, mu, sd)
    hard = LinearRule(theta)
    extra = {"theta_standardized": best.tolist(), "generations": generations,
             "augmented": augmented, "smoothed": smoothed}
    if smoothed:
        extra["smoothed_rule"] = SmoothedLinearRule(theta, h)
    return RuleFit(hard, method, objective=best_fit, extra=extra)


# --------------------------------------------------------------------------
# outcome weighted learning


def owl_weights(cohort: Cohort, nuisances: Nuisances, tau: int = HORIZON) -> np.ndarray:
    """Misclassification weights: alive past tau over P(A | X) P(C past tau | X, A)."""
    base = prepare_weights(cohort, nuisances.propensity, nuisances.censor, tau)
    return (cohort.z > tau) * base.inv_treat * base.inv_censor[:, tau]


@njit(cache=True)
def _hinge_subgradient(x, y, w, reg, steps, step_size):
    n, dim = x.shape
    theta = np.zeros(dim)
    avg = np.zeros(dim)
    start = steps // 2
    count = 0
    for t in range(1, steps + 1):
        grad = np.zeros(dim)
        for i in range(n):
            margin = 0.0
            for j in range(dim):
                margin += x[i, j] * theta[j]
            if y[i] * margin < 1.0:
                for j in range(dim):
                    grad[j] -= w[i] * y[i] * x[i, j]
        for j in range(1, dim):
            grad[j] += 2.0 * reg * theta[j]
        eta = step_size / np.sqrt(t)
        for j in range(dim):
            theta[j] -= eta * grad[j]
        if t > start:
            count += 1
            for j in range(dim):
                avg[j] += (theta[j] - avg[j]) / count
    return avg


def hinge_objective(theta, x, y, w, reg):
    margins = y * (x @ theta)
    return float(w @ np.maximum(0.0, 1.0 - margins) + reg * theta[1:] @ theta[1:])


def fit_weighted_hinge(x, a, weights, reg=1e-3, steps=50_000, step_size=0.5):
    """Linear weighted-hinge classifier of ``a`` on standardized ``x``.

    Minimises ``sum_i w_i max(0, 1 - y_i (t0 + x_i t)) / sum_i w_i + reg ||t||^2``
    with ``y = 2a - 1`` by subgradient descent (step ``step_size / sqrt(k)``),
    averaging the second half of the iterates. Returns (theta, mu, sd).
    """
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    if total <= 0:
        raise EstimationError("all classification weights are zero")
    keep = weights > 0
    mu, sd = _standardize(x)
    design = np.column_stack([np.ones(x.shape[0]), (x - mu) / sd])[keep]
    y = (2.0 * np.asarray(a)[keep] - 1.0)
    w = weights[keep] / total
    theta = _hinge_subgradient(design, y, w, float(reg), int(steps), float(step_size))
    return theta, mu, sd


def estimate_rule_weighted_classification(cohort: Cohort, nuisances: Nuisances,
                                          tau: int = HORIZON,
                                          params: OWLParams | None = None) -> RuleFit:
    params = params or OWLParams()
    weights = owl_weights(cohort, nuisances, tau)
    if not np.any(weights > 0):
        return _fallback_static(cohort, tau, "all OWL weights are zero", "owl_linear")
    theta_s, mu, sd = fit_weighted_hinge(cohort.x, cohort.a, weights, params.reg, params.steps,
                                         params.step_size)
    if not np.any(theta_s[1:]) and theta_s[0] == 0:
        return _fallback_static(cohort, tau, "degenerate OWL solution", "owl_linear")
    theta = _to_original_scale(theta_s, mu, sd)
    keep = weights > 0
    design = np.column_stack([np.ones(cohort.n), (cohort.x - mu) / sd])[keep]
    obj = hinge_objective(theta_s, design, 2.0 * cohort.a[keep] - 1.0,
                          weights[keep] / weights.sum(), params.reg)
    return RuleFit(LinearRule(theta), "owl_linear", objective=obj,
                   extra={"theta_standardized": theta_s.tolist()})


# --------------------------------------------------------------------------
# dispatch, cross-fitting, ensembles


def estimate_rule(spec: RuleEstimatorSpec, cohort: Cohort, nuisances: Nuisances | None = None,
                  tau: int = HORIZON, rng=None) -> RuleFit:
    """Fit ``spec.method`` on ``cohort``; nuisance models are fitted if not supplied."""
    method = spec.method
    rng = rng if rng is not None else np.random.default_rng(0)
    if method in STATIC_METHODS:
        return RuleFit(StaticRule(STATIC_METHODS[method]), method)
    if method in COX_METHODS:
        return estimate_rule_outcome_regression(cohort, COX_METHODS[method](), tau, rng, method)
    if nuisances is None or (spec.needs_outcome_model and nuisances.outcome is None):
        nuisances = fit_nuisances(cohort, tau, with_outcome=spec.needs_outcome_model)
    if method in GA_METHODS:
        return estimate_rule_genetic(cohort, method, nuisances, tau, spec.ga, rng)
    return estimate_rule_weighted_classification(cohort, nuisances, tau, spec.owl)


def fit_fold_nuisances(cohort: Cohort, folds: FoldAssignment, tau: int = HORIZON,
                       with_outcome: bool = False) -> list[Nuisances]:
    out = []
    for k in range(1, folds.k_folds + 1):
        train = cohort.subset(folds.complement(k))
        try:
            out.append(fit_nuisances(train, tau, with_outcome=with_outcome))
        except ValueError as exc:
            raise EstimationError(f"fold {k} too small to fit nuisance models: {exc}") from exc
    return out


def crossfit_rule(cohort: Cohort, spec: RuleEstimatorSpec, k_folds: int = 5, *,
                  folds: FoldAssignment | None = None, tau: int = HORIZON, rng=None,
                  fold_nuisances: list[Nuisances] | None = None) -> tuple[CrossFitRule, list[RuleFit]]:
    """Train one rule per fold on the other folds (nuisances refit on the same training data)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if folds is None:
        folds = FoldAssignment.random(cohort.n, k_folds, rng)
    if fold_nuisances is None and spec.method not in {*STATIC_METHODS, *COX_METHODS}:
        fold_nuisances = fit_fold_nuisances(cohort, folds, tau, spec.needs_outcome_model)
    fits = []
    for k in range(1, folds.k_folds + 1):
        train = cohort.subset(folds.complement(k))
        nuis = fold_nuisances[k - 1] if fold_nuisances is not None else None
        fold_rng = np.random.default_rng([int(rng.integers(2**63)), k])
        fits.append(estimate_rule(spec, train, nuis, tau, fold_rng))
    return CrossFitRule(tuple(f.rule for f in fits), folds), fits


def max_ensemble(cohort: Cohort, specs, mode: str = "whole", *, nuisances: Nuisances | None = None,
                 k_folds: int = 5, tau: int = HORIZON, rng=None,
                 rules: dict[str, TreatmentRule] | None = None,
                 folds: FoldAssignment | None = None) -> tuple[EnsembleResult, TreatmentRule]:
    """Pick the candidate rule with the largest IPW-KM value estimate.

    ``specs`` is a list of RuleEstimatorSpec (or method names). Already estimated
    rules can be passed in ``rules`` keyed by method. Ties go to the earliest
    method in ``specs``; candidates that fail or have an undefined value are skipped.
    """
    if mode not in ("whole", "crossfit"):
        raise ValueError("mode must be 'whole' or 'crossfit'")
    specs = [s if isinstance(s, RuleEstimatorSpec) else RuleEstimatorSpec(s) for s in specs]
    if not specs:
        raise ValueError("max_ensemble needs at least one candidate")
    rng = rng if rng is not None else np.random.default_rng(0)
    nuisances = nuisances or fit_nuisances(cohort, tau)
    base = prepare_weights(cohort, nuisances.propensity, nuisances.censor, tau)
    if mode == "crossfit" and folds is None:
        folds = FoldAssignment.random(cohort.n, k_folds, rng)
    rules = dict(rules or {})
    values: dict[str, float] = {}
    for spec in specs:
        name = spec.method
        if name not in rules:
            try:
                if mode == "whole":
                    rules[name] = estimate_rule(spec, cohort, nuisances, tau,
                                                method_rng(rng, name)).rule
                else:
                    rules[name] = crossfit_rule(cohort, spec, folds=folds, tau=tau,
                                                rng=method_rng(rng, name))[0]
            except (EstimationError, ValueError, np.linalg.LinAlgError) as exc:
                logger.warning("ensemble candidate %s failed: %s", name, exc)
                continue
        w = compute_weights(cohort, rules[name], base=base, tau=tau)
        values[name] = value_ipw_km(cohort, w, tau)
    finite = {k: v for k, v in values.items() if np.isfinite(v)}
    if not finite:
        raise EstimationError("every ensemble candidate failed")
    chosen = max(finite, key=lambda k: (finite[k], -list(finite).index(k)))
    return EnsembleResult(chosen, values), rules[chosen]
