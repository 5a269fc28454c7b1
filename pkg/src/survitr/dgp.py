"""Synthetic cohorts and their ground truth.

Covariates follow a two-group latent model calibrated to an HIV cohort,
treatment follows a logistic assignment, and event/censoring times are
Gompertz with log-linear rate modifiers. The module also exposes the oracle
quantities (true conditional survival, optimal rule, true value, regret)
that the metrics are computed against.
"""

from __future__ import annotations

import configparser
import io
import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import expit, logit

from .core import END_OF_STUDY, N_COVARIATES, Cohort, LinearRule, StaticRule, TreatmentRule

HORIZON = 60

# NA-ACCORD marginal proportions for x1..x15
DEFAULT_BINARY_MARGINS = (
    0.100, 0.483, 0.211, 0.076, 0.040, 0.105, 0.119, 0.089,
    0.052, 0.163, 0.072, 0.046, 0.125, 0.435, 0.130,
)

DEFAULT_COVARIANCE = ((0.04, 0.02, -0.04), (0.02, 0.25, -0.2), (-0.04, -0.2, 1.0))


# --------------------------------------------------------------------------
# covariate-dependent linear predictors


_TERM_RE = re.compile(r"^(?:const|x(\d+)|sq\(x(\d+)([+-][0-9.eE+-]+)\))$")


@dataclass(frozen=True)
class LinearPredictor:
    """Sum of coefficient * term, where a term is ``const``, ``xj`` or ``sq(xj-c)``.

    ``sq(x18-6)`` means ``(x18 - 6)**2``. Covariates are 1-indexed.
    """

    terms: tuple[tuple[str, float], ...]

    def __post_init__(self):
        for name, _ in self.terms:
            if not _TERM_RE.match(name):
                raise ValueError(f"unrecognised term {name!r}")

    @classmethod
    def from_mapping(cls, mapping) -> LinearPredictor:
        return cls(tuple((k.strip(), float(v)) for k, v in mapping.items()))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.zeros(x.shape[0])
        for name, coef in self.terms:
            m = _TERM_RE.match(name)
            if name == "const":
                out += coef
            elif m.group(1):
                out += coef * x[:, int(m.group(1)) - 1]
            else:
                centre = -float(m.group(3))
                out += coef * (x[:, int(m.group(2)) - 1] - centre) ** 2
        return out

    @property
    def is_constant(self) -> bool:
        return all(name == "const" or coef == 0 for name, coef in self.terms)

    def linear_coefficients(self, p: int = N_COVARIATES) -> np.ndarray | None:
        """Intercept + slopes if the predictor is linear in x, else None."""
        theta = np.zeros(p + 1)
        for name, coef in self.terms:
            m = _TERM_RE.match(name)
            if name == "const":
                theta[0] += coef
            elif m.group(1):
                theta[int(m.group(1))] += coef
            elif coef != 0:
                return None
        return theta


def _lp(const: float, **coefs: float) -> LinearPredictor:
    return LinearPredictor((("const", const),) + tuple(coefs.items()))


def _sum_terms(first: int, last: int, coef: float) -> dict[str, float]:
    return {f"x{j}": coef for j in range(first, last + 1)}


# --------------------------------------------------------------------------
# scenario and covariate model


@dataclass(frozen=True)
class ScenarioSpec:
    id: int
    baseline_fn: LinearPredictor
    interaction_fn: LinearPredictor
    event_shape: float = 0.02
    event_rate: float = 0.002
    censor_shape: float = 0.03
    censor_rate: float = 0.01
    censor_fn: LinearPredictor = field(
        default_factory=lambda: LinearPredictor((("const", -4.0), ("x16", 0.25), ("x18", 0.2)))
    )
    horizon: int = HORIZON
    end_of_study: int = END_OF_STUDY

    def __post_init__(self):
        for name in ("event_shape", "event_rate", "censor_shape", "censor_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.horizon < self.end_of_study:
            raise ValueError("horizon must lie strictly before the end of study")

    def event_log_rate(self, x, a) -> np.ndarray:
        return self.baseline_fn(x) + np.asarray(a) * self.interaction_fn(x)

    # serialization -----------------------------------------------------

    def to_config(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["scenario"] = {
            "id": str(self.id),
            "event_shape": repr(self.event_shape),
            "event_rate": repr(self.event_rate),
            "censor_shape": repr(self.censor_shape),
            "censor_rate": repr(self.censor_rate),
            "horizon": str(self.horizon),
            "end_of_study": str(self.end_of_study),
        }
        cp["baseline_fn"] = {k: repr(v) for k, v in self.baseline_fn.terms}
        cp["interaction_fn"] = {k: repr(v) for k, v in self.interaction_fn.terms}
        cp["censor_fn"] = {k: repr(v) for k, v in self.censor_fn.terms}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_config(cls, text: str) -> ScenarioSpec:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read_string(text)
        sc = cp["scenario"]
        kwargs = dict(
            id=sc.getint("id"),
            baseline_fn=LinearPredictor.from_mapping(cp["baseline_fn"]),
            interaction_fn=LinearPredictor.from_mapping(cp["interaction_fn"]),
        )
        for name in ("event_shape", "event_rate", "censor_shape", "censor_rate"):
            if name in sc:
                kwargs[name] = sc.getfloat(name)
        for name in ("horizon", "end_of_study"):
            if name in sc:
                kwargs[name] = sc.getint(name)
        if cp.has_section("censor_fn"):
            kwargs["censor_fn"] = LinearPredictor.from_mapping(cp["censor_fn"])
        return cls(**kwargs)


def _builtin_scenarios() -> dict[int, ScenarioSpec]:
    g01 = _lp(-1.0, x3=-2.0, x18=0.1, x19=0.5)
    g2 = LinearPredictor(
        (("const", -1.5), ("x16", -0.2), ("x17", 0.2), ("x18", -0.2), ("x19", 0.5))
        + tuple(_sum_terms(1, 15, 1.1).items())
    )
    h2 = LinearPredictor(
        (("const", -0.1), ("x16", 0.1), ("x17", -0.1), ("x18", 0.1), ("x19", -0.1))
        + tuple(_sum_terms(1, 6, 0.3).items())
        + tuple(_sum_terms(13, 15, 0.3).items())
        + tuple(_sum_terms(7, 12, -1.2).items())
    )
    return {
        0: ScenarioSpec(0, g01, _lp(-0.1)),
        1: ScenarioSpec(1, g01, _lp(-1.9, x18=-0.2, x19=0.7)),
        2: ScenarioSpec(2, g2, h2),
        3: ScenarioSpec(
            3,
            _lp(-0.4, x18=0.3, x19=0.8),
            LinearPredictor((("const", -0.55), ("sq(x18-6)", 1.0), ("sq(x19-4)", -1.0))),
        ),
    }


SCENARIOS = _builtin_scenarios()


def get_scenario(scenario_id: int) -> ScenarioSpec:
    try:
        return SCENARIOS[scenario_id]
    except KeyError:
        raise ValueError(f"unknown scenario {scenario_id}; built-ins are {sorted(SCENARIOS)}") from None


@dataclass(frozen=True)
class CovariateModel:
    latent_prob: float = 0.2
    shift: float = 1.25
    binary_margins: tuple[float, ...] = DEFAULT_BINARY_MARGINS
    n_latent_dependent: int = 12
    age_median: float = 40.0
    age_log_sd: float = 0.38
    medians: tuple[float, float, float] = (25.1, 332.0, 10 ** 4.6)
    offset_healthy: tuple[float, float, float] = (1.25, 50.0, -2000.0)
    offset_unhealthy: tuple[float, float, float] = (-5.0, -200.0, 10000.0)
    covariance: tuple[tuple[float, ...], ...] = DEFAULT_COVARIANCE

    def __post_init__(self):
        margins = np.asarray(self.binary_margins)
        if margins.shape != (15,) or np.any(margins <= 0) or np.any(margins >= 1):
            raise ValueError("need 15 binary margins strictly inside (0, 1)")
        if not 0 < self.latent_prob < 1:
            raise ValueError("latent_prob must lie in (0, 1)")
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (3, 3) or not np.allclose(cov, cov.T):
            raise ValueError("covariance must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance must be positive definite")
        if self.age_log_sd <= 0 or self.age_median <= 0:
            raise ValueError("age parameters must be positive")
        for u_off in (self.offset_healthy, self.offset_unhealthy):
            m = np.asarray(self.medians) + np.asarray(u_off)
            if np.any(m <= 0):
                raise ValueError("shifted medians must stay positive")

    def binary_probs(self, u: np.ndarray) -> np.ndarray:
        """P(Xj = 1 | U) for j = 1..15, shape (len(u), 15)."""
        u = np.asarray(u, dtype=bool)
        margins = np.asarray(self.binary_margins)
        k = self.n_latent_dependent
        shift = np.where(u, self.shift * expit(4.0), -self.shift * expit(-0.25))
        probs = np.empty((u.shape[0], 15))
        probs[:, :k] = expit(logit(margins[:k])[None, :] + shift[:, None])
        probs[:, k:] = margins[k:]
        return probs

    def continuous_means(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=bool)
        med = np.asarray(self.medians)[None, :] + np.where(
            u[:, None], np.asarray(self.offset_unhealthy), np.asarray(self.offset_healthy)
        )
        return np.column_stack([np.log(med[:, 0]), np.log(med[:, 1]), np.log10(med[:, 2])])

    def to_config(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["covariates"] = {
            "latent_prob": repr(self.latent_prob),
            "shift": repr(self.shift),
            "binary_margins": ", ".join(repr(p) for p in self.binary_margins),
            "n_latent_dependent": str(self.n_latent_dependent),
            "age_median": repr(self.age_median),
            "age_log_sd": repr(self.age_log_sd),
            "medians": ", ".join(repr(v) for v in self.medians),
            "offset_healthy": ", ".join(repr(v) for v in self.offset_healthy),
            "offset_unhealthy": ", ".join(repr(v) for v in self.offset_unhealthy),
            "covariance": "; ".join(", ".join(repr(v) for v in row) for row in self.covariance),
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_config(cls, text: str) -> CovariateModel:
        cp = configparser.ConfigParser()
        cp.read_string(text)
        sec = cp["covariates"]

        def floats(s):
            return tuple(float(v) for v in s.split(","))

        kwargs = {}
        for name in ("latent_prob", "shift", "age_median", "age_log_sd"):
            if name in sec:
                kwargs[name] = sec.getfloat(name)
        if "n_latent_dependent" in sec:
            kwargs["n_latent_dependent"] = sec.getint("n_latent_dependent")
        for name in ("binary_margins", "medians", "offset_healthy", "offset_unhealthy"):
            if name in sec:
                kwargs[name] = floats(sec[name])
        if "covariance" in sec:
            kwargs["covariance"] = tuple(floats(row) for row in sec["covariance"].split(";"))
        return cls(**kwargs)


# --------------------------------------------------------------------------
# sampling


def sample_covariates(model: CovariateModel, rng: np.random.Generator, size: int | None = None):
    """Draw covariate vectors; returns shape (19,) if ``size`` is None, else (size, 19)."""
    n = 1 if size is None else size
    u = rng.random(n) < model.latent_prob
    x = np.empty((n, N_COVARIATES))
    x[:, :15] = rng.random((n, 15)) < model.binary_probs(u)
    x[:, 15] = rng.normal(np.log(model.age_median), model.age_log_sd, n)
    noise = rng.multivariate_normal(np.zeros(3), np.asarray(model.covariance), n, method="cholesky")
    x[:, 16:19] = model.continuous_means(u) + noise
    return x[0] if size is None else x


def treatment_probability(x) -> np.ndarray:
    x = np.atleast_2d(x)
    return expit(x[:, 12] - x[:, 13] - x[:, 14] - x[:, 0])


def sample_treatment(x, rng: np.random.Generator):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != N_COVARIATES:
        raise ValueError(f"expected {N_COVARIATES} covariates")
    prob = treatment_probability(x)
    a = (rng.random(prob.shape[0]) < prob).astype(np.int64)
    return int(a[0]) if x.ndim == 1 else a


def gompertz_cdf(q, shape: float, rate):
    q = np.asarray(q, dtype=float)
    return -np.expm1(-(rate / shape) * np.expm1(shape * np.maximum(q, 0.0)))


def gompertz_survival(q, shape: float, rate):
    q = np.asarray(q, dtype=float)
    return np.exp(-(rate / shape) * np.expm1(shape * np.maximum(q, 0.0)))


def gompertz_quantile(u, shape: float, rate):
    """Inverse of ``gompertz_cdf``; finite for every u in [0, 1)."""
    u = np.asarray(u, dtype=float)
    return np.log1p(-shape / rate * np.log1p(-u)) / shape


def sample_gompertz(shape: float, rate, rng: np.random.Generator, size=None):
    if not shape > 0 or not np.all(np.asarray(rate) > 0):
        raise ValueError("Gompertz shape and rate must be positive")
    # rng.random() lies in [0, 1) so log1p(-u) is finite
    u = rng.random(size if size is not None else np.shape(rate) or None)
    return gompertz_quantile(u, shape, rate)


@dataclass(frozen=True, eq=False)
class HiddenTruth:
    """Latent event and censoring times; used only by oracle metrics."""

    event_time: np.ndarray
    censor_time: np.ndarray


def coarsen(t, c, end_of_study: int = END_OF_STUDY):
    """Month-coarsened observed time and event indicator; same-month ties go to the event."""
    t = np.asarray(t, dtype=float)
    c = np.asarray(c, dtype=float)
    z = np.ceil(np.minimum(np.minimum(t, c), end_of_study)).astype(np.int64)
    delta = ((np.ceil(t) <= np.ceil(c)) & (t <= end_of_study)).astype(np.int64)
    return np.maximum(z, 1), delta


def generate_cohort(scenario: ScenarioSpec, model: CovariateModel, n: int,
                    rng: np.random.Generator) -> tuple[Cohort, HiddenTruth]:
    if n < 2:
        raise ValueError("n must be at least 2")
    x = sample_covariates(model, rng, n)
    a = sample_treatment(x, rng)
    event_rate = scenario.event_rate * np.exp(scenario.event_log_rate(x, a))
    censor_rate = scenario.censor_rate * np.exp(scenario.censor_fn(x))
    t = sample_gompertz(scenario.event_shape, event_rate, rng)
    c = sample_gompertz(scenario.censor_shape, censor_rate, rng)
    z, delta = coarsen(t, c, scenario.end_of_study)
    return Cohort(z, delta, a, x), HiddenTruth(t, c)


# --------------------------------------------------------------------------
# oracle


def true_conditional_survival(scenario: ScenarioSpec, x, a, t) -> np.ndarray:
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be non-negative")
    rate = scenario.event_rate * np.exp(scenario.event_log_rate(x, a))
    return gompertz_survival(t, scenario.event_shape, rate)


class OptimalRule(TreatmentRule):
    """``I(interaction_fn(x) < 0)`` for a scenario."""

    kind = "optimal"
    dim = N_COVARIATES

    def __init__(self, scenario: ScenarioSpec):
        self.scenario = scenario

    def decide(self, x):
        x = self._check(x)
        return (self.scenario.interaction_fn(x) < 0).astype(np.int64)

    def to_dict(self):
        return {"kind": self.kind, "scenario": self.scenario.id}


def optimal_rule(scenario: ScenarioSpec) -> TreatmentRule:
    """Optimal rule as a static or linear rule where possible, else a generic wrapper."""
    h = scenario.interaction_fn
    if h.is_constant:
        return StaticRule(int(h(np.zeros((1, N_COVARIATES)))[0] < 0))
    theta = h.linear_coefficients()
    if theta is not None:
        # I(h < 0) == I(-h > 0)
        return LinearRule(-theta)
    return OptimalRule(scenario)


@lru_cache(maxsize=16)
def _oracle_draws(model: CovariateModel, m_draws: int, seed: int) -> np.ndarray:
    x = sample_covariates(model, np.random.default_rng(seed), m_draws)
    x.setflags(write=False)
    return x


def oracle_covariates(model: CovariateModel, m_draws: int, seed: int) -> np.ndarray:
    """Fixed (cached) covariate sample used to integrate true values."""
    return _oracle_draws(model, m_draws, seed)


def value_on_draws(scenario: ScenarioSpec, decisions, x) -> float:
    return float(np.mean(true_conditional_survival(scenario, x, decisions, scenario.horizon)))


def oracle_value(scenario: ScenarioSpec, rule: TreatmentRule, m_draws: int = 200_000,
                 rng: np.random.Generator | int | None = None,
                 model: CovariateModel | None = None) -> float:
    """Monte Carlo value of ``rule``: mean true survival past the horizon.

    ``rng`` may be a Generator (fresh draws) or an int seed (cached draws,
    shared across calls so comparisons between rules are paired).
    """
    if m_draws < 10_000:
        raise ValueError("oracle values need at least 10^4 draws")
    model = model or CovariateModel()
    if isinstance(rng, (int, np.integer)) or rng is None:
        x = oracle_covariates(model, m_draws, 0 if rng is None else int(rng))
    else:
        x = sample_covariates(model, rng, m_draws)
    return value_on_draws(scenario, rule.decide(x), x)


def oracle_regret(scenario: ScenarioSpec, rule: TreatmentRule, m_draws: int = 200_000,
                  rng: np.random.Generator | int | None = None,
                  model: CovariateModel | None = None) -> float:
    model = model or CovariateModel()
    if isinstance(rng, (int, np.integer)) or rng is None:
        x = oracle_covariates(model, m_draws, 0 if rng is None else int(rng))
    else:
        x = sample_covariates(model, rng, m_draws)
    best = value_on_draws(scenario, OptimalRule(scenario).decide(x), x)
    return best - value_on_draws(scenario, rule.decide(x), x)
