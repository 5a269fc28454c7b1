"""Nuisance models: propensity score and Cox/Breslow conditional survival.

The Cox fitter handles heavily tied, month-coarsened times with Breslow's
approximation. Penalized fits (ridge, lasso, elastic net) use cyclic
coordinate descent on the exact quadratic expansion of the partial
log-likelihood, with the penalty tuned by K-fold cross-validated partial
likelihood.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import expit

from .core import Cohort, StepSurvivalCurve

logger = logging.getLogger(__name__)

CLIP = 0.01


class ConvergenceWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# propensity


@dataclass(frozen=True, eq=False)
class PropensityModel:
    coefficients: np.ndarray
    converged: bool = True
    n_iter: int = 0
    max_score: float = 0.0
    diagnostics: tuple[str, ...] = ()

    def predict(self, x, clip: float = CLIP) -> np.ndarray:
        x = np.atleast_2d(x)
        prob = expit(self.coefficients[0] + x @ self.coefficients[1:])
        return np.clip(prob, clip, 1 - clip)

    def to_dict(self) -> dict:
        return {
            "coefficients": self.coefficients.tolist(),
            "converged": self.converged,
            "n_iter": self.n_iter,
            "max_score": self.max_score,
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, data: dict) -> PropensityModel:
        return cls(np.array(data["coefficients"]), data["converged"], data["n_iter"],
                   data["max_score"], tuple(data["diagnostics"]))


def fit_logistic(cohort: Cohort, tol: float = 1e-8, max_iter: int = 100) -> PropensityModel:
    """Newton-Raphson maximum likelihood for P(A = 1 | X).

    Raises ValueError when one treatment arm is empty. Separation does not
    raise: the fit stops at ``max_iter`` and records a diagnostic.
    """
    a = cohort.a.astype(float)
    if a.min() == a.max():
        raise ValueError("both treatment arms must be present to fit a propensity model")
    design = np.column_stack([np.ones(cohort.n), cohort.x])
    beta = np.zeros(design.shape[1])
    beta[0] = np.log(a.mean() / (1 - a.mean()))
    diagnostics = []
    converged = False
    score = np.inf
    for it in range(1, max_iter + 1):
        prob = expit(design @ beta)
        grad = design.T @ (a - prob)
        score = float(np.abs(grad).max())
        if score < tol:
            converged = True
            break
        w = prob * (1 - prob)
        hess = design.T @ (design * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        beta = beta + step
    else:
        it = max_iter
    if np.abs(beta).max() > 15:
        # under separation the score vanishes while coefficients diverge
        converged = False
        msg = f"coefficients diverging after {it} iterations, likely separation"
    elif not converged:
        msg = f"logistic fit did not converge in {max_iter} iterations (max score {score:.3g})"
    if not converged:
        diagnostics.append(msg)
        warnings.warn(msg, ConvergenceWarning, stacklevel=2)
    return PropensityModel(beta, converged, it, score, tuple(diagnostics))


# --------------------------------------------------------------------------
# Cox proportional hazards


@dataclass(frozen=True)
class Penalty:
    """``lam * ((1 - alpha) * ||b||^2 / 2 + alpha * ||b||_1)`` on the per-record scale.

    ``lam=None`` means: choose it by cross-validation.
    """

    alpha: float = 0.0
    lam: float | None = 0.0

    @classmethod
    def ridge(cls, lam=None):
        return cls(0.0, lam)

    @classmethod
    def lasso(cls, lam=None):
        return cls(1.0, lam)

    @classmethod
    def elastic_net(cls, lam=None, alpha=0.5):
        return cls(alpha, lam)

    @property
    def is_null(self):
        return self.lam is not None and self.lam == 0


_TINY = 1e-300


class _RiskSets:
    """Sorted-time bookkeeping for Breslow partial likelihood computations."""

    def __init__(self, times, events, weights=None):
        times = np.asarray(times, dtype=float)
        events = np.asarray(events, dtype=float)
        self.n = times.shape[0]
        self.times = times
        self.events = events
        # descending time so that a cumulative sum gives risk-set totals
        self.order = np.argsort(-times, kind="stable")
        t_sorted = times[self.order]
        self.event_times = np.unique(times[events > 0])
        # index of the last sorted record with time >= t_k
        self.risk_end = np.searchsorted(-t_sorted, -self.event_times, side="right") - 1
        self.deaths = np.array([events[times == t].sum() for t in self.event_times])
        # for each record, number of event times <= its own time
        self.n_before = np.searchsorted(self.event_times, times, side="right")

    def stats(self, eta, x, need_hessian=True):
        """Log-likelihood, gradient and (negated) Hessian at linear predictor ``eta``."""
        shift = eta.max()
        r = np.exp(eta - shift)
        r_sorted = r[self.order]
        log_s0 = self._log_s0(eta)
        # s0 can underflow when a coefficient diverges; the floor only affects
        # risk sets whose members all have negligible weight
        s0 = np.maximum(np.exp(log_s0 - shift), _TINY)
        s1 = np.cumsum(x[self.order] * r_sorted[:, None], axis=0)[self.risk_end]
        d = self.deaths
        loglik = float(self.events @ eta - d @ log_s0)
        mean = s1 / s0[:, None]
        grad = self.events @ x - d @ mean
        if not need_hessian:
            return loglik, grad, None
        inc = d / s0
        cum = np.concatenate([[0.0], np.cumsum(inc)])[self.n_before]
        c = r * cum
        hess = x.T @ (x * c[:, None]) - (mean * d[:, None]).T @ mean
        return loglik, grad, hess

    def _log_s0(self, eta):
        return np.logaddexp.accumulate(eta[self.order])[self.risk_end]

    def loglik(self, eta):
        return float(self.events @ eta - self.deaths @ self._log_s0(eta))

    def breslow(self, eta):
        """Baseline hazard jumps at each event time."""
        return np.exp(np.log(self.deaths) - self._log_s0(eta))


@njit(cache=True)
def _cd_sweeps(hess, lin, beta, l1, l2, tol, max_sweeps):
    p = beta.shape[0]
    hb = hess @ beta
    for _ in range(max_sweeps):
        max_change = 0.0
        for j in range(p):
            djj = hess[j, j]
            if djj + l2[j] <= 1e-14:
                # no curvature: coordinate not identified by the data
                continue
            old = beta[j]
            u = lin[j] - hb[j] + djj * old
            mag = abs(u) - l1[j]
            new = 0.0
            if mag > 0:
                new = (mag if u > 0 else -mag) / (djj + l2[j])
            if new != old:
                delta = new - old
                for i in range(p):
                    hb[i] += hess[i, j] * delta
                beta[j] = new
                change = abs(delta) * np.sqrt(djj)
                if change > max_change:
                    max_change = change
        if max_change < tol:
            break
    return beta


def _cd_quadratic(hess, lin, beta, l1, l2, tol=1e-8, max_sweeps=10_000):
    """Minimise ``0.5 b'Hb - lin'b + sum(l1*|b|) + 0.5*sum(l2*b^2)`` by cyclic coordinate descent."""
    if not np.any(l1):
        try:
            return np.linalg.solve(hess + np.diag(l2), lin)
        except np.linalg.LinAlgError:
            # rank-deficient design (e.g. a covariate constant within every risk set)
            return np.linalg.lstsq(hess + np.diag(l2), lin, rcond=None)[0]
    return _cd_sweeps(np.ascontiguousarray(hess), lin.astype(np.float64), beta.astype(np.float64).copy(),
                      l1.astype(np.float64), l2.astype(np.float64), tol, max_sweeps)


def _fit_path(risk: _RiskSets, x, lams, alpha, penalty_factor, beta0=None,
              tol=1e-5, max_newton=50):
    """Penalized partial likelihood solutions along a decreasing ``lams`` path (warm starts).

    Objective per record: loglik/n - penalty. Returns (len(lams), p) coefficients
    and a per-lambda convergence flag.
    """
    n, p = x.shape
    beta = np.zeros(p) if beta0 is None else beta0.copy()
    out = np.empty((len(lams), p))
    ok = np.ones(len(lams), dtype=bool)
    for k, lam in enumerate(lams):
        l1 = lam * alpha * penalty_factor
        l2 = lam * (1 - alpha) * penalty_factor
        pen = lambda b: float(l1 @ np.abs(b) + 0.5 * l2 @ b ** 2)  # noqa: E731
        eta = x @ beta
        loglik, grad, hess = risk.stats(eta, x)
        obj = loglik / n - pen(beta)
        for _ in range(max_newton):
            g, h = grad / n, hess / n
            new = _cd_quadratic(h, g + h @ beta, beta, l1, l2)
            # step halving keeps the penalized objective monotone
            step = 1.0
            for _half in range(30):
                cand = beta + step * (new - beta)
                cand_eta = x @ cand
                cand_ll = risk.loglik(cand_eta)
                cand_obj = cand_ll / n - pen(cand)
                if cand_obj >= obj - 1e-13:
                    break
                step /= 2
            # Newton converges quadratically: a step this small leaves error ~tol**2
            converged = np.max(np.abs(cand - beta)) < tol
            beta, obj = cand, cand_obj
            if converged:
                break
            loglik, grad, hess = risk.stats(cand_eta, x)
        else:
            ok[k] = False
        out[k] = beta
    return out, ok


@dataclass(frozen=True, eq=False)
class CoxModel:
    """Fitted Cox model with a Breslow baseline on an integer month grid.

    The design is ``[x, a]`` for main-effect models and ``[x, a, a*x]`` when
    ``interactions`` is set. ``baseline_jumps[s-1]`` is the Breslow cumulative
    hazard increment at month ``s``.
    """

    coefficients: np.ndarray
    baseline_jumps: np.ndarray
    n_covariates: int
    interactions: bool = False
    penalty: Penalty = field(default_factory=Penalty)
    converged: bool = True
    diagnostics: tuple[str, ...] = ()

    @property
    def max_time(self) -> int:
        return self.baseline_jumps.shape[0]

    @property
    def cumulative_hazard(self) -> np.ndarray:
        """Cumulative baseline hazard at months 0..max_time."""
        return np.concatenate([[0.0], np.cumsum(self.baseline_jumps)])

    def design(self, x, a) -> np.ndarray:
        return cox_design(x, a, self.interactions)

    def linear_predictor(self, x, a) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        a = np.broadcast_to(np.asarray(a, dtype=float), (x.shape[0],))
        return self.design(x, a) @ self.coefficients

    def _check_time(self, s):
        s = np.asarray(s)
        if np.any(s < 0) or np.any(s > self.max_time):
            raise ValueError(f"time must lie in [0, {self.max_time}]")
        return s.astype(np.int64)

    def predict_survival(self, x, a, s) -> np.ndarray:
        """P(T > s | x, a): right-continuous, includes the jump at ``s``."""
        s = self._check_time(s)
        return np.exp(-self.cumulative_hazard[s] * np.exp(self.linear_predictor(x, a)))

    def predict_survival_before(self, x, a, s) -> np.ndarray:
        """P(T >= s | x, a) on the month grid: excludes the jump at ``s``."""
        s = self._check_time(s)
        return np.exp(-self.cumulative_hazard[np.maximum(s - 1, 0)] *
                      np.exp(self.linear_predictor(x, a)))

    def hazard_increment(self, x, a, s) -> np.ndarray:
        s = self._check_time(s)
        jumps = np.concatenate([[0.0], self.baseline_jumps])
        return jumps[s] * np.exp(self.linear_predictor(x, a))

    def survival_matrix(self, x, a, before=False) -> np.ndarray:
        """(n, max_time) predicted survival at months 1..max_time."""
        lp = np.exp(self.linear_predictor(x, a))
        cum = self.cumulative_hazard
        grid = cum[:-1] if before else cum[1:]
        return np.exp(-np.outer(lp, grid))

    def hazard_matrix(self, x, a) -> np.ndarray:
        return np.outer(np.exp(self.linear_predictor(x, a)), self.baseline_jumps)

    def baseline_curve(self) -> StepSurvivalCurve:
        grid = np.arange(1, self.max_time + 1)
        return StepSurvivalCurve(grid, np.exp(-self.cumulative_hazard[1:]))

    def to_dict(self) -> dict:
        return {
            "coefficients": self.coefficients.tolist(),
            "baseline_jumps": self.baseline_jumps.tolist(),
            "n_covariates": self.n_covariates,
            "interactions": self.interactions,
            "penalty": {"alpha": self.penalty.alpha, "lam": self.penalty.lam},
            "converged": self.converged,
            "diagnostics": list(self.diagnostics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> CoxModel:
        return cls(
            np.array(data["coefficients"]),
            np.array(data["baseline_jumps"]),
            int(data["n_covariates"]),
            bool(data["interactions"]),
            Penalty(**data["penalty"]),
            bool(data["converged"]),
            tuple(data["diagnostics"]),
        )


def cox_design(x, a, interactions=False) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = np.asarray(a, dtype=float).reshape(-1, 1)
    cols = [x, a]
    if interactions:
        cols.append(a * x)
    return np.hstack(cols)


def _cv_folds(n, k, rng):
    base = np.arange(n) % k
    return rng.permutation(base)


def lambda_grid(risk: _RiskSets, xs, alpha, penalty_factor, n_lambda=50, ratio=1e-3):
    """Log-spaced grid from the smallest lambda that zeroes every penalized coefficient."""
    n = xs.shape[0]
    free = penalty_factor == 0
    beta = np.zeros(xs.shape[1])
    if free.any():
        beta[free] = _fit_path(risk, xs[:, free], [0.0], 0.0, np.ones(free.sum()))[0][0]
    _, grad, _ = risk.stats(xs @ beta, xs, need_hessian=False)
    pen = ~free
    lam_max = np.abs(grad[pen]).max() / n / max(alpha, 1e-3) if pen.any() else 1.0
    lam_max = max(lam_max, 1e-8)
    return np.geomspace(lam_max, lam_max * ratio, n_lambda), beta


def fit_cox(times, events, x, a, penalty: Penalty | None = None, *, interactions=False,
            max_time: int | None = None, penalize_treatment: bool = False,
            n_lambda: int = 50, cv_folds: int = 5, rng: np.random.Generator | None = None,
            n_covariates: int | None = None) -> CoxModel:
    """Fit a (penalized) Breslow Cox model on design ``[x, a(, a*x)]``.

    Times are integer months; ``baseline_jumps`` covers months 1..max_time.
    With ``penalty.lam=None`` the penalty weight is picked by ``cv_folds``-fold
    cross-validated partial likelihood over ``n_lambda`` log-spaced values.
    The treatment main effect is unpenalized unless ``penalize_treatment``.
    """
    penalty = penalty or Penalty()
    times = np.asarray(times)
    events = np.asarray(events, dtype=float)
    if events.sum() == 0:
        raise ValueError("cannot fit a Cox model without events")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    design = cox_design(x, a, interactions)
    n, p = design.shape
    p_x = x.shape[1] if n_covariates is None else n_covariates
    max_time = int(times.max()) if max_time is None else int(max_time)

    # standardize inside the fit; constant columns are left alone
    mu = design.mean(axis=0)
    sd = design.std(axis=0)
    const = sd < 1e-12
    sd[const] = 1.0
    xs = (design - mu) / sd
    xs[:, const] = 0.0

    penalty_factor = np.ones(p)
    if not penalize_treatment:
        penalty_factor[p_x] = 0.0
    penalty_factor[const] = 0.0

    risk = _RiskSets(times, events)
    diagnostics = []
    if penalty.is_null:
        path, ok = _fit_path(risk, xs, [0.0], 0.0, penalty_factor)
        beta_s, converged, lam = path[0], bool(ok[0]), 0.0
    else:
        lams, beta_free = lambda_grid(risk, xs, penalty.alpha, penalty_factor, n_lambda)
        if penalty.lam is None:
            rng = rng or np.random.default_rng(0)
            lam = _cv_lambda(times, events, xs, lams, penalty.alpha, penalty_factor, cv_folds,
                             rng, beta_free)
        else:
            lam = float(penalty.lam)
        use = lams[lams > lam]
        grid = np.concatenate([use, [lam]])
        path, ok = _fit_path(risk, xs, grid, penalty.alpha, penalty_factor, beta0=beta_free)
        beta_s, converged = path[-1], bool(ok[-1])
    beta_s = np.where(const, 0.0, beta_s)
    if not converged:
        # typically a monotone likelihood (e.g. a rare binary covariate with no events)
        msg = "Cox fit hit the Newton iteration cap"
        diagnostics.append(msg)
        logger.debug(msg)

    beta = beta_s / sd
    eta = design @ beta
    jumps_at_events = risk.breslow(eta - eta.mean()) * np.exp(-eta.mean())
    jumps = np.zeros(max_time)
    idx = risk.event_times.astype(np.int64)
    keep = (idx >= 1) & (idx <= max_time)
    jumps[idx[keep] - 1] = jumps_at_events[keep]
    return CoxModel(beta, jumps, p_x, interactions, Penalty(penalty.alpha, lam), converged,
                    tuple(diagnostics))


def _cv_lambda(times, events, xs, lams, alpha, penalty_factor, k, rng, beta0):
    """Cross-validated partial likelihood: sum_k [l(b_-k) - l_-k(b_-k)]."""
    fold = _cv_folds(xs.shape[0], k, rng)
    full = _RiskSets(times, events)
    score = np.zeros(len(lams))
    for f in range(k):
        train = fold != f
        if events[train].sum() == 0:
            continue
        risk_tr = _RiskSets(times[train], events[train])
        # selection only needs the path to ~1e-4; the final fit is solved tightly
        path, _ = _fit_path(risk_tr, xs[train], lams, alpha, penalty_factor, beta0=beta0, tol=1e-4)
        for j, b in enumerate(path):
            score[j] += full.loglik(xs @ b) - risk_tr.loglik(xs[train] @ b)
    return float(lams[int(np.argmax(score))])


# --------------------------------------------------------------------------
# cohort-level helpers


def censoring_times(cohort: Cohort, horizon: int = 60):
    """Time and event indicator for modelling loss to follow-up.

    Censoring is observed when ``delta == 0`` and ``z <= horizon``. A record
    with an event in month ``z`` is known uncensored only through month
    ``z - 1`` (a same-month censoring would have been masked by the event),
    so it enters the censoring fit as censored at ``z - 1``.
    """
    events = ((cohort.delta == 0) & (cohort.z <= horizon)).astype(float)
    times = np.where(cohort.delta == 1, cohort.z - 1, cohort.z)
    return times, events


def fit_censoring_model(cohort: Cohort, horizon: int = 60, max_time: int = 61) -> CoxModel:
    times, events = censoring_times(cohort, horizon)
    if events.sum() == 0:
        # no observed loss to follow-up: a degenerate model with zero hazard
        return CoxModel(np.zeros(cohort.p + 1), np.zeros(max_time), cohort.p,
                        diagnostics=("no censoring events; P(C >= s) set to 1",))
    return fit_cox(times, events, cohort.x, cohort.a, max_time=max_time)


def fit_outcome_model(cohort: Cohort, penalty: Penalty | None = None, *, interactions=True,
                      max_time: int = 61, rng=None) -> CoxModel:
    return fit_cox(cohort.z, cohort.delta, cohort.x, cohort.a, penalty,
                   interactions=interactions, max_time=max_time, rng=rng)


def predict_censor_survival(model: CoxModel, x, a, s) -> np.ndarray:
    """P(C >= s | x, a) with month semantics: censoring hazard through month s-1."""
    return model.predict_survival_before(x, a, s)


def predict_event_survival(model: CoxModel, x, a, s) -> np.ndarray:
    return model.predict_survival(x, a, s)


def predict_hazard_increment(model: CoxModel, x, a, s) -> np.ndarray:
    return model.hazard_increment(x, a, s)


def nelson_aalen(times, events, max_time=None) -> np.ndarray:
    """Nelson-Aalen hazard increments on months 1..max_time (unweighted)."""
    times = np.asarray(times, dtype=np.int64)
    events = np.asarray(events)
    max_time = int(times.max()) if max_time is None else max_time
    deaths = np.bincount(times[events > 0], minlength=max_time + 1)[1:max_time + 1]
    at_risk = np.array([(times >= s).sum() for s in range(1, max_time + 1)])
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(at_risk > 0, deaths / np.maximum(at_risk, 1), 0.0)


@dataclass(frozen=True, eq=False)
class Nuisances:
    """Models fitted on one (training) cohort and reused by value estimators."""

    propensity: PropensityModel
    censor: CoxModel
    outcome: CoxModel | None = None


def fit_nuisances(cohort: Cohort, horizon: int = 60, with_outcome: bool = False) -> Nuisances:
    propensity = fit_logistic(cohort)
    censor = fit_censoring_model(cohort, horizon)
    outcome = fit_outcome_model(cohort) if with_outcome else None
    return Nuisances(propensity, censor, outcome)
