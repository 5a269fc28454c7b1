"""Shared domain types: observed records, cohorts, treatment rules, curves, folds."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

N_COVARIATES = 19
N_BINARY = 15
END_OF_STUDY = 61
DEFAULT_COVARIATE_NAMES = tuple(f"x{j}" for j in range(1, N_COVARIATES + 1))


def normal_cdf(z):
    """Standard normal distribution function (vectorized)."""
    return ndtr(z)


@dataclass(frozen=True)
class ObservedRecord:
    """One subject's coarsened observation ``(z, delta, x, a)``."""

    z: int
    delta: int
    x: tuple[float, ...]
    a: int

    def __post_init__(self):
        if int(self.z) != self.z or not 1 <= self.z <= END_OF_STUDY:
            raise ValueError(f"z must be an integer month in [1, {END_OF_STUDY}], got {self.z}")
        if self.delta not in (0, 1):
            raise ValueError(f"delta must be 0 or 1, got {self.delta}")
        if self.a not in (0, 1):
            raise ValueError(f"a must be 0 or 1, got {self.a}")
        n_binary = min(N_BINARY, len(self.x))
        if any(v not in (0, 1) for v in self.x[:n_binary]):
            raise ValueError("covariates x1..x15 must be binary")


@dataclass(frozen=True, eq=False)
class Cohort:
    """Column-oriented set of observed records.

    Arrays are copied and made read-only on construction so a cohort can be
    shared freely between estimators.
    """

    z: np.ndarray
    delta: np.ndarray
    a: np.ndarray
    x: np.ndarray
    covariate_names: tuple[str, ...] = DEFAULT_COVARIATE_NAMES

    def __post_init__(self):
        z = np.array(self.z, dtype=np.int64)
        delta = np.array(self.delta, dtype=np.int64)
        a = np.array(self.a, dtype=np.int64)
        x = np.array(self.x, dtype=float)
        if x.ndim != 2:
            raise ValueError("x must be a 2-d array (n, p)")
        n = x.shape[0]
        if n < 2:
            raise ValueError("a cohort needs at least 2 records")
        if not (z.shape == delta.shape == a.shape == (n,)):
            raise ValueError("z, delta, a and x must have the same number of records")
        if z.min() < 1 or z.max() > END_OF_STUDY:
            raise ValueError(f"z must lie in [1, {END_OF_STUDY}]")
        if not np.isin(delta, (0, 1)).all() or not np.isin(a, (0, 1)).all():
            raise ValueError("delta and a must be binary")
        names = tuple(self.covariate_names)
        if len(names) != x.shape[1]:
            if names == DEFAULT_COVARIATE_NAMES:
                names = tuple(f"x{j}" for j in range(1, x.shape[1] + 1))
            else:
                raise ValueError("covariate_names must have one label per column of x")
        for arr in (z, delta, a, x):
            arr.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return self.n

    @property
    def records(self) -> list[ObservedRecord]:
        return [
            ObservedRecord(int(z), int(d), tuple(float(v) for v in xi), int(a))
            for z, d, xi, a in zip(self.z, self.delta, self.x, self.a)
        ]

    @classmethod
    def from_records(cls, records: Sequence[ObservedRecord], covariate_names=None) -> Cohort:
        if len(records) < 2:
            raise ValueError("a cohort needs at least 2 records")
        dims = {len(r.x) for r in records}
        if len(dims) != 1:
            raise ValueError("all records must share the covariate dimension")
        return cls(
            z=[r.z for r in records],
            delta=[r.delta for r in records],
            a=[r.a for r in records],
            x=[r.x for r in records],
            covariate_names=tuple(covariate_names) if covariate_names else DEFAULT_COVARIATE_NAMES,
        )

    def subset(self, index) -> Cohort:
        index = np.asarray(index)
        return Cohort(self.z[index], self.delta[index], self.a[index], self.x[index],
                      self.covariate_names)

    def to_csv(self, path) -> None:
        write_cohort_csv(self, path)

    @classmethod
    def from_csv(cls, path) -> Cohort:
        return read_cohort_csv(path)


def write_cohort_csv(cohort: Cohort, path) -> None:
    """Write ``z,delta,a,x1..xp``; binary covariates as integers, the rest as decimals."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["z", "delta", "a", *cohort.covariate_names])
        n_binary = min(N_BINARY, cohort.p)
        for i in range(cohort.n):
            row = [int(cohort.z[i]), int(cohort.delta[i]), int(cohort.a[i])]
            row += [int(v) for v in cohort.x[i, :n_binary]]
            row += [repr(float(v)) for v in cohort.x[i, n_binary:]]
            writer.writerow(row)


def read_cohort_csv(path) -> Cohort:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["z", "delta", "a"]:
            raise ValueError("cohort CSV header must start with z,delta,a")
        rows = [r for r in reader if r]
    data = np.array(rows, dtype=float)
    return Cohort(
        z=data[:, 0].astype(np.int64),
        delta=data[:, 1].astype(np.int64),
        a=data[:, 2].astype(np.int64),
        x=data[:, 3:],
        covariate_names=tuple(header[3:]),
    )


# --------------------------------------------------------------------------
# treatment rules


class TreatmentRule:
    """Base class. ``decide`` maps an (n, p) covariate matrix to 0/1 decisions."""

    kind = "abstract"
    #: covariate dimension the rule expects, or None if it accepts any
    dim: int | None = None

    def decide(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.dim is not None and x.shape[1] != self.dim:
            raise ValueError(f"rule expects {self.dim} covariates, got {x.shape[1]}")
        return x

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class StaticRule(TreatmentRule):
    treatment: int
    kind = "static"

    def __post_init__(self):
        if self.treatment not in (0, 1):
            raise ValueError("static treatment must be 0 or 1")

    def decide(self, x):
        x = self._check(x)
        return np.full(x.shape[0], self.treatment, dtype=np.int64)

    def to_dict(self):
        return {"kind": self.kind, "treatment": self.treatment}


@dataclass(frozen=True, eq=False)
class LinearRule(TreatmentRule):
    """``d(x) = I(theta[0] + x @ theta[1:] > 0)``; ties go to treatment 0."""

    theta: np.ndarray
    kind = "linear"

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).ravel()
        if theta.size < 2:
            raise ValueError("theta needs an intercept and at least one slope")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def dim(self):
        return self.theta.size - 1

    def score(self, x) -> np.ndarray:
        x = self._check(x)
        return self.theta[0] + x @ self.theta[1:]

    def decide(self, x):
        return (self.score(x) > 0).astype(np.int64)

    def to_dict(self):
        return {"kind": self.kind, "theta": self.theta.tolist()}


@dataclass(frozen=True, eq=False)
class SmoothedLinearRule(LinearRule):
    """Linear rule with a probit-smoothed soft decision ``Phi(score / bandwidth)``."""

    bandwidth: float = 0.1
    kind = "smoothed_linear"

    def __post_init__(self):
        super().__post_init__()
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    def soft(self, x) -> np.ndarray:
        return normal_cdf(self.score(x) / self.bandwidth)

    def to_dict(self):
        return {"kind": self.kind, "theta": self.theta.tolist(), "bandwidth": self.bandwidth}


@dataclass(frozen=True, eq=False)
class PlugInRule(TreatmentRule):
    """Treat when predicted survival past ``horizon`` is higher under treatment 1.

    ``model`` is any object with ``predict_survival(x, a, s)`` (a fitted Cox model).
    """

    model: object
    horizon: int
    kind = "plug_in"

    @property
    def dim(self):
        return getattr(self.model, "n_covariates", None)

    def decide(self, x):
        x = self._check(x)
        s1 = self.model.predict_survival(x, np.ones(x.shape[0]), self.horizon)
        s0 = self.model.predict_survival(x, np.zeros(x.shape[0]), self.horizon)
        return (s1 > s0).astype(np.int64)

    def to_dict(self):
        return {"kind": self.kind, "horizon": self.horizon, "model": self.model.to_dict()}


@dataclass(frozen=True, eq=False)
class CrossFitRule(TreatmentRule):
    """Fold-specific rules; record ``i`` is decided by the rule trained without its fold."""

    rules: tuple
    folds: FoldAssignment
    kind = "crossfit"

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        if len(self.rules) != self.folds.k_folds:
            raise ValueError("need exactly one rule per fold")

    @property
    def dim(self):
        return self.rules[0].dim

    def decide(self, x, index=None):
        if index is None:
            raise ValueError("cross-fit rules need record indices to pick the held-out rule")
        x = self._check(x)
        index = np.atleast_1d(np.asarray(index))
        if index.shape[0] != x.shape[0]:
            raise ValueError("one index per covariate row is required")
        fold = self.folds.fold_of[index]
        out = np.empty(x.shape[0], dtype=np.int64)
        for k, rule in enumerate(self.rules, start=1):
            mask = fold == k
            if mask.any():
                out[mask] = rule.decide(x[mask])
        return out

    def to_dict(self):
        return {
            "kind": self.kind,
            "k_folds": self.folds.k_folds,
            "fold_of": self.folds.fold_of.tolist(),
            "rules": [r.to_dict() for r in self.rules],
        }


def decide_cohort(rule: TreatmentRule, cohort: Cohort) -> np.ndarray:
    """Decisions for every record of ``cohort`` (cross-fit rules dispatch by index)."""
    if isinstance(rule, CrossFitRule):
        return rule.decide(cohort.x, np.arange(cohort.n))
    return rule.decide(cohort.x)


def evaluate_rule(rule: TreatmentRule, x, index: int | None = None) -> int:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("evaluate_rule takes a single covariate vector")
    if isinstance(rule, CrossFitRule):
        return int(rule.decide(x[None, :], None if index is None else [index])[0])
    return int(rule.decide(x[None, :])[0])


def evaluate_rule_soft(rule: SmoothedLinearRule, x) -> float:
    x = np.asarray(x, dtype=float)
    return float(rule.soft(x[None, :])[0])


def rule_from_dict(data: dict, model_loader=None) -> TreatmentRule:
    kind = data["kind"]
    if kind == "static":
        return StaticRule(int(data["treatment"]))
    if kind == "linear":
        return LinearRule(np.array(data["theta"]))
    if kind == "smoothed_linear":
        return SmoothedLinearRule(np.array(data["theta"]), float(data["bandwidth"]))
    if kind == "plug_in":
        if model_loader is None:
            from .nuisance import CoxModel

            model_loader = CoxModel.from_dict
        return PlugInRule(model_loader(data["model"]), int(data["horizon"]))
    if kind == "crossfit":
        folds = FoldAssignment(int(data["k_folds"]), np.array(data["fold_of"]))
        return CrossFitRule(tuple(rule_from_dict(r, model_loader) for r in data["rules"]), folds)
    raise ValueError(f"unknown rule kind {kind!r}")


# --------------------------------------------------------------------------
# curves and folds


@dataclass(frozen=True, eq=False)
class StepSurvivalCurve:
    """Right-continuous survival step function on an increasing integer grid."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.int64)
        values = np.array(self.values, dtype=float)
        if grid.shape != values.shape or grid.ndim != 1:
            raise ValueError("grid and values must be 1-d arrays of equal length")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(values < 0) or np.any(values > 1):
            raise ValueError("survival values must lie in [0, 1]")
        if np.any(np.diff(values) > 1e-12):
            raise ValueError("survival values must be non-increasing")
        grid.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    def __call__(self, t):
        idx = np.searchsorted(self.grid, t, side="right") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)], 1.0)
        return out if np.ndim(t) else float(out)


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Fold ids in ``1..k_folds`` for each record; fold sizes differ by at most one."""

    k_folds: int
    fold_of: np.ndarray

    def __post_init__(self):
        if self.k_folds < 2:
            raise ValueError("cross-fitting needs at least 2 folds")
        fold_of = np.array(self.fold_of, dtype=np.int64)
        if fold_of.min() < 1 or fold_of.max() > self.k_folds:
            raise ValueError("fold ids must lie in [1, k_folds]")
        sizes = np.bincount(fold_of, minlength=self.k_folds + 1)[1:]
        if sizes.max() - sizes.min() > 1:
            raise ValueError("fold sizes must differ by at most one")
        fold_of.setflags(write=False)
        object.__setattr__(self, "fold_of", fold_of)

    @classmethod
    def random(cls, n: int, k_folds: int, rng: np.random.Generator) -> FoldAssignment:
        if n < k_folds:
            raise ValueError("fewer records than folds")
        base = np.arange(n) % k_folds + 1
        return cls(k_folds, rng.permutation(base))

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def complement(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)
