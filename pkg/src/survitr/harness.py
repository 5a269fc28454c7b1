"""Monte Carlo experiment runner.

Each (scenario, replication) pair is an independent task seeded from
``(seed, scenario, replication)``, so results do not depend on the worker
count or on which other methods are run. Per-task CSV parts are written
atomically; rerunning an experiment into the same directory skips parts
that already exist.
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .core import FoldAssignment, decide_cohort
from .dgp import (
    CovariateModel,
    ScenarioSpec,
    generate_cohort,
    get_scenario,
    optimal_rule,
    oracle_covariates,
)
from .metrics import ReplicationMetrics, true_value
from .nuisance import fit_nuisances
from .rules import (
    METHODS,
    STATIC_METHODS,
    EstimationError,
    GAParams,
    OWLParams,
    RuleEstimatorSpec,
    crossfit_rule,
    estimate_rule,
    fit_fold_nuisances,
    method_rng,
)
from .value import ESTIMATORS, compute_weights, prepare_weights

logger = logging.getLogger(__name__)

ENSEMBLE = "max_ensemble"
ORACLE_RULE = "oracle_rule"
MODES = ("whole", "crossfit")
_ORACLE_TAG = 0x0AC1E
REPLICATIONS_FILE = "replications.csv"
SUMMARY_FILE = "summary.csv"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class ExperimentConfig:
    scenarios: tuple[int, ...] = (0, 1, 2, 3)
    n: int = 2500
    replications: int = 100
    k_folds: int = 5
    seed: int = 20240101
    methods: tuple[str, ...] = ("cox_lasso", "cox_enet", "ga_plain", "owl_linear", ENSEMBLE)
    modes: tuple[str, ...] = MODES
    estimators: tuple[str, ...] = ("ipw_km",)
    oracle_draws: int = 200_000
    output_dir: str = "results"
    workers: int = 1
    horizon: int = 60
    include_oracle_rule: bool = True
    ensemble_candidates: tuple[str, ...] = ()
    ga_population: int = 50
    ga_generations: int = 100
    ga_bandwidth: float = 0.1
    owl_reg: float = 1e-3
    owl_steps: int = 50_000
    scenario_files: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n < 100:
            raise ValueError("n must be at least 100")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.k_folds < 2:
            raise ValueError("k_folds must be at least 2")
        if not self.methods:
            raise ValueError("methods must be non-empty")
        for m in self.methods:
            if m not in METHODS and m != ENSEMBLE:
                raise ValueError(f"unknown method {m!r}")
        for m in self.ensemble_candidates:
            if m not in METHODS:
                raise ValueError(f"unknown ensemble candidate {m!r}")
        for mode in self.modes:
            if mode not in MODES:
                raise ValueError(f"unknown mode {mode!r}")
        if not self.modes:
            raise ValueError("modes must be non-empty")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ValueError(f"unknown value estimator {e!r}; choose from {sorted(ESTIMATORS)}")
        if self.oracle_draws < 10_000:
            raise ValueError("oracle_draws must be at least 10^4")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.n < 2 * self.k_folds:
            raise ValueError("n too small for the number of folds")

    @property
    def candidates(self) -> tuple[str, ...]:
        if self.ensemble_candidates:
            return self.ensemble_candidates
        return tuple(m for m in self.methods if m != ENSEMBLE and m not in STATIC_METHODS)

    def spec(self, method: str) -> RuleEstimatorSpec:
        return RuleEstimatorSpec(
            method,
            ga=GAParams(population=self.ga_population, generations=self.ga_generations,
                        bandwidth=self.ga_bandwidth),
            owl=OWLParams(reg=self.owl_reg, steps=self.owl_steps),
        )

    def scenario_specs(self) -> dict[int, ScenarioSpec]:
        specs = {}
        for path in self.scenario_files:
            spec = ScenarioSpec.from_config(Path(path).read_text())
            specs[spec.id] = spec
        for sid in self.scenarios:
            if sid not in specs:
                specs[sid] = get_scenario(sid)
        return {sid: specs[sid] for sid in self.scenarios}

    # key-value config files -------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["experiment"] = {k: _format_value(v) for k, v in asdict(self).items()}
        import io

        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, **overrides) -> ExperimentConfig:
        cp = configparser.ConfigParser()
        cp.read_string(text)
        values = {}
        if cp.has_section("experiment"):
            values = parse_fields(dict(cp["experiment"]))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def _format_value(v):
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def parse_fields(raw: dict[str, str]) -> dict:
    """Convert string values (config file or CLI) to ExperimentConfig field types."""
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    out = {}
    for key, text in raw.items():
        if key not in types:
            raise ValueError(f"unknown experiment setting {key!r}")
        kind = types[key]
        text = str(text).strip()
        if kind.startswith("tuple"):
            items = [t.strip() for t in text.split(",") if t.strip()]
            out[key] = tuple(int(t) for t in items) if "int" in kind else tuple(items)
        elif kind == "int":
            out[key] = int(float(text))
        elif kind == "float":
            out[key] = float(text)
        elif kind == "bool":
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"{key} must be a boolean")
            out[key] = text.lower() in ("true", "1", "yes")
        else:
            out[key] = text
    return out


# --------------------------------------------------------------------------
# seeding


def replication_seed(seed: int, scenario: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(scenario), int(rep)])


def oracle_seed(seed: int, scenario: int) -> int:
    ss = np.random.SeedSequence([int(seed), _ORACLE_TAG, int(scenario)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


# --------------------------------------------------------------------------
# one replication


def _value_estimates(cohort, rule, base, estimators, tau):
    w = compute_weights(cohort, rule, base=base, tau=tau)
    return {e: ESTIMATORS[e](cohort, w, tau) for e in estimators}


def run_replication(config: ExperimentConfig, scenario: ScenarioSpec | int,
                    rep: int) -> list[ReplicationMetrics]:
    """Generate one cohort and score every (method, mode) pair on it."""
    if isinstance(scenario, int):
        scenario = config.scenario_specs().get(scenario) or get_scenario(scenario)
    tau = config.horizon
    model = CovariateModel()
    ss = replication_seed(config.seed, scenario.id, rep)
    data_ss, fold_ss, method_ss = ss.spawn(3)
    cohort, _truth = generate_cohort(scenario, model, config.n, np.random.default_rng(data_ss))
    method_seed = int(method_ss.generate_state(1, dtype=np.uint64)[0] >> 1)

    x_oracle = oracle_covariates(model, config.oracle_draws, oracle_seed(config.seed, scenario.id))
    d_opt = optimal_rule(scenario)
    v_opt = true_value(scenario, d_opt, x_oracle)

    methods = [m for m in config.methods if m != ENSEMBLE]
    want_ensemble = ENSEMBLE in config.methods
    if want_ensemble:
        methods += [m for m in config.candidates if m not in methods]
    specs = {m: config.spec(m) for m in methods}
    need_outcome = any(s.needs_outcome_model for s in specs.values())

    nuisances = fit_nuisances(cohort, tau, with_outcome=need_outcome)
    base = prepare_weights(cohort, nuisances.propensity, nuisances.censor, tau)
    est_opt = _value_estimates(cohort, d_opt, base, config.estimators, tau)

    rows: list[ReplicationMetrics] = []

    def emit(method, mode, rule, chosen=""):
        v_hat = _value_estimates(cohort, rule, base, config.estimators, tau)
        v_true = true_value(scenario, rule, x_oracle)
        mis = float(np.mean(decide_cohort(rule, cohort) != decide_cohort(d_opt, cohort)))
        for e in config.estimators:
            rows.append(ReplicationMetrics(
                scenario.id, rep, method, mode, e,
                metric_i=est_opt[e] - v_opt,
                metric_ii=v_true - v_opt,
                metric_iii=v_hat[e] - v_opt,
                misclassification=mis,
                value_estimate=v_hat[e],
                value_estimate_dopt=est_opt[e],
                oracle_value_dhat=v_true,
                oracle_value_dopt=v_opt,
                chosen=chosen,
            ))

    def emit_failure(method, mode, why):
        nan = float("nan")
        for e in config.estimators:
            rows.append(ReplicationMetrics(
                scenario.id, rep, method, mode, e, est_opt[e] - v_opt, nan, nan, nan, nan,
                est_opt[e], nan, v_opt, status=f"failed: {why}"))

    if config.include_oracle_rule:
        emit(ORACLE_RULE, "whole", d_opt)

    folds = None
    fold_nuis = None
    for mode in config.modes:
        rules = {}
        if mode == "crossfit":
            folds = FoldAssignment.random(cohort.n, config.k_folds, np.random.default_rng(fold_ss))
            try:
                fold_nuis = fit_fold_nuisances(cohort, folds, tau, with_outcome=need_outcome)
            except EstimationError as exc:
                for m in config.methods:
                    emit_failure(m, mode, exc)
                continue
        for m in methods:
            rng = method_rng(method_seed, f"{m}/{mode}")
            try:
                if mode == "whole":
                    rules[m] = estimate_rule(specs[m], cohort, nuisances, tau, rng).rule
                else:
                    rules[m] = crossfit_rule(cohort, specs[m], folds=folds, tau=tau, rng=rng,
                                             fold_nuisances=fold_nuis)[0]
            except (EstimationError, ValueError, np.linalg.LinAlgError) as exc:
                logger.warning("scenario %s rep %s: %s/%s failed: %s", scenario.id, rep, m,
                               mode, exc)
                if m in config.methods:
                    emit_failure(m, mode, exc)
                continue
            if m in config.methods:
                emit(m, mode, rules[m])
        if want_ensemble:
            # selection always uses the IPW-KM estimate
            km = {m: _value_estimates(cohort, rules[m], base, ("ipw_km",), tau)["ipw_km"]
                  for m in config.candidates if m in rules}
            km = {m: v for m, v in km.items() if np.isfinite(v)}
            if not km:
                emit_failure(ENSEMBLE, mode, "every candidate failed")
            else:
                order = list(config.candidates)
                chosen = max(km, key=lambda m: (km[m], -order.index(m)))
                emit(ENSEMBLE, mode, rules[chosen], chosen=chosen)
    return rows


# --------------------------------------------------------------------------
# experiments


def _part_path(out: Path, scenario: int, rep: int) -> Path:
    return out / "parts" / f"scenario{scenario}_rep{rep:05d}.csv"


def _write_rows(path: Path, rows: list[ReplicationMetrics]) -> None:
    tmp = path.with_suffix(".tmp")
    with tmp.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ReplicationMetrics.columns())
        for r in rows:
            writer.writerow(r.as_row())
    os.replace(tmp, path)


def _task(args):
    config, scenario, rep, path = args
    rows = run_replication(config, scenario, rep)
    _write_rows(Path(path), rows)
    return scenario.id, rep


def run_experiment(config: ExperimentConfig, progress=None) -> Path:
    """Run every (scenario, replication) not already on disk, then summarize.

    Returns the output directory containing ``replications.csv``,
    ``summary.csv`` and ``manifest.json``.
    """
    out = Path(config.output_dir)
    (out / "parts").mkdir(parents=True, exist_ok=True)
    scenarios = config.scenario_specs()
    todo, skipped = [], 0
    for sid, spec in scenarios.items():
        for rep in range(config.replications):
            path = _part_path(out, sid, rep)
            if path.exists():
                skipped += 1
            else:
                todo.append((config, spec, rep, str(path)))
    start = time.time()
    if config.workers == 1 or len(todo) <= 1:
        for i, task in enumerate(todo):
            _task(task)
            if progress:
                progress(i + 1, len(todo))
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for i, _ in enumerate(pool.map(_task, todo, chunksize=1)):
                if progress:
                    progress(i + 1, len(todo))
    wall = time.time() - start

    rows = []
    for sid in scenarios:
        for rep in range(config.replications):
            with _part_path(out, sid, rep).open(newline="") as fh:
                rows.extend(csv.DictReader(fh))
    columns = ReplicationMetrics.columns()
    with (out / REPLICATIONS_FILE).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    summarize(out)
    manifest = {
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()},
        "scenarios": {str(k): v.to_config() for k, v in scenarios.items()},
        "versions": {
            "survitr": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        "tasks_run": len(todo),
        "tasks_resumed": skipped,
        "wall_time_seconds": wall,
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2))
    return out


SUMMARY_METRICS = ("metric_i", "metric_ii", "metric_iii", "misclassification", "value_estimate")


def load_results(results_dir) -> list[ReplicationMetrics]:
    path = Path(results_dir)
    if path.is_dir():
        path = path / REPLICATIONS_FILE
    if not path.exists():
        raise FileNotFoundError(f"no results found at {path}")
    with path.open(newline="") as fh:
        rows = [ReplicationMetrics.from_row(r) for r in csv.DictReader(fh)]
    if not rows:
        raise ValueError(f"{path} contains no result rows")
    return rows


def summarize(results_dir):
    """Per (scenario, method, mode, estimator) mean, SD and five-number summary of each metric.

    Writes ``summary.csv`` next to the replication file and returns it as a DataFrame.
    """
    import pandas as pd

    results_dir = Path(results_dir)
    rows = load_results(results_dir)
    df = pd.DataFrame([asdict(r) for r in rows])
    keys = ["scenario", "method", "mode", "estimator"]
    records = []
    for key, grp in df.groupby(keys, sort=True):
        rec = dict(zip(keys, key))
        rec["n_ok"] = int((grp["status"] == "ok").sum())
        rec["n_failed"] = int((grp["status"] != "ok").sum())
        for metric in SUMMARY_METRICS:
            vals = grp[metric].dropna().to_numpy()
            if vals.size:
                q = np.quantile(vals, [0.0, 0.25, 0.5, 0.75, 1.0])
                stats = {"mean": vals.mean(), "sd": vals.std(ddof=1) if vals.size > 1 else np.nan,
                         "min": q[0], "q1": q[1], "median": q[2], "q3": q[3], "max": q[4]}
            else:
                stats = dict.fromkeys(("mean", "sd", "min", "q1", "median", "q3", "max"), np.nan)
            for name, v in stats.items():
                rec[f"{metric}_{name}"] = v
            if metric == "metric_iii":
                rec["metric_iii_abs_mean"] = np.abs(vals).mean() if vals.size else np.nan
        records.append(rec)
    summary = pd.DataFrame.from_records(records)
    summary.to_csv(results_dir / SUMMARY_FILE if results_dir.is_dir() else
                   results_dir.with_name(SUMMARY_FILE), index=False, float_format="%.6g")
    return summary


def with_overrides(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(config, **{k: v for k, v in changes.items() if v is not None})
