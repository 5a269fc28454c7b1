"""Command-line interface: ``survitr {generate,run,summarize,oracle}``.

Settings come from the built-in defaults, then an optional INI file
(``--config``, section ``[experiment]``), then command-line flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .core import StaticRule
from .dgp import CovariateModel, ScenarioSpec, generate_cohort, get_scenario, optimal_rule, oracle_covariates, value_on_draws
from .harness import ExperimentConfig, parse_fields, replication_seed, run_experiment, summarize, oracle_seed

# flag name -> ExperimentConfig field
_RUN_FLAGS = {
    "scenarios": "comma-separated scenario ids",
    "n": "records per cohort",
    "replications": "replications per scenario",
    "k_folds": "folds for cross-fitting",
    "seed": "master seed",
    "methods": "comma-separated rule estimators (add max_ensemble for the ensemble)",
    "modes": "comma-separated modes: whole, crossfit",
    "estimators": "comma-separated value estimators: ipw_km, ipw_ht, ipw_hajek",
    "oracle_draws": "covariate draws used for true values",
    "output_dir": "results directory",
    "workers": "parallel worker processes",
    "ensemble_candidates": "comma-separated ensemble candidates (default: all listed methods)",
    "scenario_files": "comma-separated INI files defining extra scenarios",
}


class ConfigError(Exception):
    pass


def _add_run_flags(p: argparse.ArgumentParser, names) -> None:
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, help=_RUN_FLAGS[name])


def build_config(args: argparse.Namespace, names) -> ExperimentConfig:
    """Defaults < config file < flags."""
    text = ""
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
    flags = {k: getattr(args, k) for k in names if getattr(args, k, None) is not None}
    try:
        overrides = parse_fields(flags)
        return ExperimentConfig.from_ini(text, **overrides) if text else ExperimentConfig(**overrides)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _scenario(config: ExperimentConfig, sid: int) -> ScenarioSpec:
    specs = config.scenario_specs()
    return specs.get(sid) or get_scenario(sid)


def cmd_generate(args) -> int:
    config = build_config(args, ("seed", "n", "scenario_files"))
    try:
        spec = _scenario(config, int(args.scenario))
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    rep = int(args.replication)
    data_ss = replication_seed(config.seed, spec.id, rep).spawn(3)[0]
    cohort, _ = generate_cohort(spec, CovariateModel(), config.n, np.random.default_rng(data_ss))
    cohort.to_csv(args.out)
    print(f"wrote {cohort.n} records ({int(cohort.delta.sum())} events) to {args.out}")
    return 0


def cmd_run(args) -> int:
    config = build_config(args, _RUN_FLAGS)

    def progress(done, total):
        if args.verbose:
            print(f"\r{done}/{total} replications", end="", file=sys.stderr, flush=True)

    out = run_experiment(config, progress=progress)
    if args.verbose:
        print(file=sys.stderr)
    print(f"results written to {out}")
    return 0


def cmd_summarize(args) -> int:
    try:
        table = summarize(args.results)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    cols = ["scenario", "method", "mode", "estimator", "n_ok",
            "metric_i_mean", "metric_ii_mean", "metric_iii_mean", "misclassification_mean"]
    print(table[cols].to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return 0


def cmd_oracle(args) -> int:
    config = build_config(args, ("scenarios", "seed", "oracle_draws", "scenario_files"))
    model = CovariateModel()
    print("scenario  V(d_opt)  V(static_0)  V(static_1)  regret_0  regret_1  ATE")
    for sid, spec in config.scenario_specs().items():
        x = oracle_covariates(model, config.oracle_draws, oracle_seed(config.seed, sid))
        v_opt = value_on_draws(spec, optimal_rule(spec).decide(x), x)
        v0 = value_on_draws(spec, StaticRule(0).decide(x), x)
        v1 = value_on_draws(spec, StaticRule(1).decide(x), x)
        print(f"{sid:>8}  {v_opt:8.4f}  {v0:11.4f}  {v1:11.4f}  {v_opt - v0:8.4f}  "
              f"{v_opt - v1:8.4f}  {v1 - v0:+.4f}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="survitr", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate one cohort and write it as CSV")
    p.add_argument("--config")
    p.add_argument("--scenario", default="0")
    p.add_argument("--replication", default="0")
    p.add_argument("--out", required=True)
    _add_run_flags(p, ("seed", "n", "scenario_files"))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run a Monte Carlo experiment")
    p.add_argument("--config")
    p.add_argument("-v", "--verbose", action="store_true")
    _add_run_flags(p, _RUN_FLAGS)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("summarize", help="summary tables for a results directory")
    p.add_argument("results")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("oracle", help="true values and static-rule regrets per scenario")
    p.add_argument("--config")
    _add_run_flags(p, ("scenarios", "seed", "oracle_draws", "scenario_files"))
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
