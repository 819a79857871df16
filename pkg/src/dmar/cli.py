"""Command-line interface.

Subcommands::

    simulate   generate a synthetic cohort CSV
    estimate   fit a decision regime from a cohort CSV
    study      run a Monte Carlo bias study, writing a bundle JSON
    value      compare policy values on fresh evaluation cohorts
    apply      emit per-subject optimal decisions for a fitted regime
    report     render bias / balance / positivity tables

Every subcommand accepts ``--config FILE`` (INI format); command-line flags
override config values, which override built-in defaults.  A documented
template ships with the package (``dmar/reference.cfg``).

Exit status: 0 on success, 1 on a usage error, 2 on a runtime failure.
Errors print a single machine-readable JSON line to standard error:
``{"error": {"code": "usage" | "runtime", "message": "..."}}``.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path
from typing import Callable, Mapping, Sequence

from . import simulate
from .engine import (
    BlipSpec,
    FittedRegime,
    apply_regime,
    fit_regime,
    load_regime,
    save_regime,
)
from .missing import ImputationConfig, locf_complete, pool_regimes, sequential_impute
from .panel import Cohort, ColumnRoleMap, load_cohort, validate_cohort, write_cohort
from .study import (
    EstimatorSpec,
    StudyBundle,
    StudyConfig,
    emit_bias_table,
    emit_value_report,
    run_study,
    value_report,
)
from .weights import (
    balance_diagnostics,
    estimate_propensities_factorized,
    ipcw_time_dependent,
    ipcw_time_fixed,
    ipt_weights,
    overlap_weights,
)

__all__ = ["cli_main", "main"]

_DEFAULTS: dict[str, dict[str, object]] = {
    "simulate": {
        "preset": "A",
        "n": 50_000,
        "seed": 0,
        "policy": "observational",
    },
    "estimate": {
        "method": "WOMA",
        "weights": "overlap",
        "ipcw": "none",
        "stabilized": False,
        "missing": "none",
        "imputations": 25,
        "impute_seed": 0,
        "positivity_floor": 0.01,
        "override_positivity": False,
        "truncate": None,
    },
    "study": {
        "preset": "A",
        "n": 50_000,
        "replicates": 100,
        "seed": 0,
        "weights": "overlap",
        "missing_handler": "none",
        "imputations": 25,
        "stabilized": False,
    },
    "value": {
        "preset": "A",
        "n": 50_000,
        "seed": 0,
        "n_eval": 200_000,
        "outcome_model": "correct",
        "weight_model": "correct",
        "policy_inputs": "true",
    },
    "apply": {},
    "report": {"time": 2, "weights": "overlap", "positivity_floor": 0.01},
}

_COERCE: dict[str, Callable[[str], object]] = {
    "n": int,
    "seed": int,
    "replicates": int,
    "imputations": int,
    "impute_seed": int,
    "n_eval": int,
    "time": int,
    "positivity_floor": float,
    "stabilized": lambda s: s.strip().lower() in ("1", "true", "yes", "on"),
    "override_positivity": lambda s: s.strip().lower() in ("1", "true", "yes", "on"),
    "truncate": lambda s: s,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="dmar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand")

    def add(name: str, help_text: str) -> _Parser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI file with defaults for this subcommand")
        return p

    p = add("simulate", "generate a synthetic cohort CSV")
    p.add_argument("--preset", choices=sorted(simulate.SCENARIO_PRESETS))
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--policy", help="observational | optimal | path to a regime JSON")
    p.add_argument("--out", required=True, help="cohort CSV path")
    p.set_defaults(handler=_cmd_simulate)

    p = add("estimate", "fit a decision regime from a cohort CSV")
    p.add_argument("--cohort", required=True, help="cohort CSV path")
    p.add_argument("--out", required=True, help="regime JSON path")
    p.add_argument("--method", choices=("WOMA", "QLOMA"))
    p.add_argument("--weights", choices=("overlap", "ipt"))
    p.add_argument("--ipcw", choices=("none", "time-fixed", "time-dependent"))
    p.add_argument("--stabilized", action="store_true", default=None,
                   help="stabilize time-dependent censoring weights")
    p.add_argument("--missing", choices=("none", "locf", "mice"))
    p.add_argument("--imputations", type=int, help="imputation replicates for --missing mice")
    p.add_argument("--impute-seed", dest="impute_seed", type=int)
    p.add_argument("--truncate", help="LOW,HIGH percentile pair for inverse-probability weights")
    p.add_argument("--positivity-floor", dest="positivity_floor", type=float)
    p.add_argument("--override-positivity", dest="override_positivity",
                   action="store_true", default=None)
    p.set_defaults(handler=_cmd_estimate)

    p = add("study", "run a Monte Carlo bias study")
    p.add_argument("--preset", choices=sorted(simulate.SCENARIO_PRESETS))
    p.add_argument("--n", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--weights", choices=("overlap", "ipt"))
    p.add_argument("--missing-handler", dest="missing_handler", choices=("none", "locf", "mice"))
    p.add_argument("--imputations", type=int)
    p.add_argument("--stabilized", action="store_true", default=None)
    p.add_argument("--out", required=True, help="study bundle JSON path")
    p.add_argument("--bias-table", dest="bias_table", help="also render the bias table CSV here")
    p.set_defaults(handler=_cmd_study)

    p = add("value", "compare policy values on fresh evaluation cohorts")
    p.add_argument("--preset", choices=sorted(simulate.SCENARIO_PRESETS))
    p.add_argument("--n", type=int, help="estimation cohort size")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-eval", dest="n_eval", type=int, help="evaluation cohort size")
    p.add_argument("--outcome-model", dest="outcome_model", choices=("correct", "wrong"))
    p.add_argument("--weight-model", dest="weight_model", choices=("correct", "wrong"))
    p.add_argument("--policy-inputs", dest="policy_inputs", choices=("true", "carry-forward"))
    p.add_argument("--out", required=True, help="value report CSV path ('-' for stdout)")
    p.set_defaults(handler=_cmd_value)

    p = add("apply", "emit per-subject optimal decisions for a fitted regime")
    p.add_argument("--cohort", required=True)
    p.add_argument("--regime", required=True, help="regime JSON path")
    p.add_argument("--out", required=True, help="decisions CSV path ('-' for stdout)")
    p.add_argument("--contingency", help="received-vs-optimal count table CSV path")
    p.set_defaults(handler=_cmd_apply)

    p = add("report", "render bias / balance / positivity tables")
    p.add_argument("--kind", required=True, choices=("bias", "balance", "positivity"))
    p.add_argument("--bundle", help="study bundle JSON (kind=bias)")
    p.add_argument("--cohort", help="cohort CSV (kind=balance or positivity)")
    p.add_argument("--time", type=int, help="decision time for the balance table")
    p.add_argument("--weights", choices=("overlap", "ipt"), help="weighting for the balance table")
    p.add_argument("--positivity-floor", dest="positivity_floor", type=float)
    p.add_argument("--out", required=True, help="output CSV path ('-' for stdout)")
    p.set_defaults(handler=_cmd_report)

    return parser


def _usage_checked(fn, *args, **kwargs):
    """Call a constructor, reporting its ValueError as a usage problem.

    Library errors (panel, fitting, imputation) also derive from ValueError
    but signal data problems at run time, so only wrap calls that validate
    user-supplied parameters.
    """
    try:
        return fn(*args, **kwargs)
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc


def _merged(args: argparse.Namespace, key: str) -> object:
    """Flag value, else config value, else built-in default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    section = args.subcommand
    if getattr(args, "_config", None) is not None and args._config.has_option(section, key):
        raw = args._config.get(section, key)
        return _COERCE.get(key, str)(raw)
    defaults = _DEFAULTS.get(section, {})
    if key in defaults:
        return defaults[key]
    raise _UsageError(f"--{key.replace('_', '-')} is required")


def _load_config(args: argparse.Namespace) -> None:
    path = getattr(args, "config", None)
    if path is None:
        args._config = None
        return
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise _UsageError(f"config file not found: {path}")
    args._config = parser


def _parse_truncation(raw: object) -> tuple[float, float] | None:
    if raw is None or raw == "":
        return None
    if isinstance(raw, tuple):
        return raw
    parts = str(raw).split(",")
    if len(parts) != 2:
        raise _UsageError("--truncate expects LOW,HIGH percentiles (e.g. 1,99)")
    low, high = (float(p) for p in parts)
    if not 0 <= low < high <= 100:
        raise _UsageError("--truncate percentiles must satisfy 0 <= LOW < HIGH <= 100")
    return (low, high)


def _roles_from_config(config: configparser.ConfigParser | None) -> ColumnRoleMap | None:
    """Column roles from [roles] / [treatment_free] sections, if present."""
    if config is None or not config.has_section("roles"):
        return None

    def terms(option: str, fallback: tuple[str, ...]) -> tuple[str, ...]:
        if not config.has_option("roles", option):
            return fallback
        return tuple(
            t.strip() for t in config.get("roles", option).split(",") if t.strip()
        )

    treatment_free: dict[int, tuple[str, ...]] = {}
    if config.has_section("treatment_free"):
        for key, raw in config.items("treatment_free"):
            treatment_free[int(key)] = tuple(t.strip() for t in raw.split(",") if t.strip())
    base = ColumnRoleMap()
    return ColumnRoleMap(
        confounders=terms("confounders", base.confounders),
        visit_covariates=terms("visit_covariates", base.visit_covariates),
        visit_modifiers=terms("visit_modifiers", base.visit_modifiers),
        addon_modifiers=terms("addon_modifiers", base.addon_modifiers),
        treatment_free=treatment_free or None,
    )


def _write_text(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# --------------------------------------------------------------------------
# Handlers
# --------------------------------------------------------------------------


def _cmd_simulate(args: argparse.Namespace) -> None:
    _load_config(args)
    scn = _usage_checked(
        simulate.scenario,
        str(_merged(args, "preset")),
        n=int(_merged(args, "n")),
        seed=int(_merged(args, "seed")),
    )
    policy_arg = str(_merged(args, "policy"))
    if policy_arg == "observational":
        policy = None
    elif policy_arg == "optimal":
        policy = simulate.true_optimal_policy()
    else:
        policy = simulate.vectorized_policy(load_regime(policy_arg))
    cohort = simulate.generate_cohort(scn, policy=policy)
    write_cohort(cohort, args.out)


def _fit_from_args(
    cohort: Cohort,
    args: argparse.Namespace,
    spec: BlipSpec,
) -> FittedRegime:
    method = str(_merged(args, "method"))
    weight_kind = str(_merged(args, "weights"))
    ipcw_mode = str(_merged(args, "ipcw"))
    stabilized = bool(_merged(args, "stabilized"))
    truncation = _parse_truncation(_merged(args, "truncate"))
    if ipcw_mode == "none":
        ipcw = None
    elif ipcw_mode == "time-fixed":
        ipcw = ipcw_time_fixed(cohort)
    else:
        ipcw = ipcw_time_dependent(cohort, stabilized=stabilized)
    return fit_regime(
        cohort,
        spec=spec,
        method=method,
        weight_kind=weight_kind,
        ipcw=ipcw,
        positivity_floor=float(_merged(args, "positivity_floor")),
        override_positivity=bool(_merged(args, "override_positivity")),
        truncation=truncation,
    )


def _cmd_estimate(args: argparse.Namespace) -> None:
    _load_config(args)
    roles = _roles_from_config(args._config)
    cohort = load_cohort(args.cohort, schema=roles)
    spec = BlipSpec.from_cohort(cohort)
    missing = str(_merged(args, "missing"))
    if missing == "none":
        regime = _fit_from_args(cohort, args, spec)
    elif missing == "locf":
        regime = _fit_from_args(locf_complete(cohort), args, spec)
    else:
        completed = sequential_impute(
            cohort,
            ImputationConfig(
                m=int(_merged(args, "imputations")),
                noise=True,
                seed=int(_merged(args, "impute_seed")),
            ),
        )
        regime = pool_regimes([_fit_from_args(c, args, spec) for c in completed])
    save_regime(regime, args.out)


def _cmd_study(args: argparse.Namespace) -> None:
    _load_config(args)
    config = _usage_checked(
        StudyConfig,
        preset=str(_merged(args, "preset")),
        n=int(_merged(args, "n")),
        replicates=int(_merged(args, "replicates")),
        seed=int(_merged(args, "seed")),
        weight_kind=str(_merged(args, "weights")),
        missing_handler=str(_merged(args, "missing_handler")),
        imputations=int(_merged(args, "imputations")),
        stabilized_ipcw=bool(_merged(args, "stabilized")),
    )
    bundle = run_study(config)
    _write_text(args.out, bundle.to_json())
    if args.bias_table:
        _write_text(args.bias_table, emit_bias_table(bundle))


def _cmd_value(args: argparse.Namespace) -> None:
    _load_config(args)
    rows = value_report(
        preset=str(_merged(args, "preset")),
        n=int(_merged(args, "n")),
        seed=int(_merged(args, "seed")),
        n_eval=int(_merged(args, "n_eval")),
        outcome_model=str(_merged(args, "outcome_model")),
        weight_model=str(_merged(args, "weight_model")),
        policy_inputs=str(_merged(args, "policy_inputs")),
    )
    _write_text(args.out, emit_value_report(rows))


def _cmd_apply(args: argparse.Namespace) -> None:
    _load_config(args)
    roles = _roles_from_config(args._config)
    cohort = load_cohort(args.cohort, schema=roles)
    regime = load_regime(args.regime)
    decisions = apply_regime(regime, cohort)
    lines = ["id,time,received_visit,received_addon,optimal_visit,optimal_addon"]
    for t in decisions.stages:
        chosen = decisions.decisions[t]
        for i in range(cohort.n):
            if chosen[i] < 0:
                continue
            opt_visit = 1 if chosen[i] >= 1 else 0
            opt_addon = 1 if chosen[i] == 2 else 0
            lines.append(
                f"{cohort.ids[i]},{t},{cohort.dn[i, t]},{cohort.a[i, t]},{opt_visit},{opt_addon}"
            )
    _write_text(args.out, "\n".join(lines) + "\n")
    if args.contingency:
        rows = ["time,received,optimal,count"]
        for t in decisions.stages:
            table = decisions.contingency[t]
            for received in range(3):
                for optimal in range(3):
                    rows.append(f"{t},{received},{optimal},{int(table[received, optimal])}")
        _write_text(args.contingency, "\n".join(rows) + "\n")


def _cmd_report(args: argparse.Namespace) -> None:
    _load_config(args)
    if args.kind == "bias":
        if not args.bundle:
            raise _UsageError("report --kind bias needs --bundle")
        bundle = StudyBundle.from_json(Path(args.bundle).read_text())
        _write_text(args.out, emit_bias_table(bundle))
        return
    if not args.cohort:
        raise _UsageError(f"report --kind {args.kind} needs --cohort")
    roles = _roles_from_config(args._config)
    cohort = load_cohort(args.cohort, schema=roles)
    if args.kind == "balance":
        t = int(_merged(args, "time"))
        weight_kind = str(_merged(args, "weights"))
        received = cohort.dn[:, t].astype(int) + cohort.dn[:, t].astype(int) * cohort.a[:, t].astype(int)
        props = estimate_propensities_factorized(cohort, t)
        if weight_kind == "overlap":
            wv = overlap_weights(props, received)
        else:
            wv = ipt_weights(props, received)
        table = balance_diagnostics(cohort, t, wv)
        _write_text(args.out, table.to_csv())
        return
    report = validate_cohort(cohort, positivity_floor=float(_merged(args, "positivity_floor")))
    flagged = {(t, c) for t, c, _ in report.positivity_flags}
    lines = ["time,category,frequency,flagged"]
    for t in sorted(report.strategy_frequencies):
        freqs = report.strategy_frequencies[t]
        for c, f in enumerate(freqs):
            mark = "yes" if (t, c) in flagged else "no"
            lines.append(f"{t},{c},{repr(float(f))},{mark}")
    _write_text(args.out, "\n".join(lines) + "\n")


def _emit_error(code: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": {"code": code, "message": message}}) + "\n")


def cli_main(argv: Sequence[str] | None = None) -> int:
    """Entry point; returns the exit status instead of raising SystemExit."""
    try:
        args = _build_parser().parse_args(argv)
    except _UsageError as exc:
        _emit_error("usage", str(exc))
        return 1
    except SystemExit as exc:  # --help prints and exits 0
        return int(exc.code or 0)
    if not getattr(args, "subcommand", None):
        _emit_error("usage", "a subcommand is required (simulate, estimate, study, value, apply, report)")
        return 1
    try:
        args.handler(args)
    except _UsageError as exc:
        _emit_error("usage", str(exc))
        return 1
    except Exception as exc:
        _emit_error("runtime", f"{type(exc).__name__}: {exc}")
        return 2
    return 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
