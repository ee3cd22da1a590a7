"""Command-line interface: fit, weights, and simulate.

Exit codes: 0 on success, 2 on validation errors, 3 on convergence
failures.  Every failure prints one machine-parsable line to stderr of the
form ``error: <kind>: <message>``.
"""

import argparse
import sys

import numpy as np

from .dataio import ResultTable, load_dataset, load_population_summary, parse_role_map
from .errors import NonConvergenceError, SelweightError, ValidationError
from .fitters import fit_weighted_logistic
from .simulation import METHODS, SimulationConfig, run_study
from .variance import vcov_cl, vcov_known_weights, vcov_pl, wald_ci
from .weights import (
    augment_weights_with_outcome,
    estimate_weights_cl,
    estimate_weights_pl,
    estimate_weights_ps,
    estimate_weights_sr,
    overlap_labels,
    winsorize_weights,
)

FIT_COLUMNS = ["method", "parameter", "estimate", "std_error",
               "ci_lower", "ci_upper"]
WEIGHT_COLUMNS = ["row", "pi_hat", "weight"]
STUDY_COLUMNS = ["method", "parameter", "bias", "relative_bias_pct",
                 "rmse_relative", "coverage", "mean_est_var", "mc_var",
                 "failures", "n_used"]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="selweight",
        description="Selection-bias-adjusted logistic regression for "
                    "non-probability samples",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output file path")
    common.add_argument("--format", choices=("csv", "json"), default="csv")

    data_common = argparse.ArgumentParser(add_help=False)
    data_common.add_argument("--data", required=True,
                             help="internal-sample CSV file")
    data_common.add_argument("--roles", required=True,
                             help="key=value file mapping roles to columns")
    data_common.add_argument("--method", required=True,
                             choices=("unweighted", "pl", "sr", "ps", "cl"))
    data_common.add_argument("--external-data",
                             help="external probability-sample CSV (pl, sr)")
    data_common.add_argument("--summary",
                             help="population summary CSV (ps: joint cells; "
                                  "cl: marginal means)")
    data_common.add_argument("--population-size", type=int,
                             help="target population size (required for ps)")
    data_common.add_argument("--include-outcome-in-selection",
                             action="store_true",
                             help="add the outcome to the selection design")
    data_common.add_argument("--winsorize", nargs=2, type=float,
                             metavar=("Q_LO", "Q_HI"),
                             help="clip weights at these quantile levels")
    data_common.add_argument("--augment-outcome", nargs=2,
                             metavar=("P_POP_COL", "P_INT_COL"),
                             help="columns with population and sample "
                                  "outcome probabilities")

    fit = sub.add_parser("fit", parents=[common, data_common],
                         help="estimate the disease model")
    fit.set_defaults(handler=cli_fit)

    weights = sub.add_parser("weights", parents=[common, data_common],
                             help="estimate selection probabilities only")
    weights.set_defaults(handler=cli_weights)

    simulate = sub.add_parser("simulate", parents=[common],
                              help="run a scenario study")
    simulate.add_argument("--dag", type=int, choices=(1, 2, 3, 4))
    simulate.add_argument("--setup", type=int, choices=(1, 2, 3))
    simulate.add_argument("--replications", type=int, default=None)
    simulate.add_argument("--seed", type=int, default=None)
    simulate.add_argument("--threads", type=int, default=1)
    simulate.add_argument("--population-size", type=int, default=None)
    simulate.add_argument("--config",
                          help="key=value file of scenario fields; explicit "
                               "flags override it")
    simulate.add_argument("--method", default="unweighted,pl,sr,ps,cl",
                          help="comma-separated subset of "
                               f"{{{','.join(METHODS)}}}")
    simulate.set_defaults(handler=cli_simulate)
    return parser


# SimulationConfig fields settable from a --config file, with their parsers.
_CONFIG_SCALARS = {"dag": int, "setup": int, "n_population": int,
                   "replications": int, "seed": int, "alpha0": float,
                   "alpha2": float, "alpha3": float, "external_scale": float,
                   "setup2_scale": float, "z_correlation": float}
_CONFIG_TUPLES = {"theta": 3, "nu": 4}


def parse_simulation_config_file(path):
    """Read key=value scenario settings; unknown keys are rejected."""
    values = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key in values:
                raise ValidationError(f"{path}:{lineno}: duplicate key {key!r}")
            try:
                if key in _CONFIG_SCALARS:
                    values[key] = _CONFIG_SCALARS[key](value)
                elif key in _CONFIG_TUPLES:
                    parts = tuple(float(p) for p in value.split(","))
                    if len(parts) != _CONFIG_TUPLES[key]:
                        raise ValidationError(
                            f"{path}:{lineno}: {key} needs "
                            f"{_CONFIG_TUPLES[key]} comma-separated values")
                    values[key] = parts
                else:
                    raise ValidationError(
                        f"{path}:{lineno}: unknown key {key!r}")
            except ValueError:
                raise ValidationError(
                    f"{path}:{lineno}: cannot parse value for {key!r}"
                ) from None
    return values


def _load_inputs(args):
    roles = parse_role_map(args.roles)
    extra = tuple(args.augment_outcome) if args.augment_outcome else ()
    sample = load_dataset(args.data, roles, extra_columns=extra)
    external = None
    if args.method in ("pl", "sr"):
        if not args.external_data:
            raise ValidationError(f"--external-data is required for {args.method}")
        external = load_dataset(args.external_data, roles)
    return sample, external


def _estimate_pi(args, sample, external):
    """Run the requested weight estimator and return (pi, weight_set|None)."""
    method = args.method
    include_outcome = args.include_outcome_in_selection
    if method == "unweighted":
        return np.ones(sample.n_rows), None

    x_int = sample.selection_design(include_outcome=include_outcome)
    if method in ("pl", "sr"):
        x_ext = external.selection_design(include_outcome=include_outcome)
        pi_ext = external.external_probabilities()
        if method == "pl":
            ws = estimate_weights_pl(x_int, x_ext, pi_ext)
            return ws.pi_hat, ws
        if not sample.roles.external_indicator:
            raise ValidationError(
                "sr needs an external_indicator column on the internal data "
                "to label the overlap"
            )
        if not external.roles.selection_indicator:
            raise ValidationError(
                "sr needs a selection_indicator column on the external data "
                "to label the overlap"
            )
        labels = overlap_labels(
            sample.column(sample.roles.external_indicator) == 1.0,
            external.column(external.roles.selection_indicator) == 1.0,
        )
        ws = estimate_weights_sr(x_int, x_ext, pi_ext, labels)
        return ws.pi_hat, ws

    if not args.summary:
        raise ValidationError(f"--summary is required for {method}")
    if method == "ps":
        summary = load_population_summary(args.summary, "joint_cells")
        if args.population_size is None:
            raise ValidationError("--population-size is required for ps")
        if summary.names is None:
            raise ValidationError("joint summary must name its level columns")
        try:
            cells = np.column_stack([
                sample.column(name).astype(int) for name in summary.names
            ])
        except KeyError as exc:
            raise ValidationError(
                f"data lacks summary level column {exc.args[0]!r}"
            ) from None
        ws = estimate_weights_ps(cells, summary,
                                 population_size=args.population_size)
        return ws.pi_hat, ws
    summary = load_population_summary(args.summary, "marginal_means")
    ws = estimate_weights_cl(x_int, summary)
    return ws.pi_hat, ws


def _post_process_pi(args, sample, pi):
    """Apply outcome augmentation and winsorization to the weights 1/pi."""
    if not args.augment_outcome and not args.winsorize:
        return pi
    w = 1.0 / pi
    if args.augment_outcome:
        p_pop_col, p_int_col = args.augment_outcome
        w = augment_weights_with_outcome(
            w, sample.outcome, sample.column(p_pop_col), sample.column(p_int_col)
        )
    if args.winsorize:
        lo, hi = args.winsorize
        w = winsorize_weights(w, lo, hi)
    return np.clip(1.0 / w, None, 1.0)


def cli_fit(args):
    sample, external = _load_inputs(args)
    roles = sample.roles
    pi, weight_set = _estimate_pi(args, sample, external)
    pi = _post_process_pi(args, sample, pi)
    design = sample.disease_design()
    model = fit_weighted_logistic(design, sample.outcome, pi)
    theta = model.coefficients
    n_pop = args.population_size or sample.n_rows

    if args.method == "pl" and weight_set is not None:
        if not (roles.external_indicator and roles.external_prob):
            raise ValidationError(
                "pl variance needs external_indicator and external_prob "
                "columns on the internal data to locate the overlap"
            )
        overlap_mask = sample.column(roles.external_indicator) == 1.0
        overlap_prob = sample.column(roles.external_prob)
        bad = overlap_mask & ((overlap_prob <= 0.0) | (overlap_prob > 1.0))
        if np.any(bad):
            raise ValidationError(
                "external_prob must lie in (0, 1] on rows flagged by "
                "external_indicator"
            )
        x_ext = external.selection_design(
            include_outcome=args.include_outcome_in_selection)
        model.vcov = vcov_pl(
            theta, weight_set.alpha_hat, design, sample.outcome,
            sample.selection_design(args.include_outcome_in_selection),
            x_ext, external.external_probabilities(), n_pop,
            internal_in_external=overlap_mask,
            internal_pi_ext=overlap_prob,
        )
    elif args.method == "cl" and weight_set is not None:
        model.vcov = vcov_cl(
            theta, weight_set.alpha_hat, design, sample.outcome,
            sample.selection_design(args.include_outcome_in_selection), n_pop,
        )
    else:
        model.vcov = vcov_known_weights(theta, design, sample.outcome, pi, n_pop)

    ci = wald_ci(theta, model.vcov)
    se = np.sqrt(np.diag(model.vcov))
    table = ResultTable(FIT_COLUMNS)
    for j, name in enumerate(model.column_names):
        table.append(method=args.method, parameter=name,
                     estimate=float(theta[j]), std_error=float(se[j]),
                     ci_lower=float(ci[j, 0]), ci_upper=float(ci[j, 1]))
    table.write(args.out, args.format)
    return 0


def cli_weights(args):
    if args.method == "unweighted":
        raise ValidationError("weights requires one of pl, sr, ps, cl")
    sample, external = _load_inputs(args)
    pi, _ = _estimate_pi(args, sample, external)
    pi = _post_process_pi(args, sample, pi)
    table = ResultTable(WEIGHT_COLUMNS)
    for i, value in enumerate(pi, start=1):
        table.append(row=i, pi_hat=float(value), weight=float(1.0 / value))
    table.write(args.out, args.format)
    return 0


def cli_simulate(args):
    methods = tuple(m.strip() for m in args.method.split(",") if m.strip())
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValidationError(f"unknown methods {unknown}")
    settings = parse_simulation_config_file(args.config) if args.config else {}
    overrides = {"dag": args.dag, "setup": args.setup,
                 "n_population": args.population_size,
                 "replications": args.replications, "seed": args.seed}
    settings.update({k: v for k, v in overrides.items() if v is not None})
    settings.setdefault("replications", 500)
    settings.setdefault("seed", 0)
    if "dag" not in settings or "setup" not in settings:
        raise ValidationError(
            "dag and setup are required (flags or --config file)")
    cfg = SimulationConfig(**settings)
    study = run_study(cfg, methods, parallelism=max(1, args.threads))
    table = ResultTable(STUDY_COLUMNS)
    for record in study.to_records():
        table.append(**record)
    table.write(args.out, args.format)
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except NonConvergenceError as exc:
        print(f"error: convergence: {exc}", file=sys.stderr)
        return 3
    except (SelweightError, OSError) as exc:
        print(f"error: validation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
