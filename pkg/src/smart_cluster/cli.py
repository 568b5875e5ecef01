"""``smart-cluster`` command line.

Exit codes: 0 success, 2 input or validation error, 3 computation error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import warnings
from typing import Optional, Sequence

import numpy as np

from smart_cluster import SCHEMA
from smart_cluster.data import DataValidationError, read_csv, validate, write_csv
from smart_cluster.design import ADEPT, DesignError, EmbeddedDtr, parse_design
from smart_cluster.estimation import (
    EstimationError,
    MarginalMeanSpec,
    dtr_means,
    fit,
    parse_contrast,
    wald_test,
)
from smart_cluster.power import (
    SampleSizeInputs,
    mde_report,
    min_cluster_size,
    required_clusters,
    size_report,
)
from smart_cluster.simulation import (
    PRESET_TARGETS,
    PRESETS,
    Scenario,
    ScenarioError,
    generate_trial,
    mc_power,
    preset,
    scenario_moments,
)

EXIT_OK, EXIT_INPUT, EXIT_COMPUTE = 0, 2, 3

DEFAULT_CONTRAST = {"adept": "(1,1)-vs-(-1,.)", "prototypical": "(1,1)-vs-(-1,-1)"}


class InputError(Exception):
    pass


def _emit(payload: dict, args, csv_rows: Optional[list[dict]] = None) -> None:
    if args.format == "csv" and csv_rows is not None:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(csv_rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(csv_rows)
        text = buf.getvalue()
    else:
        text = json.dumps({"schema": SCHEMA, **payload}, indent=2, default=_json_default) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _load_scenario(args) -> Scenario:
    if bool(args.preset) == bool(args.scenario):
        raise InputError("give exactly one of --preset or --scenario")
    return preset(args.preset) if args.preset else Scenario.from_json(args.scenario)


def run_analyze(args) -> int:
    design = parse_design(args.design)
    data = read_csv(args.data, design)
    report = validate(data)
    if report.warnings and not args.allow_empty_cells:
        raise EstimationError("empty design cell(s): " + "; ".join(report.warnings))
    spec = MarginalMeanSpec(design, data.p)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = fit(data, spec, shared_cov=args.shared_cov, iterations=args.iterations)
    contrasts = args.contrast or [DEFAULT_CONTRAST[design.value]]
    tests = []
    for text in contrasts:
        try:
            c, label = parse_contrast(spec, text)
        except (ValueError, DesignError) as exc:
            raise InputError(str(exc)) from None
        tests.append(wald_test(result, c, args.alpha, label=label))
    payload = result.to_dict(tests)
    payload["dtr_means"] = {d.label: {"mean": m, "se": s} for d, m, s in _means(result)}
    payload["validation"] = {
        "cell_counts": report.cell_counts,
        "min_size": report.min_size,
        "max_size": report.max_size,
        "notes": report.notes,
    }
    payload["warnings"] = report.warnings + [str(w.message) for w in caught]
    rows = [{"contrast": t.label, **{k: v for k, v in t.to_dict().items() if k not in ("c", "label")}} for t in tests]
    _emit(payload, args, rows)
    return EXIT_OK


def _means(result):
    return [(d, m, s) for d, (m, s) in dtr_means(result).items()]


def _size_inputs(args, delta: float) -> SampleSizeInputs:
    m = args.m
    if args.sizes:
        m = min_cluster_size(int(v) for v in args.sizes.split(","))
    if m is None:
        raise InputError("give --m or --sizes")
    return SampleSizeInputs(
        design=parse_design(args.design),
        m=m,
        delta=delta,
        rho=args.rho,
        p1=args.p1,
        p_neg1=args.p_neg1,
        alpha=args.alpha,
        power=args.power,
        cor2_yx=args.cor2,
        rounding=args.rounding,
    )


def run_size(args) -> int:
    inputs = _size_inputs(args, args.delta)
    report = size_report(inputs)
    _emit(report, args, [{"n": report["n"], "n_exact": report["n_exact"], **report["terms"]}])
    return EXIT_OK


def run_mde(args) -> int:
    inputs = _size_inputs(args, 1.0)
    report = mde_report(inputs, args.n)
    _emit(report, args, [{"delta": report["delta"], "n": args.n, **report["terms"]}])
    return EXIT_OK


def run_simulate(args) -> int:
    scenario = _load_scenario(args)
    n, m = _default_n_m(args, scenario)
    data = generate_trial(scenario, n, m, args.seed)
    text = write_csv(data)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _default_n_m(args, scenario: Scenario) -> tuple[int, int]:
    n, m = args.n, args.m
    target = PRESET_TARGETS.get(scenario.name) if args.preset else None
    if m is None:
        if target is None:
            raise InputError("give --m")
        m = target["m"]
    if n is None:
        if target is None:
            raise InputError("give --n")
        inputs = SampleSizeInputs(
            ADEPT, m, target["delta"], target["rho"], scenario.p1, alpha=0.05, power=0.9, cor2_yx=target["cor2"]
        )
        n = required_clusters(inputs)
    return n, m


def run_power(args) -> int:
    scenario = _load_scenario(args)
    n, m = _default_n_m(args, scenario)
    spec = MarginalMeanSpec(scenario.design, 1 if scenario.covariate else 0)
    try:
        c, label = parse_contrast(spec, args.contrast or DEFAULT_CONTRAST[scenario.design.value])
    except (ValueError, DesignError) as exc:
        raise InputError(str(exc)) from None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = mc_power(
            scenario, n, m, c, reps=args.reps, alpha=args.alpha, master_seed=args.seed, workers=args.workers
        )
    payload = {"scenario": scenario.name, "n": n, "m": m, "contrast": label, "reps": args.reps, **result.to_dict()}
    _emit(payload, args, [{k: v for k, v in payload.items() if k != "failure_messages"}])
    return EXIT_OK


def run_moments(args) -> int:
    scenario = _load_scenario(args)
    moments = scenario_moments(scenario)
    if args.dtr:
        wanted = EmbeddedDtr.parse(args.dtr)
        if wanted not in moments:
            raise InputError(f"regimen {wanted} is not embedded in the {scenario.design} design")
        moments = {wanted: moments[wanted]}
    out, rows = {}, []
    for dtr, entry in moments.items():
        cond, unc = entry["conditional"], entry["unconditional"]
        out[dtr.label] = {
            "mean": unc.mean,
            "var": unc.variance,
            "icc": unc.icc,
            "conditional": {"var": cond.variance, "icc": cond.icc},
            "cor2": entry["cor2"],
            "cor2_x": entry["cor2_x"],
        }
        rows.append({"dtr": dtr.label, "mean": unc.mean, "var": unc.variance, "icc": unc.icc,
                     "var_conditional": cond.variance, "icc_conditional": cond.icc, "cor2": entry["cor2"],
                     "cor2_x": entry["cor2_x"]})
    _emit({"scenario": scenario.name, "moments": out}, args, rows)
    return EXIT_OK


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="write output here instead of stdout")
    p.add_argument("--format", choices=("json", "csv"), default="json")


def _size_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--design", default="adept", choices=("adept", "prototypical"))
    p.add_argument("--m", type=int, help="common cluster size")
    p.add_argument("--sizes", help="comma-separated cluster sizes; the minimum is used as m")
    p.add_argument("--rho", type=float, required=True, help="ICC (conditional ICC when --cor2 is given)")
    p.add_argument("--p1", type=float, required=True)
    p.add_argument("--p-neg1", dest="p_neg1", type=float)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--power", type=float, default=0.8)
    p.add_argument("--cor2", type=float, help="squared outcome-covariate correlation")
    p.add_argument("--rounding", choices=("nearest", "ceiling"), default="nearest")


def _scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", help=f"built-in scenario ({', '.join(sorted(PRESETS))})")
    p.add_argument("--scenario", help="scenario JSON file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smart-cluster", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="fit the marginal mean model and test contrasts")
    p.add_argument("--design", required=True, choices=("adept", "prototypical"))
    p.add_argument("--data", required=True, help="long-format CSV")
    p.add_argument("--contrast", action="append", help='e.g. "(1,1)-vs-(-1,.)", "first-stage" or "0,2,1"')
    p.add_argument("--shared-cov", action="store_true", help="average the working covariance across regimens")
    p.add_argument("--iterations", type=int, default=2, help="working covariance updates")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--allow-empty-cells", action="store_true", help="fit even when a design cell has no clusters")
    _common(p)
    p.set_defaults(func=run_analyze)

    p = sub.add_parser("size", help="required number of clusters")
    _size_flags(p)
    p.add_argument("--delta", type=float, required=True)
    _common(p)
    p.set_defaults(func=run_size)

    p = sub.add_parser("mde", help="detectable standardized effect size")
    _size_flags(p)
    p.add_argument("--n", type=int, required=True, help="number of clusters")
    _common(p)
    p.set_defaults(func=run_mde)

    p = sub.add_parser("simulate", help="generate one trial as CSV")
    _scenario_flags(p)
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=run_simulate, format="csv")

    p = sub.add_parser("power", help="Monte Carlo power of a contrast")
    _scenario_flags(p)
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--contrast")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    _common(p)
    p.set_defaults(func=run_power)

    p = sub.add_parser("moments", help="regimen-level mean, variance and ICC of a scenario")
    _scenario_flags(p)
    p.add_argument("--dtr", help='e.g. "(1,1)"')
    _common(p)
    p.set_defaults(func=run_moments)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except (InputError, DataValidationError, DesignError, ScenarioError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
