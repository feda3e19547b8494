import argparse
import logging
import os
import sys

import pandas as pd
import wandb

from src.models.detnaml import detnaml_run, draw_ids, reference_detnaml_run
from src.models.randnaml import counting_run, randnaml_run
from src.utils.data_utils import (
    CsvSink,
    load_experiment,
    read_from_file,
    read_id_file,
    read_layout_file,
    save_experiment,
    write_to_file,
)
from src.utils.engine import ApproxMode, FailurePolicy, ProtocolFailure, read_trace
from src.utils.verify import (
    BoundConstants,
    CheckReport,
    Counterexample,
    check_bounds,
    check_count,
    check_energy_identity,
    check_labels,
    check_one_label_per_season,
    fig5_tolerance,
    summarize,
)
from sweeper import SweepSpec, summarize as summarize_sweep, sweeper

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

EXPERIMENTS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "experiments")

DETNAML_COLUMNS = ["m", "N", "seed", "totalSlots", "maxAwake", "maxWStl", "maxWStn", "maxWOther", "failures"]
GROUPED_COLUMNS = ["n", "u", "N", "groupCount", "seed", "totalSlots", "maxAwake", "failures"]


def init_arg():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--trace", type=str, default=None, help="write the TSV event trace here")
    common.add_argument("--csv", type=str, default=None, help="append the summary row to this CSV")
    common.add_argument("--approx", choices=[m.value for m in ApproxMode], default=None)
    common.add_argument("--reference", action="store_true", help="cross-check against the always-awake run")
    common.add_argument("--check-bounds", action="store_true", help="check the frozen time and energy bounds")
    common.add_argument("--report", type=str, default=None, help="pickle the run report here")
    common.add_argument("--halt", action="store_true", help="stop at the first protocol failure")

    parser = argparse.ArgumentParser(description="Naming and counting in single-hop beeping networks")
    parser.add_argument("--experiment", type=str, default="default")
    parser.add_argument("--constants", type=str, default=None, help="calibration constants yml")
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--quiet", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    detnaml = commands.add_parser("detnaml", parents=[common], help="deterministic naming of m nodes")
    detnaml.add_argument("m", type=int)
    detnaml.add_argument("N", type=int, help="identifier upper bound")
    detnaml.add_argument("--ids", type=str, default=None, help="identifier file, one integer per line")

    for name, text in (("randnaml", "randomized grouped naming"), ("count", "grouped naming plus counting")):
        grouped = commands.add_parser(name, parents=[common], help=text)
        grouped.add_argument("n", type=int)
        grouped.add_argument("--layout", type=str, default=None, help="fixed 'id,group' per line")

    sweep = commands.add_parser("sweep", help="parameter sweep to CSV")
    sweep.add_argument("--algorithm", choices=["fig5", "randnaml", "count"], default=None)
    sweep.add_argument("--n-from", type=int, default=None)
    sweep.add_argument("--n-to", type=int, default=None)
    sweep.add_argument("--points", type=int, default=None)
    sweep.add_argument("--n", type=int, nargs="+", default=None, help="explicit n values")
    sweep.add_argument("--seeds", type=int, default=None)
    sweep.add_argument("--output", type=str, default=None)
    sweep.add_argument("--approx", choices=[m.value for m in ApproxMode], default=None)
    sweep.add_argument("--workers", type=int, default=None)
    sweep.add_argument("--check-bounds", action="store_true")
    sweep.add_argument("--wandb-mode", choices=["online", "offline", "disabled"], default=None)

    calibrate = commands.add_parser("calibrate", help="measure and freeze the bound constants")
    calibrate.add_argument("--seeds", type=int, default=None)
    calibrate.add_argument("--margin", type=float, default=None)
    calibrate.add_argument("--workers", type=int, default=None)
    calibrate.add_argument("--output", type=str, default=None, help="where to write the constants yml")

    check = commands.add_parser("check", help="re-run checks on a saved trace or report")
    check.add_argument("--trace", type=str, default=None)
    check.add_argument("--report", type=str, default=None)
    return parser


def experiment_path(name):
    return name if name.endswith((".yml", ".yaml")) else os.path.join(EXPERIMENTS_DIR, f"{name}.yml")


def load_config(experiment):
    config = load_experiment(experiment_path("default"))
    if experiment != "default":
        config.update(load_experiment(experiment_path(experiment)))
    return config


def load_constants(name):
    return BoundConstants.from_mapping(load_experiment(experiment_path(name)))


def pick(value, fallback):
    return fallback if value is None else value


def _failure_policy(args, config):
    return FailurePolicy.HALT if args.halt else FailurePolicy(config["failure_policy"])


def _emit_row(row, columns, csv_path):
    pd.DataFrame([row])[columns].to_csv(sys.stdout, index=False)
    if csv_path:
        CsvSink(csv_path, columns).append(row)


def _finish(report, checks, args):
    if args.report:
        write_to_file(report, args.report)
        logging.info(f"Saved report to {args.report}")

    status = EXIT_OK
    for failure in report.failures:
        print(f"error: {failure}", file=sys.stderr)
        status = EXIT_FAILURE
    for check in checks:
        if not check.passed:
            print(f"error: {check}", file=sys.stderr)
            status = EXIT_FAILURE
        else:
            logging.info(str(check))
    return status


def _cross_check(report, reference):
    name = "matches always-awake run"
    for node in sorted(set(report.labels) | set(reference.labels)):
        if report.labels.get(node) != reference.labels.get(node):
            expected, actual = reference.labels.get(node), report.labels.get(node)
            return CheckReport(name, False, Counterexample(None, node, expected, actual))
    return CheckReport(name, True)


def cmd_detnaml(args, config, constants):
    seed = pick(args.seed, config["seed"])
    if args.m < 0:
        raise ValueError(f"m must be nonnegative, got {args.m}")
    if args.N < 2:
        raise ValueError(f"N must be at least 2, got {args.N}")

    if args.ids:
        ids = read_id_file(args.ids)
        if len(ids) != args.m:
            raise ValueError(f"{args.ids} lists {len(ids)} identifiers but m is {args.m}")
    else:
        ids = draw_ids(args.m, args.N, seed)

    report = detnaml_run(ids, args.N, seed=seed, trace_path=args.trace, failure_policy=_failure_policy(args, config))

    checks = [check_energy_identity(report.ledger)]
    if args.reference:
        checks.append(_cross_check(report, reference_detnaml_run(ids, args.N, seed=seed)))
    if args.check_bounds and report.failure_free:
        checks.append(check_bounds(report, constants))

    for node, label in sorted(report.labels.items(), key=lambda item: item[1]):
        print(f"{ids[node]}\t{label}")

    if args.m:
        breakdown = report.ledger.breakdown()
        row = {
            "m": args.m,
            "N": args.N,
            "seed": seed,
            "totalSlots": report.total_slots,
            "maxAwake": report.max_awake,
            "maxWStl": breakdown["max_w_stl"],
            "maxWStn": breakdown["max_w_stn"],
            "maxWOther": breakdown["max_w_other"],
            "failures": ";".join(report.failure_kinds),
        }
        logging.info(
            f"{report.total_slots} slots, max awake {report.max_awake} "
            f"(stl {row['maxWStl']}, stn {row['maxWStn']}, other {row['maxWOther']})"
        )
        if args.csv:
            CsvSink(args.csv, DETNAML_COLUMNS).append(row)
    return _finish(report, checks, args)


def cmd_grouped(args, config, constants, counting):
    seed = pick(args.seed, config["seed"])
    approx = ApproxMode(pick(args.approx, config["approx"]))
    if args.n < 1:
        raise ValueError(f"n must be at least 1, got {args.n}")
    layout = read_layout_file(args.layout) if args.layout else None

    runner = counting_run if counting else randnaml_run
    report = runner(
        args.n,
        seed=seed,
        mode=approx,
        trace_path=args.trace,
        failure_policy=_failure_policy(args, config),
        layout=layout,
    )

    checks = [check_energy_identity(report.ledger)]
    if report.failure_free:
        checks.append(check_labels(report))
        if counting:
            checks.append(check_count(report))
        if args.check_bounds:
            checks.append(check_bounds(report, constants))

    extras = report.extras
    row = {
        "n": args.n,
        "u": extras["u"],
        "N": extras["upper_bound"],
        "groupCount": extras["group_count"],
        "seed": seed,
        "totalSlots": report.total_slots,
        "maxAwake": report.max_awake,
        "failures": ";".join(report.failure_kinds),
    }
    _emit_row(row, GROUPED_COLUMNS, args.csv)
    if counting and report.failure_free:
        logging.info(f"Every node decoded count {extras['counts'][0]}")
    return _finish(report, checks, args)


def _sweep_spec(args, config, algorithm=None, seeds=None, output=None, n_values=None):
    return SweepSpec(
        algorithm=algorithm or pick(getattr(args, "algorithm", None), config["sweep_algorithm"]),
        n_from=pick(getattr(args, "n_from", None), config["n_from"]),
        n_to=pick(getattr(args, "n_to", None), config["n_to"]),
        points=pick(getattr(args, "points", None), config["points"]),
        seeds=seeds or pick(args.seeds, config["seeds"]),
        output=output or pick(args.output, config["output"]),
        n_values=n_values if n_values is not None else pick(getattr(args, "n", None), config.get("n_values")),
        approx=ApproxMode(pick(getattr(args, "approx", None), config["approx"])),
        first_seed=config["seed"],
    )


def cmd_sweep(args, config, constants):
    spec = _sweep_spec(args, config)
    logging.info("WANDB init...")
    run = wandb.init(
        project=config["wandb_project"],
        mode=pick(args.wandb_mode, config["wandb_mode"]),
        config={"algorithm": spec.algorithm, "n": spec.n_grid(), "seeds": spec.seeds, "approx": spec.approx.value},
    )

    try:
        frame = sweeper(run=run, workers=pick(args.workers, config["workers"])).sweep(spec)
    except KeyboardInterrupt:
        run.finish()
        return EXIT_FAILURE

    print(summarize_sweep(frame).to_string())
    status = EXIT_OK
    if spec.algorithm == "fig5":
        slope, pvalue = sweeper.trend(frame)
        logging.info(f"maxAwake trend against log2 N: slope {slope:.3f} (p={pvalue:.3g})")
        if args.check_bounds:
            limit = [fig5_tolerance(int(row.M), int(row.N), constants) for row in frame.itertuples()]
            over = frame[frame["maxAwake"] > limit]
            if len(over):
                first = over.iloc[0]
                print(
                    f"error: maxAwake {first['maxAwake']} above tolerance at n={first['n']}, seed={first['seed']}",
                    file=sys.stderr,
                )
                status = EXIT_FAILURE
            if not slope > 0:
                print(f"error: maxAwake trend slope {slope} is not positive", file=sys.stderr)
                status = EXIT_FAILURE
    else:
        rate = sweeper.failure_rate(frame)
        logging.info(f"Failure rate {rate:.1%} over {len(frame)} runs")
        clean = frame[frame["failures"].fillna("") == ""]
        if not clean["verified"].astype(bool).all():
            print("error: a failure-free run did not verify against the oracle", file=sys.stderr)
            status = EXIT_FAILURE

    run.finish()
    return status


def cmd_calibrate(args, config, constants):
    seeds = pick(args.seeds, config["calibration_seeds"])
    fig5 = _sweep_spec(args, config, algorithm="fig5", seeds=seeds, output="-", n_values=config["calibration_fig5_n"])
    grouped = _sweep_spec(
        args, config, algorithm="randnaml", seeds=seeds, output="-", n_values=config["calibration_randnaml_n"]
    )

    values = sweeper(workers=pick(args.workers, config["workers"])).calibrate(
        fig5, grouped, margin=pick(args.margin, config["calibration_margin"])
    )
    output = experiment_path(pick(args.output, config["constants"]))
    descriptions = {
        "w_other_factor": "c in wOther <= c * (ceil(log2 N) + 1) slots, groups with M <= ceil(log2 N) + 1",
        "fig5_factor": "c in maxAwake <= M + ceil(log2 N) + 1 + c * ceil(log2 N)",
        "max_awake_ratio": "C in maxAwake <= C * (log2 n)^2 for grouped naming",
        "total_slots_ratio": "C' in totalSlots <= C' * n * log2 n for grouped naming",
        "min_calibrated_n": "smallest n the grouped-naming ratios were calibrated on",
    }
    save_experiment(values, output, descriptions)
    logging.info(f"Wrote constants to {output}")
    for key, value in values.items():
        print(f"{key}: {value}")
    return EXIT_OK


def cmd_check(args, config, constants):
    if not args.trace and not args.report:
        raise ValueError("check needs --trace and/or --report")

    checks = []
    if args.trace:
        checks.append(check_one_label_per_season(read_trace(args.trace)))
    if args.report:
        report = read_from_file(args.report)
        checks.append(check_energy_identity(report.ledger))
        if report.failure_free:
            checks.append(check_bounds(report, constants))
            if "ids" in report.extras:
                checks.append(check_labels(report))
            if report.config.protocol == "count":
                checks.append(check_count(report))
        for failure in report.failures:
            print(f"recorded failure: {failure}")

    print(summarize(checks))
    return EXIT_OK if all(check.passed for check in checks) else EXIT_FAILURE


COMMANDS = {
    "detnaml": cmd_detnaml,
    "randnaml": lambda args, config, constants: cmd_grouped(args, config, constants, counting=False),
    "count": lambda args, config, constants: cmd_grouped(args, config, constants, counting=True),
    "sweep": cmd_sweep,
    "calibrate": cmd_calibrate,
    "check": cmd_check,
}


def main(argv=None):
    args = init_arg().parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(format="%(levelname)s:%(message)s", level=level)
    logging.getLogger().setLevel(level)

    try:
        config = load_config(args.experiment)
        constants = load_constants(pick(args.constants, config["constants"]))
        return COMMANDS[args.command](args, config, constants)
    except ProtocolFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
