"""Command-line pipeline driver.

Exit codes: 0 success, 1 validation error, 2 numerical failure,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import dataio, pipeline, plots
from .errors import ArtifactIOError, NumericalError, ValidationError


def _say(args, *message) -> None:
    if not args.quiet:
        print(*message)


def _parse_seeds(args, cfg) -> list[int]:
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip() != ""]
        except ValueError:
            raise ValidationError(f"--seeds must be a comma-separated integer list, got {args.seeds!r}")
    if args.seed is not None:
        return [args.seed]
    return [cfg.seed]


def _require_config(args) -> "pipeline.PipelineConfig":
    if not args.config:
        raise ValidationError("this command needs --config <path>")
    return pipeline.load_config(args.config)


def cmd_ingest(args) -> int:
    cfg = _require_config(args)
    pipeline.check_paths(cfg)
    records = dataio.load_cycles(cfg.data.telemetry, cfg.data.labels)
    table = dataio.load_stage_table(cfg.data.stage_table)
    datasets = dataio.partition_stages(records, table, cfg.resample_length)
    batteries = sorted({r.battery_id for r in records})
    labeled = sum(1 for r in records if r.capacity_ah is not None)
    _say(args, f"batteries: {', '.join(batteries)}")
    _say(args, f"cycles: {len(records)} ({labeled} labeled), resampled to K={cfg.resample_length}")
    for stage_id in sorted(datasets):
        ds = datasets[stage_id]
        _say(args, f"  stage {stage_id}: {ds.n_cycles} cycles")
    return 0


def _out_root(args, cfg) -> str:
    return args.out or cfg.output_dir


def cmd_fit_source(args) -> int:
    cfg = _require_config(args)
    for seed in _parse_seeds(args, cfg):
        run_dir = pipeline.make_run_dir(_out_root(args, cfg), pipeline.run_id_for(cfg, seed, "source"))
        report = pipeline.run_with_cleanup(
            lambda: pipeline.run_fit_source(cfg, seed, run_dir), run_dir
        )
        _say(args, f"seed {seed}: wrote {run_dir}")
        for stage in report["stages"]:
            _say(
                args,
                f"  stage {stage['stage_id']} [{stage['backbone']}]: "
                f"train RMSE {stage['rmse_train_pct']:.3f}%  test RMSE {stage['rmse_test_pct']:.3f}%",
            )
    return 0


def cmd_transfer(args) -> int:
    cfg = _require_config(args)
    if not args.bundle:
        raise ValidationError("transfer needs --bundle <source run or models directory>")
    for seed in _parse_seeds(args, cfg):
        run_dir = pipeline.make_run_dir(_out_root(args, cfg), pipeline.run_id_for(cfg, seed, "transfer"))
        report = pipeline.run_with_cleanup(
            lambda: pipeline.run_transfer(cfg, args.bundle, seed, run_dir), run_dir
        )
        _say(args, f"seed {seed}: wrote {run_dir}")
        for stage in report["stages"]:
            rmse = stage["rmse_pct"]
            rmse_txt = f"{rmse:.3f}%" if rmse is not None else "n/a (no labels)"
            _say(
                args,
                f"  stage {stage['stage_id']}: {stage['decision']['decision']}, RMSE {rmse_txt}",
            )
    return 0


def cmd_evaluate(args) -> int:
    summary = pipeline.evaluate_reports(args.reports)
    lines = [f"{'battery':>10s} {'stage':>5s} {'runs':>4s} {'mean RMSE%':>11s} {'std':>8s}"]
    for row in summary["rows"]:
        lines.append(
            f"{row['battery_id']:>10s} {row['stage_id']:>5d} {row['n_runs']:>4d} "
            f"{row['mean']:>11.4f} {row['std']:>8.4f}"
        )
    table = "\n".join(lines)
    if not args.quiet:
        print(table)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "evaluation.txt"), "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
        with open(os.path.join(args.out, "evaluation.csv"), "w", encoding="utf-8") as fh:
            fh.write("battery_id,stage_id,metric,n_runs,mean,std\n")
            for row in summary["rows"]:
                fh.write(
                    f"{row['battery_id']},{row['stage_id']},{row['metric']},"
                    f"{row['n_runs']},{row['mean']!r},{row['std']!r}\n"
                )
        _say(args, f"wrote {args.out}/evaluation.txt and evaluation.csv")
    return 0


def cmd_plot(args) -> int:
    written = plots.make_plots(args.kind, args.input, args.out or "plots")
    for path in written:
        _say(args, f"wrote {path}")
    return 0


def cmd_verify(args) -> int:
    problems = pipeline.verify_report(args.report)
    if problems:
        for p in problems:
            print(f"MISMATCH: {p}", file=sys.stderr)
        return 1
    _say(args, f"{args.report}: all reported metrics recompute from the stored pairs")
    return 0


def cmd_synth(args) -> int:
    cfg = dataio.SyntheticConfig(
        n_cycles=args.cycles,
        K=args.k,
        J=3,
        s_true=args.stationary,
        drift_amplitude=args.amplitude,
        battery_id=args.battery_id,
        mixing_seed=args.mixing_seed,
        consistency_shift=args.consistency_shift,
        capacity_offset=args.capacity_offset,
    )
    seed = args.seed if args.seed is not None else 0
    records, truth = dataio.generate_synthetic(cfg, seed)
    out = args.out or "synth"
    os.makedirs(out, exist_ok=True)
    dataio.write_cycles(
        records, os.path.join(out, "telemetry.csv"), os.path.join(out, "labels.csv")
    )
    breaks = []
    if args.stage_breaks:
        try:
            breaks = sorted({int(b) for b in args.stage_breaks.split(",")})
        except ValueError:
            raise ValidationError(f"--stage-breaks must be integers, got {args.stage_breaks!r}")
        if any(b < 1 or b >= cfg.n_cycles for b in breaks):
            raise ValidationError("--stage-breaks must fall strictly inside 1..n_cycles-1")
    bounds = [0] + breaks + [cfg.n_cycles]
    entries = [
        (cfg.battery_id, i + 1, bounds[i] + 1, bounds[i + 1]) for i in range(len(bounds) - 1)
    ]
    dataio.write_stage_table(dataio.StageTable(entries=entries), os.path.join(out, "stages.csv"))
    dataio.write_synthetic_truth(truth, os.path.join(out, "truth.json"))
    _say(args, f"wrote telemetry/labels/stages/truth under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, default=None, help="run seed (overrides config)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(
        prog="battsoh",
        description="Stage-wise battery state-of-health estimation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", parents=[common], help="validate and summarize input data")

    p = sub.add_parser("fit-source", parents=[common], help="fit per-stage source models")
    p.add_argument("--seeds", help="comma-separated seed list for repeated runs")

    p = sub.add_parser("transfer", parents=[common], help="apply a source bundle to a target battery")
    p.add_argument("--bundle", help="source run directory (or its models/ subdirectory)")
    p.add_argument("--seeds", help="comma-separated seed list for repeated runs")

    p = sub.add_parser("evaluate", parents=[common], help="aggregate reports into comparison tables")
    p.add_argument("--reports", nargs="+", required=True, help="report.json paths")

    p = sub.add_parser("plot", parents=[common], help="emit deterministic SVG+CSV plots")
    p.add_argument("--kind", required=True, help=f"one of: {', '.join(plots.PLOT_KINDS)}")
    p.add_argument("--input", required=True, help="report.json or components.json path")

    p = sub.add_parser("verify", parents=[common], help="recompute report metrics from stored pairs")
    p.add_argument("--report", required=True, help="report.json path")

    p = sub.add_parser("synth", parents=[common], help="generate seeded synthetic cycling data")
    p.add_argument("--cycles", type=int, default=120)
    p.add_argument("--k", type=int, default=160, help="samples per cycle")
    p.add_argument("--stationary", type=int, default=1, help="number of stationary latent sources")
    p.add_argument("--amplitude", type=float, default=1.0, help="drift amplitude")
    p.add_argument("--battery-id", default="SYN")
    p.add_argument("--stage-breaks", help="comma-separated last cycles of all but the final stage")
    p.add_argument("--mixing-seed", type=int, default=None,
                   help="pin the mixing matrix (share structure across batteries)")
    p.add_argument("--consistency-shift", type=float, default=0.0,
                   help="constant offset of the stationary sources (manufacturing difference)")
    p.add_argument("--capacity-offset", type=float, default=0.0,
                   help="constant capacity shift in Ah")

    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "fit-source": cmd_fit_source,
    "transfer": cmd_transfer,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
    "verify": cmd_verify,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ArtifactIOError, OSError, json.JSONDecodeError) as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
