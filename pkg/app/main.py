"""
Command-line entry point.

    python -m app.main synth --output data/
    python -m app.main train --data data/ --model runs/model.json
    python -m app.main refine --data data/ --model runs/model.json --output runs/detections.txt --trace runs/trace.csv
    python -m app.main eval --data data/ --detections runs/detections.txt
    python -m app.main diagnose --data data/ --detections runs/detections.txt

Global flags --config, --seed and --quiet may appear before or after the
command. Any `--section.key value` pair overrides the configuration file
(CLI > file > default). Exit codes: 0 success, 1 invalid input or
configuration, 2 runtime failure.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from app.config import ConfigError, RunConfig, load_config_file, parse_override_value
from app.evaluation import (
    EvaluationError,
    UndefinedAPError,
    detections_by_class,
    diagnose_false_positives,
    evaluate,
    false_positive_trend,
    objects_by_class,
    precision_recall_points,
    render_report,
    render_taxonomy,
    report_to_json,
)
from app.models import CommandOutcome
from app.parser import (
    ParserError,
    load_checkpoint,
    read_detections,
    read_text,
    save_checkpoint,
    write_detections,
    write_devkit_detections,
    write_loss_curve,
    write_text,
    write_trace,
)
from app.pipeline import load_annotations, load_split, refine_items, train_on, write_dataset
from app.predictor import CheckpointError, describe
from app.trainer import DivergenceError, window_mean


logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Failures caused by the user's input rather than the run itself
INPUT_ERRORS = (ConfigError, ParserError, CheckpointError, EvaluationError, FileNotFoundError, ValidationError)


class UsageError(Exception):
    """Raised for command lines argparse or the override parser reject."""
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


# ============================================================================
# Commands
# ============================================================================

def cmd_synth(config: RunConfig, output_dir: Path) -> CommandOutcome:
    written = write_dataset(config, output_dir)
    scenes = config.synth.train_scenes + config.synth.test_scenes
    return CommandOutcome(
        exit_code=0,
        summary=f"Wrote {scenes} scenes to {output_dir}",
        artifacts=[str(path) for path in written],
    )


def cmd_train(config: RunConfig, data_dir: Path, model_path: Path, loss_path: Optional[Path] = None) -> CommandOutcome:
    items = load_split(data_dir, "train", config.synth.names)
    result = train_on(items, config)

    loss_path = loss_path or model_path.with_suffix(".loss.csv")
    written = [
        save_checkpoint(result.model, model_path, config.train.unroll_depth),
        write_text(loss_path, write_loss_curve(result.loss_curve)),
    ]
    window = min(50, len(result.loss_curve))
    summary = (
        f"Trained {describe(result.model)} for {len(result.loss_curve)} steps; "
        f"loss {window_mean(result.loss_curve, window):.4f} -> {window_mean(result.loss_curve, window, last=True):.4f}"
    )
    return CommandOutcome(exit_code=0, summary=summary, artifacts=[str(path) for path in written])


def cmd_refine(
    config: RunConfig,
    model_path: Path,
    data_dir: Path,
    output_path: Path,
    trace_path: Optional[Path] = None,
    devkit_dir: Optional[Path] = None,
    split: str = "test"
) -> CommandOutcome:
    model, checkpoint = load_checkpoint(model_path)
    if (model.num_classes, model.feature_dim) != (config.synth.num_classes, config.synth.feature_dim):
        raise CheckpointError(
            f"checkpoint has K={model.num_classes} F={model.feature_dim}, "
            f"configuration has K={config.synth.num_classes} F={config.synth.feature_dim}"
        )

    names = config.synth.names
    items = load_split(data_dir, split, names)
    detections, rows = refine_items(model, items, config, trace=trace_path is not None)

    written = [write_text(output_path, write_detections(detections))]
    if trace_path is not None:
        written.append(write_text(trace_path, write_trace(rows)))
    if devkit_dir is not None:
        written.extend(write_devkit_detections(detections, devkit_dir, names))

    summary = (
        f"Refined {len(items)} scenes with T={config.refine.iterations} "
        f"(model trained with T={checkpoint.unroll_depth}): {len(detections)} detections"
    )
    return CommandOutcome(exit_code=0, summary=summary, artifacts=[str(path) for path in written])


def cmd_eval(
    config: RunConfig,
    detections_path: Path,
    data_dir: Path,
    report_path: Optional[Path] = None,
    pr_dir: Optional[Path] = None,
    split: str = "test"
) -> CommandOutcome:
    detections = read_detections(read_text(detections_path))
    annotations = load_annotations(data_dir, split)
    report = evaluate(
        detections,
        annotations,
        iou_threshold=config.eval.iou_threshold,
        mode=config.eval.mode,
        background_iou=config.eval.background_iou,
        class_names=config.synth.names,
    )

    report_path = report_path or detections_path.with_suffix(".eval.json")
    written = [write_text(report_path, report_to_json(report))]
    if pr_dir is not None:
        gt_index = objects_by_class(annotations)
        det_index = detections_by_class(detections)
        for name in report.per_class_ap:
            try:
                points = precision_recall_points(det_index.get(name, []), gt_index.get(name, {}), config.eval.iou_threshold)
            except UndefinedAPError:
                continue
            lines = "recall,precision\n" + "".join(f"{r:.6f},{p:.6f}\n" for r, p in points)
            written.append(write_text(pr_dir / f"pr_{name}.csv", lines))

    return CommandOutcome(exit_code=0, summary=render_report(report), artifacts=[str(path) for path in written])


def cmd_diagnose(
    config: RunConfig,
    detections_path: Path,
    data_dir: Path,
    trend_path: Optional[Path] = None,
    split: str = "test"
) -> CommandOutcome:
    detections = read_detections(read_text(detections_path))
    annotations = load_annotations(data_dir, split)
    names = config.synth.names
    taxonomy = diagnose_false_positives(
        detections,
        annotations,
        iou_threshold=config.eval.iou_threshold,
        background_iou=config.eval.background_iou,
        class_names=names,
    )

    written = []
    if trend_path is not None:
        lines = ["class,rank,Cor,Loc,Oth,BG\n"]
        for name in names:
            for rank, counts in enumerate(
                false_positive_trend(detections, annotations, name, config.eval.iou_threshold, config.eval.background_iou),
                start=1,
            ):
                lines.append(f"{name},{rank},{counts.Cor},{counts.Loc},{counts.Oth},{counts.BG}\n")
        written.append(write_text(trend_path, "".join(lines)))

    return CommandOutcome(exit_code=0, summary=render_taxonomy(taxonomy), artifacts=[str(path) for path in written])


# ============================================================================
# Argument handling
# ============================================================================

def _add_global_options(parser: argparse.ArgumentParser, defaults: bool) -> None:
    # Subcommand copies use SUPPRESS so they do not reset values given before the command
    missing = None if defaults else argparse.SUPPRESS
    parser.add_argument("--config", type=Path, default=missing,
                        help="TOML configuration file (default: $GRL_CONFIG)")
    parser.add_argument("--seed", type=int, default=missing, help="Seed for synthesis and training")
    parser.add_argument("--quiet", action="store_true", default=False if defaults else argparse.SUPPRESS,
                        help="Only log warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="grl", description="Group recursive box refinement toolkit")
    _add_global_options(parser, defaults=True)
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    synth = commands.add_parser("synth", help="Generate a synthetic dataset")
    synth.add_argument("--output", type=Path, required=True, help="Dataset directory")

    train = commands.add_parser("train", help="Train the predictor")
    train.add_argument("--data", type=Path, required=True, help="Dataset directory")
    train.add_argument("--model", type=Path, required=True, help="Checkpoint to write")
    train.add_argument("--loss-csv", type=Path, help="Loss curve CSV (default: next to the checkpoint)")

    refine = commands.add_parser("refine", help="Refine test proposals into detections")
    refine.add_argument("--model", type=Path, required=True, help="Trained checkpoint")
    refine.add_argument("--data", type=Path, required=True, help="Dataset directory")
    refine.add_argument("--output", type=Path, required=True, help="Detection file to write")
    refine.add_argument("--iterations", type=int, help="Refinement iterations T (overrides refine.iterations)")
    refine.add_argument("--trace", type=Path, help="Write the per-iteration trajectory CSV here")
    refine.add_argument("--devkit-dir", type=Path, help="Also write per-class devkit files here")
    refine.add_argument("--split", default="test", help="Split to refine")

    evaluate_cmd = commands.add_parser("eval", help="Score detections")
    evaluate_cmd.add_argument("--detections", type=Path, required=True, help="Detection file")
    evaluate_cmd.add_argument("--data", type=Path, required=True, help="Dataset directory")
    evaluate_cmd.add_argument("--mode", choices=["11point", "area"], help="AP mode (overrides eval.mode)")
    evaluate_cmd.add_argument("--report", type=Path, help="JSON report (default: next to the detections)")
    evaluate_cmd.add_argument("--pr-dir", type=Path, help="Write per-class precision/recall CSVs here")
    evaluate_cmd.add_argument("--split", default="test", help="Split to evaluate against")

    diagnose = commands.add_parser("diagnose", help="Break down false positives")
    diagnose.add_argument("--detections", type=Path, required=True, help="Detection file")
    diagnose.add_argument("--data", type=Path, required=True, help="Dataset directory")
    diagnose.add_argument("--trend", type=Path, help="Write the cumulative error trend CSV here")
    diagnose.add_argument("--split", default="test", help="Split to diagnose")

    for sub in (synth, train, refine, evaluate_cmd, diagnose):
        _add_global_options(sub, defaults=False)
    return parser


def parse_overrides(tokens: list[str]) -> dict[str, Any]:
    """Turn leftover `--section.key value` (or `--section.key=value`) tokens into overrides."""
    overrides: dict[str, Any] = {}
    position = 0
    while position < len(tokens):
        token = tokens[position]
        if not token.startswith("--") or "." not in token:
            raise UsageError(f"unrecognized argument: {token}")
        key = token[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            position += 1
            if position >= len(tokens):
                raise UsageError(f"missing value for {token}")
            raw = tokens[position]
        overrides[key] = parse_override_value(raw)
        position += 1
    return overrides


def _command_overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        overrides["synth.seed"] = args.seed
        overrides["train.seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        overrides["refine.iterations"] = args.iterations
    if getattr(args, "mode", None) is not None:
        overrides["eval.mode"] = args.mode
    return overrides


def dispatch(args: argparse.Namespace, config: RunConfig) -> CommandOutcome:
    if args.command == "synth":
        return cmd_synth(config, args.output)
    if args.command == "train":
        return cmd_train(config, args.data, args.model, args.loss_csv)
    if args.command == "refine":
        return cmd_refine(config, args.model, args.data, args.output, args.trace, args.devkit_dir, args.split)
    if args.command == "eval":
        return cmd_eval(config, args.detections, args.data, args.report, args.pr_dir, args.split)
    return cmd_diagnose(config, args.detections, args.data, args.trend, args.split)


def run(argv: Optional[list[str]] = None) -> CommandOutcome:
    """Parse the command line, run the command and map failures to exit codes."""
    try:
        args, leftovers = build_parser().parse_known_args(argv)
        overrides = _command_overrides(args)
        overrides.update(parse_overrides(leftovers))
    except UsageError as e:
        return CommandOutcome(exit_code=1, summary=f"usage error: {e}")

    logging.getLogger().setLevel(logging.WARNING if args.quiet else os.getenv("GRL_LOG_LEVEL", "INFO").upper())

    try:
        config_path = args.config or os.getenv("GRL_CONFIG") or None
        config = load_config_file(config_path, overrides)
        return dispatch(args, config)
    except DivergenceError as e:
        return CommandOutcome(exit_code=2, summary=f"training diverged at step {e.step}: {e}")
    except INPUT_ERRORS as e:
        return CommandOutcome(exit_code=1, summary=f"{type(e).__name__}: {e}")
    except Exception as e:
        logger.exception("Command %s failed", args.command)
        return CommandOutcome(exit_code=2, summary=f"{type(e).__name__}: {e}")


def main(argv: Optional[list[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(level=os.getenv("GRL_LOG_LEVEL", "INFO").upper(), format=LOG_FORMAT)

    outcome = run(argv)
    if outcome.ok:
        print(outcome.summary)
    else:
        print(outcome.summary, file=sys.stderr)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
