from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, dump_run_config, load_run_config
from .core import BBox, Sample
from .errors import AAROSError, ConfigError, PrerequisiteError
from .evaluation import (
    DEFAULT_SCALE_FRACTIONS,
    curve_trend,
    dev_evaluator,
    evaluate,
    make_stage_trainer,
    run_coefficient_sweep,
    run_generalization_suite,
    run_injection_ablation,
    run_reward_ablation,
    run_sft_scale_study,
    split_samples,
)
from .judge import make_judge
from .logging import AAROSLogger, configure_logging
from .maubuild import (
    ACCEPTED,
    CORRECTED,
    BuiltRecord,
    PromptBundle,
    ReviewRules,
    accept_record,
    correct_record,
    make_backend,
    read_records,
    read_samples,
    reject_record,
    rereflect,
    run_pipeline,
    write_records,
    write_samples,
)
from .model import PolicyModel, load_checkpoint, save_checkpoint
from .synthworld import DEV, TEST, TRAIN, apply_split, generate_dataset, select
from .train import run_aar, run_sft
from .utils import seed_everything
from .visualisation import RunVisualiser

logger = logging.getLogger("AAROS.cli")

STUDIES: tuple[str, ...] = ("injection", "reward", "coefficients", "scale", "generalization")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="AAROS",
        description="Abnormal-aware instruction tuning and rewarding on a synthetic diagnosis world",
        epilog="Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 training divergence",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted-key override, repeatable")
    common.add_argument("--out", type=Path, default=None, help="run directory")
    common.add_argument("--seed", type=int, default=None, help="global seed")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("gen", parents=[common], help="generate and split the synthetic dataset")
    commands.add_parser("sft", parents=[common], help="abnormal-aware instruction tuning")
    commands.add_parser("aar", parents=[common], help="abnormal-aware rewarding from the SFT checkpoint")

    evaluate_parser = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    evaluate_parser.add_argument("--stage", choices=["sft", "aar"], default=None, help="checkpoint to evaluate (latest by default)")

    ablate = commands.add_parser("ablate", parents=[common], help="run an analysis study")
    ablate.add_argument("--study", choices=STUDIES, default="injection")
    ablate.add_argument("--stage", choices=["sft", "aar"], default=None)

    commands.add_parser("build", parents=[common], help="build a diagnosis dataset through a generation backend")

    reflect = commands.add_parser("reflect", parents=[common], help="re-run reflection on pending or rejected records")
    reflect.add_argument("--input", type=Path, default=None)

    review = commands.add_parser("review", parents=[common], help="list or edit the review status of built records")
    review.add_argument("--input", type=Path, default=None)
    action = review.add_mutually_exclusive_group(required=True)
    action.add_argument("--list", action="store_true")
    action.add_argument("--accept", metavar="ID")
    action.add_argument("--reject", metavar="ID")
    action.add_argument("--correct", metavar="ID")
    review.add_argument("--category", default=None)
    review.add_argument("--bbox", type=float, nargs=4, default=None, metavar=("X1", "Y1", "X2", "Y2"))

    export = commands.add_parser("export", parents=[common], help="split the accepted built records into a training dataset")
    export.add_argument("--input", type=Path, default=None)
    return parser


def _snapshot(config: RunConfig, command: str) -> None:
    dump_run_config(config, config.run_dir / f"config_{command}.yaml")


def _checkpoint_path(config: RunConfig, stage: str) -> Path:
    return config.run_dir / stage / "checkpoint.pt"


def _latest_checkpoint(config: RunConfig, stage: str | None) -> tuple[str, PolicyModel]:
    stages = [stage] if stage else ["aar", "sft"]
    for candidate in stages:
        path = _checkpoint_path(config, candidate)
        if path.exists():
            return candidate, load_checkpoint(path)[0]
    raise PrerequisiteError(f"No {' or '.join(stages)} checkpoint in {config.run_dir}; run the training commands first")


def _dataset(config: RunConfig) -> list[Sample]:
    path = config.dataset_path
    if not path.exists():
        raise PrerequisiteError(f"Dataset not found: {path}; run 'gen' or 'export' first")
    return read_samples(path, config.world)


def cmd_gen(config: RunConfig, args: argparse.Namespace) -> int:
    samples = apply_split(generate_dataset(config.world, config.num_samples), config.split, config.world)
    write_samples(config.dataset_path, samples)
    counts = Counter(tag for sample in samples for tag in sample.split_tags)
    logger.info("Wrote %d samples to %s (%s)", len(samples), config.dataset_path, dict(sorted(counts.items())))
    return 0


def cmd_sft(config: RunConfig, args: argparse.Namespace) -> int:
    samples = _dataset(config)
    model = config.new_model()
    run_logger = AAROSLogger("sft", print_interval=config.sft.print_interval)
    result = run_sft(model, select(samples, TRAIN), config.sft, dev_evaluator(select(samples, DEV)), run_logger)
    run_logger.write_csv(config.run_dir / "sft" / "metrics.csv")
    save_checkpoint(result.model, _checkpoint_path(config, "sft"), {"stage": "sft", "seed": config.sft.seed})
    if result.metrics.height:
        RunVisualiser(config.run_dir).plot_sft(result.metrics)
    return 0


def cmd_aar(config: RunConfig, args: argparse.Namespace) -> int:
    path = _checkpoint_path(config, "sft")
    if not path.exists():
        raise PrerequisiteError(f"'aar' needs the SFT checkpoint {path}; run 'sft' first")
    model, _ = load_checkpoint(path)
    samples = _dataset(config)
    judge = make_judge(config.judge)
    run_logger = AAROSLogger("aar", print_interval=config.aar.print_interval)
    result = run_aar(
        model,
        select(samples, TRAIN),
        config.aar,
        judge,
        dev_evaluator(select(samples, DEV)),
        run_logger,
        max_in_flight=config.judge.max_in_flight,
    )
    run_logger.write_csv(config.run_dir / "aar" / "metrics.csv")
    save_checkpoint(result.model, _checkpoint_path(config, "aar"), {"stage": "aar", "seed": config.aar.seed})
    if result.metrics.height:
        RunVisualiser(config.run_dir).plot_rewards(result.metrics)
    return 0


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> int:
    stage, model = _latest_checkpoint(config, args.stage)
    samples = _dataset(config)
    report = evaluate(model, samples, config.eval, {"stage": stage, "seed": config.eval.seed}, with_injection=True)
    report.write(config.run_dir / "eval" / stage)
    if "injection" in report.curves:
        RunVisualiser(config.run_dir).plot_injection(report.curves["injection"], f"eval/{stage}/injection.png")
    print(report.summary_table())
    return 0


def cmd_ablate(config: RunConfig, args: argparse.Namespace) -> int:
    directory = config.run_dir / "ablate"
    directory.mkdir(parents=True, exist_ok=True)
    judge = make_judge(config.judge)
    match args.study:
        case "injection":
            stage, model = _latest_checkpoint(config, args.stage)
            curve = run_injection_ablation(
                model, split_samples(_dataset(config), config.eval.injection_split), config.eval.injection_grid, config.eval.batch_size
            )
            curve.write_csv(directory / f"injection_{stage}.csv")
            RunVisualiser(config.run_dir).plot_injection(curve, f"ablate/injection_{stage}.png")
            logger.info("Injection curve Spearman trend: %.3f", curve_trend(curve))
            print(curve)
        case "reward":
            _, model = _latest_checkpoint(config, "sft")
            samples = _dataset(config)
            table = run_reward_ablation(
                model, select(samples, TRAIN), select(samples, DEV), split_samples(samples, TEST), config.aar, judge
            )
            table.write_csv(directory / "reward_ablation.csv")
            print(table)
        case "coefficients":
            _, model = _latest_checkpoint(config, "sft")
            samples = _dataset(config)
            table, best = run_coefficient_sweep(model, select(samples, TRAIN), select(samples, DEV), config.aar, judge)
            table.write_csv(directory / "coefficient_sweep.csv")
            logger.info("Best (c1, c2) on dev: %s", best)
            print(table)
        case "scale":
            samples = _dataset(config)
            table = run_sft_scale_study(
                config.new_model, select(samples, TRAIN), select(samples, DEV), config.sft, DEFAULT_SCALE_FRACTIONS
            )
            table.write_csv(directory / "sft_scale.csv")
            print(table)
        case "generalization":
            plans = [
                replace(config.split, heldout_category_families=["F1"], label="heldout-category-F1"),
                replace(config.split, heldout_dataset_families=["D2"], label="heldout-dataset-D2"),
                replace(config.split, train_only_datasets=["D0"], label="crossmodal-from-D0"),
            ]
            trainer = make_stage_trainer(config.new_model, config.sft, config.aar, judge)
            report = run_generalization_suite(trainer, config.world, plans, config.num_samples, config.eval.batch_size)
            report.write(directory)
            print(report.results)
    return 0


def _built_path(config: RunConfig, args: argparse.Namespace) -> Path:
    return getattr(args, "input", None) or config.run_dir / "build" / "built.jsonl"


def cmd_build(config: RunConfig, args: argparse.Namespace) -> int:
    samples = generate_dataset(config.world, config.build.num_samples)
    result = run_pipeline(
        samples,
        make_backend(config.build),
        config.vocab(),
        PromptBundle(version=config.build.prompt_version),
        ReviewRules(config.build.iou_threshold),
        config.build.max_in_flight,
    )
    write_records(config.run_dir / "build" / "built.jsonl", result.records)
    result.audit.write_csv(config.run_dir / "build" / "audit.csv")
    return 0


def cmd_reflect(config: RunConfig, args: argparse.Namespace) -> int:
    path = _built_path(config, args)
    records = read_records(path, config.world)
    result = rereflect(
        records,
        make_backend(config.build),
        config.vocab(),
        PromptBundle(version=config.build.prompt_version),
        ReviewRules(config.build.iou_threshold),
    )
    write_records(path, result.records)
    result.audit.write_csv(path.with_name("reflect_audit.csv"))
    return 0


def cmd_review(config: RunConfig, args: argparse.Namespace) -> int:
    path = _built_path(config, args)
    records: list[BuiltRecord] = read_records(path, config.world)
    if args.list:
        for record in records:
            if record.provenance.review_status not in (ACCEPTED, CORRECTED):
                print(f"{record.id}\t{record.provenance.review_status}\t{record.provenance.note}\t{record.response}")
        return 0
    if args.accept:
        records = accept_record(records, args.accept, config.vocab())
    elif args.reject:
        records = reject_record(records, args.reject)
    else:
        if args.category is None or args.bbox is None:
            raise ConfigError("--correct needs --category and --bbox")
        records = correct_record(records, args.correct, args.category, BBox.from_sequence(args.bbox))
    write_records(path, records)
    return 0


def cmd_export(config: RunConfig, args: argparse.Namespace) -> int:
    records = [
        record
        for record in read_records(_built_path(config, args), config.world)
        if record.provenance.review_status in (ACCEPTED, CORRECTED)
    ]
    if not records:
        raise PrerequisiteError("No accepted records to export")
    tagged = apply_split([record.sample for record in records], config.split, config.world)
    exported = [BuiltRecord(sample, record.response, record.provenance) for sample, record in zip(tagged, records)]
    write_records(config.dataset_path, exported)
    logger.info("Exported %d records to %s", len(exported), config.dataset_path)
    return 0


HANDLERS = {
    "gen": cmd_gen,
    "sft": cmd_sft,
    "aar": cmd_aar,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "build": cmd_build,
    "reflect": cmd_reflect,
    "review": cmd_review,
    "export": cmd_export,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        config = load_run_config(args.config, args.overrides, args.seed, args.out)
        seed_everything(config.seed)
        _snapshot(config, args.command)
        return HANDLERS[args.command](config, args)
    except AAROSError as error:
        message = " ".join(str(error).split())
        print(f"error kind={type(error).__name__} exit={error.exit_code} message={message}", file=sys.stderr)
        return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
