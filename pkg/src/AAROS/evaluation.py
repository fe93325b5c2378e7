from __future__ import annotations

import json
import logging
import math
import re
import warnings
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import polars as pl
from scipy.stats import spearmanr

from .core import BBox, Response, Sample, iou
from .errors import AAROSError, ConfigError, SplitError, UnreachableIoUError
from .judge import JudgeBackend
from .model import PolicyModel, sample_batch
from .rewards import localization_reward
from .synthworld import (
    CROSSMODAL,
    DEV,
    HELDOUT_CATEGORY,
    HELDOUT_DATASET,
    TEST,
    TRAIN,
    SplitPlan,
    WorldConfig,
    apply_split,
    generate_dataset,
    make_iou_hint,
    select,
)
from .tokenizer import hint_words, parse_response
from .train import AarConfig, DevEvaluator, SftConfig, run_aar, run_sft
from .utils import chunked

logger = logging.getLogger(__name__)

HELDOUT_TAGS: tuple[str, ...] = (HELDOUT_CATEGORY, HELDOUT_DATASET, CROSSMODAL)
DEFAULT_INJECTION_GRID: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_COEFFICIENT_PAIRS: tuple[tuple[float, float], ...] = ((0.3, 0.7), (0.4, 0.6), (0.5, 0.5), (0.6, 0.4), (0.7, 0.3))
DEFAULT_SCALE_FRACTIONS: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)

_WORD_PATTERN = re.compile(r"[a-z0-9_]+")

CURVE_SCHEMA: dict[str, Any] = {
    "target_iou": pl.Float64,
    "acc": pl.Float64,
    "realized_iou": pl.Float64,
    "n_evaluated": pl.Int64,
    "n_skipped": pl.Int64,
}


@dataclass
class EvalPlan:
    """
    Which splits to report and how to run the injection curve. `splits` may name train, dev, test (regular test
    samples, dev excluded) and any held-out tag; an empty list means dev, test and every held-out tag present.
    """

    splits: list[str] = field(default_factory=list)
    injection_grid: list[float] = field(default_factory=lambda: list(DEFAULT_INJECTION_GRID))
    injection_split: str = TEST
    batch_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        known = {TRAIN, DEV, TEST, *HELDOUT_TAGS}
        unknown = set(self.splits) - known
        if unknown:
            raise ConfigError(f"Unknown evaluation splits: {sorted(unknown)}")
        if self.injection_split not in known:
            raise ConfigError(f"Unknown injection split '{self.injection_split}'")
        if any(not 0.0 <= value <= 1.0 for value in self.injection_grid):
            raise ConfigError("eval.injection_grid values must lie in [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("eval.batch_size must be positive")

    def resolve_splits(self, samples: Sequence[Sample]) -> list[str]:
        if self.splits:
            return list(self.splits)
        present = set().union(*(sample.split_tags for sample in samples)) if samples else set()
        return [DEV, TEST, *(tag for tag in HELDOUT_TAGS if tag in present)]


def split_samples(samples: Sequence[Sample], split: str) -> list[Sample]:
    """
    The samples of one reported split. "test" means the regular test samples: neither dev nor held out.
    """
    if split == TEST:
        return select(samples, TEST, exclude=(DEV, *HELDOUT_TAGS))
    return select(samples, split)


def generate_responses(model: PolicyModel, samples: Sequence[Sample], batch_size: int = 64) -> list[Response]:
    """
    Greedy diagnoses for every sample, parsed, in input order.
    """
    vocab = model.vocab
    model.eval()
    responses: list[Response] = []
    for batch in chunked(list(samples), batch_size):
        candidates = sample_batch(
            model,
            [sample.image for sample in batch],
            [vocab.encode(sample.query) for sample in batch],
            k=1,
            greedy=True,
        )
        responses.extend(parse_response(vocab, group[0].tokens) for group in candidates)
    return responses


def mentions_category(text: str, category_name: str) -> bool:
    return category_name.lower() in _WORD_PATTERN.findall(text.lower())


def acc_metric(responses: Sequence[Response], samples: Sequence[Sample]) -> float:
    """
    Fraction of responses whose text contains the ground-truth category name as a whole word (case-insensitive).
    """
    if len(responses) != len(samples):
        raise ValueError(f"{len(responses)} responses for {len(samples)} samples")
    if not samples:
        return 0.0
    hits = [mentions_category(response.text, sample.category_name) for response, sample in zip(responses, samples)]
    return float(np.mean(hits))


def mean_iou_metric(responses: Sequence[Response], samples: Sequence[Sample]) -> float:
    """
    Mean localization reward; a missing bbox counts 0.
    """
    if len(responses) != len(samples):
        raise ValueError(f"{len(responses)} responses for {len(samples)} samples")
    if not samples:
        return 0.0
    return float(np.mean([localization_reward(response.parsed_bbox, sample.gt_bbox) for response, sample in zip(responses, samples)]))


def dev_evaluator(samples: Sequence[Sample], batch_size: int = 64) -> DevEvaluator:
    """
    A callable reporting ACC and mean IoU of a model on `samples`, for the training loops.
    """
    frozen = list(samples)

    def evaluate_dev(model: PolicyModel) -> dict[str, float]:
        responses = generate_responses(model, frozen, batch_size)
        return {"acc": acc_metric(responses, frozen), "mean_iou": mean_iou_metric(responses, frozen)}

    return evaluate_dev


@dataclass
class EvalReport:
    """
    Per-split ACC and mean IoU, the per-category breakdown, curve tables and run metadata.
    """

    acc: dict[str, float]
    mean_iou: dict[str, float]
    counts: dict[str, int]
    per_category: pl.DataFrame
    curves: dict[str, pl.DataFrame] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    def splits_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            {
                "split": list(self.acc),
                "n": [self.counts[split] for split in self.acc],
                "acc": [self.acc[split] for split in self.acc],
                "mean_iou": [self.mean_iou[split] for split in self.acc],
            },
            schema={"split": pl.String, "n": pl.Int64, "acc": pl.Float64, "mean_iou": pl.Float64},
        )

    def summary_table(self) -> str:
        lines = [f"{'split':<18}{'n':>6}{'acc':>8}{'mean_iou':>10}"]
        for split in self.acc:
            lines.append(f"{split:<18}{self.counts[split]:>6}{self.acc[split]:>8.3f}{self.mean_iou[split]:>10.3f}")
        return "\n".join(lines)

    def to_dict(self) -> dict[str, Any]:
        return {
            "acc": self.acc,
            "mean_iou": self.mean_iou,
            "counts": self.counts,
            "per_category": self.per_category.to_dicts(),
            "curves": {name: curve.to_dicts() for name, curve in self.curves.items()},
            "metadata": self.metadata,
        }

    def write(self, directory: str | Path) -> Path:
        """
        Write report.json, splits.csv, per_category.csv and one two-column plot CSV plus one full CSV per curve.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        self.splits_frame().write_csv(directory / "splits.csv")
        self.per_category.write_csv(directory / "per_category.csv")
        for name, curve in self.curves.items():
            curve.write_csv(directory / f"curve_{name}.csv")
            curve.select("target_iou", "acc").write_csv(directory / f"curve_{name}_plot.csv")
        logger.info("Wrote evaluation report to %s", directory)
        return directory


def evaluate(
    model: PolicyModel,
    samples: Sequence[Sample],
    plan: EvalPlan,
    metadata: Mapping[str, Any] | None = None,
    with_injection: bool = False,
) -> EvalReport:
    """
    Evaluate a frozen model on every split of the plan. A split with no samples is still listed, with n = 0.

    :param model: The model to evaluate
    :param samples: The tagged dataset
    :param plan: The evaluation plan
    :param metadata: Run metadata stored with the report
    :param with_injection: Also run the injection ablation on `plan.injection_split`
    """
    plan.validate()
    acc: dict[str, float] = {}
    mean_iou: dict[str, float] = {}
    counts: dict[str, int] = {}
    category_rows: list[dict[str, Any]] = []
    for split in plan.resolve_splits(samples):
        subset = split_samples(samples, split)
        responses = generate_responses(model, subset, plan.batch_size)
        acc[split] = acc_metric(responses, subset)
        mean_iou[split] = mean_iou_metric(responses, subset)
        counts[split] = len(subset)
        for name in sorted({sample.category_name for sample in subset}):
            members = [index for index, sample in enumerate(subset) if sample.category_name == name]
            chosen_responses = [responses[index] for index in members]
            chosen_samples = [subset[index] for index in members]
            category_rows.append(
                {
                    "split": split,
                    "category": name,
                    "n": len(members),
                    "acc": acc_metric(chosen_responses, chosen_samples),
                    "mean_iou": mean_iou_metric(chosen_responses, chosen_samples),
                }
            )
    per_category = pl.DataFrame(
        category_rows,
        schema={"split": pl.String, "category": pl.String, "n": pl.Int64, "acc": pl.Float64, "mean_iou": pl.Float64},
    )
    curves: dict[str, pl.DataFrame] = {}
    if with_injection:
        curves["injection"] = run_injection_ablation(
            model, split_samples(samples, plan.injection_split), plan.injection_grid, plan.batch_size
        )
    return EvalReport(acc, mean_iou, counts, per_category, curves, dict(metadata or {}))


def run_injection_ablation(
    model: PolicyModel,
    samples: Sequence[Sample],
    iou_grid: Sequence[float],
    batch_size: int = 64,
) -> pl.DataFrame:
    """
    For each target IoU, append a `hint bbox ...` suffix with that IoU to every query, decode greedily and record
    ACC. Samples whose target is unreachable are skipped and counted. Hints are written as integer coordinates, so
    the realized mean hint IoU is reported next to the target.

    :return: One row per grid point, sorted by target_iou
    """
    if any(not 0.0 <= value <= 1.0 for value in iou_grid):
        raise ValueError("Injection IoU targets must lie in [0, 1]")
    max_coordinate = model.vocab.max_coordinate
    rows: list[dict[str, Any]] = []
    for target in sorted(iou_grid):
        hinted: list[Sample] = []
        realized: list[float] = []
        skipped = 0
        for sample in samples:
            try:
                hint = make_iou_hint(sample.gt_bbox, target, sample.image.width_patches, sample.image.height_patches)
            except UnreachableIoUError:
                skipped += 1
                continue
            words = hint_words(hint, max_coordinate)
            hinted.append(sample.with_query((*sample.query, *words)))
            realized.append(iou(BBox.from_sequence(words[2:]), sample.gt_bbox))
        if skipped:
            warnings.warn(
                f"WARNING: {skipped} samples skipped at injected IoU {target:.2f} (target unreachable)",
                category=UserWarning,
            )
        responses = generate_responses(model, hinted, batch_size)
        rows.append(
            {
                "target_iou": float(target),
                "acc": acc_metric(responses, hinted),
                "realized_iou": float(np.mean(realized)) if realized else 0.0,
                "n_evaluated": len(hinted),
                "n_skipped": skipped,
            }
        )
    return pl.DataFrame(rows, schema=CURVE_SCHEMA)


def curve_trend(curve: pl.DataFrame) -> float:
    """
    Spearman rank correlation between target IoU and ACC; 0 when the curve is too short or flat to rank.
    """
    if curve.height < 2:
        return 0.0
    targets = curve["target_iou"].to_numpy()
    accuracies = curve["acc"].to_numpy()
    if np.ptp(targets) == 0 or np.ptp(accuracies) == 0:
        return 0.0
    correlation = spearmanr(targets, accuracies).statistic
    return 0.0 if math.isnan(correlation) else float(correlation)


TrainFn = Callable[[list[Sample], list[Sample], str], dict[str, PolicyModel]]


def make_stage_trainer(
    make_model: Callable[[], PolicyModel],
    sft_cfg: SftConfig,
    aar_cfg: AarConfig,
    judge: JudgeBackend,
    include_ppo_baseline: bool = True,
) -> TrainFn:
    """
    The standard training function for comparison suites: returns untrained, SFT-only, SFT & PPO (relevance reward
    only) and AAR models, the RL variants both starting from the same SFT checkpoint.
    """

    def train(train_samples: list[Sample], dev_samples: list[Sample], label: str) -> dict[str, PolicyModel]:
        evaluate_dev = dev_evaluator(dev_samples) if dev_samples else None
        untrained = make_model()
        sft = run_sft(untrained.clone(), train_samples, sft_cfg, evaluate_dev).model
        models = {"untrained": untrained, "sft": sft}
        if include_ppo_baseline:
            models["sft_ppo"] = run_aar(sft.clone(), train_samples, aar_cfg.preset("ppo"), judge, evaluate_dev).model
        models["aar"] = run_aar(sft.clone(), train_samples, aar_cfg.preset("aar"), judge, evaluate_dev).model
        logger.info("Trained %s for plan '%s'", ", ".join(models), label)
        return models

    return train


@dataclass
class GeneralizationReport:
    results: pl.DataFrame
    audit: pl.DataFrame

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.results.write_csv(directory / "generalization.csv")
        self.audit.write_csv(directory / "generalization_audit.csv")


def training_audit(samples: Sequence[Sample], plan: SplitPlan) -> dict[str, Any]:
    """
    Count training samples that belong to an excluded family; every count must be 0.
    """
    train = select(samples, TRAIN)
    return {
        "plan": plan.label,
        "n_train": len(train),
        "train_heldout_category": sum(sample.category_family in plan.heldout_category_families for sample in train),
        "train_heldout_dataset": sum(sample.dataset_family in plan.heldout_dataset_families for sample in train),
        "train_crossmodal": sum(
            bool(plan.train_only_datasets) and sample.dataset_family not in plan.train_only_datasets for sample in train
        ),
    }


def run_generalization_suite(
    train_fn: TrainFn,
    world: WorldConfig,
    plans: Sequence[SplitPlan],
    num_samples: int = 1000,
    batch_size: int = 64,
) -> GeneralizationReport:
    """
    Train under each exclusion plan and evaluate every returned model on the excluded slices and the regular test
    split.

    :param train_fn: Maps (train samples, dev samples, plan label) to named models
    :param world: The world configuration
    :param plans: Split plans, at least one of them holding something out
    :param num_samples: Samples generated per plan
    """
    if not any(plan.heldout_tags for plan in plans):
        raise ConfigError("run_generalization_suite needs at least one plan with a held-out family")
    samples = generate_dataset(world, num_samples)
    rows: list[dict[str, Any]] = []
    audits: list[dict[str, Any]] = []
    for plan in plans:
        tagged = apply_split(samples, plan, world)
        audit = training_audit(tagged, plan)
        audits.append(audit)
        leaked = audit["train_heldout_category"] + audit["train_heldout_dataset"] + audit["train_crossmodal"]
        if leaked:
            raise SplitError(f"Plan '{plan.label}' put {leaked} excluded samples into training")
        try:
            models = train_fn(select(tagged, TRAIN), select(tagged, DEV), plan.label)
        except AAROSError as error:
            raise type(error)(f"[{plan.label}] {error}") from error
        for slice_name in [*plan.heldout_tags, TEST]:
            subset = split_samples(tagged, slice_name)
            for model_name, model in models.items():
                responses = generate_responses(model, subset, batch_size)
                rows.append(
                    {
                        "plan": plan.label,
                        "slice": slice_name,
                        "model": model_name,
                        "n": len(subset),
                        "acc": acc_metric(responses, subset),
                        "mean_iou": mean_iou_metric(responses, subset),
                    }
                )
    return GeneralizationReport(pl.DataFrame(rows), pl.DataFrame(audits))


def _score_variant(model: PolicyModel, dev: Sequence[Sample], test: Sequence[Sample], batch_size: int) -> dict[str, float]:
    dev_responses = generate_responses(model, dev, batch_size)
    test_responses = generate_responses(model, test, batch_size)
    return {
        "dev_acc": acc_metric(dev_responses, dev),
        "dev_mean_iou": mean_iou_metric(dev_responses, dev),
        "test_acc": acc_metric(test_responses, test),
        "test_mean_iou": mean_iou_metric(test_responses, test),
    }


def run_reward_ablation(
    sft_model: PolicyModel,
    train: Sequence[Sample],
    dev: Sequence[Sample],
    test: Sequence[Sample],
    aar_cfg: AarConfig,
    judge: JudgeBackend,
    variants: Sequence[str] = ("aar", "no_vrr", "no_alr", "ppo"),
    batch_size: int = 64,
) -> pl.DataFrame:
    """
    Train each reward-channel variant from the same SFT checkpoint and report dev and test metrics, with the
    untouched SFT checkpoint as the first row.
    """
    rows = [{"variant": "sft", **_score_variant(sft_model, dev, test, batch_size)}]
    for variant in variants:
        model = run_aar(sft_model.clone(), train, aar_cfg.preset(variant), judge).model
        rows.append({"variant": variant, **_score_variant(model, dev, test, batch_size)})
        logger.info("Reward ablation variant %s done", variant)
    return pl.DataFrame(rows)


def run_coefficient_sweep(
    sft_model: PolicyModel,
    train: Sequence[Sample],
    dev: Sequence[Sample],
    aar_cfg: AarConfig,
    judge: JudgeBackend,
    pairs: Sequence[tuple[float, float]] = DEFAULT_COEFFICIENT_PAIRS,
    batch_size: int = 64,
) -> tuple[pl.DataFrame, tuple[float, float]]:
    """
    AAR runs over (c1, c2) pairs from one SFT checkpoint; the best pair maximises dev ACC, the earlier pair winning
    ties.
    """
    if not pairs:
        raise ConfigError("run_coefficient_sweep needs at least one (c1, c2) pair")
    rows: list[dict[str, float]] = []
    for c1, c2 in pairs:
        model = run_aar(sft_model.clone(), train, replace(aar_cfg, c1=c1, c2=c2), judge).model
        responses = generate_responses(model, dev, batch_size)
        rows.append({"c1": c1, "c2": c2, "dev_acc": acc_metric(responses, dev), "dev_mean_iou": mean_iou_metric(responses, dev)})
    best = max(range(len(rows)), key=lambda index: (rows[index]["dev_acc"], -index))
    return pl.DataFrame(rows), (rows[best]["c1"], rows[best]["c2"])


def run_sft_scale_study(
    make_model: Callable[[], PolicyModel],
    train: Sequence[Sample],
    dev: Sequence[Sample],
    sft_cfg: SftConfig,
    fractions: Sequence[float] = DEFAULT_SCALE_FRACTIONS,
    batch_size: int = 64,
) -> pl.DataFrame:
    """
    Instruction tuning on growing fractions of the training split, reporting dev ACC per fraction.
    """
    rows: list[dict[str, Any]] = []
    for fraction in fractions:
        result = run_sft(make_model(), train, replace(sft_cfg, data_fraction=fraction))
        responses = generate_responses(result.model, dev, batch_size)
        rows.append(
            {
                "data_fraction": fraction,
                "n_train": max(1, int(round(fraction * len(train)))),
                "dev_acc": acc_metric(responses, dev),
                "dev_mean_iou": mean_iou_metric(responses, dev),
            }
        )
    return pl.DataFrame(rows)
