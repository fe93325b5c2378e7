import json

import polars as pl
import pytest

from AAROS.core import BBox, Response
from AAROS.errors import ConfigError
from AAROS.evaluation import (
    CURVE_SCHEMA,
    EvalPlan,
    acc_metric,
    curve_trend,
    evaluate,
    make_stage_trainer,
    mean_iou_metric,
    mentions_category,
    run_generalization_suite,
    run_injection_ablation,
    split_samples,
)
from AAROS.judge import ReferenceJudge
from AAROS.model import ModelConfig, PolicyModel
from AAROS.synthworld import (
    DEV,
    HELDOUT_CATEGORY,
    HELDOUT_DATASET,
    TEST,
    TRAIN,
    SplitPlan,
    WorldConfig,
    apply_split,
    generate_dataset,
    select,
)
from AAROS.tokenizer import Vocab
from AAROS.train import AarConfig, SftConfig, run_sft


def text_response(text: str, bbox: BBox | None = None) -> Response:
    return Response(tokens=(), parsed_bbox=bbox, text=text)


def test_acc_counts_category_mentions(dataset: list) -> None:
    samples = dataset[:4]
    texts = [f"category {sample.category_name}" for sample in samples]
    texts[1] = "no finding"
    assert acc_metric([text_response(text) for text in texts], samples) == 0.75


def test_acc_matches_whole_words_only() -> None:
    assert mentions_category("Category: CYST.", "cyst")
    assert not mentions_category("cysts everywhere", "cyst")
    assert not mentions_category("", "cyst")


@pytest.mark.parametrize(
    "text",
    ["category cyst", "the cyst is here", "CYST", "stone and cyst", "acyst", "cyst_like", "cyst2", "c y s t"],
)
def test_acc_agrees_with_token_oracle(text: str) -> None:
    oracle = "cyst" in [word.strip(".,:;!?") for word in text.lower().split()]
    assert mentions_category(text, "cyst") == oracle


def test_mean_iou_counts_missing_boxes_as_zero(dataset: list) -> None:
    first, second = dataset[:2]
    responses = [text_response("", first.gt_bbox), text_response("")]
    assert mean_iou_metric(responses, [first, second]) == pytest.approx(0.5)


def test_metrics_need_aligned_inputs(dataset: list) -> None:
    with pytest.raises(ValueError):
        acc_metric([text_response("")], dataset[:2])
    assert acc_metric([], []) == 0.0


def test_test_split_excludes_dev(dataset: list) -> None:
    regular = split_samples(dataset, TEST)
    assert regular
    assert all(DEV not in sample.split_tags for sample in regular)
    assert len(regular) + len(split_samples(dataset, DEV)) == len(select(dataset, TEST))


def test_report_lists_every_requested_split(tiny_model: PolicyModel, dataset: list, tmp_path) -> None:
    plan = EvalPlan(splits=[DEV, TEST, HELDOUT_CATEGORY], injection_grid=[0.0, 1.0])
    report = evaluate(tiny_model, dataset, plan, {"stage": "untrained"}, with_injection=True)
    assert list(report.acc) == [DEV, TEST, HELDOUT_CATEGORY]
    assert report.counts[HELDOUT_CATEGORY] == 0
    assert report.acc[HELDOUT_CATEGORY] == 0.0
    for split in report.acc:
        assert 0.0 <= report.acc[split] <= 1.0 and 0.0 <= report.mean_iou[split] <= 1.0
    report.write(tmp_path)
    written = json.loads((tmp_path / "report.json").read_text())
    assert written["metadata"] == {"stage": "untrained"}
    assert pl.read_csv(tmp_path / "curve_injection_plot.csv").columns == ["target_iou", "acc"]
    assert pl.read_csv(tmp_path / "splits.csv")["split"].to_list() == [DEV, TEST, HELDOUT_CATEGORY]


def test_default_plan_reports_dev_and_test(tiny_model: PolicyModel, dataset: list) -> None:
    report = evaluate(tiny_model, dataset, EvalPlan())
    assert list(report.acc) == [DEV, TEST]


def test_unknown_split_is_rejected() -> None:
    with pytest.raises(ConfigError):
        EvalPlan(splits=["validation"]).validate()


def test_empty_grid_gives_an_empty_curve(tiny_model: PolicyModel, dataset: list) -> None:
    curve = run_injection_ablation(tiny_model, dataset[:4], [])
    assert curve.is_empty()
    assert curve.schema == pl.Schema(CURVE_SCHEMA)


def test_injection_curve_is_sorted_and_accounted(tiny_model: PolicyModel, dataset: list) -> None:
    samples = dataset[:6]
    curve = run_injection_ablation(tiny_model, samples, [1.0, 0.0, 0.5])
    assert curve["target_iou"].to_list() == [0.0, 0.5, 1.0]
    for row in curve.iter_rows(named=True):
        assert row["n_evaluated"] + row["n_skipped"] == len(samples)
    assert curve["realized_iou"][-1] == pytest.approx(1.0)
    assert curve["realized_iou"][0] == pytest.approx(0.0)


def test_out_of_range_target_is_rejected(tiny_model: PolicyModel, dataset: list) -> None:
    with pytest.raises(ValueError):
        run_injection_ablation(tiny_model, dataset[:2], [1.2])


def test_curve_trend() -> None:
    rising = pl.DataFrame({"target_iou": [0.0, 0.5, 1.0], "acc": [0.1, 0.4, 0.8]})
    falling = pl.DataFrame({"target_iou": [0.0, 0.5, 1.0], "acc": [0.8, 0.4, 0.1]})
    flat = pl.DataFrame({"target_iou": [0.0, 1.0], "acc": [0.5, 0.5]})
    assert curve_trend(rising) == pytest.approx(1.0)
    assert curve_trend(falling) == pytest.approx(-1.0)
    assert curve_trend(flat) == 0.0


def test_generalization_suite_needs_a_heldout_plan() -> None:
    with pytest.raises(ConfigError):
        run_generalization_suite(lambda train, dev, label: {}, WorldConfig(), [SplitPlan()])


def test_generalization_suite_rows(tiny_model: PolicyModel) -> None:
    seen: list[tuple[int, str]] = []

    def train_fn(train: list, dev: list, label: str) -> dict[str, PolicyModel]:
        assert all(sample.category_family != "F1" for sample in train)
        seen.append((len(train), label))
        return {"untrained": tiny_model}

    plan = SplitPlan(heldout_category_families=["F1"], label="unseen-f1")
    report = run_generalization_suite(train_fn, WorldConfig(), [plan], num_samples=40)
    assert [label for _, label in seen] == ["unseen-f1"]
    assert report.results["slice"].to_list() == [HELDOUT_CATEGORY, TEST]
    assert report.audit["train_heldout_category"].to_list() == [0]


@pytest.mark.slow
def test_injection_curve_rises_on_a_trained_model() -> None:
    world = WorldConfig()
    samples = apply_split(generate_dataset(world, 1250), SplitPlan(train_fraction=0.8), world)
    model = PolicyModel(ModelConfig(), Vocab(world.category_names, world.max_coordinate), world.feature_dim, 100)
    run_sft(model, select(samples, TRAIN), SftConfig(learning_rate=2e-3, batch_size=16, epochs=4, hint_fraction=0.5))
    curve = run_injection_ablation(model, split_samples(samples, TEST), [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    assert curve_trend(curve) > 0


@pytest.mark.slow
def test_generalization_to_heldout_families() -> None:
    world = WorldConfig()
    vocab = Vocab(world.category_names, world.max_coordinate)
    trainer = make_stage_trainer(
        lambda: PolicyModel(ModelConfig(), vocab, world.feature_dim, 100),
        SftConfig(learning_rate=2e-3, batch_size=16, epochs=4),
        AarConfig(learning_rate=1e-5, batch_size=8, max_iterations=30),
        ReferenceJudge(),
    )
    plans = [
        SplitPlan(heldout_category_families=["F1"], label="unseen-f1"),
        SplitPlan(heldout_dataset_families=["D2"], label="unseen-d2"),
    ]
    results = run_generalization_suite(trainer, world, plans, num_samples=1250).results

    def heldout_acc(slice_name: str) -> dict[str, float]:
        rows = results.filter(pl.col("slice") == slice_name)
        return dict(zip(rows["model"].to_list(), rows["acc"].to_list()))

    category = heldout_acc(HELDOUT_CATEGORY)
    assert set(category) == {"untrained", "sft", "sft_ppo", "aar"}
    assert category["aar"] >= category["sft"]

    dataset = heldout_acc(HELDOUT_DATASET)
    assert dataset["aar"] >= 1 / world.num_categories + 0.10
    assert dataset["aar"] >= dataset["sft"]
