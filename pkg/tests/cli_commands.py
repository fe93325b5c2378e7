import json
from pathlib import Path

import polars as pl
import pytest
import yaml

from AAROS.__main__ import main
from AAROS.config import load_run_config, parse_override
from AAROS.errors import ConfigError

TINY = [
    "--set", "num_samples=40",
    "--set", "model.d_model=16",
    "--set", "model.n_layers=1",
    "--set", "model.n_heads=2",
    "--set", "model.d_ff=32",
    "--set", "sft.epochs=1",
    "--set", "sft.batch_size=16",
    "--set", "sft.learning_rate=0.001",
    "--set", "aar.k=2",
    "--set", "aar.batch_size=4",
    "--set", "aar.max_iterations=2",
    "--set", "eval.injection_grid=[0.0, 1.0]",
    "--set", "build.num_samples=6",
]  # fmt: skip


def run(command: str, out: Path, *extra: str) -> int:
    return main([command, "--out", str(out), "--seed", "3", *TINY, *extra])


def test_overrides_keep_yaml_types() -> None:
    assert parse_override("aar.k=4") == ("aar.k", 4)
    assert parse_override("judge.fallback_to_reference=false") == ("judge.fallback_to_reference", False)
    assert parse_override("eval.splits=[dev, test]") == ("eval.splits", ["dev", "test"])
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


def test_seed_reaches_every_stage(tmp_path: Path) -> None:
    config = load_run_config(None, ["aar.k=4"], seed=10, out=tmp_path)
    assert (config.world.seed, config.split.seed, config.model.seed, config.sft.seed, config.aar.seed) == (
        10,
        11,
        12,
        13,
        14,
    )
    assert config.aar.k == 4


def test_config_file_and_snapshot(tmp_path: Path) -> None:
    profile = tmp_path / "profile.yaml"
    profile.write_text(yaml.safe_dump({"sft": {"epochs": 2}, "num_samples": 40}))
    assert run("gen", tmp_path / "run", "--config", str(profile)) == 0
    snapshot = yaml.safe_load((tmp_path / "run" / "config_gen.yaml").read_text())
    assert snapshot["sft"]["epochs"] == 1
    assert snapshot["world"]["seed"] == 3


def test_unknown_override_key_exits_with_config_error(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    assert run("gen", tmp_path, "--set", "world.colour=red") == 2
    errors = [line for line in capsys.readouterr().err.splitlines() if line.startswith("error kind=")]
    assert errors and errors[0].startswith("error kind=ConfigError exit=2 message=")


def test_missing_config_file_is_a_config_error(tmp_path: Path) -> None:
    assert run("gen", tmp_path, "--config", str(tmp_path / "absent.yaml")) == 2


def test_aar_without_sft_checkpoint_exits_3(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    assert run("gen", tmp_path) == 0
    capsys.readouterr()
    assert run("aar", tmp_path) == 3
    errors = [line for line in capsys.readouterr().err.splitlines() if line.startswith("error kind=")]
    assert len(errors) == 1
    assert errors[0].startswith("error kind=PrerequisiteError exit=3 message=")


def test_sft_without_dataset_exits_3(tmp_path: Path) -> None:
    assert run("sft", tmp_path) == 3


def test_gen_is_reproducible(tmp_path: Path) -> None:
    assert run("gen", tmp_path / "a") == 0
    assert run("gen", tmp_path / "b") == 0
    assert (tmp_path / "a" / "dataset.jsonl").read_bytes() == (tmp_path / "b" / "dataset.jsonl").read_bytes()


def test_build_review_and_export(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    assert run("build", tmp_path) == 0
    built = tmp_path / "build" / "built.jsonl"
    audit = pl.read_csv(tmp_path / "build" / "audit.csv")
    assert audit.height == 6 and set(audit["decision"].to_list()) == {"accepted"}

    capsys.readouterr()
    assert run("review", tmp_path, "--list") == 0
    assert capsys.readouterr().out == ""

    first_id = json.loads(built.read_text().splitlines()[0])["id"]
    assert run("review", tmp_path, "--reject", first_id) == 0
    assert run("review", tmp_path, "--list") == 0
    listed = capsys.readouterr().out.strip().splitlines()
    assert [line.split("\t")[0] for line in listed] == [first_id]

    assert run("review", tmp_path, "--correct", first_id) == 2
    assert run("export", tmp_path) == 0
    exported = (tmp_path / "dataset.jsonl").read_text().splitlines()
    assert len(exported) == 5


@pytest.mark.slow
def test_pipeline_end_to_end_is_reproducible(tmp_path: Path) -> None:
    for name in ("first", "second"):
        out = tmp_path / name
        for command in ("gen", "sft", "aar", "eval"):
            assert run(command, out) == 0, command
        assert (out / "sft" / "checkpoint.pt").exists()
        assert (out / "aar" / "checkpoint.pt").exists()
        assert (out / "eval" / "aar" / "report.json").exists()
        assert (out / "eval" / "aar" / "curve_injection_plot.csv").exists()
    for artifact in ("sft/metrics.csv", "aar/metrics.csv", "eval/aar/splits.csv"):
        assert (tmp_path / "first" / artifact).read_bytes() == (tmp_path / "second" / artifact).read_bytes()
