from __future__ import annotations

import dataclasses
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .evaluation import EvalPlan
from .judge import JudgeConfig
from .maubuild import BuildConfig
from .model import ModelConfig, PolicyModel
from .synthworld import SplitPlan, WorldConfig
from .tokenizer import QUERY_TEMPLATES, Vocab
from .train import AarConfig, SftConfig

logger = logging.getLogger(__name__)

HINT_LENGTH = 6


@dataclass
class RunConfig:
    """
    Everything one run needs. Every command writes the resolved copy of this into the run directory.
    """

    world: WorldConfig = field(default_factory=WorldConfig)
    split: SplitPlan = field(default_factory=SplitPlan)
    model: ModelConfig = field(default_factory=ModelConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    aar: AarConfig = field(default_factory=AarConfig)
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    eval: EvalPlan = field(default_factory=EvalPlan)
    build: BuildConfig = field(default_factory=BuildConfig)
    num_samples: int = 1000
    dataset: str = ""
    out_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> None:
        self.world.validate()
        self.split.validate(self.world)
        self.model.validate()
        self.sft.validate()
        self.aar.validate()
        self.judge.validate()
        self.eval.validate()
        self.build.validate()
        if self.num_samples < 2:
            raise ConfigError("num_samples must be at least 2 so that train and test are both non-empty")
        longest_query = max(len(template) for template in QUERY_TEMPLATES) + HINT_LENGTH
        if self.model.max_query_len < longest_query:
            raise ConfigError(
                f"model.max_query_len must be at least {longest_query} to hold a query with a bbox hint"
            )
        try:
            Path(self.out_dir).mkdir(parents=True, exist_ok=True)
        except OSError as error:
            raise ConfigError(f"Cannot create output directory {self.out_dir}: {error}") from None

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir)

    @property
    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else self.run_dir / "dataset.jsonl"

    def vocab(self) -> Vocab:
        return Vocab(self.world.category_names, self.world.max_coordinate)

    def new_model(self) -> PolicyModel:
        return PolicyModel(
            self.model,
            self.vocab(),
            self.world.feature_dim,
            self.world.height_patches * self.world.width_patches,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _set_dotted(data: dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    target = data
    for part in parts[:-1]:
        node = target.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"Override '{key}' descends into the non-mapping value of '{part}'")
        target = node
    target[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """
    Split `a.b=value`; the value is read as YAML, so numbers, booleans and lists keep their types.
    """
    key, separator, raw = text.partition("=")
    if not separator or not key.strip():
        raise ConfigError(f"Override '{text}' is not of the form key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as error:
        raise ConfigError(f"Override '{text}' has an unparsable value: {error}") from None
    return key.strip(), value


def _build(cls: type, data: Any, where: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"'{where}' must be a mapping")
    names = {item.name for item in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"Unknown keys in '{where}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as error:
        raise ConfigError(f"Invalid '{where}' section: {error}") from None


_SECTIONS: dict[str, type] = {
    "world": WorldConfig,
    "split": SplitPlan,
    "model": ModelConfig,
    "sft": SftConfig,
    "aar": AarConfig,
    "judge": JudgeConfig,
    "eval": EvalPlan,
    "build": BuildConfig,
}


def run_config_from_dict(data: dict[str, Any]) -> RunConfig:
    unknown = set(data) - {item.name for item in dataclasses.fields(RunConfig)}
    if unknown:
        raise ConfigError(f"Unknown top-level config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        if name in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[name], value or {}, name)
        else:
            kwargs[name] = value
    return RunConfig(**kwargs)


def load_run_config(
    path: str | Path | None = None,
    overrides: Sequence[str] = (),
    seed: int | None = None,
    out: str | Path | None = None,
) -> RunConfig:
    """
    Read a YAML run configuration, apply `key=value` overrides, the global seed and the output directory, and
    validate the result.

    :param path: The YAML file; None means all defaults
    :param overrides: Dotted-key overrides such as `aar.k=4`
    :param seed: A global seed; every stage gets its own offset of it
    :param out: The run directory
    """
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as error:
            raise ConfigError(f"Cannot parse {path}: {error}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path} must contain a mapping")
        data = loaded or {}
    for text in overrides:
        key, value = parse_override(text)
        _set_dotted(data, key, value)

    config = run_config_from_dict(data)
    if seed is not None:
        config.seed = seed
        config.world.seed = seed
        config.split.seed = seed + 1
        config.model.seed = seed + 2
        config.sft.seed = seed + 3
        config.aar.seed = seed + 4
        config.eval.seed = seed + 5
    if out is not None:
        config.out_dir = str(out)
    config.validate()
    return config


def dump_run_config(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    logger.info("Wrote resolved config to %s", path)
    return path
