from __future__ import annotations

import matplotlib
import pytest
import torch

from AAROS.core import Sample
from AAROS.model import ModelConfig, PolicyModel
from AAROS.synthworld import SplitPlan, WorldConfig, apply_split, generate_dataset
from AAROS.tokenizer import Vocab

matplotlib.use("Agg")


@pytest.fixture(scope="session")
def world() -> WorldConfig:
    return WorldConfig()


@pytest.fixture(scope="session")
def vocab(world: WorldConfig) -> Vocab:
    return Vocab(world.category_names, world.max_coordinate)


@pytest.fixture(scope="session")
def dataset(world: WorldConfig) -> list[Sample]:
    return apply_split(generate_dataset(world, 60), SplitPlan(), world)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, seed=3)


@pytest.fixture
def tiny_model(world: WorldConfig, vocab: Vocab, tiny_config: ModelConfig) -> PolicyModel:
    return PolicyModel(tiny_config, vocab, world.feature_dim, world.height_patches * world.width_patches)


@pytest.fixture
def double_model(tiny_model: PolicyModel) -> PolicyModel:
    return tiny_model.double()


@pytest.fixture(autouse=True)
def single_thread() -> None:
    torch.set_num_threads(1)
