import math

import pytest
import torch

from AAROS.errors import PrerequisiteError, SequenceTooLongError
from AAROS.model import (
    ModelConfig,
    MultiHeadAttention,
    PolicyModel,
    cross_attention_slice,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from AAROS.train import sft_loss


def inputs(model: PolicyModel, sample) -> tuple[list[int], list[int]]:
    vocab = model.vocab
    return vocab.encode(sample.query), vocab.encode(sample.reference_response)


def test_step_shapes_and_normalisation(tiny_model: PolicyModel, dataset: list) -> None:
    sample = dataset[0]
    query, response = inputs(tiny_model, sample)
    outputs = forward(tiny_model, sample.image, query, response[:4])
    assert outputs.logits.shape == (5, len(tiny_model.vocab))
    assert outputs.values.shape == (5,)
    assert outputs.attention.shape == (1, 2, 5, 100)
    sums = torch.softmax(outputs.logits, dim=-1).sum(dim=-1)
    torch.testing.assert_close(sums, torch.ones_like(sums), atol=1e-6, rtol=0)
    rows = torch.softmax(outputs.attention, dim=-1).sum(dim=-1)
    torch.testing.assert_close(rows, torch.ones_like(rows), atol=1e-6, rtol=0)


def test_forward_is_pure(tiny_model: PolicyModel, dataset: list) -> None:
    sample = dataset[1]
    query, response = inputs(tiny_model, sample)
    first = forward(tiny_model, sample.image, query, response)
    second = forward(tiny_model, sample.image, query, response)
    assert torch.equal(first.logits, second.logits)
    assert torch.equal(first.values, second.values)
    assert torch.equal(first.attention, second.attention)


def test_padding_does_not_change_outputs(tiny_model: PolicyModel, dataset: list) -> None:
    from AAROS.model import build_batch

    sample = dataset[2]
    query, response = inputs(tiny_model, sample)
    alone = forward(tiny_model, sample.image, query, response[:2])
    batch = build_batch(tiny_model, [sample.image, sample.image], [query, query], [response[:2], response])
    output = tiny_model(batch.patches, batch.tokens)
    start = int(batch.start[0])
    torch.testing.assert_close(output.logits[0, start : start + 3], alone.logits, atol=1e-5, rtol=1e-5)


def test_too_long_prefix_is_rejected(tiny_model: PolicyModel, dataset: list) -> None:
    sample = dataset[0]
    query, _ = inputs(tiny_model, sample)
    prefix = [tiny_model.vocab.eos_id] * (tiny_model.config.max_response_len + 1)
    with pytest.raises(SequenceTooLongError):
        forward(tiny_model, sample.image, query, prefix)


def test_model_init_is_seeded(world, vocab, tiny_config: ModelConfig) -> None:
    first = PolicyModel(tiny_config, vocab, world.feature_dim, 100)
    second = PolicyModel(tiny_config, vocab, world.feature_dim, 100)
    for a, b in zip(first.parameters(), second.parameters()):
        assert torch.equal(a, b)


def test_invalid_head_split_is_rejected() -> None:
    from AAROS.errors import ConfigError

    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4).validate()


def test_attention_logits_match_hand_computation() -> None:
    attention = MultiHeadAttention(d_model=2, n_heads=1)
    with torch.no_grad():
        for projection in (attention.q_proj, attention.k_proj):
            projection.weight.copy_(torch.eye(2))
            projection.bias.zero_()
    tokens = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])
    patches = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    _, logits = attention(tokens, patches)
    expected = torch.tensor([[1.0, 3.0], [2.0, 4.0]]) / math.sqrt(2)
    torch.testing.assert_close(logits[0, 0], expected)
    sliced = cross_attention_slice(logits, [0, 1])
    torch.testing.assert_close(sliced, expected)


def test_attention_slice_shapes() -> None:
    maps = torch.randn(2, 3, 5, 7)
    assert cross_attention_slice(maps, []).shape == (0, 7)
    assert cross_attention_slice(maps, [0, 2, 4]).shape == (3, 7)
    assert cross_attention_slice(maps, [1], head_reduce="none").shape == (3, 1, 7)
    torch.testing.assert_close(cross_attention_slice(maps, [1]), maps[-1, :, [1], :].mean(dim=0))
    with pytest.raises(IndexError):
        cross_attention_slice(maps, [5])
    with pytest.raises(IndexError):
        cross_attention_slice(maps, [0], patch_set=[7])


def test_gradients_match_finite_differences(double_model: PolicyModel, dataset: list) -> None:
    sample = dataset[3]
    double_model.zero_grad()
    sft_loss(double_model, sample).backward()
    epsilon = 1e-5
    for name, parameter in double_model.named_parameters():
        grad = parameter.grad if parameter.grad is not None else torch.zeros_like(parameter)
        analytic = grad.detach().clone().flatten()
        # The largest gradient entry and one fixed entry of every tensor
        for index in {int(analytic.abs().argmax()), 0}:
            flat = parameter.data.view(-1)
            original = float(flat[index])
            with torch.no_grad():
                flat[index] = original + epsilon
                plus = float(sft_loss(double_model, sample))
                flat[index] = original - epsilon
                minus = float(sft_loss(double_model, sample))
                flat[index] = original
            numeric = (plus - minus) / (2 * epsilon)
            exact = float(analytic[index])
            assert abs(numeric - exact) <= 1e-3 * max(abs(numeric), abs(exact)) + 1e-7, name


def test_checkpoint_reproduces_outputs(tiny_model: PolicyModel, dataset: list, tmp_path) -> None:
    sample = dataset[4]
    query, response = inputs(tiny_model, sample)
    path = save_checkpoint(tiny_model, tmp_path / "model.pt", {"stage": "test"})
    restored, metadata = load_checkpoint(path)
    assert metadata == {"stage": "test"}
    assert restored.vocab == tiny_model.vocab
    before = forward(tiny_model, sample.image, query, response)
    after = forward(restored, sample.image, query, response)
    assert torch.equal(before.logits, after.logits)
    assert torch.equal(before.attention, after.attention)


def test_missing_checkpoint_is_a_prerequisite_error(tmp_path) -> None:
    with pytest.raises(PrerequisiteError):
        load_checkpoint(tmp_path / "absent.pt")


def test_clone_is_independent(tiny_model: PolicyModel) -> None:
    twin = tiny_model.clone()
    with torch.no_grad():
        next(twin.parameters()).add_(1.0)
    assert not torch.equal(next(twin.parameters()), next(tiny_model.parameters()))
