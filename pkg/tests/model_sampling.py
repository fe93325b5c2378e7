import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from AAROS.model import PolicyModel, forward, sample_batch, sample_candidates, truncated_distribution


def encoded_query(model: PolicyModel, sample) -> list[int]:
    return model.vocab.encode(sample.query)


def test_greedy_candidates_are_identical(tiny_model: PolicyModel, dataset: list) -> None:
    sample = dataset[0]
    candidates = sample_candidates(tiny_model, sample.image, encoded_query(tiny_model, sample), k=3, greedy=True)
    assert len({candidate.tokens for candidate in candidates}) == 1


def test_same_seed_same_candidates(tiny_model: PolicyModel, dataset: list) -> None:
    sample = dataset[1]
    query = encoded_query(tiny_model, sample)
    first = sample_candidates(tiny_model, sample.image, query, k=8, seed=11)
    second = sample_candidates(tiny_model, sample.image, query, k=8, seed=11)
    assert len(first) == 8
    assert first == second


def test_candidates_respect_length_limit(tiny_model: PolicyModel, dataset: list) -> None:
    sample = dataset[2]
    limit = tiny_model.config.max_response_len
    for candidate in sample_candidates(tiny_model, sample.image, encoded_query(tiny_model, sample), k=8, top_p=1.0):
        assert 1 <= len(candidate) <= limit
        assert len(candidate.logprobs) == len(candidate)
        if tiny_model.vocab.eos_id in candidate.tokens:
            assert candidate.tokens.index(tiny_model.vocab.eos_id) == len(candidate) - 1


def test_batch_keeps_query_order(double_model: PolicyModel, dataset: list) -> None:
    samples = dataset[:3]
    groups = sample_batch(
        double_model,
        [sample.image for sample in samples],
        [encoded_query(double_model, sample) for sample in samples],
        k=2,
        greedy=True,
    )
    assert len(groups) == 3
    for sample, group in zip(samples, groups):
        alone = sample_candidates(double_model, sample.image, encoded_query(double_model, sample), k=1, greedy=True)
        assert group[0].tokens == alone[0].tokens


def test_recorded_logprobs_follow_the_truncated_distribution(double_model: PolicyModel, dataset: list) -> None:
    sample = dataset[3]
    query = encoded_query(double_model, sample)
    candidates = sample_candidates(double_model, sample.image, query, k=4, temperature=0.9, top_p=0.9, seed=5)
    with torch.no_grad():
        for candidate in candidates:
            steps = forward(double_model, sample.image, query, list(candidate.tokens[:-1]))
            distribution = truncated_distribution(steps.logits, 0.9, 0.9)
            expected = distribution[torch.arange(len(candidate)), torch.tensor(candidate.tokens)].log()
            np.testing.assert_allclose(candidate.logprobs, expected.numpy(), atol=1e-6)


def test_first_token_frequencies_match_the_policy(tiny_model: PolicyModel, dataset: list) -> None:
    sample = dataset[4]
    query = encoded_query(tiny_model, sample)
    draws = 1000
    candidates = sample_candidates(
        tiny_model, sample.image, query, k=draws, temperature=1.0, top_p=1.0, seed=2, max_new_tokens=1
    )
    observed = np.bincount([candidate.tokens[0] for candidate in candidates], minlength=len(tiny_model.vocab))
    with torch.no_grad():
        probs = torch.softmax(forward(tiny_model, sample.image, query, []).logits[0].double(), dim=-1).numpy()
    expected = probs / probs.sum() * draws
    assert chisquare(observed, expected).pvalue > 0.001


def test_nucleus_keeps_the_smallest_prefix() -> None:
    distribution = truncated_distribution(torch.log(torch.tensor([0.6, 0.3, 0.1])), 1.0, 0.5)
    torch.testing.assert_close(distribution, torch.tensor([1.0, 0.0, 0.0]))
    distribution = truncated_distribution(torch.log(torch.tensor([0.6, 0.3, 0.1])), 1.0, 0.8)
    torch.testing.assert_close(distribution, torch.tensor([2 / 3, 1 / 3, 0.0]))


def test_full_nucleus_is_the_tempered_softmax() -> None:
    logits = torch.tensor([3.0, 1.0, 0.0])
    torch.testing.assert_close(truncated_distribution(logits, 2.0, 1.0), torch.softmax(logits / 2.0, dim=-1))


@pytest.mark.parametrize("overrides", [{"k": 0}, {"temperature": 0.0}, {"top_p": 0.0}, {"top_p": 1.5}])
def test_invalid_sampling_arguments(tiny_model: PolicyModel, dataset: list, overrides: dict) -> None:
    sample = dataset[0]
    arguments = {"k": 2, "temperature": 0.9, "top_p": 0.9} | overrides
    with pytest.raises(ValueError):
        sample_candidates(tiny_model, sample.image, encoded_query(tiny_model, sample), **arguments)
