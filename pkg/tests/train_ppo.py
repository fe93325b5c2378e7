import dataclasses
import warnings

import pytest
import torch

from AAROS.core import Response
from AAROS.errors import ConfigError, DivergenceError
from AAROS.evaluation import dev_evaluator
from AAROS.judge import ReferenceJudge
from AAROS.model import Candidate, ModelConfig, PolicyModel
from AAROS.rewards import RewardBreakdown
from AAROS.synthworld import DEV, TRAIN, SplitPlan, WorldConfig, apply_split, generate_dataset, select
from AAROS.tokenizer import Vocab
from AAROS.train import (
    AarConfig,
    RolloutGroup,
    SftConfig,
    clipped_surrogate,
    collect_rollouts,
    compute_returns_and_advantages,
    ppo_objective,
    run_aar,
    run_sft,
)


def group_of(values: list[list[float]], rewards: list[float]) -> RolloutGroup:
    candidates = tuple(Candidate(tuple(range(len(row))), tuple(0.0 for _ in row)) for row in values)
    return RolloutGroup(
        sample_id="s",
        candidates=candidates,
        responses=tuple(Response(tokens=candidate.tokens) for candidate in candidates),
        old_logprobs=tuple(torch.zeros(len(row), dtype=torch.float64) for row in values),
        values=tuple(torch.tensor(row, dtype=torch.float64) for row in values),
        rewards=tuple(RewardBreakdown(r_llm=reward, r_loc=0.0, r_att=0.0, r_combined=reward) for reward in rewards),
    )


def test_surrogate_without_clipping() -> None:
    assert float(clipped_surrogate(torch.tensor(1.0), torch.tensor(1.0), 0.2)) == pytest.approx(1.0)


@pytest.mark.parametrize("ratio", [2.0, 1.5])
def test_surrogate_clips_large_positive_ratio(ratio: float) -> None:
    assert float(clipped_surrogate(torch.tensor(ratio), torch.tensor(1.0), 0.2)) == pytest.approx(1.2)


def test_surrogate_clips_small_ratio_with_negative_advantage() -> None:
    assert float(clipped_surrogate(torch.tensor(0.5), torch.tensor(-1.0), 0.2)) == pytest.approx(-0.8)


@pytest.mark.parametrize(("ratio", "advantage"), [(1.5, 1.0), (1.3, 2.0), (0.5, -1.0), (0.7, -0.5)])
def test_clipped_regime_has_zero_gradient(ratio: float, advantage: float) -> None:
    step = 1e-4
    rho = torch.tensor([ratio - step, ratio + step], dtype=torch.float64)
    values = clipped_surrogate(rho, torch.tensor(advantage, dtype=torch.float64), 0.2)
    assert float(values[1] - values[0]) / (2 * step) == pytest.approx(0.0, abs=1e-9)


def test_unit_ratio_objective_is_the_mean_advantage() -> None:
    advantages = torch.tensor([0.5, -1.0, 2.0])
    logp = torch.tensor([-0.3, -1.2, -2.0])
    cfg = AarConfig(c1=0.0, c2=0.0, c3=0.0)
    zeros = torch.zeros(3)
    terms = ppo_objective(logp, logp.clone(), advantages, zeros, zeros, zeros, zeros, cfg)
    assert float(terms.objective) == pytest.approx(float(advantages.mean()))


def test_objective_combines_every_term() -> None:
    cfg = AarConfig(c1=0.5, c2=0.5, c3=0.01)
    zeros = torch.zeros(2)
    terms = ppo_objective(
        zeros,
        zeros,
        torch.tensor([1.0, 1.0]),
        torch.tensor([1.0, 1.0]),
        torch.tensor([3.0, 3.0]),
        torch.tensor([2.0, 2.0]),
        torch.tensor([2.0, 2.0]),
        cfg,
    )
    assert float(terms.objective) == pytest.approx(1.0 + 0.5 * 2.0 - 0.5 * 4.0 + 0.01 * 2.0)
    assert terms.value_loss == pytest.approx(4.0)


def test_term_summaries_do_not_warn_under_autograd() -> None:
    logp = torch.tensor([-0.4, -1.1], requires_grad=True)
    values = torch.tensor([0.2, 0.3], requires_grad=True)
    entropy = torch.tensor([0.7, 0.9], requires_grad=True)
    ones = torch.ones(2)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        terms = ppo_objective(logp, logp.detach(), ones, values, ones, entropy, ones, AarConfig())
    assert terms.objective.requires_grad
    assert isinstance(terms.clip, float) and isinstance(terms.entropy, float)


def test_infinite_ratio_is_a_divergence() -> None:
    big = torch.tensor([1000.0])
    zero = torch.zeros(1)
    with pytest.raises(DivergenceError):
        ppo_objective(big, zero, zero + 1, zero, zero, zero, zero, AarConfig())


def test_single_step_return() -> None:
    group = compute_returns_and_advantages(group_of([[0.5]], [2.0]), gamma=0.99)
    torch.testing.assert_close(group.returns[0], torch.tensor([2.0], dtype=torch.float64))
    torch.testing.assert_close(group.advantages[0], torch.tensor([1.5], dtype=torch.float64))


def test_undiscounted_returns_are_flat() -> None:
    group = compute_returns_and_advantages(group_of([[0.0, 0.0, 0.0]], [1.0]), gamma=1.0)
    torch.testing.assert_close(group.returns[0], torch.ones(3, dtype=torch.float64))


def test_zero_reward_gives_minus_value() -> None:
    values = [0.2, -0.4, 0.9]
    group = compute_returns_and_advantages(group_of([values], [0.0]), gamma=0.9)
    torch.testing.assert_close(group.advantages[0], -torch.tensor(values, dtype=torch.float64))


def test_returns_follow_the_discount_recursion() -> None:
    gamma = 0.9
    group = compute_returns_and_advantages(group_of([[0.1] * 5, [0.0] * 2], [1.7, -0.3]), gamma)
    for returns, reward in zip(group.returns, (1.7, -0.3)):
        assert float(returns[-1]) == pytest.approx(reward)
        for step in range(len(returns) - 1):
            assert float(returns[step]) == pytest.approx(gamma * float(returns[step + 1]))


def test_returns_need_normalised_rewards() -> None:
    group = dataclasses.replace(group_of([[0.0]], [1.0]), rewards=(RewardBreakdown(1.0, 0.0, 0.0),))
    with pytest.raises(ValueError):
        compute_returns_and_advantages(group, 0.9)


def test_mismatched_rollout_lengths_are_rejected() -> None:
    with pytest.raises(ValueError):
        RolloutGroup(
            sample_id="s",
            candidates=(Candidate((1, 2), (0.0, 0.0)),),
            responses=(Response(tokens=(1, 2)),),
            old_logprobs=(torch.zeros(3),),
            values=(torch.zeros(2),),
            rewards=(RewardBreakdown(0.0, 0.0, 0.0, r_combined=0.0),),
        )


def test_group_normalisation_needs_two_candidates() -> None:
    with pytest.raises(ConfigError):
        AarConfig(k=1).validate()


def test_presets_switch_channels() -> None:
    cfg = AarConfig()
    assert not cfg.preset("no_vrr").use_attention_reward
    assert not cfg.preset("no_alr").use_localization_reward
    ppo = cfg.preset("ppo")
    assert not ppo.use_attention_reward and not ppo.use_localization_reward and ppo.use_relevance_reward
    with pytest.raises(ConfigError):
        cfg.preset("grpo")


def test_rollouts_are_normalised_per_group(tiny_model: PolicyModel, dataset: list) -> None:
    samples = select(dataset, TRAIN)[:3]
    cfg = AarConfig(k=4, temperature=1.0, top_p=1.0)
    rollout = collect_rollouts(tiny_model, samples, cfg, ReferenceJudge(), torch.Generator().manual_seed(0))
    assert [group.sample_id for group in rollout.groups] == [sample.id for sample in samples]
    for group in rollout.groups:
        assert len(group.candidates) == 4
        for channel, raw in (("r_loc_norm", "r_loc"), ("r_att_norm", "r_att")):
            if any(getattr(reward, raw) > 0 for reward in group.rewards):
                assert max(getattr(reward, channel) for reward in group.rewards) == pytest.approx(1.0)
        for candidate, advantages in zip(group.candidates, group.advantages):
            assert advantages.numel() == len(candidate)
    assert rollout.mask.sum() == sum(len(candidate) for group in rollout.groups for candidate in group.candidates)


def test_short_aar_run(tiny_model: PolicyModel, dataset: list) -> None:
    train = select(dataset, TRAIN)
    cfg = AarConfig(k=2, batch_size=2, learning_rate=1e-4, max_iterations=2, seed=1)
    result = run_aar(tiny_model, train, cfg, ReferenceJudge(), keep_rollouts=True)
    frame = result.metrics
    assert frame.columns == [
        "iteration",
        "epoch",
        "mean_r_llm",
        "mean_r_loc",
        "mean_r_att",
        "mean_r_combined",
        "objective",
        "value_loss",
        "entropy",
        "dev_acc",
        "dev_mean_iou",
    ]
    assert frame["iteration"].to_list() == [1, 2]
    assert len(result.rollouts) == 2
    group = result.rollouts[0][0]
    with pytest.raises(dataclasses.FrozenInstanceError):
        group.sample_id = "changed"


def test_aar_is_reproducible(world, vocab, tiny_config: ModelConfig, dataset: list) -> None:
    train = select(dataset, TRAIN)
    cfg = AarConfig(k=2, batch_size=4, learning_rate=1e-4, max_iterations=2, seed=5)
    runs = [
        run_aar(PolicyModel(tiny_config, vocab, world.feature_dim, 100), train, cfg, ReferenceJudge()).metrics
        for _ in range(2)
    ]
    assert runs[0].equals(runs[1])


@pytest.mark.slow
def test_aar_improves_on_sft_for_most_seeds() -> None:
    improved = 0
    for seed in (0, 1, 2):
        world = WorldConfig(seed=seed)
        samples = apply_split(generate_dataset(world, 1250), SplitPlan(train_fraction=0.8, seed=seed + 1), world)
        train, dev = select(samples, TRAIN), select(samples, DEV)
        vocab = Vocab(world.category_names, world.max_coordinate)
        model = PolicyModel(ModelConfig(seed=seed + 2), vocab, world.feature_dim, 100)
        run_sft(model, train, SftConfig(learning_rate=2e-3, batch_size=16, epochs=4, seed=seed + 3))
        evaluate_dev = dev_evaluator(dev)
        before = evaluate_dev(model)
        run_aar(model, train, AarConfig(learning_rate=1e-5, batch_size=8, max_iterations=60, seed=seed + 4), ReferenceJudge())
        after = evaluate_dev(model)
        improved += after["acc"] >= before["acc"] and after["mean_iou"] >= before["mean_iou"]
    assert improved >= 2
