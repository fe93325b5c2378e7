from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
import polars as pl
import torch
import torch.nn.functional as F
from torch import Tensor

from .core import Response, Sample, patches_in_region
from .errors import ConfigError, DivergenceError
from .judge import JudgeBackend, score_many
from .logging import AAROSLogger
from .model import (
    Candidate,
    DecoderBatch,
    PolicyModel,
    build_batch,
    cross_attention_slice,
    gather_steps,
    sample_batch,
    sequence_logprobs,
)
from .rewards import (
    RewardBreakdown,
    localization_reward,
    normalize_and_aggregate,
    vision_relevance_reward,
)
from .synthworld import attach_hints
from .tokenizer import Vocab, category_token_positions, parse_response
from .utils import chunked, linear_decay

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100

DevEvaluator = Callable[[PolicyModel], dict[str, float]]


@dataclass
class SftConfig:
    """
    Abnormal-aware instruction tuning. The batch size default is sized for a desk run.
    """

    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 4
    linear_decay: bool = True
    max_grad_norm: float = 1.0
    hint_fraction: float = 0.1
    hint_iou_low: float = 0.5
    data_fraction: float = 1.0
    print_interval: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("sft learning_rate and batch_size must be positive, weight_decay and epochs non-negative")
        if not 0.0 <= self.hint_fraction <= 1.0 or not 0.0 <= self.hint_iou_low <= 1.0:
            raise ConfigError("sft.hint_fraction and sft.hint_iou_low must lie in [0, 1]")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ConfigError("sft.data_fraction must lie in (0, 1]")


@dataclass
class AarConfig:
    """
    Abnormal-aware rewarding. The clip range is the standard PPO default.
    """

    gamma: float = 0.99
    c1: float = 0.5
    c2: float = 0.5
    c3: float = 0.01
    clip_epsilon: float = 0.2
    learning_rate: float = 1e-6
    k: int = 8
    temperature: float = 0.9
    top_p: float = 0.9
    epochs: int = 1
    batch_size: int = 16
    ppo_epochs: int = 1
    max_grad_norm: float = 1.0
    use_localization_reward: bool = True
    use_attention_reward: bool = True
    use_relevance_reward: bool = True
    reinforce_reward_term: bool = False
    eval_interval: int = 1
    max_iterations: int = 0
    print_interval: int = 1
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("aar.gamma must lie in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ConfigError("aar.clip_epsilon must be positive")
        if self.k < 2:
            raise ConfigError(f"aar.k must be at least 2 for group normalisation, got {self.k}")
        if self.temperature <= 0 or not 0.0 < self.top_p <= 1.0:
            raise ConfigError("aar.temperature must be positive and aar.top_p in (0, 1]")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.ppo_epochs < 1 or self.epochs < 0:
            raise ConfigError("aar learning_rate, batch_size and ppo_epochs must be positive")
        if min(self.c1, self.c2, self.c3) < 0:
            raise ConfigError("aar coefficients c1, c2, c3 must be non-negative")
        if self.eval_interval < 1 or self.max_iterations < 0:
            raise ConfigError("aar.eval_interval must be positive and aar.max_iterations non-negative")

    def preset(self, name: str) -> AarConfig:
        """
        Reward-channel variants: "aar" (all channels), "no_vrr", "no_alr" and "ppo" (relevance reward only).
        """
        match name:
            case "aar":
                return replace(self, use_localization_reward=True, use_attention_reward=True)
            case "no_vrr":
                return replace(self, use_localization_reward=True, use_attention_reward=False)
            case "no_alr":
                return replace(self, use_localization_reward=False, use_attention_reward=True)
            case "ppo":
                return replace(self, use_localization_reward=False, use_attention_reward=False)
            case _:
                raise ConfigError(f"Unknown AAR preset '{name}'")


def encode_sample(vocab: Vocab, sample: Sample) -> tuple[list[int], list[int]]:
    """
    Query ids and reference response ids (terminated by EOS) of a sample.
    """
    return vocab.encode(sample.query), [*vocab.encode(sample.reference_response), vocab.eos_id]


def token_nll(logits: Tensor, targets: Tensor) -> Tensor:
    """
    -sum_i log p_i of the target tokens under the step logits; IGNORE_INDEX targets are skipped.
    """
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE_INDEX, reduction="sum")


@dataclass
class TeacherForcedBatch:
    loss: Tensor
    correct: int
    count: int


def teacher_forced(model: PolicyModel, samples: Sequence[Sample]) -> TeacherForcedBatch:
    """
    Teacher-forced pass over a batch: the loss is the mean over samples of the summed token NLL.
    """
    vocab = model.vocab
    encoded = [encode_sample(vocab, sample) for sample in samples]
    batch = build_batch(
        model,
        [sample.image for sample in samples],
        [query for query, _ in encoded],
        [response[:-1] for _, response in encoded],
    )
    output = model(batch.patches, batch.tokens)
    num_steps = max(len(response) for _, response in encoded)
    logits = gather_steps(output.logits, batch.start, num_steps)
    targets = torch.full((len(samples), num_steps), IGNORE_INDEX, dtype=torch.long)
    for row, (_, response) in enumerate(encoded):
        targets[row, : len(response)] = torch.tensor(response, dtype=torch.long)
    mask = targets != IGNORE_INDEX
    correct = int(((logits.argmax(dim=-1) == targets) & mask).sum())
    return TeacherForcedBatch(token_nll(logits, targets) / len(samples), correct, int(mask.sum()))


def sft_loss(model: PolicyModel, sample: Sample) -> Tensor:
    """
    L_it = -sum_i log p_i over the reference tokens of one sample, under teacher forcing.
    """
    return teacher_forced(model, [sample]).loss


def teacher_forced_accuracy(model: PolicyModel, samples: Sequence[Sample], batch_size: int = 64) -> float:
    correct = 0
    count = 0
    with torch.no_grad():
        for batch in chunked(list(samples), batch_size):
            result = teacher_forced(model, batch)
            correct += result.correct
            count += result.count
    return correct / count if count else 0.0


@dataclass
class SftResult:
    model: PolicyModel
    metrics: pl.DataFrame


def run_sft(
    model: PolicyModel,
    samples: Sequence[Sample],
    cfg: SftConfig,
    dev_evaluator: DevEvaluator | None = None,
    run_logger: AAROSLogger | None = None,
) -> SftResult:
    """
    Stage 1: minimise the mean L_it over the training samples with AdamW and an optional linear LR decay.

    :param model: The model to tune, updated in place
    :param samples: The training samples
    :param cfg: The SFT configuration
    :param dev_evaluator: Optional callable returning dev metrics after every epoch
    :param run_logger: Optional logger receiving one row per epoch
    """
    cfg.validate()
    if not samples:
        raise ConfigError("run_sft needs a non-empty training split")
    run_logger = run_logger or AAROSLogger("sft", print_interval=cfg.print_interval, write_file=False)
    if cfg.epochs == 0:
        return SftResult(model, run_logger.to_frame())

    rng = np.random.default_rng(cfg.seed)
    data = list(samples)
    if cfg.data_fraction < 1.0:
        keep = max(1, int(round(cfg.data_fraction * len(data))))
        data = [data[int(index)] for index in sorted(rng.permutation(len(data))[:keep])]
    data = attach_hints(data, cfg.hint_fraction, (cfg.hint_iou_low, 1.0), cfg.seed, model.vocab.max_coordinate)

    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    total_steps = cfg.epochs * math.ceil(len(data) / cfg.batch_size)
    schedule = linear_decay(total_steps) if cfg.linear_decay else (lambda step: 1.0)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, schedule)

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(data))
        epoch_loss = 0.0
        correct = 0
        count = 0
        for indices in chunked(order, cfg.batch_size):
            batch = [data[int(index)] for index in indices]
            result = teacher_forced(model, batch)
            if not torch.isfinite(result.loss):
                raise DivergenceError(f"SFT loss became non-finite in epoch {epoch}")
            optimizer.zero_grad()
            result.loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
            optimizer.step()
            scheduler.step()
            epoch_loss += float(result.loss) * len(batch)
            correct += result.correct
            count += result.count

        row: dict[str, float | int | None] = {
            "epoch": epoch,
            "loss": epoch_loss / len(data),
            "token_accuracy": correct / count if count else 0.0,
            "learning_rate": scheduler.get_last_lr()[0],
            "dev_acc": None,
            "dev_mean_iou": None,
        }
        if dev_evaluator is not None:
            model.eval()
            dev = dev_evaluator(model)
            row["dev_acc"] = dev["acc"]
            row["dev_mean_iou"] = dev["mean_iou"]
        run_logger.record(row)
        run_logger.iteration_print(epoch, {key: value for key, value in row.items() if value is not None})
    model.eval()
    return SftResult(model, run_logger.to_frame())


@dataclass(frozen=True)
class RolloutGroup:
    """
    The K candidates sampled for one query. Per-candidate tensors have one entry per generated token: old
    log-probs (temperature-scaled policy on the frozen snapshot), values V(s_t), returns G_t and advantages A_t.
    """

    sample_id: str
    candidates: tuple[Candidate, ...]
    responses: tuple[Response, ...]
    old_logprobs: tuple[Tensor, ...]
    values: tuple[Tensor, ...]
    rewards: tuple[RewardBreakdown, ...]
    returns: tuple[Tensor, ...] = ()
    advantages: tuple[Tensor, ...] = ()

    def __post_init__(self) -> None:
        for candidate, old, value in zip(self.candidates, self.old_logprobs, self.values, strict=True):
            if not len(candidate) == old.numel() == value.numel():
                raise ValueError(f"Rollout arrays of sample {self.sample_id} do not match the candidate length")


def compute_returns_and_advantages(group: RolloutGroup, gamma: float) -> RolloutGroup:
    """
    Terminal-reward returns: the combined reward arrives at the final step, so G_t = gamma^(T-1-t) * r (0-indexed t)
    and A_t = G_t - V(s_t).
    """
    returns: list[Tensor] = []
    advantages: list[Tensor] = []
    for reward, values in zip(group.rewards, group.values, strict=True):
        if reward.r_combined is None:
            raise ValueError(f"Group {group.sample_id} must be normalised before computing returns")
        length = values.numel()
        exponents = torch.arange(length - 1, -1, -1, dtype=values.dtype)
        step_returns = (gamma**exponents) * reward.r_combined
        step_advantages = step_returns - values
        if not torch.isfinite(step_advantages).all():
            raise DivergenceError(f"Non-finite advantages in group {group.sample_id}")
        returns.append(step_returns)
        advantages.append(step_advantages)
    return replace(group, returns=tuple(returns), advantages=tuple(advantages))


def clipped_surrogate(ratio: Tensor, advantages: Tensor, epsilon: float) -> Tensor:
    """
    Per-step min(rho * A, clip(rho, 1 - eps, 1 + eps) * A).
    """
    return torch.minimum(ratio * advantages, ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantages)


@dataclass
class PpoTerms:
    objective: Tensor
    clip: float
    value_loss: float
    entropy: float
    reward: float


def ppo_objective(
    new_logp: Tensor,
    old_logp: Tensor,
    advantages: Tensor,
    values: Tensor,
    returns: Tensor,
    entropy: Tensor,
    rewards: Tensor,
    cfg: AarConfig,
) -> PpoTerms:
    """
    L^CLIP + c1 * reward term - c2 * L^VF + c3 * S, to be maximised. All inputs are aligned per-step tensors. The
    reward term is mean(r_combined) without gradient, or mean(r_combined * log pi) when `cfg.reinforce_reward_term`.
    """
    ratio = torch.exp(new_logp - old_logp.detach())
    if not torch.isfinite(ratio).all():
        raise DivergenceError(
            f"Non-finite policy ratio (max log-ratio {float((new_logp - old_logp).abs().max()):.3g})"
        )
    clip_term = clipped_surrogate(ratio, advantages.detach(), cfg.clip_epsilon).mean()
    value_loss = ((values - returns.detach()) ** 2).mean()
    entropy_bonus = entropy.mean()
    if cfg.reinforce_reward_term:
        reward_term = (rewards.detach() * new_logp).mean()
    else:
        reward_term = rewards.detach().mean()
    objective = clip_term + cfg.c1 * reward_term - cfg.c2 * value_loss + cfg.c3 * entropy_bonus
    if not torch.isfinite(objective):
        raise DivergenceError("PPO objective became non-finite")
    return PpoTerms(
        objective=objective,
        clip=float(clip_term.detach()),
        value_loss=float(value_loss.detach()),
        entropy=float(entropy_bonus.detach()),
        reward=float(rewards.mean()),
    )


@dataclass
class RolloutBatch:
    """
    Every candidate of a batch of groups as one decoder batch (rows are group-major) with padded per-step tensors.
    """

    decoder: DecoderBatch
    groups: list[RolloutGroup]
    targets: Tensor
    mask: Tensor
    old_logprobs: Tensor
    advantages: Tensor
    returns: Tensor
    rewards: Tensor


def _pad(rows: Sequence[Tensor], width: int, dtype: torch.dtype) -> Tensor:
    padded = torch.zeros((len(rows), width), dtype=dtype)
    for index, row in enumerate(rows):
        padded[index, : row.numel()] = row
    return padded


@torch.no_grad()
def collect_rollouts(
    model: PolicyModel,
    samples: Sequence[Sample],
    cfg: AarConfig,
    judge: JudgeBackend,
    generator: torch.Generator,
    max_in_flight: int = 1,
) -> RolloutBatch:
    """
    Sample K candidates per query on the frozen model, score the three reward channels, normalise per group and
    attach returns and advantages.
    """
    vocab = model.vocab
    model.eval()
    queries = [vocab.encode(sample.query) for sample in samples]
    sampled = sample_batch(
        model,
        [sample.image for sample in samples],
        queries,
        cfg.k,
        temperature=cfg.temperature,
        top_p=cfg.top_p,
        generator=generator,
    )

    row_samples = [sample for sample in samples for _ in range(cfg.k)]
    row_candidates = [candidate for group in sampled for candidate in group]
    decoder = build_batch(
        model,
        [sample.image for sample in row_samples],
        [vocab.encode(sample.query) for sample in row_samples],
        [list(candidate.tokens) for candidate in row_candidates],
    )
    output = model(decoder.patches, decoder.tokens)
    width = max(len(candidate) for candidate in row_candidates)
    targets = _pad([torch.tensor(candidate.tokens) for candidate in row_candidates], width, torch.long)
    step_logits = gather_steps(output.logits, decoder.start, width)
    old_logprobs, _ = sequence_logprobs(step_logits, targets, cfg.temperature)
    step_values = gather_steps(output.values, decoder.start, width)

    responses = [parse_response(vocab, candidate.tokens) for candidate in row_candidates]
    verdicts = score_many(judge, list(zip(responses, row_samples)), max_in_flight)

    groups: list[RolloutGroup] = []
    for group_index, sample in enumerate(samples):
        abnormal = patches_in_region(sample.image)
        raw: list[RewardBreakdown] = []
        rows = range(group_index * cfg.k, (group_index + 1) * cfg.k)
        for row in rows:
            candidate = row_candidates[row]
            start = int(decoder.start[row])
            maps = output.cross_logits[:, row, :, start : start + len(candidate) + 1]
            # The query vector of response token i sits at the step that reads it, i + 1
            positions = [position + 1 for position in category_token_positions(vocab, candidate.tokens)]
            attention = cross_attention_slice(maps, positions)
            raw.append(
                RewardBreakdown(
                    r_llm=verdicts[row].score,
                    r_loc=localization_reward(responses[row].parsed_bbox, sample.gt_bbox),
                    r_att=vision_relevance_reward(attention, abnormal, sample.image.num_patches),
                )
            )
        group = RolloutGroup(
            sample_id=sample.id,
            candidates=tuple(row_candidates[row] for row in rows),
            responses=tuple(responses[row] for row in rows),
            old_logprobs=tuple(old_logprobs[row, : len(row_candidates[row])].clone() for row in rows),
            values=tuple(step_values[row, : len(row_candidates[row])].clone() for row in rows),
            rewards=tuple(
                normalize_and_aggregate(
                    raw,
                    use_localization=cfg.use_localization_reward,
                    use_attention=cfg.use_attention_reward,
                    use_relevance=cfg.use_relevance_reward,
                )
            ),
        )
        groups.append(compute_returns_and_advantages(group, cfg.gamma))

    lengths = [len(candidate) for candidate in row_candidates]
    mask = torch.arange(width)[None, :] < torch.tensor(lengths)[:, None]
    flat_advantages = [advantage for group in groups for advantage in group.advantages]
    flat_returns = [step_return for group in groups for step_return in group.returns]
    flat_rewards = [
        torch.full((len(candidate),), float(reward.r_combined))
        for group in groups
        for candidate, reward in zip(group.candidates, group.rewards)
    ]
    dtype = old_logprobs.dtype
    return RolloutBatch(
        decoder=decoder,
        groups=groups,
        targets=targets,
        mask=mask,
        old_logprobs=old_logprobs.masked_fill(~mask, 0.0),
        advantages=_pad(flat_advantages, width, dtype),
        returns=_pad(flat_returns, width, dtype),
        rewards=_pad(flat_rewards, width, dtype),
    )


def ppo_update(
    model: PolicyModel, optimizer: torch.optim.Optimizer, rollout: RolloutBatch, cfg: AarConfig
) -> PpoTerms:
    """
    Ascend the PPO objective on one rollout batch for `cfg.ppo_epochs` passes.
    """
    model.train()
    mask = rollout.mask
    width = mask.shape[1]
    terms: PpoTerms | None = None
    for _ in range(cfg.ppo_epochs):
        output = model(rollout.decoder.patches, rollout.decoder.tokens)
        step_logits = gather_steps(output.logits, rollout.decoder.start, width)
        new_logp, entropy = sequence_logprobs(step_logits, rollout.targets, cfg.temperature)
        values = gather_steps(output.values, rollout.decoder.start, width)
        terms = ppo_objective(
            new_logp[mask],
            rollout.old_logprobs[mask],
            rollout.advantages[mask],
            values[mask],
            rollout.returns[mask],
            entropy[mask],
            rollout.rewards[mask],
            cfg,
        )
        optimizer.zero_grad()
        (-terms.objective).backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
        optimizer.step()
    model.eval()
    assert terms is not None
    return terms


@dataclass
class AarResult:
    model: PolicyModel
    metrics: pl.DataFrame
    rollouts: list[list[RolloutGroup]] = field(default_factory=list)


def run_aar(
    model: PolicyModel,
    samples: Sequence[Sample],
    cfg: AarConfig,
    judge: JudgeBackend,
    dev_evaluator: DevEvaluator | None = None,
    run_logger: AAROSLogger | None = None,
    max_in_flight: int = 1,
    keep_rollouts: bool = False,
) -> AarResult:
    """
    Stage 2: for each batch of queries, sample K candidates, score and normalise the rewards per group, compute
    advantages and ascend the PPO objective. One metrics row is recorded per iteration.

    :param model: An instruction-tuned model, updated in place
    :param samples: The training samples
    :param cfg: The AAR configuration
    :param judge: The relevance judge backend
    :param dev_evaluator: Optional callable returning dev metrics, run every `cfg.eval_interval` iterations
    :param run_logger: Optional logger receiving one row per iteration
    :param max_in_flight: Concurrent judge requests
    :param keep_rollouts: Keep every rollout group in the result (for audits and tests)
    """
    cfg.validate()
    if not samples:
        raise ConfigError("run_aar needs a non-empty training split")
    run_logger = run_logger or AAROSLogger("aar", print_interval=cfg.print_interval, write_file=False)
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rollouts: list[list[RolloutGroup]] = []
    data = list(samples)
    iteration = 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        for indices in chunked(order, cfg.batch_size):
            batch = [data[int(index)] for index in indices]
            rollout = collect_rollouts(model, batch, cfg, judge, generator, max_in_flight)
            terms = ppo_update(model, optimizer, rollout, cfg)
            iteration += 1
            if keep_rollouts:
                rollouts.append(rollout.groups)

            rewards = [reward for group in rollout.groups for reward in group.rewards]
            row: dict[str, float | int | None] = {
                "iteration": iteration,
                "epoch": epoch,
                "mean_r_llm": float(np.mean([reward.r_llm for reward in rewards])),
                "mean_r_loc": float(np.mean([reward.r_loc for reward in rewards])),
                "mean_r_att": float(np.mean([reward.r_att for reward in rewards])),
                "mean_r_combined": float(np.mean([reward.r_combined for reward in rewards])),
                "objective": float(terms.objective),
                "value_loss": terms.value_loss,
                "entropy": terms.entropy,
                "dev_acc": None,
                "dev_mean_iou": None,
            }
            if dev_evaluator is not None and iteration % cfg.eval_interval == 0:
                dev = dev_evaluator(model)
                row["dev_acc"] = dev["acc"]
                row["dev_mean_iou"] = dev["mean_iou"]
            run_logger.record(row)
            run_logger.iteration_print(iteration, {key: value for key, value in row.items() if value is not None})
            if cfg.max_iterations and iteration >= cfg.max_iterations:
                logger.info("Stopping AAR after %d iterations", iteration)
                return AarResult(model, run_logger.to_frame(), rollouts)
    return AarResult(model, run_logger.to_frame(), rollouts)
