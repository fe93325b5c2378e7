from __future__ import annotations

from collections.abc import Collection, Sequence
from dataclasses import dataclass, replace

import numpy as np
import torch
from numpy.typing import ArrayLike

from .core import BBox, iou


@dataclass(frozen=True)
class RewardBreakdown:
    """
    The reward channels of one candidate. Normalised fields and the combined reward stay None until the candidate's
    group has been normalised.
    """

    r_llm: float
    r_loc: float
    r_att: float
    r_loc_norm: float | None = None
    r_att_norm: float | None = None
    r_combined: float | None = None

    @property
    def normalized(self) -> bool:
        return self.r_combined is not None


def localization_reward(pred: BBox | None, gt: BBox) -> float:
    """
    IoU of the predicted box with the ground truth; a missing prediction earns 0.
    """
    if pred is None:
        return 0.0
    return iou(pred, gt)


def vision_relevance_reward(
    attention_logits: torch.Tensor | ArrayLike,
    abnormal_patches: Collection[int],
    num_patches: int,
) -> float:
    """
    Attention mass the abnormality tokens place on abnormal patches. Each row of logits is softmaxed over all
    `num_patches` patches and the probability on `abnormal_patches` is summed; the rows are then summed, so the
    result lies in [0, |N|].

    :param attention_logits: (|N|, P) logits from `cross_attention_slice`
    :param abnormal_patches: The abnormal patch indices
    :param num_patches: The total patch count P
    """
    logits = torch.as_tensor(attention_logits, dtype=torch.float64).detach()
    if logits.numel() == 0 or not abnormal_patches:
        return 0.0
    if logits.shape[-1] != num_patches:
        raise ValueError(f"Attention logits have {logits.shape[-1]} columns but there are {num_patches} patches")
    weights = torch.softmax(logits, dim=-1)
    columns = torch.tensor(sorted(abnormal_patches), dtype=torch.long)
    return float(weights[:, columns].sum())


def normalize_and_aggregate(
    group: Sequence[RewardBreakdown],
    use_localization: bool = True,
    use_attention: bool = True,
    use_relevance: bool = True,
) -> list[RewardBreakdown]:
    """
    Normalise localization and attention rewards by their maximum over the candidates answering the same query and
    combine them with the relevance reward. A channel whose group maximum is 0 normalises to 0. Disabled channels
    contribute nothing to the combined reward.

    :param group: The raw breakdowns of every candidate for one query
    :return: New breakdowns with normalised fields and r_combined set
    """
    if not group:
        raise ValueError("normalize_and_aggregate needs at least one candidate")
    max_loc = max(item.r_loc for item in group)
    max_att = max(item.r_att for item in group)
    normalized: list[RewardBreakdown] = []
    for item in group:
        loc_norm = item.r_loc / max_loc if max_loc > 0 else 0.0
        att_norm = item.r_att / max_att if max_att > 0 else 0.0
        combined = (
            (item.r_llm if use_relevance else 0.0)
            + (loc_norm if use_localization else 0.0)
            + (att_norm if use_attention else 0.0)
        )
        normalized.append(replace(item, r_loc_norm=loc_norm, r_att_norm=att_norm, r_combined=combined))
    return normalized


def bellman_q_update(q: float, r: float, gamma: float, max_next_q: float, alpha: float) -> tuple[float, float]:
    """
    One temporal-difference step towards r + gamma * max_a' Q(s', a').

    :return: (delta, new_q) with delta = alpha * (r + gamma * max_next_q - q)
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    delta = alpha * (r + gamma * max_next_q - q)
    return delta, q + delta


@dataclass(frozen=True)
class TabularMDP:
    """
    A deterministic finite MDP: `transitions[s, a]` is the next state and `rewards[s, a]` the immediate reward.
    """

    transitions: np.ndarray
    rewards: np.ndarray

    @property
    def num_states(self) -> int:
        return int(self.transitions.shape[0])

    @property
    def num_actions(self) -> int:
        return int(self.transitions.shape[1])


def q_value_iteration(mdp: TabularMDP, gamma: float, tolerance: float = 1e-12, max_sweeps: int = 100_000) -> np.ndarray:
    """
    The exact optimal Q table by synchronous value iteration.
    """
    q = np.zeros((mdp.num_states, mdp.num_actions))
    for _ in range(max_sweeps):
        target = mdp.rewards + gamma * q.max(axis=1)[mdp.transitions]
        if np.max(np.abs(target - q)) < tolerance:
            return target
        q = target
    return q


def iterate_bellman_updates(mdp: TabularMDP, gamma: float, alpha: float, sweeps: int) -> np.ndarray:
    """
    Apply `bellman_q_update` to every (state, action) pair for `sweeps` in-place sweeps.
    """
    q = np.zeros((mdp.num_states, mdp.num_actions))
    for _ in range(sweeps):
        for state in range(mdp.num_states):
            for action in range(mdp.num_actions):
                next_state = int(mdp.transitions[state, action])
                _, q[state, action] = bellman_q_update(
                    float(q[state, action]),
                    float(mdp.rewards[state, action]),
                    gamma,
                    float(q[next_state].max()),
                    alpha,
                )
    return q
