"""
This utils file should cover any miscellaneous functions that facilitate running the package across modules
"""

from __future__ import annotations

import random
from collections.abc import Callable, Iterator, Sequence
from typing import TypeVar

import numpy as np
import torch

T = TypeVar("T")


def seed_everything(seed: int) -> None:
    """
    Seed Python, numpy and torch, and keep torch on one deterministic CPU thread.
    """
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True, warn_only=True)


def chunked(items: Sequence[T], size: int) -> Iterator[Sequence[T]]:
    for start in range(0, len(items), size):
        yield items[start : start + size]


def linear_decay(total_steps: int) -> Callable[[int], float]:
    """
    LR multiplier falling linearly from 1 to 0 over `total_steps` optimizer steps.
    """

    def factor(step: int) -> float:
        if total_steps <= 0:
            return 1.0
        return max(0.0, 1.0 - step / total_steps)

    return factor
