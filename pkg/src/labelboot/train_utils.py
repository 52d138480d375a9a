"""Shared optimizer, schedule, and batching helpers for the stage drivers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np
import torch

from .errors import TrainingDivergedError


def make_sgd(params, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4) -> torch.optim.SGD:
    return torch.optim.SGD(
        params, lr=lr, momentum=momentum, nesterov=momentum > 0, weight_decay=weight_decay
    )


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def cosine_lr(base_lr: float, floor: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr, never below the floor."""
    if total_steps <= 0:
        return base_lr
    t = min(step, total_steps) / total_steps
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * t))

def multistep_lr(base_lr: float, milestones: tuple[int, ...], gamma: float, epoch: int) -> float:
    lr = base_lr
    for m in milestones:
        if epoch >= m:
            lr *= gamma
    return lr


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffled index batches covering 0..n-1 once (last batch may be short)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


class InfiniteSampler:
    """Cycles shuffled index batches forever, reshuffling each pass; seeded."""

    def __init__(self, indices: np.ndarray, batch_size: int, rng: np.random.Generator):
        if len(indices) == 0:
            raise ValueError("cannot sample from an empty index set")
        self.indices = np.asarray(indices)
        self.batch_size = batch_size
        self.rng = rng
        self._order = self.rng.permutation(self.indices)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need > 0:
            take = min(need, len(self._order) - self._pos)
            out.append(self._order[self._pos : self._pos + take])
            self._pos += take
            need -= take
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(self.indices)
                self._pos = 0
        return np.concatenate(out)


def check_finite(loss: torch.Tensor, step: int, what: str = "loss") -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"{what} became non-finite", step=step)
