"""SGD with momentum and weight decay under a piecewise-constant batch schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .net import Net

# (first batch, last batch, learning rate), batches counted from 1
DEFAULT_SCHEDULE = (
    (1, 200, 1e-3),
    (201, 400, 2.5e-3),
    (401, 20_000, 5e-3),
    (20_001, 30_000, 2.5e-3),
    (30_001, 40_000, 1.25e-3),
    (40_001, 50_000, 6.25e-4),
    (50_001, 60_000, 3.16e-4),
    (60_001, 65_000, 1.56e-4),
)


@dataclass(frozen=True)
class LrSchedule:
    table: tuple[tuple[int, int, float], ...] = DEFAULT_SCHEDULE

    def __post_init__(self):
        expect = 1
        for first, last, lr in self.table:
            if first != expect or last < first:
                raise ValueError(f"schedule ranges must be contiguous from 1 (at {first}-{last})")
            if lr <= 0:
                raise ValueError("learning rates must be positive")
            expect = last + 1

    def lr(self, batch: int) -> float:
        for first, last, rate in self.table:
            if batch <= last:
                return rate
        return self.table[-1][2]

    def scaled(self, batch_scale: float = 1.0, lr_scale: float = 1.0) -> "LrSchedule":
        """Compress/stretch the batch ranges and multiply the rates."""
        rows, first = [], 1
        for _, last, rate in self.table:
            new_last = max(first, int(math.ceil(last * batch_scale)))
            rows.append((first, new_last, rate * lr_scale))
            first = new_last + 1
        return LrSchedule(tuple(rows))

    def to_list(self) -> list[list]:
        return [list(r) for r in self.table]


@dataclass
class SGD:
    schedule: LrSchedule = field(default_factory=LrSchedule)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, net: Net, batch_index: int, grad_scale: float = 1.0) -> float:
        """``v <- m v - lr (g + wd w); w <- w + v``. Returns the learning rate used."""
        lr = self.schedule.lr(batch_index)
        params, grads = net.params(), net.grads()
        for name, w in params.items():
            g = grads[name] * grad_scale
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(w)
            v *= self.momentum
            v -= lr * (g + self.weight_decay * w)
            w += v
        return lr


def sgd_step(net: Net, optim: SGD, batch_index: int, grad_scale: float = 1.0) -> float:
    return optim.step(net, batch_index, grad_scale)
