"""Learning-rate schedule and SGD with momentum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..tensor import Parameter

NO_DECAY_KINDS = frozenset({"bn_gamma", "bn_beta", "bias"})


@dataclass(frozen=True)
class Schedule:
    """Linear warmup from 0 followed by cosine decay to 0 at the last step."""

    base_lr: float = 0.4
    warmup_epochs: int = 5
    total_epochs: int = 120
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.base_lr <= 0 or self.total_epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError(f"schedule needs positive base_lr, total_epochs and steps_per_epoch: {self}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(f"warmup_epochs must lie in [0, total_epochs), got {self.warmup_epochs}")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


def lr_at(step: int, s: Schedule) -> float:
    if not 0 <= step < s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps})")
    w = s.warmup_steps
    if step < w:
        return s.base_lr * step / w
    span = s.total_steps - 1 - w
    progress = (step - w) / span if span > 0 else 0.0
    return 0.5 * s.base_lr * (1.0 + math.cos(math.pi * progress))


def bn_transfer_momentum(steps_per_epoch: int) -> float:
    """BN momentum for fine-tuning, ``max(1 - 10 / s, 0.9)`` with ``s`` read as steps per epoch."""
    return max(1.0 - 10.0 / steps_per_epoch, 0.9)


def decays(p: Parameter) -> bool:
    return p.kind not in NO_DECAY_KINDS


class NonFiniteGradient(FloatingPointError):
    pass


def sgd_step(params: list[Parameter], grads: list[np.ndarray], lr: float, velocity: list[np.ndarray],
             momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    """``v <- m v + g + wd p`` (no decay for BN and biases); ``p <- p - lr v``.

    Raises :class:`NonFiniteGradient` before touching any state if a gradient
    is NaN or infinite.
    """
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.name!r} {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {p.name!r}; step aborted")
    for p, g, v in zip(params, grads, velocity):
        d = g + weight_decay * p.data if (weight_decay and decays(p)) else g
        v *= momentum
        v += d
        p.data = (p.data - lr * v).astype(p.dtype, copy=False)


class SGD:
    def __init__(self, params: list[Parameter], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = [p for p in params if p.trainable]
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> bool:
        """Apply one update; returns False (and leaves state untouched) on a non-finite gradient."""
        try:
            sgd_step(self.params, [p.grad for p in self.params], lr, self.velocity,
                     self.momentum, self.weight_decay)
        except NonFiniteGradient:
            return False
        return True

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"velocity:{p.name}": v for p, v in zip(self.params, self.velocity)}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for i, p in enumerate(self.params):
            key = f"velocity:{p.name}"
            if key not in state:
                raise KeyError(f"optimizer state missing {key!r}")
            self.velocity[i] = np.array(state[key], dtype=p.dtype)
