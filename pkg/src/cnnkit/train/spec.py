"""Run configuration and its JSON form."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Any

from .schedule import Schedule


@dataclass(frozen=True)
class TrainSpec:
    """Everything that drives one training run besides the model and the data.

    ``label_smoothing = 0`` and ``mixup_alpha = 0`` disable those regularizers.
    ``kd_hard_targets`` chooses what the hard-label loss sees under KD with
    Mixup: ``"mixed"`` (the mixed, possibly smoothed targets) or ``"hard"``
    (the first source's targets only).
    """

    base_lr: float = 0.4
    warmup_epochs: int = 5
    epochs: int = 120
    batch_size: int = 256
    accumulation: int = 1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    bn_momentum: float = 0.9
    label_smoothing: float = 0.0
    mixup_alpha: float = 0.0
    mixup_type: int = 1
    mixup_per_sample: bool = False
    dropblock: bool = True
    autoaugment: bool = False
    kd_logits: str | None = None
    kd_temperature: float = 1.0
    kd_weight: float = 1.0
    kd_hard_targets: str = "mixed"
    preprocess: str = "imagenet"
    seed: int = 0
    checkpoint_every: int = 1
    eval_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.accumulation < 1:
            raise ValueError("batch_size and accumulation must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.epochs and not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs}")
        if self.mixup_type not in (1, 2):
            raise ValueError(f"mixup_type must be 1 or 2, got {self.mixup_type}")
        if self.kd_hard_targets not in ("mixed", "hard"):
            raise ValueError(f"kd_hard_targets must be 'mixed' or 'hard', got {self.kd_hard_targets!r}")
        if self.preprocess not in ("imagenet", "pad_crop_flip", "none"):
            raise ValueError(f"unknown preprocess mode {self.preprocess!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha must be >= 0")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accumulation

    def schedule(self, steps_per_epoch: int) -> Schedule:
        # a 0-epoch run never steps; give it a valid schedule anyway
        total = self.epochs or self.warmup_epochs + 1
        return Schedule(self.base_lr, self.warmup_epochs, total, steps_per_epoch)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainSpec":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainSpec fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainSpec":
        return cls.from_dict(json.loads(text))

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainSpec":
        return dataclasses.replace(self, **changes)
