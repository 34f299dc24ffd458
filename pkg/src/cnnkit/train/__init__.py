"""Schedules, the optimizer, run configuration and the training loop."""

from .loop import RunResult, Trainer, TrainError, keep_prob_at, steps_per_epoch, train
from .schedule import (NO_DECAY_KINDS, SGD, NonFiniteGradient, Schedule, bn_transfer_momentum, decays, lr_at,
                       sgd_step)
from .spec import TrainSpec
