"""Flat-cosine learning rate and the augmentation phase schedule.

Training progress is expressed as a fraction in ``[0, 1]`` so the schedule
stays independent of how many optimizer steps an epoch holds.  The
augmentation schedule runs in four phases::

    [0, aug_warmup)                        plain data, no advanced augmentation
    [aug_warmup, dense_cut)                advanced augmentation + mosaic/mixup
    [dense_cut, total - no_aug_tail)       advanced augmentation only
    [total - no_aug_tail, total)           plain data again

with ``dense_cut = floor(dense_o2o_off_fraction * total_epochs)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ScheduleConfig:
    total_epochs: int = 60
    warmup_epochs_lr: float = 1.0
    flat_fraction: float = 0.5
    base_lr: float = 5e-4
    min_lr: float = 2.5e-4
    aug_warmup_epochs: int = 4
    dense_o2o_off_fraction: float = 0.5
    no_aug_tail_epochs: int = 2

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not 0 <= self.warmup_epochs_lr < self.total_epochs:
            raise ValueError("warmup_epochs_lr must lie in [0, total_epochs)")
        if not 0.0 < self.flat_fraction < 1.0:
            raise ValueError(f"flat_fraction must lie in (0, 1), got {self.flat_fraction}")
        if not self.base_lr >= 0:
            raise ValueError(f"base_lr must be non-negative, got {self.base_lr}")
        if not 0 <= self.min_lr <= self.base_lr:
            raise ValueError(f"min_lr must lie in [0, base_lr], got {self.min_lr}")
        if self.aug_warmup_epochs < 0 or self.no_aug_tail_epochs < 0:
            raise ValueError("augmentation phase lengths must be non-negative")
        if self.aug_warmup_epochs + self.no_aug_tail_epochs >= self.total_epochs:
            raise ValueError("aug_warmup_epochs + no_aug_tail_epochs must be < total_epochs")
        if not 0.0 <= self.dense_o2o_off_fraction <= 1.0:
            raise ValueError("dense_o2o_off_fraction must lie in [0, 1]")

    @property
    def warmup_fraction(self) -> float:
        return self.warmup_epochs_lr / self.total_epochs

    @property
    def flat_end(self) -> float:
        w = self.warmup_fraction
        return w + self.flat_fraction * (1.0 - w)

    @property
    def dense_cutoff_epoch(self) -> int:
        return math.floor(self.dense_o2o_off_fraction * self.total_epochs)


@dataclass(frozen=True)
class AugState:
    advanced_aug_on: bool
    dense_o2o_on: bool

    def __post_init__(self):
        if self.dense_o2o_on and not self.advanced_aug_on:
            raise ValueError("dense O2O requires advanced augmentation to be on")


def lr_at(epoch_progress: float, cfg: ScheduleConfig) -> float:
    """Learning rate at a training-progress fraction.

    Linear warmup from 0, a flat stretch at ``base_lr`` covering
    ``flat_fraction`` of the post-warmup budget, then half a cosine down to
    ``min_lr`` at progress 1.
    """
    t = min(max(float(epoch_progress), 0.0), 1.0)
    w = cfg.warmup_fraction
    if t < w:
        return cfg.base_lr * t / w
    flat_end = cfg.flat_end
    if t <= flat_end:
        return cfg.base_lr
    frac = (t - flat_end) / (1.0 - flat_end)
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


def progress(epoch: int, step: int, steps_per_epoch: int, total_epochs: int) -> float:
    """Fraction of training completed at the start of ``step`` in ``epoch``."""
    return (epoch * steps_per_epoch + step) / (total_epochs * steps_per_epoch)


def aug_at(epoch: int, cfg: ScheduleConfig) -> AugState:
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.aug_warmup_epochs or epoch >= cfg.total_epochs - cfg.no_aug_tail_epochs:
        return AugState(False, False)
    return AugState(True, epoch < cfg.dense_cutoff_epoch)


def phase_name(epoch: int, cfg: ScheduleConfig) -> str:
    state = aug_at(epoch, cfg)
    if state.dense_o2o_on:
        return "dense"
    if state.advanced_aug_on:
        return "aug"
    return "warmup" if epoch < cfg.aug_warmup_epochs else "tail"
