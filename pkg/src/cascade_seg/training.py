"""Per-case training loop: one Adam step per case, seeded shuffle, optional flips/jitter."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .losses import LossValue, combined_loss
from .optim import AdamState, adam_step
from .unet import UNet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingCase:
    """One network input ``[1, c, *spatial]`` and its labels ``[1, *spatial]``."""

    image: np.ndarray
    labels: np.ndarray
    case_id: str = ""


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    ce: float
    dice: float
    total: float
    lr: float


def augment(case: TrainingCase, rng: np.random.Generator, jitter: float = 0.1) -> TrainingCase:
    """Random flips of the in-plane axes and gain/offset jitter of channel 0."""
    image, labels = case.image, case.labels
    for axis in range(2):
        if rng.random() < 0.5:
            image = np.flip(image, axis=2 + axis)
            labels = np.flip(labels, axis=1 + axis)
    gain = 1.0 + rng.uniform(-jitter, jitter)
    offset = rng.uniform(-jitter, jitter)
    image = np.array(image)
    image[:, 0] = image[:, 0] * gain + offset
    return TrainingCase(image, np.ascontiguousarray(labels), case.case_id)


def train_step(model: UNet, case: TrainingCase, state: AdamState) -> LossValue:
    probs = model.forward(case.image)
    loss, grad = combined_loss(probs, case.labels)
    grads = model.backward(grad)
    adam_step(state, model.params, grads)
    return loss


def train_epoch(
    model: UNet,
    cases: Sequence[TrainingCase],
    state: AdamState,
    augmentation_seed: int | None = None,
    epoch: int = 0,
    shuffle_seed: int | None = None,
) -> EpochStats:
    """One pass over ``cases`` in seeded-shuffled order.

    ``augmentation_seed=None`` disables augmentation. Returns the arithmetic
    mean of the per-case losses and the rate used for the epoch's first step.
    """
    if not cases:
        raise ValueError("train_epoch needs at least one case")
    order_rng = np.random.default_rng([epoch, 0 if shuffle_seed is None else shuffle_seed])
    order = order_rng.permutation(len(cases))
    aug_rng = None if augmentation_seed is None else np.random.default_rng([epoch, augmentation_seed])
    lr = state.lr()
    losses = []
    for i in order:
        case = cases[i]
        if aug_rng is not None:
            case = augment(case, aug_rng)
        losses.append(train_step(model, case, state))
    return EpochStats(
        epoch,
        float(np.mean([l.ce for l in losses])),
        float(np.mean([l.dice for l in losses])),
        float(np.mean([l.total for l in losses])),
        lr,
    )


def fit(
    model: UNet,
    cases: Sequence[TrainingCase],
    epochs: int,
    lr0: float = 0.01,
    seed: int = 0,
    augmentation: bool = False,
    log_path: str | Path | None = None,
) -> list[EpochStats]:
    """Train for ``epochs`` passes with polynomially decayed Adam.

    When ``log_path`` is given, one CSV row (epoch, ce, dice, total, lr) is
    appended per epoch.
    """
    state = AdamState(lr0=lr0, total_steps=epochs * len(cases))
    history = []
    writer = None
    fh = None
    if log_path is not None:
        new = not Path(log_path).exists()
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["epoch", "ce", "dice", "total", "lr"])
    try:
        for epoch in range(epochs):
            stats = train_epoch(
                model, cases, state, augmentation_seed=seed if augmentation else None, epoch=epoch, shuffle_seed=seed
            )
            history.append(stats)
            log.info("epoch %d ce=%.4f dice=%.4f total=%.4f lr=%.5f", epoch, stats.ce, stats.dice, stats.total, stats.lr)
            if writer is not None:
                writer.writerow([stats.epoch, repr(stats.ce), repr(stats.dice), repr(stats.total), repr(stats.lr)])
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return history
