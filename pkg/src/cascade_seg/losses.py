"""Cross-entropy + soft Dice objective.

All losses take softmax probabilities ``[b, 5, *spatial]`` and an integer
label array ``[b, *spatial]`` and return the loss together with its gradient
with respect to the *logits* that produced the probabilities. Softmax is
folded in so the network backward starts from the head's raw output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, softmax_backward

NUM_CLASSES = 5
FOREGROUND = (1, 2, 3, 4)
DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossValue:
    total: float
    ce: float
    dice: float


def _check(probs: np.ndarray, target: np.ndarray) -> None:
    if probs.ndim < 3 or probs.shape[1] != NUM_CLASSES:
        raise ShapeError(f"probabilities must be [b, {NUM_CLASSES}, *spatial], got {probs.shape}")
    if target.shape != probs.shape[:1] + probs.shape[2:]:
        raise ShapeError(f"target shape {target.shape} does not match probabilities {probs.shape}")
    if target.size and (target.min() < 0 or target.max() >= NUM_CLASSES):
        bad = target[(target < 0) | (target >= NUM_CLASSES)]
        raise ValueError(f"labels must lie in 0..{NUM_CLASSES - 1}, found {np.unique(bad)[:5].tolist()}")


def one_hot(target: np.ndarray, dtype=np.float64) -> np.ndarray:
    """``[b, *spatial]`` labels to ``[b, 5, *spatial]`` indicators."""
    out = np.zeros((target.shape[0], NUM_CLASSES) + target.shape[1:], dtype=dtype)
    np.put_along_axis(out, target[:, None].astype(np.intp), 1, axis=1)
    return out


def ce_loss(probs: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean voxelwise ``-log p(true class)`` and its gradient w.r.t. the logits."""
    _check(probs, target)
    p_true = np.take_along_axis(probs, target[:, None].astype(np.intp), axis=1)
    n = p_true.size
    tiny = np.finfo(probs.dtype).tiny
    value = float(-np.sum(np.log(np.maximum(p_true, tiny)), dtype=np.float64) / n)
    grad = probs - one_hot(target, probs.dtype)
    grad /= n
    return value, grad


def soft_dice_loss(probs: np.ndarray, target: np.ndarray, eps: float = DICE_EPS) -> tuple[float, np.ndarray]:
    """One minus the mean soft Dice over the foreground classes.

    Dice is computed per sample and class as ``(2 sum(p g) + eps) / (sum p + sum g + eps)``.
    A class that is absent from the target and never the argmax of the
    prediction counts as a perfect score with no gradient.
    """
    _check(probs, target)
    g = one_hot(target, probs.dtype)
    axes = tuple(range(2, probs.ndim))
    fg = list(FOREGROUND)
    p, g = probs[:, fg], g[:, fg]
    inter = np.sum(p * g, axis=axes, dtype=np.float64)
    psum = np.sum(p, axis=axes, dtype=np.float64)
    gsum = np.sum(g, axis=axes, dtype=np.float64)
    denom = psum + gsum + eps
    dice = (2 * inter + eps) / denom

    predicted = np.zeros_like(gsum, dtype=bool)
    labels = probs.argmax(axis=1)
    for j, c in enumerate(fg):
        predicted[:, j] = np.any(labels == c, axis=tuple(range(1, labels.ndim)))
    vacuous = (gsum == 0) & ~predicted
    dice = np.where(vacuous, 1.0, dice)
    count = dice.size
    value = float(1.0 - dice.mean())

    # d(1 - mean dice)/dp for the non-vacuous terms
    coef = np.where(vacuous, 0.0, 1.0 / count)
    bshape = coef.shape + (1,) * len(axes)
    dp = -(
        (2 * g * denom.reshape(bshape) - (2 * inter + eps).reshape(bshape)) / (denom**2).reshape(bshape)
    ) * coef.reshape(bshape)
    grad_p = np.zeros_like(probs)
    grad_p[:, fg] = dp
    return value, softmax_backward(probs, grad_p)


def combined_loss(probs: np.ndarray, target: np.ndarray) -> tuple[LossValue, np.ndarray]:
    ce, g_ce = ce_loss(probs, target)
    dice, g_dice = soft_dice_loss(probs, target)
    return LossValue(ce + dice, ce, dice), g_ce + g_dice
