"""Adam with polynomial learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, names: list[str], step: int):
        super().__init__(f"non-finite gradient at step {step} in: {', '.join(names[:5])}")
        self.names = names
        self.step = step


@dataclass
class AdamState:
    lr0: float = 0.01
    total_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    power: float = 0.9
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self, t: int | None = None) -> float:
        """Rate after ``t`` completed updates: ``lr0 * (1 - t / total_steps) ** power``."""
        t = self.step if t is None else t
        if not self.total_steps:
            return self.lr0
        return self.lr0 * max(0.0, 1.0 - t / self.total_steps) ** self.power


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update of ``params`` in place; returns ``params``.

    The first update uses ``lr0``; the rate then decays with the number of
    completed updates. Nothing is modified when a gradient is not finite.
    """
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(bad, state.step)
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")

    lr = state.lr()
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= (lr * update).astype(p.dtype, copy=False)
    return params
