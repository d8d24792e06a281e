"""Adam with decoupled weight decay, plus the step-decay learning schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingGradError
from .tensor import Parameter

Array = np.ndarray


@dataclass
class AdamState:
    """Per-parameter moments and hyperparameters for one optimizer run."""

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    def moments_for(self, p: Parameter) -> tuple[Array, Array]:
        if p.name not in self.m:
            self.m[p.name] = np.zeros_like(p.data)
            self.v[p.name] = np.zeros_like(p.data)
        return self.m[p.name], self.v[p.name]


def adam_step(params, state: AdamState) -> None:
    """One Adam update; weight decay applied directly to weights (decoupled).

    Gradients are consumed: they are reset to None afterwards.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p in params:
        if p.grad is None:
            raise MissingGradError(p.name)
        g = p.grad
        m, v = state.moments_for(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data = p.data - state.lr * update
        p.grad = None


def lr_for_epoch(base_lr: float, epoch: int, decay_epoch: int = 20, decay_factor: float = 0.1) -> float:
    """Learning rate for a 1-based epoch: decayed once past ``decay_epoch``."""
    return base_lr * decay_factor if epoch > decay_epoch else base_lr
