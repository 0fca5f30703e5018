from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .errors import ConfigError, OptimizationError


@dataclass
class OptimizerState:
    """Adam moments for a fixed list of named parameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


def adam_step(opt: OptimizerState, params: Sequence[tuple[str, Tensor]],
              grads: Sequence[np.ndarray | None] | None = None) -> None:
    """One bias-corrected Adam update, in place.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient is
    treated as zero.
    """
    if grads is None:
        grads = [p.grad for _, p in params]
    for (name, p), g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise OptimizationError(name)
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    corr1 = 1.0 - b1 ** opt.step
    corr2 = 1.0 - b2 ** opt.step
    for (name, p), g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= opt.lr * (m / corr1) / (np.sqrt(v / corr2) + opt.eps)


def zero_grads(params: Sequence[tuple[str, Tensor]]) -> None:
    for _, p in params:
        p.grad = None
