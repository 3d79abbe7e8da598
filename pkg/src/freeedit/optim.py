"""Adam with per-parameter moment buffers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float | dict[str, float]) -> None:
    """Apply one bias-corrected Adam update to every parameter in ``params``.

    ``lr`` is a single rate or a mapping from parameter name to rate. A
    parameter without a gradient is treated as having a zero gradient.
    Parameter arrays are replaced, never mutated in place.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        rate = lr[name] if isinstance(lr, dict) else lr
        if rate < 0:
            raise ValueError(f"learning rate must be non-negative, got {rate} for {name}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        if rate == 0:
            continue
        update = rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
