"""Adam with bias correction, operating on plain float64 arrays."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"non-finite gradient in parameter {index}")


@dataclass
class AdamState:
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p, dtype=np.float64) for p in params],
            v=[np.zeros_like(p, dtype=np.float64) for p in params],
            **kw,
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update. Inputs are not mutated; new arrays and state are returned."""
    if len(params) != len(grads):
        raise ValueError(f"got {len(params)} params but {len(grads)} grads")
    if not state.m:
        state = AdamState.zeros_like(
            params, beta1=state.beta1, beta2=state.beta2, eps=state.eps
        )
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(p) or m.shape != g.shape:
            raise ValueError(f"shape mismatch at parameter {i}: {np.shape(p)} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(i)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(t, new_m, new_v, b1, b2, state.eps)


class Adam:
    """Stateful wrapper around :func:`adam_step` for a fixed list of arrays."""

    def __init__(self, params: Sequence[np.ndarray], lr: float, **kw):
        self.params = [np.array(p, dtype=np.float64) for p in params]
        self.lr = lr
        self.state = AdamState.zeros_like(self.params, **kw)

    def step(self, grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        self.params, self.state = adam_step(self.params, grads, self.state, self.lr)
        return self.params
