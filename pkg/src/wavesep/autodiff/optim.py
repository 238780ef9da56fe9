from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError


@dataclass
class AdamState:
    """Adam moments keyed by parameter name, with bias correction."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def snapshot(self) -> dict:
        return {"step": self.step,
                "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}


def adam_step(params, state: AdamState) -> None:
    """One Adam update of every parameter from its accumulated gradient.

    Gradients are left in place; the caller zeroes them.
    """
    for p in params:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {p.name} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1 - b1 ** state.step
    corr2 = 1 - b2 ** state.step
    for p in params:
        g = p.grad.astype(np.float64)
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros(p.shape)
            state.v[p.name] = np.zeros(p.shape)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        data = p.tensor.data
        p.tensor.data = (data - update).astype(data.dtype)
