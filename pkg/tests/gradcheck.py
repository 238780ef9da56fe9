"""Directional central-difference gradient checks.

The gradient under test is computed in float32; the reference difference
quotient is evaluated in float64 so its own rounding stays far below the
tolerance.
"""

from __future__ import annotations

import numpy as np

from wavesep.autodiff import Tensor, backward, precision


def directional_check(fn, arrays, rng, directions: int = 3, h: float = 1e-4):
    """Worst relative error between ``<grad, v>`` and the central difference along ``v``.

    ``fn`` maps a list of tensors to a tensor; the checked scalar is
    ``sum(fn(x) * G)`` for a fixed random ``G``.
    """
    arrays = [np.asarray(a, dtype=np.float32) for a in arrays]
    out = fn([Tensor(a) for a in arrays])
    weight = rng.standard_normal(out.shape).astype(np.float32)

    def value(xs):
        with precision(np.float64):
            return float(np.sum(fn([Tensor(a, dtype=np.float64) for a in xs]).data * weight))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    result = fn(leaves)
    backward(_weighted_sum(result, weight))
    grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(a.shape).astype(np.float32) for a in arrays]
        analytic = sum(float(np.sum(g.astype(np.float64) * v)) for g, v in zip(grads, vs))
        plus = value([a.astype(np.float64) + h * v for a, v in zip(arrays, vs)])
        minus = value([a.astype(np.float64) - h * v for a, v in zip(arrays, vs)])
        numeric = (plus - minus) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-6))
    return worst


def _weighted_sum(t: Tensor, weight: np.ndarray) -> Tensor:
    from wavesep.autodiff import ops
    return ops.sum(ops.mul(t, weight))
