"""Trainable parameters, initialisation and the weight-rescaling trick."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, get_dtype

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Param:
    """A stored tensor plus the multiplier applied whenever it is used.

    The weight seen by the forward pass is ``scale * tensor``.
    """

    tensor: Tensor
    name: str
    scale: float = 1.0

    @classmethod
    def of(cls, data: np.ndarray, name: str) -> "Param":
        return cls(Tensor(data, requires_grad=True), name)

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def grad(self):
        return self.tensor.grad

    def effective(self) -> Tensor:
        if self.scale == 1.0:
            return self.tensor
        return ops.scale(self.tensor, self.scale)

    def zero_grad(self):
        self.tensor.grad = None


def he_init(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform on +-sqrt(3 / fan_in), i.e. variance 1 / fan_in."""
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_dtype())


def rescale_param(p: Param, reference: float, power: float = 0.5) -> None:
    """Reparameterise ``p`` so Adam's per-coordinate steps match its scale.

    With ``alpha = std(w) / reference`` the stored tensor becomes
    ``w / alpha**power`` and ``p.scale`` becomes ``alpha**power``, leaving the
    effective weight unchanged. ``power=0.5`` is the square-root form;
    ``power=1`` makes the stored std equal ``reference``.
    """
    if reference <= 0:
        raise ValueError("reference scale must be positive")
    std = float(p.tensor.data.std(dtype=np.float64))
    if std == 0.0:
        log.warning("rescale_param: %s has zero std, left unscaled", p.name)
        return
    factor = (std / reference) ** power
    p.tensor.data = (p.tensor.data / p.tensor.data.dtype.type(factor)).astype(p.tensor.data.dtype)
    p.scale = p.scale * factor


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()
