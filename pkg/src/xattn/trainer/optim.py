"""
AdamW over named tensors with decoupled weight decay. Only the trainable
names are touched; everything else keeps its exact bit pattern.
"""

from __future__ import annotations
from typing import Dict, Iterable, Tuple

import numpy as np

from ..autodiff import Tensor
from ..errors import NumericError
from ..model.encoder import is_bias


class AdamW:
    def __init__(
        self,
        params: Dict[str, Tensor],
        trainable: Iterable[str],
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.trainable = sorted(trainable)
        missing = [n for n in self.trainable if n not in params]
        if missing:
            raise KeyError(f"unknown parameters: {missing}")
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.trainable}
        self.v = {n: np.zeros_like(params[n].data) for n in self.trainable}

    def step(self, lr: float) -> None:
        self.t += 1
        grads = {}
        for name in self.trainable:
            g = self.params[name].grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}", step=self.t)
            grads[name] = g

        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = self.params[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            data = p.data
            if self.weight_decay and not is_bias(name):
                data = data - lr * self.weight_decay * data
            p.data = data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for name in self.trainable:
            self.params[name].grad = None
