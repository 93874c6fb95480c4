"""
Central finite-difference check of taped gradients.
"""

from __future__ import annotations
from typing import Callable

import numpy as np

from ..errors import ContractError
from .tensor import Tape, Tensor, no_grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """
    Compare the taped gradient of scalar ``f`` at ``x`` against central
    differences. Returns max |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError(f"eps must be in (0, 1e-2], got {eps}")

    base = x.data.copy()
    leaf = Tensor(base.copy(), requires_grad=True)
    with no_grad():
        first = f(Tensor(base.copy())).data.copy()
        second = f(Tensor(base.copy())).data.copy()
    if not np.array_equal(first, second):
        raise ContractError("grad_check: f is not deterministic for a fixed input")

    with Tape() as tape:
        out = f(leaf)
    if out.size != 1:
        raise ContractError(f"grad_check: f must return a scalar, got {out.shape}")
    tape.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            plus = base.copy().reshape(-1)
            minus = base.copy().reshape(-1)
            plus[i] += eps
            minus[i] -= eps
            fp = f(Tensor(plus.reshape(base.shape))).item()
            fm = f(Tensor(minus.reshape(base.shape))).item()
            flat[i] = (fp - fm) / (2 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
