"""Linear warmup to the peak rate, then linear decay to zero."""

from __future__ import annotations

from ..errors import ContractError


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_ratio: float = 0.1) -> float:
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if not 0.0 <= warmup_ratio < 1.0:
        raise ContractError(f"warmup_ratio must be in [0, 1), got {warmup_ratio}")
    if total_steps == 0:
        return 0.0
    n_warmup = warmup_ratio * total_steps
    if step < n_warmup:
        return peak_lr * step / n_warmup
    return peak_lr * (total_steps - step) / (total_steps - n_warmup)
