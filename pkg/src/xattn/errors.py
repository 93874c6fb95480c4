"""
Exception hierarchy shared across xattn. The CLI maps the top-level
classes to exit codes (ConfigError -> 2, DataError -> 3, NumericError -> 4).
"""

from __future__ import annotations
from typing import Iterable, Optional


class XattnError(Exception):
    exit_code = 1


class ConfigError(XattnError):
    exit_code = 2


class DataError(XattnError):
    exit_code = 3


class GenerationError(DataError):
    def __init__(self, msg: str, seed: Optional[int] = None):
        super().__init__(f"{msg} (seed={seed})" if seed is not None else msg)
        self.seed = seed


class NumericError(XattnError):
    exit_code = 4

    def __init__(self, msg: str, step: Optional[int] = None):
        super().__init__(f"{msg} at step {step}" if step is not None else msg)
        self.step = step


class ContractError(ValueError):
    """A caller broke a documented precondition."""


class ShapeError(ValueError):
    pass


class RegistryKeyError(KeyError):
    def __init__(self, key: str, available: Iterable[str]):
        self.key = key
        self.available = sorted(available)
        super().__init__(
            f"qcross key {key!r} not in registry; available: {self.available}"
        )

    def __str__(self) -> str:
        return self.args[0]
