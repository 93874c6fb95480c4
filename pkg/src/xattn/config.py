"""
Run configuration: flat JSON files whose keys are the field names of the
sections below, overridden by ``--set key=value`` pairs.
"""

from __future__ import annotations
import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from dotenv import load_dotenv

from .errors import ConfigError

load_dotenv()


def max_threads() -> int:
    try:
        return max(1, int(os.environ.get("XATTN_THREADS", "4")))
    except ValueError:
        raise ConfigError("XATTN_THREADS must be an integer") from None


@dataclass
class DataConfig:
    n_languages: int = 4
    anchor_lang: int = 0
    train_lang: int = 1
    n_entities: int = 8
    n_attributes: int = 12
    n_facts: int = 4
    n_rules: int = 2
    depth: int = 0
    n_theories: int = 1000
    statements_per_theory: int = 4
    n_parallel: int = 2000
    n_mono: int = 2000
    mlm_rate: float = 0.15
    data_dir: str = ""


@dataclass
class ModelConfig:
    vocab_size: int = 0  # 0 -> derived from the language registry
    hidden_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 128
    max_seq_len: int = 64
    n_classes: int = 2
    init_std: float = 0.02

    def validate(self) -> None:
        if self.hidden_dim % self.n_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} is not divisible by n_heads {self.n_heads}"
            )
        for name in ("vocab_size", "hidden_dim", "n_layers", "n_heads", "ffn_dim", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class TrainConfig:
    protocol: str = "full-ft"
    scheme: str = "standard"
    p_mask: float = -1.0  # < 0 -> scheme default
    epochs: int = 35
    iterations: int = 500
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    curriculum: bool = False
    curriculum_epochs: int = 3
    qcross_key: str = "shared"
    backbone_langs: List[int] = field(default_factory=list)
    eval_interval: int = 200
    log_interval: int = 10
    checkpoint: str = ""
    backbone_checkpoint: str = ""
    corpus_path: str = ""
    train_path: str = ""
    dev_path: str = ""

    def validate(self) -> None:
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")

    def resolved_p_mask(self) -> float:
        if self.p_mask >= 0:
            return self.p_mask
        if self.protocol == "pretrain-qcross":
            return 1.0
        return {"dropout-baseline": 0.4, "shared-qcross": 0.7, "pair-qcross": 0.7}.get(
            self.scheme, 0.0
        )


@dataclass
class EvalConfig:
    schemes: List[str] = field(
        default_factory=lambda: ["standard", "dropout-baseline", "shared-qcross", "pair-qcross"]
    )
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    recipes: List[str] = field(default_factory=lambda: ["mix"])  # "mix" and/or "cs-baseline"
    include_reverse: bool = False
    eval_policy: str = "full-attention"
    n_stability_pairs: int = 50
    backbone_iterations: int = 1000
    backbone_lr: float = 1e-3
    qcross_lr: float = 1e-3
    eval_path: str = ""
    dump_index: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("data", "model", "train", "eval")

    def field_index(self) -> Dict[str, Tuple[str, dataclasses.Field]]:
        index: Dict[str, Tuple[str, dataclasses.Field]] = {"seed": ("", _seed_field())}
        for sec in self.SECTIONS:
            for f in dataclasses.fields(getattr(self, sec)):
                index[f.name] = (sec, f)
        return index

    def set(self, key: str, value: Any) -> None:
        index = self.field_index()
        if key not in index:
            raise ConfigError(f"unknown config key {key!r}")
        sec, f = index[key]
        target = self if not sec else getattr(self, sec)
        setattr(target, key, coerce(key, value, _field_type(type(target), f.name)))

    def to_json(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"seed": self.seed}
        for sec in self.SECTIONS:
            out.update(dataclasses.asdict(getattr(self, sec)))
        return out

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True), encoding="utf-8")
        return path


def _seed_field() -> dataclasses.Field:
    return next(f for f in dataclasses.fields(RunConfig) if f.name == "seed")


def _field_type(cls, name: str):
    return typing.get_type_hints(cls)[name]


def coerce(key: str, value: Any, expected) -> Any:
    """Convert a JSON value or a ``--set`` string to the declared field type."""
    origin = typing.get_origin(expected)
    try:
        if origin in (list, List):
            (item,) = typing.get_args(expected) or (str,)
            if isinstance(value, str):
                value = json.loads(value) if value.strip().startswith("[") else [
                    v for v in value.split(",") if v.strip()
                ]
            if not isinstance(value, list):
                raise TypeError
            return [coerce(key, v, item) for v in value]
        if expected is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes"):
                return True
            if isinstance(value, str) and value.lower() in ("false", "0", "no"):
                return False
            raise TypeError
        if expected is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if expected is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if expected is str:
            if not isinstance(value, (str, int, float)) or isinstance(value, bool):
                raise TypeError
            return str(value)
    except (TypeError, ValueError):
        pass
    else:
        return value
    name = getattr(expected, "__name__", str(expected))
    raise ConfigError(f"config key {key!r} expects {name}, got {value!r}")


def parse_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> RunConfig:
    """Defaults, then the JSON file, then ``key=value`` overrides, then ``seed``."""
    cfg = RunConfig()
    if path:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text(encoding="utf-8").strip()
        try:
            raw = json.loads(text) if text else {}
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        for k, v in raw.items():
            cfg.set(k, v)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    if seed is not None:
        cfg.seed = seed
    cfg.train.validate()
    return cfg
