"""Which parameters each training protocol may update, and group hashes for the freeze checks."""

from __future__ import annotations
import hashlib
from typing import Iterable, List, Optional

from ..errors import ConfigError
from ..model.encoder import XattnEncoder, is_bias

PROTOCOLS = ("backbone-mlm", "cs-baseline", "pretrain-qcross", "full-ft", "bitfit")
HEADS = ("pooler/", "classifier/")


def _encoder(name: str) -> bool:
    return name.startswith("embeddings/") or name.startswith("layer")


def trainable_names(model: XattnEncoder, protocol: str, qcross_key: Optional[str] = None) -> List[str]:
    names = list(model.params)
    qcross = [n for n in names if qcross_key is not None and n.startswith(f"qcross/{qcross_key}/")]
    if protocol == "bitfit":
        return sorted(n for n in names if (_encoder(n) and is_bias(n)) or n.startswith(HEADS))
    if protocol == "full-ft":
        return sorted([n for n in names if _encoder(n) or n.startswith(HEADS)] + qcross)
    if protocol == "pretrain-qcross":
        if not qcross:
            raise ConfigError(f"no qcross entry {qcross_key!r} to pretrain")
        return sorted(qcross)
    if protocol in ("backbone-mlm", "cs-baseline"):
        return sorted(n for n in names if _encoder(n) or n.startswith("mlm/"))
    raise ConfigError(f"unknown protocol {protocol!r} (expected one of {PROTOCOLS})")


def freeze_except(model: XattnEncoder, trainable: Iterable[str]) -> None:
    keep = set(trainable)
    for name, t in model.params.items():
        t.requires_grad = name in keep
        t.grad = None


def group_hash(model: XattnEncoder, names: Iterable[str]) -> str:
    """SHA-256 over the named tensors, in name order."""
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode("utf-8"))
        h.update(model.params[name].data.tobytes())
    return h.hexdigest()
