"""
Structured attention masks over language-tagged sequences.

Entry (i, j) lets position i attend to position j. Pairs split into
monolingual (same language), cross-lingual (different languages) and bridge
pairs (row or column 0, the [CLS] token), which are never masked. PAD rows and
columns are zero except a self entry in M1 so every row normalizes.
"""

from __future__ import annotations
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ContractError
from ..tokens import BRIDGE, CLS, PAD, PAD_TAG, SEP, TokenSequence


class AttentionScheme(str, Enum):
    STANDARD = "standard"
    DROPOUT = "dropout-baseline"
    SHARED_QCROSS = "shared-qcross"
    PAIR_QCROSS = "pair-qcross"

    @property
    def uses_qcross(self) -> bool:
        return self in (AttentionScheme.SHARED_QCROSS, AttentionScheme.PAIR_QCROSS)


class MaskKind(str, Enum):
    NON_INTERFERING = "non-interfering"
    INTERFERING = "interfering"
    EXPECTED = "expected"


@dataclass(frozen=True, eq=False)
class MaskPair:
    m1: np.ndarray
    m2: np.ndarray
    scheme: MaskKind
    p_mask: float

    @property
    def n(self) -> int:
        return self.m1.shape[0]

    def to_json(self) -> dict:
        return {
            "scheme": self.scheme.value,
            "p_mask": self.p_mask,
            "m1": self.m1.tolist(),
            "m2": self.m2.tolist(),
        }


Masks = Union[None, np.ndarray, MaskPair]


def tag_sequence(seq: TokenSequence) -> np.ndarray:
    """BRIDGE at position 0, the segment language elsewhere (SEP included), PAD_TAG on padding."""
    if not seq.ids or seq.ids[0] != CLS:
        raise ContractError("tag_sequence: sequence does not start with [CLS]")
    tags = np.full(len(seq.ids), PAD_TAG, dtype=np.int64)
    tags[0] = BRIDGE
    seg = 0
    for i, t in enumerate(seq.ids[1:], start=1):
        if t == PAD:
            continue
        if seg >= len(seq.segment_langs):
            raise ContractError("tag_sequence: token after the last [SEP]")
        tags[i] = seq.segment_langs[seg]
        if t == SEP:
            seg += 1
    return tags


def _check_p(p_mask: float) -> None:
    if not 0.0 <= p_mask <= 1.0:
        raise ContractError(f"p_mask must be in [0, 1], got {p_mask}")


def pair_classes(tags: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(valid positions, bridge pairs, monolingual pairs, cross-lingual pairs)."""
    tags = np.asarray(tags)
    valid = tags != PAD_TAG
    live = valid[:, None] & valid[None, :]
    is_bridge = tags == BRIDGE
    bridge = live & (is_bridge[:, None] | is_bridge[None, :])
    inner = live & ~bridge
    same = tags[:, None] == tags[None, :]
    return valid, bridge, inner & same, inner & ~same


def _with_pad_diagonal(m: np.ndarray, valid: np.ndarray) -> np.ndarray:
    pads = np.flatnonzero(~valid)
    m[pads, pads] = 1.0
    return m


def _keep(rng: np.random.Generator, n: int, p_mask: float) -> np.ndarray:
    return rng.random((n, n)) < 1.0 - p_mask


def build_noninterfering(tags: np.ndarray) -> MaskPair:
    valid, bridge, mono, cross = pair_classes(tags)
    m1 = _with_pad_diagonal((mono | bridge).astype(np.float64), valid)
    m2 = (cross | bridge).astype(np.float64)
    return MaskPair(m1, m2, MaskKind.NON_INTERFERING, 1.0)


def build_interfering(tags: np.ndarray, p_mask: float, rng: np.random.Generator) -> MaskPair:
    """Each query also takes a random (1 - p_mask) share of the other query's pairs."""
    _check_p(p_mask)
    valid, bridge, mono, cross = pair_classes(tags)
    n = len(valid)
    keep1 = _keep(rng, n, p_mask)
    keep2 = _keep(rng, n, p_mask)
    m1 = _with_pad_diagonal((mono | bridge | (cross & keep1)).astype(np.float64), valid)
    m2 = (cross | bridge | (mono & keep2)).astype(np.float64)
    return MaskPair(m1, m2, MaskKind.INTERFERING, float(p_mask))


def build_dropout_mask(tags: np.ndarray, p_mask: float, rng: np.random.Generator) -> np.ndarray:
    """Cross-lingual pairs dropped with probability p_mask; the bridge stays."""
    _check_p(p_mask)
    valid, bridge, mono, cross = pair_classes(tags)
    keep = _keep(rng, len(valid), p_mask)
    return _with_pad_diagonal((mono | bridge | (cross & keep)).astype(np.float64), valid)


def full_attention_mask(tags: np.ndarray) -> np.ndarray:
    valid, bridge, mono, cross = pair_classes(tags)
    return _with_pad_diagonal((mono | bridge | cross).astype(np.float64), valid)


def expected_masks(
    tags: np.ndarray,
    p_mask: float,
    scheme: AttentionScheme,
    eval_policy: str = "full-attention",
) -> Union[MaskPair, np.ndarray]:
    """
    Deterministic inference masks: every Bernoulli entry replaced by its keep
    probability (1 - p_mask). The dropout baseline evaluates with full
    attention unless ``eval_policy`` is "expected".
    """
    _check_p(p_mask)
    scheme = AttentionScheme(scheme)
    valid, bridge, mono, cross = pair_classes(tags)
    keep = 1.0 - p_mask
    if scheme == AttentionScheme.DROPOUT:
        if eval_policy == "full-attention":
            return full_attention_mask(tags)
        if eval_policy != "expected":
            raise ContractError(f"unknown eval policy {eval_policy!r}")
        return _with_pad_diagonal(mono + bridge + keep * cross, valid)
    if not scheme.uses_qcross:
        raise ContractError(f"expected_masks does not apply to scheme {scheme.value}")
    m1 = _with_pad_diagonal(mono + bridge + keep * cross, valid)
    m2 = cross + bridge + keep * mono
    return MaskPair(m1.astype(np.float64), m2.astype(np.float64), MaskKind.EXPECTED, float(p_mask))


def masks_for(
    seq: TokenSequence,
    scheme: AttentionScheme,
    p_mask: float,
    train: bool,
    rng: Optional[np.random.Generator] = None,
) -> Masks:
    """
    The masks an encoder forward needs under ``scheme``: fresh samples in
    training, deterministic masks in evaluation.
    """
    scheme = AttentionScheme(scheme)
    if scheme == AttentionScheme.STANDARD:
        return None
    tags = tag_sequence(seq)
    if train and rng is None:
        raise ContractError("training masks need an rng")
    if scheme == AttentionScheme.DROPOUT:
        return build_dropout_mask(tags, p_mask, rng) if train else None
    if p_mask >= 1.0:
        return build_noninterfering(tags)
    if train:
        return build_interfering(tags, p_mask, rng)
    return expected_masks(tags, p_mask, scheme)


def _pad_square(m: np.ndarray, width: int, diagonal: bool) -> np.ndarray:
    n = m.shape[0]
    if width < n:
        raise ContractError(f"cannot pad a {n}x{n} mask down to {width}")
    out = np.zeros((width, width))
    out[:n, :n] = m
    if diagonal:
        idx = np.arange(n, width)
        out[idx, idx] = 1.0
    return out


def pad_masks(masks: Union[MaskPair, np.ndarray], width: int) -> Union[MaskPair, np.ndarray]:
    """Extend masks to ``width`` positions as if the sequence had been right-padded."""
    if isinstance(masks, MaskPair):
        if masks.n == width:
            return masks
        return MaskPair(
            _pad_square(masks.m1, width, True), _pad_square(masks.m2, width, False), masks.scheme, masks.p_mask
        )
    return masks if masks.shape[0] == width else _pad_square(masks, width, True)


def stack_masks(
    seqs: Sequence[TokenSequence],
    masks: Sequence[Masks],
    width: int,
) -> Masks:
    """
    Per-sequence masks padded to ``width`` and stacked row-wise into the
    (len(seqs) * width) x width layout of a packed batch. Mask pairs must not
    be mixed with single masks; a missing single mask means full attention.
    """
    if len(seqs) != len(masks):
        raise ContractError(f"{len(seqs)} sequences but {len(masks)} masks")
    pairs = [isinstance(m, MaskPair) for m in masks]
    if any(pairs):
        if not all(pairs):
            raise ContractError("a batch cannot mix mask pairs with single masks")
        padded = [pad_masks(m, width) for m in masks]
        return MaskPair(
            np.concatenate([m.m1 for m in padded]),
            np.concatenate([m.m2 for m in padded]),
            padded[0].scheme,
            padded[0].p_mask,
        )
    if all(m is None for m in masks) and all(len(s) == width for s in seqs):
        return None
    return np.concatenate(
        [pad_masks(full_attention_mask(tag_sequence(s)) if m is None else m, width) for s, m in zip(seqs, masks)]
    )


def dump_masks(path: Union[str, Path], masks: Union[MaskPair, np.ndarray], p_mask: float = 0.0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(masks, MaskPair):
        payload = masks.to_json()
    else:
        payload = {"scheme": "dropout", "p_mask": p_mask, "m1": masks.tolist(), "m2": []}
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path
