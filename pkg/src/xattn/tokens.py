"""
Token layout shared by the generator, mask builders and the encoder.

Ids 0..3 are special tokens; each language owns a disjoint block above them.
A model input is ``[CLS] seg_0 [SEP] seg_1 [SEP] ... [PAD]*``; each segment
carries one language, and its closing SEP belongs to it.
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError

PAD, CLS, SEP, MASK = 0, 1, 2, 3
N_SPECIAL = 4

# language-tag sentinels
BRIDGE = -1
PAD_TAG = -2


@dataclass(frozen=True)
class TokenSequence:
    ids: Tuple[int, ...]
    segment_langs: Tuple[int, ...]

    def __post_init__(self):
        if not self.ids or self.ids[0] != CLS:
            raise ContractError("sequence must start with [CLS]")
        n_sep = sum(1 for t in self.ids if t == SEP)
        if n_sep != len(self.segment_langs):
            raise ContractError(
                f"{n_sep} [SEP] tokens but {len(self.segment_langs)} segment languages"
            )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def length(self) -> int:
        """Non-PAD length."""
        return sum(1 for t in self.ids if t != PAD)

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)

    def segment_ids(self) -> np.ndarray:
        """0 for [CLS] and the first segment, k for the k-th segment; PADs get 0."""
        out = np.zeros(len(self.ids), dtype=np.int64)
        seg = 0
        for i, t in enumerate(self.ids):
            if t == PAD:
                continue
            out[i] = seg
            if t == SEP:
                seg += 1
        return out

    def pad_to(self, n: int) -> "TokenSequence":
        if n < len(self.ids):
            raise ContractError(f"cannot pad length {len(self.ids)} down to {n}")
        return TokenSequence(self.ids + (PAD,) * (n - len(self.ids)), self.segment_langs)

    def replace(self, positions: Sequence[int], token: int) -> "TokenSequence":
        ids = list(self.ids)
        for p in positions:
            ids[p] = token
        return TokenSequence(tuple(ids), self.segment_langs)


def assemble(segments: Sequence[Sequence[int]], langs: Sequence[int], pad_to: Optional[int] = None) -> TokenSequence:
    ids = [CLS]
    for seg in segments:
        ids.extend(int(t) for t in seg)
        ids.append(SEP)
    seq = TokenSequence(tuple(ids), tuple(int(l) for l in langs))
    return seq.pad_to(pad_to) if pad_to else seq
