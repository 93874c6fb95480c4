"""
Reasoning examples: a verbalized context plus a statement, each in its own
language, and their JSONL form.
"""

from __future__ import annotations
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from ..errors import DataError
from ..tokens import TokenSequence, assemble
from .languages import LanguageRegistry, sentence_alignment, verbalize
from .theory import Statement, Theory


@dataclass(frozen=True)
class ReasoningExample:
    context: Tuple[int, ...]
    statement: Tuple[int, ...]
    ctx_lang: int
    stmt_lang: int
    label: bool
    depth: int

    @property
    def monolingual(self) -> bool:
        return self.ctx_lang == self.stmt_lang

    @property
    def n_tokens(self) -> int:
        return len(self.context) + len(self.statement) + 3

    def encode(self, pad_to: int = 0) -> TokenSequence:
        """[CLS] context [SEP] statement [SEP]"""
        return assemble([self.context, self.statement], [self.ctx_lang, self.stmt_lang], pad_to)

    def to_json(self) -> dict:
        return {
            "context": list(self.context),
            "statement": list(self.statement),
            "ctx_lang": self.ctx_lang,
            "stmt_lang": self.stmt_lang,
            "label": self.label,
            "depth": self.depth,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ReasoningExample":
        return cls(
            context=tuple(int(t) for t in obj["context"]),
            statement=tuple(int(t) for t in obj["statement"]),
            ctx_lang=int(obj["ctx_lang"]),
            stmt_lang=int(obj["stmt_lang"]),
            label=bool(obj["label"]),
            depth=int(obj["depth"]),
        )


def make_example(
    theory: Theory,
    statement: Statement,
    ctx_lang: int,
    stmt_lang: int,
    registry: LanguageRegistry,
) -> ReasoningExample:
    lc, lq = registry.get(ctx_lang), registry.get(stmt_lang)
    lex = registry.lexicon
    return ReasoningExample(
        context=tuple(verbalize(theory, lc, lex)),
        statement=tuple(verbalize(statement, lq, lex)),
        ctx_lang=lc.language_id,
        stmt_lang=lq.language_id,
        label=statement.label,
        depth=statement.depth,
    )


def make_mix_dataset(
    items: Sequence[Tuple[Theory, Statement]],
    registry: LanguageRegistry,
    anchor: int,
    other: int,
) -> List[ReasoningExample]:
    """mix(anchor, anchor-X): even items monolingual anchor, odd items (anchor, X)."""
    return [
        make_example(th, st, anchor, anchor if i % 2 == 0 else other, registry)
        for i, (th, st) in enumerate(items)
    ]


def stability_pair(
    theory: Theory,
    statement: Statement,
    registry: LanguageRegistry,
    anchor: int,
    other: int,
) -> Tuple[ReasoningExample, ReasoningExample, np.ndarray]:
    """
    The same item in-language and code-switched (statement in ``other``), plus
    perm with perm[i] = position in the second input of token i of the first.
    """
    a = make_example(theory, statement, anchor, anchor, registry)
    b = make_example(theory, statement, anchor, other, registry)
    n_ctx = len(a.context)
    stmt_perm = sentence_alignment([len(a.statement)], registry.get(anchor), registry.get(other))
    perm = np.concatenate(
        [
            np.arange(n_ctx + 2),
            n_ctx + 2 + stmt_perm,
            [n_ctx + 2 + len(a.statement)],
        ]
    ).astype(np.int64)
    return a, b, perm


def write_jsonl(path: Union[str, Path], examples: Iterable[ReasoningExample]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_json(), separators=(",", ":")) + "\n")
    return path


def read_jsonl(path: Union[str, Path]) -> List[ReasoningExample]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset {path} does not exist")
    out: List[ReasoningExample] = []
    with path.open("r", encoding="utf-8") as f:
        for idx, raw in enumerate(f):
            line = raw.strip()
            if not line:
                continue
            try:
                out.append(ReasoningExample.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise DataError(f"{path}: malformed line {idx}: {e}") from e
    return out
