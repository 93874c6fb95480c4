"""
Synthetic languages and the verbalizer.

Every sentence is first rendered in a shared interlingua (function words,
entity and attribute symbols) and then mapped into a language by a fixed
vocabulary offset plus that language's word order.
"""

from __future__ import annotations
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from ..errors import ConfigError, DataError
from ..tokens import N_SPECIAL
from .theory import Atom, Rule, Statement, Theory

# interlingua function words
IS, IF, THEN, END = range(4)
N_FUNCTION_WORDS = 4


class WordOrder(str, Enum):
    FORWARD = "forward"
    REVERSED = "reversed-within-sentence"


@dataclass(frozen=True)
class Lexicon:
    n_entities: int
    n_attributes: int

    @property
    def size(self) -> int:
        return N_FUNCTION_WORDS + self.n_entities + self.n_attributes

    def entity(self, e: int) -> int:
        if not 0 <= e < self.n_entities:
            raise ConfigError(f"entity {e} exceeds the {self.n_entities}-entity vocabulary")
        return N_FUNCTION_WORDS + e

    def attribute(self, a: int) -> int:
        if not 0 <= a < self.n_attributes:
            raise ConfigError(
                f"attribute {a} exceeds the {self.n_attributes}-attribute vocabulary"
            )
        return N_FUNCTION_WORDS + self.n_entities + a


@dataclass(frozen=True)
class LanguageSpec:
    language_id: int
    vocab_offset: int
    word_order: WordOrder
    size: int

    def surface(self, interlingua: Sequence[int]) -> List[int]:
        return [self.vocab_offset + t for t in interlingua]

    def to_interlingua(self, surface: Sequence[int]) -> List[int]:
        out = []
        for t in surface:
            if not self.owns(t):
                raise DataError(f"token {t} is not in language {self.language_id}")
            out.append(t - self.vocab_offset)
        return out

    def owns(self, token: int) -> bool:
        return self.vocab_offset <= token < self.vocab_offset + self.size

    def order(self, sentence: Sequence[int]) -> List[int]:
        s = list(sentence)
        return s[::-1] if self.word_order == WordOrder.REVERSED else s


class LanguageRegistry:
    def __init__(self, languages: Iterable[LanguageSpec], lexicon: Lexicon):
        self.lexicon = lexicon
        self._langs = {l.language_id: l for l in languages}
        self.check_disjoint()

    @classmethod
    def default(cls, lexicon: Lexicon, n_languages: int = 4) -> "LanguageRegistry":
        """Language 0 is the anchor; odd-numbered languages use reversed word order."""
        orders = [WordOrder.FORWARD, WordOrder.REVERSED]
        langs = [
            LanguageSpec(
                language_id=i,
                vocab_offset=N_SPECIAL + i * lexicon.size,
                word_order=orders[i % 2],
                size=lexicon.size,
            )
            for i in range(n_languages)
        ]
        return cls(langs, lexicon)

    def __len__(self) -> int:
        return len(self._langs)

    def __iter__(self):
        return iter(self._langs[k] for k in sorted(self._langs))

    @property
    def ids(self) -> List[int]:
        return sorted(self._langs)

    @property
    def vocab_size(self) -> int:
        return max(l.vocab_offset + l.size for l in self._langs.values())

    def get(self, language_id: int) -> LanguageSpec:
        try:
            return self._langs[int(language_id)]
        except KeyError:
            raise DataError(
                f"language {language_id} is not registered (known: {self.ids})"
            ) from None

    def check_disjoint(self) -> None:
        spans = sorted((l.vocab_offset, l.vocab_offset + l.size, l.language_id) for l in self._langs.values())
        for lo, _, lid in spans:
            if lo < N_SPECIAL:
                raise ConfigError(f"language {lid} overlaps the special tokens")
        for (_, hi, a), (lo, _, b) in zip(spans, spans[1:]):
            if lo < hi:
                raise ConfigError(f"languages {a} and {b} share surface tokens")

    def to_json(self) -> list:
        return [
            {
                "id": l.language_id,
                "vocab_offset": l.vocab_offset,
                "word_order": l.word_order.value,
                "size": l.size,
            }
            for l in self
        ]

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json()), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path], lexicon: Lexicon) -> "LanguageRegistry":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"language registry {path} does not exist")
        try:
            rows = json.loads(path.read_text(encoding="utf-8"))
            langs = [
                LanguageSpec(
                    language_id=int(r["id"]),
                    vocab_offset=int(r["vocab_offset"]),
                    word_order=WordOrder(r["word_order"]),
                    size=int(r.get("size", lexicon.size)),
                )
                for r in rows
            ]
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"{path}: malformed language registry ({e})") from e
        return cls(langs, lexicon)


# ---- verbalization ---------------------------------------------------------


def fact_sentence(atom: Atom, lex: Lexicon) -> List[int]:
    e, a = atom
    return [lex.entity(e), IS, lex.attribute(a), END]


def rule_sentence(rule: Rule, lex: Lexicon) -> List[int]:
    (e1, a1), (e2, a2) = rule
    return [IF, lex.entity(e1), IS, lex.attribute(a1), THEN, lex.entity(e2), IS, lex.attribute(a2), END]


def interlingua_sentences(item: Union[Theory, Statement], lex: Lexicon) -> List[List[int]]:
    if isinstance(item, Statement):
        return [fact_sentence(item.atom, lex)]
    return [fact_sentence(f, lex) for f in item.facts] + [rule_sentence(r, lex) for r in item.rules]


def verbalize_sentences(item: Union[Theory, Statement], lang: LanguageSpec, lex: Lexicon) -> List[List[int]]:
    sentences = interlingua_sentences(item, lex)
    for s in sentences:
        if max(s) >= lang.size:
            raise ConfigError(f"sentence exceeds language {lang.language_id} vocabulary")
    return [lang.surface(lang.order(s)) for s in sentences]


def verbalize(item: Union[Theory, Statement], lang: LanguageSpec, lex: Lexicon) -> List[int]:
    return [t for s in verbalize_sentences(item, lang, lex) for t in s]


def sentence_alignment(lengths: Sequence[int], src: LanguageSpec, dst: LanguageSpec) -> np.ndarray:
    """
    perm[i] = position in the ``dst`` rendering of the word at position i of
    the ``src`` rendering, for text made of sentences with the given lengths.
    """
    perm = []
    start = 0
    for n in lengths:
        idx = np.arange(n)
        if src.word_order != dst.word_order:
            idx = idx[::-1]
        perm.extend(start + idx)
        start += n
    return np.asarray(perm, dtype=np.int64)
