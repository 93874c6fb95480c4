"""
Unlabelled corpora for masked-token training: monolingual sequences for the
backbone and parallel code-switched sequences, ``[CLS] s_a [SEP] s_b [SEP]``
with s_b the same sentences in the second language.
"""

from __future__ import annotations
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from ..errors import ConfigError, ContractError, DataError
from ..maskgen.masks import tag_sequence
from ..tokens import BRIDGE, MASK, N_SPECIAL, PAD_TAG, SEP, TokenSequence, assemble
from .languages import LanguageRegistry, interlingua_sentences
from .theory import random_theory

LangPair = Tuple[int, int]


@dataclass(frozen=True)
class MlmItem:
    sequence: TokenSequence
    positions: Tuple[int, ...]
    targets: Tuple[int, ...]


def _sentence_window(rng, sentences: List[List[int]], budget: int) -> List[List[int]]:
    """A random run of consecutive sentences that fits in ``budget`` tokens."""
    start = int(rng.integers(len(sentences)))
    picked, used = [], 0
    for s in sentences[start:] + sentences[:start]:
        if used + len(s) > budget:
            break
        picked.append(s)
        used += len(s)
    if not picked:
        raise ConfigError(f"no sentence fits a {budget}-token segment")
    return picked


def _render(sentences: List[List[int]], registry: LanguageRegistry, lang_id: int) -> List[int]:
    lang = registry.get(lang_id)
    return [t for s in sentences for t in lang.surface(lang.order(s))]


def generate_parallel_corpus(
    seed,
    n_sequences: int,
    lang_pairs: Union[LangPair, Sequence[LangPair]],
    registry: LanguageRegistry,
    n_facts: int,
    n_rules: int,
    max_seq_len: int,
) -> List[TokenSequence]:
    """
    ``lang_pairs`` is one (a, b) pair, or several for a mixed corpus (each
    sequence draws its pair uniformly).
    """
    if n_sequences <= 0:
        raise ConfigError("n_sequences must be positive")
    pairs = [tuple(lang_pairs)] if isinstance(lang_pairs[0], (int, np.integer)) else [tuple(p) for p in lang_pairs]
    for a, b in pairs:
        if a == b:
            raise ConfigError(f"parallel pair needs two languages, got ({a}, {b})")
        registry.get(a), registry.get(b)

    lex = registry.lexicon
    rng = np.random.default_rng(seed)
    budget = (max_seq_len - 3) // 2
    out = []
    for _ in range(n_sequences):
        a, b = pairs[int(rng.integers(len(pairs)))]
        theory = random_theory(rng, lex.n_entities, lex.n_attributes, n_facts, n_rules)
        window = _sentence_window(rng, interlingua_sentences(theory, lex), budget)
        out.append(assemble([_render(window, registry, a), _render(window, registry, b)], [a, b]))
    return out


def generate_mono_corpus(
    seed,
    n_sequences: int,
    languages: Sequence[int],
    registry: LanguageRegistry,
    n_facts: int,
    n_rules: int,
    max_seq_len: int,
) -> List[TokenSequence]:
    """Single-segment sequences, languages taken round-robin."""
    if n_sequences <= 0:
        raise ConfigError("n_sequences must be positive")
    lex = registry.lexicon
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_sequences):
        lang = languages[i % len(languages)]
        theory = random_theory(rng, lex.n_entities, lex.n_attributes, n_facts, n_rules)
        window = _sentence_window(rng, interlingua_sentences(theory, lex), max_seq_len - 2)
        out.append(assemble([_render(window, registry, lang)], [lang]))
    return out


def mask_for_mlm(seq: TokenSequence, rng: np.random.Generator, rate: float = 0.15) -> MlmItem:
    """Replace ``rate`` of the content tokens (at least one) with [MASK]."""
    if not 0.0 < rate <= 1.0:
        raise ContractError(f"masking rate must be in (0, 1], got {rate}")
    candidates = [i for i, t in enumerate(seq.ids) if t >= N_SPECIAL]
    if not candidates:
        raise ContractError("sequence has no maskable tokens")
    k = max(1, int(round(rate * len(candidates))))
    positions = sorted(int(candidates[i]) for i in rng.choice(len(candidates), size=k, replace=False))
    targets = tuple(seq.ids[p] for p in positions)
    return MlmItem(seq.replace(positions, MASK), tuple(positions), targets)


def write_corpus(path: Union[str, Path], sequences: Iterable[TokenSequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for seq in sequences:
            row = {"tokens": list(seq.ids), "lang_tags": [int(t) for t in tag_sequence(seq)]}
            f.write(json.dumps(row, separators=(",", ":")) + "\n")
    return path


def read_corpus(path: Union[str, Path]) -> List[TokenSequence]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"corpus {path} does not exist")
    out = []
    with path.open("r", encoding="utf-8") as f:
        for idx, raw in enumerate(f):
            line = raw.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                tokens, tags = row["tokens"], row["lang_tags"]
                langs, fresh = [], True
                for t, tag in zip(tokens, tags):
                    if tag in (BRIDGE, PAD_TAG):
                        continue
                    if fresh:
                        langs.append(int(tag))
                        fresh = False
                    if t == SEP:
                        fresh = True
                out.append(TokenSequence(tuple(int(t) for t in tokens), tuple(langs)))
            except (ValueError, KeyError, TypeError) as e:
                raise DataError(f"{path}: malformed line {idx}: {e}") from e
    return out
