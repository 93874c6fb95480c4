"""
The on-disk data bundle: language registry, mix-recipe train/dev sets, one
evaluation file per cell and the masked-token corpora.

    <out>/languages.json
    <out>/train.jsonl, dev.jsonl
    <out>/eval/<ctx>-<stmt>.jsonl
    <out>/corpus/mono.jsonl
    <out>/corpus/parallel-shared.jsonl, parallel-<anchor>-<x>.jsonl
"""

from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np

from ..config import DataConfig, max_threads
from ..errors import ConfigError
from ..tokens import TokenSequence
from ..utils.logging import get_logger, log_call
from .corpus import generate_mono_corpus, generate_parallel_corpus, write_corpus
from .examples import (
    ReasoningExample,
    make_example,
    make_mix_dataset,
    read_jsonl,
    stability_pair,
    write_jsonl,
)
from .languages import LanguageRegistry, Lexicon
from .theory import Statement, Theory, generate_theory

log = get_logger("langgen")

T = TypeVar("T")
Item = Tuple[Theory, Statement]
SPLIT = (0.7, 0.1, 0.2)


def split_theories(theories: Sequence[T], seed) -> Tuple[List[T], List[T], List[T]]:
    """Random 70/10/20 train/dev/test partition by theory."""
    n = len(theories)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(SPLIT[0] * n))
    n_dev = int(round(SPLIT[1] * n))

    def pick(idx):
        return [theories[int(i)] for i in idx]

    return pick(order[:n_train]), pick(order[n_train : n_train + n_dev]), pick(order[n_train + n_dev :])


def flatten(theories: Sequence[Tuple[Theory, List[Statement]]]) -> List[Item]:
    return [(th, st) for th, stmts in theories for st in stmts]


@dataclass
class DatasetBundle:
    registry: LanguageRegistry
    train: List[ReasoningExample]
    dev: List[ReasoningExample]
    eval_cells: Dict[str, List[ReasoningExample]]
    mono: List[TokenSequence]
    parallel: Dict[str, List[TokenSequence]]
    test_items: List[Item] = field(default_factory=list)
    files: List[Path] = field(default_factory=list)

    @property
    def max_tokens(self) -> int:
        exs = self.train + self.dev + [e for cell in self.eval_cells.values() for e in cell]
        return max(ex.n_tokens for ex in exs)


def make_registry(cfg: DataConfig) -> LanguageRegistry:
    if cfg.n_languages < 2:
        raise ConfigError("need at least two languages")
    if not 0 <= cfg.anchor_lang < cfg.n_languages or not 0 <= cfg.train_lang < cfg.n_languages:
        raise ConfigError("anchor_lang and train_lang must name registered languages")
    return LanguageRegistry.default(Lexicon(cfg.n_entities, cfg.n_attributes), cfg.n_languages)


def cell_examples(items: Sequence[Item], registry: LanguageRegistry, anchor: int) -> Dict[str, List[ReasoningExample]]:
    """Every monolingual cell and every ordered pair that involves the anchor."""
    combos = [(l, l) for l in registry.ids]
    combos += [(a, b) for a, b in permutations(registry.ids, 2) if anchor in (a, b)]
    return {
        f"{c}-{s}": [make_example(th, st, c, s, registry) for th, st in items]
        for c, s in combos
    }


def parallel_keys(registry: LanguageRegistry, anchor: int) -> Dict[str, List[Tuple[int, int]]]:
    keys = {"shared": [p for p in permutations(registry.ids, 2)]}
    for x in registry.ids:
        if x != anchor:
            keys[f"{anchor}-{x}"] = [(anchor, x)]
    return keys


@log_call("gen-data")
def build_datasets(
    cfg: DataConfig,
    seed: int,
    out_dir: Optional[Union[str, Path]] = None,
    max_seq_len: int = 64,
) -> DatasetBundle:
    registry = make_registry(cfg)
    root = np.random.SeedSequence(seed)
    theory_seeds, split_seed, mono_seed, par_seed = root.spawn(4)

    def gen(child):
        return generate_theory(
            child, cfg.n_entities, cfg.n_attributes, cfg.n_facts, cfg.n_rules,
            cfg.depth, cfg.statements_per_theory,
        )

    with ThreadPoolExecutor(max_workers=max_threads()) as pool:
        theories = list(pool.map(gen, theory_seeds.spawn(cfg.n_theories)))
    log.info("generated theories", extra={"count": len(theories)})

    train_th, dev_th, test_th = split_theories(theories, split_seed)
    anchor = cfg.anchor_lang
    bundle = DatasetBundle(
        registry=registry,
        train=make_mix_dataset(flatten(train_th), registry, anchor, cfg.train_lang),
        dev=make_mix_dataset(flatten(dev_th), registry, anchor, cfg.train_lang),
        eval_cells=cell_examples(flatten(test_th), registry, anchor),
        mono=generate_mono_corpus(mono_seed, cfg.n_mono, registry.ids, registry, cfg.n_facts, cfg.n_rules, max_seq_len),
        parallel={},
        test_items=flatten(test_th),
    )
    keys = parallel_keys(registry, anchor)
    for (key, pairs), child in zip(keys.items(), par_seed.spawn(len(keys))):
        bundle.parallel[key] = generate_parallel_corpus(
            child, cfg.n_parallel, pairs, registry, cfg.n_facts, cfg.n_rules, max_seq_len
        )
    if bundle.max_tokens > max_seq_len:
        raise ConfigError(
            f"longest example has {bundle.max_tokens} tokens but max_seq_len is {max_seq_len}"
        )

    if out_dir is not None:
        save_bundle(bundle, Path(out_dir))
    return bundle


def save_bundle(bundle: DatasetBundle, out: Path) -> List[Path]:
    files = [
        bundle.registry.save(out / "languages.json"),
        write_jsonl(out / "train.jsonl", bundle.train),
        write_jsonl(out / "dev.jsonl", bundle.dev),
        write_corpus(out / "corpus" / "mono.jsonl", bundle.mono),
    ]
    for cell, exs in bundle.eval_cells.items():
        files.append(write_jsonl(out / "eval" / f"{cell}.jsonl", exs))
    for key, seqs in bundle.parallel.items():
        files.append(write_corpus(out / "corpus" / f"parallel-{key}.jsonl", seqs))
    bundle.files = files
    log.info("wrote dataset bundle", extra={"file": str(out), "count": len(files)})
    return files


def load_eval_cells(data_dir: Union[str, Path]) -> Dict[str, List[ReasoningExample]]:
    eval_dir = Path(data_dir) / "eval"
    return {p.stem: read_jsonl(p) for p in sorted(eval_dir.glob("*.jsonl"))}


def stability_pairs(
    items: Sequence[Item],
    registry: LanguageRegistry,
    anchor: int,
    others: Sequence[int],
    limit: int,
):
    """(in-language, code-switched, alignment) triples cycling over ``others``."""
    out = []
    for i, (th, st) in enumerate(items[:limit]):
        out.append(stability_pair(th, st, registry, anchor, others[i % len(others)]))
    return out
