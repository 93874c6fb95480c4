"""
Closed-world theories: facts plus single-premise rules over an
(entity, attribute) atom universe, labelled by forward chaining.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import ConfigError, DataError, GenerationError

Atom = Tuple[int, int]
Rule = Tuple[Atom, Atom]

MAX_DEPTH = 2


@dataclass(frozen=True)
class Theory:
    entities: Tuple[int, ...]
    attributes: Tuple[int, ...]
    facts: Tuple[Atom, ...]
    rules: Tuple[Rule, ...]
    max_depth: int = 0

    def __post_init__(self):
        if len(set(self.facts)) != len(self.facts):
            raise DataError("theory has duplicate facts")
        for premise, conclusion in self.rules:
            if premise == conclusion:
                raise DataError(f"rule premise equals conclusion: {premise}")

    def knows(self, atom: Atom) -> bool:
        e, a = atom
        return e in self.entities and a in self.attributes


@dataclass(frozen=True)
class Statement:
    atom: Atom
    label: bool
    depth: int


def closure_depths(theory: Theory) -> Dict[Atom, int]:
    """Minimal derivation depth of every atom in the forward-chaining closure."""
    depth: Dict[Atom, int] = {f: 0 for f in theory.facts}
    changed = True
    while changed:
        changed = False
        for premise, conclusion in theory.rules:
            if premise not in depth:
                continue
            cand = depth[premise] + 1
            if cand < depth.get(conclusion, cand + 1):
                depth[conclusion] = cand
                changed = True
    return depth


def infer_label(theory: Theory, atom: Atom) -> Tuple[bool, int]:
    """(True, depth) if derivable, else (False, -1) under the closed world."""
    atom = (int(atom[0]), int(atom[1]))
    if not theory.knows(atom):
        raise DataError(f"atom {atom} is outside the theory's symbols")
    d = closure_depths(theory).get(atom)
    return (True, d) if d is not None else (False, -1)


def random_theory(
    rng: np.random.Generator,
    n_entities: int,
    n_attributes: int,
    n_facts: int,
    n_rules: int,
    max_depth: int = 0,
    chain_bias: float = 0.75,
) -> Theory:
    """Draw facts, then rules whose premises lean toward already-derivable atoms."""
    universe = n_entities * n_attributes
    if n_facts > universe:
        raise ConfigError(f"{n_facts} facts do not fit {universe} atoms")

    def atom_of(k: int) -> Atom:
        return (int(k // n_attributes), int(k % n_attributes))

    facts = [atom_of(k) for k in rng.choice(universe, size=n_facts, replace=False)]
    fact_set = set(facts)
    derivable = list(facts)
    rules: List[Rule] = []
    for _ in range(n_rules):
        for _attempt in range(32):
            if derivable and rng.random() < chain_bias:
                premise = derivable[int(rng.integers(len(derivable)))]
            else:
                premise = atom_of(int(rng.integers(universe)))
            conclusion = atom_of(int(rng.integers(universe)))
            if conclusion == premise or conclusion in fact_set:
                continue
            if (premise, conclusion) in rules:
                continue
            break
        else:
            continue
        rules.append((premise, conclusion))
        if premise in derivable and conclusion not in derivable:
            derivable.append(conclusion)

    return Theory(
        entities=tuple(range(n_entities)),
        attributes=tuple(range(n_attributes)),
        facts=tuple(facts),
        rules=tuple(rules),
        max_depth=max_depth,
    )


def generate_theory(
    seed,
    n_entities: int,
    n_attributes: int,
    n_facts: int,
    n_rules: int,
    target_depth: int,
    n_statements: int = 4,
    max_retries: int = 200,
) -> Tuple[Theory, List[Statement]]:
    """
    Sample a theory and a label-balanced statement set. True statements have
    depth <= target_depth, with every depth 0..target_depth represented when
    target_depth > 0; false statements are drawn uniformly from atoms outside
    the closure.
    """
    if min(n_entities, n_attributes, n_facts, n_statements) <= 0 or n_rules < 0:
        raise ConfigError("theory sizes must be positive")
    if not 0 <= target_depth <= MAX_DEPTH:
        raise ConfigError(f"target depth must be in 0..{MAX_DEPTH}, got {target_depth}")

    rng = np.random.default_rng(seed)
    n_true = (n_statements + 1) // 2
    n_false = n_statements // 2
    if target_depth > 0 and n_true < target_depth + 1:
        raise ConfigError(
            f"{n_statements} statements cannot cover depths 0..{target_depth}"
        )

    universe = [(e, a) for e in range(n_entities) for a in range(n_attributes)]
    for _ in range(max_retries):
        theory = random_theory(
            rng, n_entities, n_attributes, n_facts, n_rules, max_depth=target_depth
        )
        depths = closure_depths(theory)
        by_depth = {
            d: sorted(a for a, ad in depths.items() if ad == d)
            for d in range(target_depth + 1)
        }
        false_pool = [a for a in universe if a not in depths]
        true_pool = [a for d in range(target_depth + 1) for a in by_depth[d]]
        if len(true_pool) < n_true or len(false_pool) < n_false:
            continue
        if target_depth > 0 and any(not by_depth[d] for d in by_depth):
            continue

        chosen: List[Atom] = []
        if target_depth > 0:
            for d in range(target_depth + 1):
                chosen.append(by_depth[d][int(rng.integers(len(by_depth[d])))])
        rest = [a for a in true_pool if a not in chosen]
        extra = n_true - len(chosen)
        if extra:
            picks = rng.choice(len(rest), size=extra, replace=False)
            chosen.extend(rest[int(i)] for i in picks)

        negatives = rng.choice(len(false_pool), size=n_false, replace=False)
        statements = [Statement(a, True, depths[a]) for a in chosen]
        statements += [Statement(false_pool[int(i)], False, -1) for i in negatives]
        order = rng.permutation(len(statements))
        return theory, [statements[int(i)] for i in order]

    raise GenerationError(
        f"could not balance statements after {max_retries} attempts",
        seed=_seed_repr(seed),
    )


def _seed_repr(seed) -> Optional[int]:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    entropy = getattr(seed, "entropy", None)
    return int(entropy) if isinstance(entropy, (int, np.integer)) else None
