import numpy as np
import pytest

from src.xattn.errors import ContractError, DataError
from src.xattn.langgen.examples import (
    ReasoningExample,
    make_example,
    make_mix_dataset,
    read_jsonl,
    stability_pair,
    write_jsonl,
)
from src.xattn.langgen.languages import LanguageRegistry, Lexicon
from src.xattn.langgen.theory import Statement, Theory, generate_theory
from src.xattn.tokens import CLS, PAD, SEP, TokenSequence, assemble

LEX = Lexicon(8, 12)
REG = LanguageRegistry.default(LEX, 4)
THEORY = Theory(tuple(range(8)), tuple(range(12)), ((0, 0), (2, 3)), (((0, 0), (1, 1)),))
STMT = Statement((1, 1), True, 1)


def test_encode_layout():
    ex = make_example(THEORY, STMT, 0, 1, REG)
    seq = ex.encode()
    assert seq.ids[0] == CLS
    assert seq.ids[len(ex.context) + 1] == SEP
    assert seq.ids[-1] == SEP
    assert len(seq) == ex.n_tokens == len(ex.context) + len(ex.statement) + 3
    assert seq.segment_langs == (0, 1)
    assert list(seq.segment_ids()[: len(ex.context) + 2]) == [0] * (len(ex.context) + 2)


def test_encode_pads():
    ex = make_example(THEORY, STMT, 0, 0, REG)
    seq = ex.encode(pad_to=ex.n_tokens + 5)
    assert seq.ids[-5:] == (PAD,) * 5
    assert seq.length == ex.n_tokens


def test_example_carries_label():
    ex = make_example(THEORY, STMT, 2, 3, REG)
    assert ex.label is True and ex.depth == 1
    assert not ex.monolingual
    assert all(REG.get(3).owns(t) for t in ex.statement)
    assert all(REG.get(2).owns(t) for t in ex.context)


def test_mix_dataset_alternates():
    items = [generate_theory(s, 8, 12, 4, 4, 0, 2) for s in range(7)]
    pairs = [(th, stmts[0]) for th, stmts in items]
    mix = make_mix_dataset(pairs, REG, anchor=0, other=1)
    assert sum(ex.monolingual for ex in mix) == 4
    assert sum(not ex.monolingual for ex in mix) == 3
    assert all(ex.ctx_lang == 0 for ex in mix)
    assert [ex.stmt_lang for ex in mix] == [0, 1, 0, 1, 0, 1, 0]


def test_stability_pair_alignment():
    a, b, perm = stability_pair(THEORY, STMT, REG, 0, 1)
    sa, sb = a.encode().ids, b.encode().ids
    assert len(perm) == len(sa) == len(sb)
    assert sorted(perm.tolist()) == list(range(len(sa)))
    la, lb = REG.get(0), REG.get(1)
    for i, j in enumerate(perm):
        if la.owns(sa[i]):
            # the same interlingua word at the aligned position
            if lb.owns(sb[j]):
                assert sa[i] - la.vocab_offset == sb[j] - lb.vocab_offset
            else:
                assert sa[i] == sb[j]
        else:
            assert sa[i] == sb[j]


def test_jsonl_roundtrip(tmp_path):
    exs = [make_example(THEORY, STMT, 0, l, REG) for l in range(4)]
    path = write_jsonl(tmp_path / "d" / "train.jsonl", exs)
    assert read_jsonl(path) == exs


def test_jsonl_missing_file(tmp_path):
    with pytest.raises(DataError):
        read_jsonl(tmp_path / "none.jsonl")


def test_jsonl_malformed_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"context": [4]}\n', encoding="utf-8")
    with pytest.raises(DataError, match="malformed line 0"):
        read_jsonl(path)


def test_from_json_coerces():
    ex = ReasoningExample.from_json(
        {"context": ["4"], "statement": [5], "ctx_lang": "0", "stmt_lang": 0, "label": 1, "depth": "0"}
    )
    assert ex.context == (4,) and ex.label is True and ex.depth == 0


def test_token_sequence_contract():
    with pytest.raises(ContractError):
        TokenSequence((SEP,), (0,))
    with pytest.raises(ContractError):
        TokenSequence((CLS, 5, SEP), (0, 1))
    with pytest.raises(ContractError):
        assemble([[5, 6]], [0]).pad_to(2)
    seq = assemble([[5, 6], [9]], [0, 1]).replace([1], 3)
    assert seq.ids == (CLS, 3, 6, SEP, 9, SEP)
    np.testing.assert_array_equal(seq.segment_ids(), [0, 0, 0, 0, 1, 1])
