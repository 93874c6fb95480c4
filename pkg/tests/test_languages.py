import numpy as np
import pytest

from src.xattn.errors import ConfigError, DataError
from src.xattn.langgen.languages import (
    END,
    IF,
    IS,
    THEN,
    LanguageRegistry,
    Lexicon,
    WordOrder,
    sentence_alignment,
    verbalize,
)
from src.xattn.langgen.theory import Statement, Theory
from src.xattn.tokens import N_SPECIAL

LEX = Lexicon(8, 12)


@pytest.fixture
def registry():
    return LanguageRegistry.default(LEX, 4)


def test_lexicon_layout():
    assert LEX.size == 24
    assert LEX.entity(0) == 4
    assert LEX.attribute(0) == 12
    with pytest.raises(ConfigError):
        LEX.attribute(12)


def test_language_blocks_are_disjoint(registry):
    assert registry.ids == [0, 1, 2, 3]
    assert [l.vocab_offset for l in registry] == [4, 28, 52, 76]
    assert registry.vocab_size == N_SPECIAL + 4 * LEX.size
    assert registry.get(1).word_order == WordOrder.REVERSED
    assert registry.get(2).word_order == WordOrder.FORWARD


def test_unregistered_language(registry):
    with pytest.raises(DataError):
        registry.get(9)


def test_fact_in_forward_language(registry):
    lang = registry.get(0)
    toks = verbalize(Statement((2, 5), True, 0), lang, LEX)
    off = lang.vocab_offset
    assert toks == [off + LEX.entity(2), off + IS, off + LEX.attribute(5), off + END]


def test_reversed_language_reverses_within_sentence(registry):
    th = Theory(tuple(range(8)), tuple(range(12)), ((0, 0),), (((0, 0), (1, 1)),))
    fwd = verbalize(th, registry.get(2), LEX)
    rev = verbalize(th, registry.get(3), LEX)
    shift = registry.get(3).vocab_offset - registry.get(2).vocab_offset
    assert len(fwd) == len(rev) == 4 + 9
    # sentence order kept, words reversed inside each sentence
    assert [t + shift for t in fwd[:4][::-1]] == rev[:4]
    assert [t + shift for t in fwd[4:][::-1]] == rev[4:]
    assert registry.get(2).to_interlingua(fwd[4:]) == [
        IF, LEX.entity(0), IS, LEX.attribute(0), THEN, LEX.entity(1), IS, LEX.attribute(1), END
    ]


def test_every_token_owned_by_its_language(registry):
    th = Theory(tuple(range(8)), tuple(range(12)), ((3, 4), (7, 11)), (((3, 4), (0, 0)),))
    for lang in registry:
        toks = verbalize(th, lang, LEX)
        assert all(lang.owns(t) for t in toks)
        assert not any(other.owns(t) for other in registry if other is not lang for t in toks)


def test_sentence_alignment(registry):
    fwd, rev = registry.get(0), registry.get(1)
    np.testing.assert_array_equal(sentence_alignment([4, 2], fwd, fwd), [0, 1, 2, 3, 4, 5])
    np.testing.assert_array_equal(sentence_alignment([4, 2], fwd, rev), [3, 2, 1, 0, 5, 4])


def test_to_interlingua_rejects_foreign_tokens(registry):
    with pytest.raises(DataError):
        registry.get(0).to_interlingua([registry.get(1).vocab_offset])


def test_registry_save_and_load(tmp_path, registry):
    path = registry.save(tmp_path / "languages.json")
    loaded = LanguageRegistry.load(path, LEX)
    assert loaded.to_json() == registry.to_json()


def test_registry_load_missing(tmp_path):
    with pytest.raises(DataError):
        LanguageRegistry.load(tmp_path / "nope.json", LEX)
