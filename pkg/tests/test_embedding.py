import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mhys.embedding import (
    EmbedderSpec,
    embed_sentence,
    embed_text,
    embed_tokens,
    fnv1a_64,
    token_bucket,
    tokenize,
)
from mhys.errors import ContractError

SPEC = EmbedderSpec()


@pytest.mark.parametrize(
    "text, expected",
    [
        ("Two large buses.", ["two", "large", "buses"]),
        ("", []),
        ("Who wears a belt?", ["who", "wears", "a", "belt"]),
        ("  red,coat;  BLUE_hat ", ["red", "coat", "blue", "hat"]),
    ],
)
def test_tokenize(text, expected):
    assert tokenize(text) == expected


@pytest.mark.parametrize(
    "data, expected",
    [
        (b"", 0xCBF29CE484222325),
        (b"a", 0xAF63DC4C8601EC8C),
        (b"foobar", 0x85944171F73967E8),
    ],
)
def test_fnv1a_reference_vectors(data, expected):
    assert fnv1a_64(data) == expected
    assert oracles.fnv1a_64(data) == expected


def test_bucket_and_sign_rule():
    for token in ["bus", "belt", "zebra", "çafé", "42"]:
        h = oracles.fnv1a_64(token.encode("utf-8"))
        bucket, sign = token_bucket(token, 64)
        assert bucket == h % 64
        assert sign == (1.0 if (h >> 63) == 0 else -1.0)


def test_empty_text_is_e0():
    vec = embed_sentence("", SPEC)
    expected = np.zeros(64)
    expected[0] = 1.0
    assert np.array_equal(vec, expected)
    mat = embed_tokens("", SPEC)
    assert mat.shape == (1, 64)
    assert np.array_equal(mat[0], expected)


def test_sentence_determinism_and_scale_invariance():
    a = embed_sentence("Is there a red bus?", SPEC)
    b = embed_sentence("Is there a red bus?", SPEC)
    assert a.tobytes() == b.tobytes()
    # direct construction: one signed bucket, normalized
    bucket, sign = token_bucket("bus", 64)
    direct = np.zeros(64)
    direct[bucket] = sign
    assert np.array_equal(embed_sentence("bus bus", SPEC), direct)
    assert np.array_equal(embed_sentence("bus", SPEC), direct)


def test_sentence_matches_direct_construction():
    text = "Who wears a belt near the two large buses?"
    acc = np.zeros(64)
    for tok in tokenize(text):
        h = oracles.fnv1a_64(tok.encode())
        acc[h % 64] += 1.0 if h >> 63 == 0 else -1.0
    np.testing.assert_array_equal(embed_sentence(text, SPEC), acc / np.linalg.norm(acc))


def test_token_rows():
    mat = embed_tokens("red coat", SPEC)
    assert mat.shape == (2, 64)
    np.testing.assert_allclose(np.linalg.norm(mat, axis=1), 1.0, atol=1e-9)
    rep = embed_tokens("coat red coat", SPEC)
    assert np.array_equal(rep[0], rep[2])
    assert embed_tokens("who wears a belt", SPEC).shape[0] == 4


def test_dimension_validation():
    with pytest.raises(ContractError):
        EmbedderSpec(dimension=1)
    with pytest.raises(ContractError):
        EmbedderSpec(tokenizer="bpe")


def test_spec_roundtrip():
    spec = EmbedderSpec(dimension=768)
    assert EmbedderSpec.from_dict(spec.to_dict()) == spec
    assert embed_sentence("a b c", spec).shape == (768,)


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=80), st.integers(min_value=2, max_value=128))
def test_unit_norm_and_consistency(text, dim):
    spec = EmbedderSpec(dimension=dim)
    emb = embed_text(text, spec)
    assert np.all(np.isfinite(emb.sentence))
    assert abs(np.linalg.norm(emb.sentence) - 1.0) <= 1e-9
    np.testing.assert_allclose(np.linalg.norm(emb.tokens, axis=1), 1.0, atol=1e-9)
    n = len(tokenize(text))
    assert emb.tokens.shape == (max(n, 1), dim)
