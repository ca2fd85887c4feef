"""
Deterministic hashed bag-of-words embedder.

Stands in for frozen pretrained text encoders. Every token is hashed with
FNV-1a (64 bit) into one of ``dimension`` buckets with a sign taken from the
top bit of the hash, so outputs are bit-identical across runs, platforms and
implementations.

Example:
    >>> spec = EmbedderSpec()
    >>> vec = embed_sentence("Who wears a belt?", spec)
    >>> mat = embed_tokens("Who wears a belt?", spec)
    >>> mat.shape
    (4, 64)
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Any

import numpy as np

from .errors import ContractError

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

TOKENIZER_RULES = ("whitespace-punct-lowercase",)

# letters/digits only: underscore counts as punctuation
_TOKEN_RE = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class EmbedderSpec:
    """Identity of an embedder; equal specs give bit-identical outputs."""

    name: str = "fnv1a-hashed-bow"
    dimension: int = 64
    tokenizer: str = "whitespace-punct-lowercase"

    def __post_init__(self) -> None:
        if self.dimension < 2:
            raise ContractError(f"embedder dimension must be >= 2, got {self.dimension}")
        if self.tokenizer not in TOKENIZER_RULES:
            raise ContractError(f"unknown tokenizer rule {self.tokenizer!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EmbedderSpec":
        return cls(
            name=str(data["name"]),
            dimension=int(data["dimension"]),
            tokenizer=str(data["tokenizer"]),
        )


@dataclass(frozen=True)
class ChannelEmbedding:
    """Sentence vector plus per-token matrix for one piece of text."""

    sentence: np.ndarray  # (d,)
    tokens: np.ndarray  # (n_tokens, d)

    @property
    def dimension(self) -> int:
        return int(self.sentence.shape[0])


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 16)
def token_bucket(token: str, dimension: int) -> tuple[int, float]:
    """Return ``(bucket, sign)`` for a token under the hashing rule."""
    h = fnv1a_64(token.encode("utf-8"))
    sign = -1.0 if h >> 63 else 1.0
    return h % dimension, sign


def _basis(dimension: int) -> np.ndarray:
    e0 = np.zeros(dimension, dtype=np.float64)
    e0[0] = 1.0
    return e0


def embed_sentence(text: str, spec: EmbedderSpec) -> np.ndarray:
    """Embed a whole text as one unit vector.

    Sums the signed one-bucket vectors of every token and L2-normalizes.
    Empty text (or tokens that cancel exactly) maps to the basis vector e0.
    """
    vec = np.zeros(spec.dimension, dtype=np.float64)
    for token in tokenize(text):
        bucket, sign = token_bucket(token, spec.dimension)
        vec[bucket] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return _basis(spec.dimension)
    return vec / norm


def embed_tokens(text: str, spec: EmbedderSpec) -> np.ndarray:
    """Embed each token as its own unit row; empty text gives one e0 row."""
    tokens = tokenize(text)
    if not tokens:
        return _basis(spec.dimension)[None, :]
    mat = np.zeros((len(tokens), spec.dimension), dtype=np.float64)
    for row, token in enumerate(tokens):
        bucket, sign = token_bucket(token, spec.dimension)
        mat[row, bucket] = sign
    return mat


def embed_text(text: str, spec: EmbedderSpec) -> ChannelEmbedding:
    return ChannelEmbedding(embed_sentence(text, spec), embed_tokens(text, spec))


def mean_pool(tokens: np.ndarray) -> np.ndarray:
    return tokens.mean(axis=0)
