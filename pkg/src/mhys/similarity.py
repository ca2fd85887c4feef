"""
Coarse-to-fine similarity kernels.

Sentence level: cosine between projected sentence vectors.
Word level: cosine matrix between projected token rows, reduced with a
global max-pool (MaxSim over both axes). The two levels are combined by
``fuse_scores`` according to a :class:`FusionConfig`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractError, ShapeError

# projected vectors shorter than this are treated as degenerate
DEGENERATE_NORM = 1e-12


@dataclass
class AffineMap:
    """``x -> W x + b`` applied row-wise."""

    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[1])

    def copy(self) -> "AffineMap":
        return AffineMap(self.weight.copy(), self.bias.copy())

    @classmethod
    def identity(cls, dim: int) -> "AffineMap":
        return cls(np.eye(dim), np.zeros(dim))


HEAD_NAMES = ("f_q", "f_v", "g_q", "g_v")


@dataclass
class ProjectionHeads:
    """Trainable projections: ``f_*`` for sentence level, ``g_*`` for word level."""

    f_q: AffineMap
    f_v: AffineMap
    g_q: AffineMap
    g_v: AffineMap

    def __post_init__(self) -> None:
        dims = set()
        for name in HEAD_NAMES:
            head = getattr(self, name)
            w, b = head.weight, head.bias
            if w.ndim != 2 or w.shape[0] != w.shape[1] or b.shape != (w.shape[0],):
                raise ShapeError(
                    f"head {name} must be a square d x d weight with a d bias, "
                    f"got weight {w.shape} and bias {b.shape}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ContractError(f"head {name} has non-finite parameters")
            dims.add(w.shape[0])
        if len(dims) != 1:
            raise ShapeError(f"heads disagree on dimension: {sorted(dims)}")

    @property
    def dimension(self) -> int:
        return self.f_q.in_dim

    @classmethod
    def identity(cls, dim: int) -> "ProjectionHeads":
        return cls(*(AffineMap.identity(dim) for _ in HEAD_NAMES))

    @classmethod
    def random(cls, dim: int, seed: int, scale: float = 0.3) -> "ProjectionHeads":
        """Identity plus seeded Gaussian noise; handy for tests and oracles."""
        rng = np.random.default_rng(seed)
        maps = []
        for _ in HEAD_NAMES:
            w = np.eye(dim) + scale * rng.standard_normal((dim, dim))
            b = scale * rng.standard_normal(dim)
            maps.append(AffineMap(w, b))
        return cls(*maps)

    def copy(self) -> "ProjectionHeads":
        return ProjectionHeads(*(getattr(self, n).copy() for n in HEAD_NAMES))

    def check_dimension(self, dim: int, what: str = "input") -> None:
        if dim != self.dimension:
            raise ShapeError(
                f"{what} dimension {dim} does not match projection head dimension {self.dimension}"
            )


class FusionMode(str, Enum):
    LOG_ON_SENTENCE = "log_on_sentence"
    LOG_ON_WORD = "log_on_word"
    PLAIN_SUM = "plain_sum"
    SENTENCE_ONLY = "sentence_only"
    WORD_ONLY = "word_only"
    LOG_BOTH = "log_both"


@dataclass(frozen=True)
class FusionConfig:
    mode: FusionMode = FusionMode.LOG_ON_SENTENCE
    epsilon: float = 1e-6

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", FusionMode(self.mode))
        if not 0.0 < self.epsilon < 1.0:
            raise ContractError(f"fusion epsilon must lie in (0, 1), got {self.epsilon}")


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize the last axis; degenerate rows become all zeros."""
    norms = np.sqrt(np.add.reduce(x * x, axis=-1, keepdims=True))
    degenerate = norms < DEGENERATE_NORM
    if not degenerate.any():
        return x / norms
    return np.where(degenerate, 0.0, x / np.where(degenerate, 1.0, norms))


def sentence_similarity(q: np.ndarray, s: np.ndarray, heads: ProjectionHeads) -> float:
    """Cosine of ``f_q(q)`` and ``f_v(s)``; 0 when either projection degenerates."""
    heads.check_dimension(q.shape[-1], "query sentence")
    heads.check_dimension(s.shape[-1], "summary sentence")
    u = normalize_rows(heads.f_q(q))
    v = normalize_rows(heads.f_v(s))
    return float(np.clip(u @ v, -1.0, 1.0))


def word_similarity_matrix(q: np.ndarray, s: np.ndarray, heads: ProjectionHeads) -> np.ndarray:
    """Pairwise cosines between projected query rows and summary rows, shape (N_l, N_v)."""
    heads.check_dimension(q.shape[-1], "query token")
    heads.check_dimension(s.shape[-1], "summary token")
    u = normalize_rows(heads.g_q(np.atleast_2d(q)))
    v = normalize_rows(heads.g_v(np.atleast_2d(s)))
    return np.clip(u @ v.T, -1.0, 1.0)


def maxpool_relevance(m: np.ndarray) -> float:
    if m.size == 0:
        raise ContractError("max-pool over an empty similarity matrix")
    return float(m.max())


def _log_clamped(x: float, epsilon: float) -> float:
    return math.log(min(max(x, epsilon), 1.0))


def fuse_scores(word_score: float, sent_score: float, cfg: FusionConfig = FusionConfig()) -> float:
    """Combine word- and sentence-level scores; log arguments are clamped to [eps, 1]."""
    mode, eps = cfg.mode, cfg.epsilon
    if mode is FusionMode.LOG_ON_SENTENCE:
        return word_score + _log_clamped(sent_score, eps)
    if mode is FusionMode.LOG_ON_WORD:
        return _log_clamped(word_score, eps) + sent_score
    if mode is FusionMode.PLAIN_SUM:
        return word_score + sent_score
    if mode is FusionMode.SENTENCE_ONLY:
        return sent_score
    if mode is FusionMode.WORD_ONLY:
        return word_score
    return _log_clamped(word_score, eps) + _log_clamped(sent_score, eps)

