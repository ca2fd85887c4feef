"""
Per-channel scoring, top-K ranking and candidate union.

Every corpus item carries three summary channels. A query is scored against
each enabled channel independently, each channel keeps its own top-K, and
the final candidate set is the union of those lists.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedding import ChannelEmbedding
from .errors import ContractError, CorpusIntegrityError, ShapeError
from .similarity import FusionConfig, ProjectionHeads, fuse_scores, normalize_rows

logger = logging.getLogger(__name__)


class ChannelKind(str, Enum):
    IMAGE_QUESTION = "image_question"
    SCENE_QUESTION = "scene_question"
    DESCRIPTION = "description"


CHANNEL_KINDS: tuple[ChannelKind, ...] = tuple(ChannelKind)

# Generation prompts for each channel, kept verbatim so corpora produced by a
# real multimodal LLM share the file schema with synthetic ones.
CHANNEL_PROMPTS: dict[ChannelKind, str] = {
    ChannelKind.IMAGE_QUESTION: "Generate a question based on the image:",
    ChannelKind.SCENE_QUESTION: "Generate the scene information based on the image:",
    ChannelKind.DESCRIPTION: "Generate a detailed description based on the image:",
}


@dataclass
class SummaryChannel:
    kind: ChannelKind
    text: str
    embedding: ChannelEmbedding

    @property
    def sentence(self) -> np.ndarray:
        return self.embedding.sentence

    @property
    def tokens(self) -> np.ndarray:
        return self.embedding.tokens


@dataclass
class CorpusItem:
    """A retrievable image, represented only by its summary channels."""

    item_id: str
    channels: dict[ChannelKind, SummaryChannel]

    def channel(self, kind: ChannelKind) -> SummaryChannel:
        try:
            return self.channels[kind]
        except KeyError:
            raise CorpusIntegrityError(
                f"item {self.item_id!r} has no {ChannelKind(kind).value} channel"
            ) from None


@dataclass(frozen=True)
class ScoredCandidate:
    item_id: str
    kind: ChannelKind
    word_score: float
    sentence_score: float
    fused_score: float


@dataclass
class CandidateSet:
    """Ordered, duplicate-free union of per-channel top-K lists."""

    ids: list[str]
    provenance: dict[str, tuple[ChannelKind, ...]]
    scores: dict[str, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def to_dict(self) -> dict:
        return {
            "ids": list(self.ids),
            "provenance": {i: [k.value for k in self.provenance[i]] for i in self.ids},
            "scores": {i: self.scores[i] for i in self.ids if i in self.scores},
        }


def parse_channel_mask(mask: Iterable[ChannelKind | str] | None) -> tuple[ChannelKind, ...]:
    """Canonicalize a channel mask; ``None`` means all channels."""
    if mask is None:
        return CHANNEL_KINDS
    kinds = {ChannelKind(k) for k in mask}
    if not kinds:
        raise ContractError("channel mask must enable at least one channel")
    return tuple(k for k in CHANNEL_KINDS if k in kinds)


def _project_query(query: ChannelEmbedding, heads: ProjectionHeads) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalized ``f_q`` sentence and ``g_q`` token projections."""
    heads.check_dimension(query.dimension, "query")
    return normalize_rows(heads.f_q(query.sentence)), normalize_rows(heads.g_q(query.tokens))


def _score_item(
    projected: tuple[np.ndarray, np.ndarray], item: CorpusItem, kind: ChannelKind, heads: ProjectionHeads
) -> tuple[float, float]:
    # same arithmetic as sentence_similarity / word_similarity_matrix + max-pool,
    # with the query side projected once per channel instead of once per item
    qs, qt = projected
    channel = item.channel(kind)
    if channel.sentence.shape[-1] != qs.shape[-1]:
        raise ShapeError(
            f"item {item.item_id!r} {kind.value} dimension {channel.sentence.shape[-1]} "
            f"does not match query dimension {qs.shape[-1]}"
        )
    vs = normalize_rows(heads.f_v(channel.sentence))
    sent = min(max(float(qs @ vs), -1.0), 1.0)
    vt = normalize_rows(heads.g_v(channel.tokens))
    # clipping is monotone, so clip(max(m)) == max(clip(m))
    word = min(max(float((qt @ vt.T).max()), -1.0), 1.0)
    return word, sent


def channel_raw_scores(
    query: ChannelEmbedding,
    corpus: Sequence[CorpusItem],
    kind: ChannelKind,
    heads: ProjectionHeads,
    workers: int = 1,
) -> list[tuple[float, float]]:
    """``(word, sentence)`` score per item, in corpus order.

    With ``workers > 1`` items are scored in contiguous chunks on a thread
    pool; each item goes through the same kernel either way, so the result
    does not depend on ``workers``.
    """
    if not corpus:
        raise ContractError("cannot score an empty corpus")
    kind = ChannelKind(kind)
    projected = _project_query(query, heads)
    if workers <= 1 or len(corpus) < 2 * workers:
        return [_score_item(projected, item, kind, heads) for item in corpus]

    size = -(-len(corpus) // workers)
    chunks = [corpus[i : i + size] for i in range(0, len(corpus), size)]

    def run(chunk: Sequence[CorpusItem]) -> list[tuple[float, float]]:
        return [_score_item(projected, item, kind, heads) for item in chunk]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(run, chunks))
    return [pair for part in parts for pair in part]


def score_channel(
    query: ChannelEmbedding,
    corpus: Sequence[CorpusItem],
    kind: ChannelKind,
    heads: ProjectionHeads,
    cfg: FusionConfig = FusionConfig(),
    workers: int = 1,
) -> list[ScoredCandidate]:
    kind = ChannelKind(kind)
    raw = channel_raw_scores(query, corpus, kind, heads, workers=workers)
    return [
        ScoredCandidate(item.item_id, kind, word, sent, fuse_scores(word, sent, cfg))
        for item, (word, sent) in zip(corpus, raw)
    ]


def topk_candidates(scores: Sequence[ScoredCandidate], k: int) -> list[str]:
    """Ids of the ``k`` best fused scores; ties go to the smaller item id."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    ranked = sorted(scores, key=lambda c: (-c.fused_score, c.item_id))
    return [c.item_id for c in ranked[:k]]


def union_candidates(
    channel_lists: Mapping[ChannelKind, Sequence[str]],
    scores: Mapping[ChannelKind, Mapping[str, float]] | None = None,
) -> CandidateSet:
    """Merge per-channel ranked id lists into one candidate set.

    With ``scores`` the union is ordered by each id's best fused score across
    the channels that retrieved it. Without scores, by best rank position.
    Ties fall back to ascending item id in both cases.
    """
    provenance: dict[str, list[ChannelKind]] = {}
    best_score: dict[str, float] = {}
    best_rank: dict[str, int] = {}
    for kind in CHANNEL_KINDS:
        if kind not in channel_lists:
            continue
        ids = channel_lists[kind]
        if len(set(ids)) != len(ids):
            raise ContractError(f"{kind.value} candidate list contains duplicate ids")
        for rank, item_id in enumerate(ids):
            provenance.setdefault(item_id, []).append(kind)
            best_rank[item_id] = min(rank, best_rank.get(item_id, rank))
            if scores is not None:
                s = scores[kind][item_id]
                if item_id not in best_score or s > best_score[item_id]:
                    best_score[item_id] = s

    if scores is not None:
        order = sorted(provenance, key=lambda i: (-best_score[i], i))
    else:
        order = sorted(provenance, key=lambda i: (best_rank[i], i))
    return CandidateSet(
        ids=order,
        provenance={i: tuple(provenance[i]) for i in order},
        scores=best_score,
    )


def retrieve(
    query: ChannelEmbedding,
    corpus: Sequence[CorpusItem],
    heads: ProjectionHeads,
    cfg: FusionConfig = FusionConfig(),
    k: int = 5,
    channel_mask: Iterable[ChannelKind | str] | None = None,
    workers: int = 1,
) -> CandidateSet:
    """Score, rank and union over the enabled channels."""
    kinds = parse_channel_mask(channel_mask)
    lists: dict[ChannelKind, list[str]] = {}
    fused: dict[ChannelKind, dict[str, float]] = {}
    for kind in kinds:
        scored = score_channel(query, corpus, kind, heads, cfg, workers=workers)
        lists[kind] = topk_candidates(scored, k)
        fused[kind] = {c.item_id: c.fused_score for c in scored}
    return union_candidates(lists, fused)


def explain(
    query: ChannelEmbedding,
    corpus: Sequence[CorpusItem],
    heads: ProjectionHeads,
    cfg: FusionConfig,
    candidates: CandidateSet,
    channel_mask: Iterable[ChannelKind | str] | None = None,
) -> dict[str, list[ScoredCandidate]]:
    """Per-channel score breakdown for every id in ``candidates``."""
    kinds = parse_channel_mask(channel_mask)
    by_id = {item.item_id: item for item in corpus}
    projected = _project_query(query, heads)
    out: dict[str, list[ScoredCandidate]] = {}
    for item_id in candidates.ids:
        rows = []
        for kind in kinds:
            word, sent = _score_item(projected, by_id[item_id], kind, heads)
            rows.append(ScoredCandidate(item_id, kind, word, sent, fuse_scores(word, sent, cfg)))
        out[item_id] = rows
    return out
