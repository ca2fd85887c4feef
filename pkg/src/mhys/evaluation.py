"""
Retrieval metrics and ablation grids.

A cell of the grid is one (channel mask, fusion mode, K) configuration run
over every query. Metrics are computed on the candidate set returned by
:func:`mhys.ranker.retrieve`, i.e. the union of the per-channel top-K lists:

* recall@K    = |candidates & gold| / |gold|  (1.0 when gold is empty)
* precision@K = |candidates & gold| / |candidates|
* MRR         = 1 / rank of the first gold id in candidate order, 0 if none
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .embedding import ChannelEmbedding, EmbedderSpec, embed_text
from .ranker import (
    CHANNEL_KINDS,
    CandidateSet,
    ChannelKind,
    CorpusItem,
    ScoredCandidate,
    channel_raw_scores,
    parse_channel_mask,
    topk_candidates,
    union_candidates,
)
from .similarity import FusionConfig, FusionMode, ProjectionHeads, fuse_scores

logger = logging.getLogger(__name__)

REPORT_NOTE = (
    "retrieval metrics stand in for QA accuracy (no answer decoder); "
    "recall is defined as 1.0 for queries without gold items"
)


def recall_at_k(ranked: Sequence[str], gold: Iterable[str], k: int) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    gold = set(gold)
    if not gold:
        return 1.0
    return len(set(ranked[:k]) & gold) / len(gold)


def precision_at_k(ranked: Sequence[str], gold: Iterable[str], k: int) -> float:
    """Hits in the top ``k`` divided by how many ids were actually returned there."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    top = ranked[:k]
    if not top:
        return 0.0
    return len(set(top) & set(gold)) / len(top)


def mrr(ranked: Sequence[str], gold: Iterable[str]) -> float:
    gold = set(gold)
    for rank, item_id in enumerate(ranked, 1):
        if item_id in gold:
            return 1.0 / rank
    return 0.0


def mask_label(mask: Iterable[ChannelKind]) -> str:
    return "+".join(k.value for k in parse_channel_mask(mask))


@dataclass
class QueryMetrics:
    query_id: str
    recall: float
    precision: float
    reciprocal_rank: float
    retrieved: list[str]


@dataclass
class MetricReport:
    mask: tuple[ChannelKind, ...]
    mode: FusionMode
    k: int
    per_query: list[QueryMetrics] = field(default_factory=list)

    @property
    def recall(self) -> float:
        return _mean([m.recall for m in self.per_query])

    @property
    def precision(self) -> float:
        return _mean([m.precision for m in self.per_query])

    @property
    def mrr(self) -> float:
        return _mean([m.reciprocal_rank for m in self.per_query])

    def to_dict(self, per_query: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "mask": mask_label(self.mask),
            "fusion": self.mode.value,
            "k": self.k,
            "queries": len(self.per_query),
            "recall": self.recall,
            "precision": self.precision,
            "mrr": self.mrr,
        }
        if per_query:
            out["per_query"] = [
                {
                    "query_id": m.query_id,
                    "recall": m.recall,
                    "precision": m.precision,
                    "reciprocal_rank": m.reciprocal_rank,
                    "retrieved": m.retrieved,
                }
                for m in self.per_query
            ]
        return out


def _mean(values: list[float]) -> float:
    # ordered reduction so results do not depend on scheduling
    total = 0.0
    for v in values:
        total += v
    return total / len(values) if values else 0.0


def query_metrics(query_id: str, candidates: CandidateSet, gold: Sequence[str]) -> QueryMetrics:
    ranked = candidates.ids
    depth = max(len(ranked), 1)
    return QueryMetrics(
        query_id,
        recall_at_k(ranked, gold, depth),
        precision_at_k(ranked, gold, depth),
        mrr(ranked, gold),
        list(ranked),
    )


@dataclass
class AblationGrid:
    masks: list[tuple[ChannelKind, ...]]
    modes: list[FusionMode]
    ks: list[int]
    cells: dict[tuple[tuple[ChannelKind, ...], FusionMode, int], MetricReport]

    def cell(self, mask: Iterable[ChannelKind | str], mode: FusionMode | str, k: int) -> MetricReport:
        return self.cells[(parse_channel_mask(mask), FusionMode(mode), k)]

    def rows(self) -> list[MetricReport]:
        return [self.cells[key] for key in itertools.product(self.masks, self.modes, self.ks)]


def _query_cells(
    query: ChannelEmbedding,
    gold: Sequence[str],
    query_id: str,
    corpus: Sequence[CorpusItem],
    heads: ProjectionHeads,
    masks: list[tuple[ChannelKind, ...]],
    modes: list[FusionMode],
    ks: list[int],
    epsilon: float,
) -> dict[tuple, QueryMetrics]:
    needed = sorted({k for m in masks for k in m}, key=CHANNEL_KINDS.index)
    raw = {kind: channel_raw_scores(query, corpus, kind, heads) for kind in needed}
    out = {}
    for mode in modes:
        cfg = FusionConfig(mode, epsilon)
        scored = {
            kind: [
                ScoredCandidate(item.item_id, kind, w, s, fuse_scores(w, s, cfg))
                for item, (w, s) in zip(corpus, raw[kind])
            ]
            for kind in needed
        }
        fused = {kind: {c.item_id: c.fused_score for c in scored[kind]} for kind in needed}
        for k in ks:
            top = {kind: topk_candidates(scored[kind], k) for kind in needed}
            for mask in masks:
                cands = union_candidates({kind: top[kind] for kind in mask}, fused)
                out[(mask, mode, k)] = query_metrics(query_id, cands, gold)
    return out


def run_ablation(
    corpus: Sequence[CorpusItem],
    queries: Sequence[Any],
    heads: ProjectionHeads,
    masks: Iterable[Iterable[ChannelKind | str]] = (CHANNEL_KINDS,),
    modes: Iterable[FusionMode | str] = (FusionMode.LOG_ON_SENTENCE,),
    ks: Iterable[int] = (5,),
    embedder: EmbedderSpec | None = None,
    epsilon: float = 1e-6,
    workers: int = 1,
) -> AblationGrid:
    """Evaluate every (mask, mode, K) cell over all queries.

    ``queries`` are :class:`mhys.corpus_io.QueryRecord`-like objects with
    ``query_id``, ``question`` and ``relevant``. Raw channel scores are computed
    once per query and shared by all cells, which leaves each cell identical
    to a standalone ``retrieve`` call with the same settings.
    """
    masks = list(dict.fromkeys(parse_channel_mask(m) for m in masks))
    modes = list(dict.fromkeys(FusionMode(m) for m in modes))
    ks = list(dict.fromkeys(int(k) for k in ks))
    if not (masks and modes and ks):
        raise ValueError("ablation axes must be non-empty")
    if any(k < 1 for k in ks):
        raise ValueError("all K values must be >= 1")
    if embedder is None:
        embedder = EmbedderSpec(dimension=heads.dimension)

    def run(q) -> dict[tuple, QueryMetrics]:
        emb = embed_text(q.question, embedder)
        return _query_cells(emb, q.relevant, q.query_id, corpus, heads, masks, modes, ks, epsilon)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_query = list(pool.map(run, queries))
    else:
        per_query = [run(q) for q in queries]

    cells = {}
    for key in itertools.product(masks, modes, ks):
        cells[key] = MetricReport(key[0], key[1], key[2], [pq[key] for pq in per_query])
    return AblationGrid(masks, modes, ks, cells)


def evaluate(
    corpus: Sequence[CorpusItem],
    queries: Sequence[Any],
    heads: ProjectionHeads,
    cfg: FusionConfig = FusionConfig(),
    k: int = 5,
    channel_mask: Iterable[ChannelKind | str] | None = None,
    embedder: EmbedderSpec | None = None,
) -> MetricReport:
    """Single-configuration evaluation."""
    mask = parse_channel_mask(channel_mask)
    grid = run_ablation(corpus, queries, heads, [mask], [cfg.mode], [k], embedder, cfg.epsilon)
    return grid.cell(mask, cfg.mode, k)


def format_table(reports: Sequence[MetricReport]) -> str:
    header = f"{'mask':<44} {'fusion':<16} {'K':>3} {'recall':>8} {'prec':>8} {'mrr':>8}"
    lines = [f"# {REPORT_NOTE}", header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{mask_label(r.mask):<44} {r.mode.value:<16} {r.k:>3} "
            f"{r.recall:>8.4f} {r.precision:>8.4f} {r.mrr:>8.4f}"
        )
    return "\n".join(lines)
