"""
Contrastive training of the word-level projection heads.

Query and summary features are mean-pooled token embeddings pushed through
``g_q`` and ``g_v``. The loss is a batch softmax over cosines with no
temperature. Two variants are available:

* ``as_written``: negatives are the *other* samples' own pair cosines,
  ``cos(q_b, s_b)`` for ``b != i``.
* ``standard_infonce``: negatives are cross pairs ``cos(q_i, s_b)``.

Gradients are derived by hand (no autodiff) and checked against central
finite differences in the test suite.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .embedding import ChannelEmbedding, EmbedderSpec, embed_tokens, mean_pool
from .errors import ContractError, ShapeError, TrainingError
from .ranker import ChannelKind, CorpusItem
from .similarity import DEGENERATE_NORM, AffineMap, ProjectionHeads

logger = logging.getLogger(__name__)

CE_LOG_FLOOR = 1e-12


class LossMode(str, Enum):
    AS_WRITTEN = "as_written"
    STANDARD_INFONCE = "standard_infonce"


class OptimizerKind(str, Enum):
    ADAMW = "adamw"
    SGD = "sgd"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 100
    epochs: int = 20
    optimizer: OptimizerKind = OptimizerKind.ADAMW
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    loss_mode: LossMode = LossMode.AS_WRITTEN
    seed: int = 0

    def __post_init__(self) -> None:
        self.optimizer = OptimizerKind(self.optimizer)
        self.loss_mode = LossMode(self.loss_mode)
        if not self.learning_rate >= 0.0:
            raise ContractError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class ContrastiveBatch:
    """Paired raw (pre-projection) features, one row per sample."""

    queries: np.ndarray  # (N, d)
    summaries: np.ndarray  # (N, d)

    def __post_init__(self) -> None:
        self.queries = np.atleast_2d(np.asarray(self.queries, dtype=np.float64))
        self.summaries = np.atleast_2d(np.asarray(self.summaries, dtype=np.float64))
        if self.queries.shape != self.summaries.shape:
            raise ShapeError(
                f"query features {self.queries.shape} and summary features "
                f"{self.summaries.shape} must have the same shape"
            )
        if len(self.queries) == 0:
            raise ContractError("contrastive batch needs at least one pair")
        if not (np.all(np.isfinite(self.queries)) and np.all(np.isfinite(self.summaries))):
            raise ContractError("contrastive batch contains non-finite features")

    def __len__(self) -> int:
        return len(self.queries)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> "ContrastiveBatch":
        return cls(np.array([q for q, _ in pairs]), np.array([s for _, s in pairs]))

    def subset(self, idx: np.ndarray) -> "ContrastiveBatch":
        return ContrastiveBatch(self.queries[idx], self.summaries[idx])

    def project(self, heads: ProjectionHeads) -> "ContrastiveBatch":
        return ContrastiveBatch(heads.g_q(self.queries), heads.g_v(self.summaries))


@dataclass
class HeadGradient:
    """Gradient of the loss w.r.t. the word-level heads."""

    g_q: AffineMap
    g_v: AffineMap

    def __add__(self, other: "HeadGradient") -> "HeadGradient":
        return HeadGradient(
            AffineMap(self.g_q.weight + other.g_q.weight, self.g_q.bias + other.g_q.bias),
            AffineMap(self.g_v.weight + other.g_v.weight, self.g_v.bias + other.g_v.bias),
        )

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [self.g_q.weight.ravel(), self.g_q.bias, self.g_v.weight.ravel(), self.g_v.bias]
        )


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < DEGENERATE_NORM):
        bad = int(np.argmin(norms))
        raise ContractError(f"feature row {bad} has zero norm; cosine is undefined")
    return x / norms[:, None], norms


def _anchor_terms(cos: np.ndarray, anchor: int, mode: LossMode) -> tuple[float, np.ndarray]:
    """Positive logit and negative logits for one anchor."""
    n = cos.shape[0]
    others = np.arange(n) != anchor
    if mode is LossMode.AS_WRITTEN:
        return cos[anchor, anchor], np.diag(cos)[others]
    return cos[anchor, anchor], cos[anchor, others]


def _anchor_loss(positive: float, negatives: np.ndarray) -> float:
    # -ln(e^p / (e^p + sum e^n)) == ln(1 + sum e^(n - p)); exact 0 with no negatives
    return math.log1p(float(np.exp(negatives - positive).sum()))


def contrastive_loss(batch: ContrastiveBatch, anchor_index: int, mode: LossMode | str = LossMode.AS_WRITTEN) -> float:
    """Loss for one anchor over features taken as-is (already projected)."""
    mode = LossMode(mode)
    if not 0 <= anchor_index < len(batch):
        raise ContractError(f"anchor index {anchor_index} outside batch of {len(batch)}")
    q, _ = _unit_rows(batch.queries)
    s, _ = _unit_rows(batch.summaries)
    cos = q @ s.T
    return _anchor_loss(*_anchor_terms(cos, anchor_index, mode))


def batch_contrastive_loss(
    batch: ContrastiveBatch, heads: ProjectionHeads, mode: LossMode | str = LossMode.AS_WRITTEN
) -> float:
    """Mean anchor loss after projecting raw features through ``g_q``/``g_v``."""
    mode = LossMode(mode)
    projected = batch.project(heads)
    q, _ = _unit_rows(projected.queries)
    s, _ = _unit_rows(projected.summaries)
    cos = q @ s.T
    n = len(batch)
    return sum(_anchor_loss(*_anchor_terms(cos, i, mode)) for i in range(n)) / n


def _dloss_dcos(cos: np.ndarray, anchor: int, mode: LossMode) -> np.ndarray:
    """d L_anchor / d cos, as a full (N, N) matrix."""
    n = cos.shape[0]
    grad = np.zeros_like(cos)
    if mode is LossMode.AS_WRITTEN:
        logits = np.diag(cos)
        p = np.exp(logits - logits.max())
        p /= p.sum()
        grad[np.arange(n), np.arange(n)] = p
    else:
        row = cos[anchor]
        p = np.exp(row - row.max())
        p /= p.sum()
        grad[anchor] = p
    grad[anchor, anchor] -= 1.0
    return grad


def contrastive_loss_and_grad(
    batch: ContrastiveBatch,
    heads: ProjectionHeads,
    mode: LossMode | str = LossMode.AS_WRITTEN,
    anchor_index: int | None = None,
) -> tuple[float, HeadGradient]:
    """Loss and its gradient w.r.t. ``g_q``/``g_v``.

    With ``anchor_index=None`` both refer to the mean over all anchors in the
    batch; otherwise to that single anchor's loss.
    """
    mode = LossMode(mode)
    n = len(batch)
    u = heads.g_q(batch.queries)
    v = heads.g_v(batch.summaries)
    uh, un = _unit_rows(u)
    vh, vn = _unit_rows(v)
    cos = uh @ vh.T

    if anchor_index is None:
        anchors = range(n)
        scale = 1.0 / n
    else:
        if not 0 <= anchor_index < n:
            raise ContractError(f"anchor index {anchor_index} outside batch of {n}")
        anchors = [anchor_index]
        scale = 1.0

    loss = 0.0
    g_cos = np.zeros_like(cos)
    for i in anchors:
        loss += _anchor_loss(*_anchor_terms(cos, i, mode))
        g_cos += _dloss_dcos(cos, i, mode)
    loss *= scale
    g_cos *= scale

    # d cos(a,b) / d u_a = (vh_b - cos_ab uh_a) / |u_a|, symmetric for v_b
    gc = g_cos * cos
    d_u = (g_cos @ vh - gc.sum(axis=1)[:, None] * uh) / un[:, None]
    d_v = (g_cos.T @ uh - gc.sum(axis=0)[:, None] * vh) / vn[:, None]

    grad = HeadGradient(
        AffineMap(d_u.T @ batch.queries, d_u.sum(axis=0)),
        AffineMap(d_v.T @ batch.summaries, d_v.sum(axis=0)),
    )
    return loss, grad


def contrastive_loss_grad(
    batch: ContrastiveBatch,
    anchor_index: int | None,
    heads: ProjectionHeads,
    mode: LossMode | str = LossMode.AS_WRITTEN,
) -> HeadGradient:
    return contrastive_loss_and_grad(batch, heads, mode, anchor_index)[1]


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


def _params(heads: ProjectionHeads) -> list[np.ndarray]:
    return [heads.g_q.weight, heads.g_q.bias, heads.g_v.weight, heads.g_v.bias]


def _grads(grad: HeadGradient) -> list[np.ndarray]:
    return [grad.g_q.weight, grad.g_q.bias, grad.g_v.weight, grad.g_v.bias]


class SGD:
    def __init__(self, params: list[np.ndarray], lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads: list[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            p -= self.lr * g


class AdamW:
    """Adam with decoupled weight decay, updating arrays in place."""

    def __init__(
        self,
        params: list[np.ndarray],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p -= self.lr * self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _make_optimizer(cfg: TrainConfig, params: list[np.ndarray]):
    if cfg.optimizer is OptimizerKind.SGD:
        return SGD(params, cfg.learning_rate)
    return AdamW(
        params,
        cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    heads: ProjectionHeads
    history: list[float] = field(default_factory=list)


def build_batch(
    dataset: Sequence[tuple[str | ChannelEmbedding, str]],
    corpus: Sequence[CorpusItem],
    embedder: EmbedderSpec,
    channel: ChannelKind = ChannelKind.IMAGE_QUESTION,
) -> ContrastiveBatch:
    """Mean-pooled query tokens paired with the positive item's channel tokens.

    Signed one-hot rows can cancel exactly under mean pooling. Such pairs have
    no defined cosine, so they are dropped with a warning.
    """
    by_id = {item.item_id: item for item in corpus}
    queries, summaries = [], []
    dropped = 0
    for query, item_id in dataset:
        if item_id not in by_id:
            raise ContractError(f"positive item {item_id!r} is not in the corpus")
        tokens = query.tokens if isinstance(query, ChannelEmbedding) else embed_tokens(query, embedder)
        q = mean_pool(tokens)
        s = mean_pool(by_id[item_id].channel(channel).tokens)
        if np.linalg.norm(q) < DEGENERATE_NORM or np.linalg.norm(s) < DEGENERATE_NORM:
            dropped += 1
            continue
        queries.append(q)
        summaries.append(s)
    if dropped:
        logger.warning("dropped %d of %d training pairs with zero-norm pooled features", dropped, len(dataset))
    if not queries:
        raise ContractError("every training pair has a zero-norm pooled feature")
    return ContrastiveBatch(np.array(queries), np.array(summaries))


def train_heads(
    dataset: Sequence[tuple[str | ChannelEmbedding, str]],
    corpus: Sequence[CorpusItem],
    cfg: TrainConfig = TrainConfig(),
    heads: ProjectionHeads | None = None,
    embedder: EmbedderSpec | None = None,
    channel: ChannelKind = ChannelKind.IMAGE_QUESTION,
) -> TrainResult:
    """Fit ``g_q``/``g_v`` on (query, positive item id) pairs.

    ``heads`` defaults to identity maps and is not modified; a trained copy is
    returned with one mean loss per epoch. Only the word-level heads receive
    gradients, the sentence-level ``f_*`` heads are carried through unchanged.
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    if not corpus:
        raise ContractError("training corpus is empty")
    dim = corpus[0].channel(channel).sentence.shape[0]
    embedder = embedder or EmbedderSpec(dimension=dim)
    heads = heads.copy() if heads is not None else ProjectionHeads.identity(dim)
    heads.check_dimension(dim, "corpus")

    data = build_batch(dataset, corpus, embedder, channel)
    optimizer = _make_optimizer(cfg, _params(heads))
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    history: list[float] = []

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size), start=1):
            idx = order[start : start + cfg.batch_size]
            loss, grad = contrastive_loss_and_grad(data.subset(idx), heads, cfg.loss_mode)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad.flat())):
                raise TrainingError(epoch, step, loss)
            optimizer.step(_grads(grad))
            total += loss * len(idx)
        history.append(total / n)
        logger.info("epoch %d mean loss %.6f", epoch, history[-1])
    return TrainResult(heads, history)


# ---------------------------------------------------------------------------
# Answer cross-entropy
# ---------------------------------------------------------------------------


@dataclass
class AnswerDistribution:
    """Per-token answer probabilities and one-hot targets, both (L, |W|)."""

    probs: np.ndarray
    target: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.probs.shape != self.target.shape or self.probs.ndim != 2:
            raise ShapeError(
                f"probs {self.probs.shape} and target {self.target.shape} must share a 2-d shape"
            )
        if np.any(self.probs < 0) or not np.allclose(self.probs.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ContractError("each probability row must be non-negative and sum to 1")
        if not (np.all((self.target == 0) | (self.target == 1)) and np.all(self.target.sum(axis=1) == 1)):
            raise ContractError("each target row must be one-hot")


def vqa_cross_entropy(samples: Sequence[AnswerDistribution]) -> float:
    """Token cross-entropy normalized by N * L * |W| (the vocabulary factor included)."""
    if not samples:
        raise ContractError("cross-entropy needs at least one sample")
    shape = samples[0].probs.shape
    total = 0.0
    for sample in samples:
        if sample.probs.shape != shape:
            raise ShapeError(f"sample shape {sample.probs.shape} differs from {shape}")
        total += float(np.sum(sample.target * np.log(np.maximum(sample.probs, CE_LOG_FLOOR))))
    length, vocab = shape
    return -total / (len(samples) * length * vocab) + 0.0
