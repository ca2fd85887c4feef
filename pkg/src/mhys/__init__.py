"""Hypothetical-summary retrieval: three summary channels per item, sentence +
word level similarity with log fusion, per-channel top-K union, and
contrastive training of the projection heads."""

from .corpus_io import (
    CorpusFile,
    QueryRecord,
    SyntheticSpec,
    generate_synthetic,
    load_corpus,
    load_heads,
    load_queries,
    save_corpus,
    save_heads,
    save_queries,
)
from .embedding import EmbedderSpec, embed_sentence, embed_text, embed_tokens, tokenize
from .evaluation import AblationGrid, MetricReport, evaluate, mrr, recall_at_k, run_ablation
from .ranker import (
    CandidateSet,
    ChannelKind,
    CorpusItem,
    ScoredCandidate,
    retrieve,
    score_channel,
    topk_candidates,
    union_candidates,
)
from .similarity import (
    FusionConfig,
    FusionMode,
    ProjectionHeads,
    fuse_scores,
    maxpool_relevance,
    sentence_similarity,
    word_similarity_matrix,
)
from .training import (
    AnswerDistribution,
    ContrastiveBatch,
    LossMode,
    TrainConfig,
    contrastive_loss,
    contrastive_loss_grad,
    train_heads,
    vqa_cross_entropy,
)

__version__ = "0.1.0"
