"""Acceptance criteria, one test per criterion.

Each test records a single ``PASS``/``FAIL`` line with its measurements;
``tests/conftest.py`` prints them in the terminal summary. Runtime limits are
asserted alongside correctness.
"""

import itertools
import json
import math
import random
import sys
import time

import numpy as np
import pytest

import oracles
from mhys.corpus_io import SyntheticSpec, generate_synthetic, make_item
from mhys.embedding import EmbedderSpec, embed_text
from mhys.evaluation import run_ablation
from mhys.ranker import CHANNEL_KINDS, retrieve
from mhys.similarity import (
    FusionConfig,
    FusionMode,
    ProjectionHeads,
    fuse_scores,
    maxpool_relevance,
    sentence_similarity,
    word_similarity_matrix,
)
from mhys.training import (
    AnswerDistribution,
    ContrastiveBatch,
    LossMode,
    TrainConfig,
    batch_contrastive_loss,
    contrastive_loss,
    contrastive_loss_grad,
    train_heads,
    vqa_cross_entropy,
)

ALL_MASKS = [
    tuple(c for c in CHANNEL_KINDS if c in combo)
    for r in (1, 2, 3)
    for combo in itertools.combinations(CHANNEL_KINDS, r)
]


@pytest.fixture
def report(record_property):
    """Record one PASS/FAIL line (shown in the terminal summary), then assert."""

    def _report(name, ok, detail, elapsed=None, limit=None):
        timing = ""
        if elapsed is not None:
            timing = f" [{elapsed:.2f}s" + (f" / limit {limit:.0f}s]" if limit else "]")
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}{timing}"
        record_property("acceptance", line)
        assert ok, line

    return _report


def test_kernel_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {"sentence": 0.0, "word": 0.0, "fuse": 0.0}
    maxpool_exact = True
    for i in range(1000):
        d = int(rng.integers(2, 13))
        heads = ProjectionHeads.random(d, seed=i)
        q, s = rng.standard_normal(d), rng.standard_normal(d)
        if i % 97 == 0:
            heads.f_q.weight[:] = 0.0
            heads.f_q.bias[:] = 0.0
        got = sentence_similarity(q, s, heads)
        want = oracles.sentence_similarity(q.tolist(), s.tolist(), heads)
        worst["sentence"] = max(worst["sentence"], abs(got - want))

        a = rng.standard_normal((int(rng.integers(1, 6)), d))
        b = rng.standard_normal((int(rng.integers(1, 6)), d))
        m = word_similarity_matrix(a, b, heads)
        ref = oracles.word_matrix(a.tolist(), b.tolist(), heads)
        worst["word"] = max(worst["word"], float(np.abs(m - np.array(ref)).max()))
        maxpool_exact &= maxpool_relevance(m) == oracles.nested_max(m.tolist())

        w, sv = rng.uniform(-1, 1, size=2)
        eps = float(10.0 ** rng.uniform(-8, -2))
        for mode in FusionMode:
            diff = abs(fuse_scores(w, sv, FusionConfig(mode, eps)) - oracles.fuse(w, sv, mode.value, eps))
            worst["fuse"] = max(worst["fuse"], diff)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-9 and maxpool_exact and elapsed < 5.0
    detail = ", ".join(f"{k} max|err|={v:.1e}" for k, v in worst.items())
    report("kernel oracle equivalence", ok, f"{detail}, maxpool exact={maxpool_exact}", elapsed, 5)


def test_end_to_end_ranking_oracle(report):
    corpus, queries = generate_synthetic(SyntheticSpec(seed=13, corpus_size=200))
    spec = EmbedderSpec()
    head_sets = {"identity": ProjectionHeads.identity(64), "random": ProjectionHeads.random(64, seed=13, scale=0.1)}
    chosen = [queries[0], queries[17], queries[33]]
    start = time.perf_counter()
    checked = mismatches = 0
    for heads in head_sets.values():
        for query in chosen:
            raw = oracles.reference_raw_scores(query.question, corpus.items, heads, spec)
            emb = embed_text(query.question, spec)
            for mode, mask, k in itertools.product(FusionMode, ALL_MASKS, (1, 3, 5, 10)):
                got = retrieve(emb, corpus.items, heads, FusionConfig(mode), k, mask)
                ids, prov = oracles.reference_rank(raw, mode.value, 1e-6, k, {c.value for c in mask})
                same = got.ids == ids and {i: [c.value for c in v] for i, v in got.provenance.items()} == prov
                checked += 1
                mismatches += not same
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 30.0
    report("end-to-end ranking oracle", ok, f"{checked} configurations, {mismatches} mismatches", elapsed, 30)


def _finite_difference(batch, heads, mode, step=1e-5):
    out = []
    for name in ("g_q", "g_v"):
        for part in ("weight", "bias"):
            arr = getattr(getattr(heads, name), part)
            grad = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + step
                up = batch_contrastive_loss(batch, heads, mode)
                arr[idx] = orig - step
                down = batch_contrastive_loss(batch, heads, mode)
                arr[idx] = orig
                grad[idx] = (up - down) / (2 * step)
            out.append(grad.ravel())
    return np.concatenate(out)


def test_gradient_check(report):
    start = time.perf_counter()
    worst = 0.0
    params = 0
    for d, seed, mode in itertools.product((8, 16), range(5), LossMode):
        rng = np.random.default_rng(seed)
        batch = ContrastiveBatch(rng.standard_normal((6, d)), rng.standard_normal((6, d)))
        heads = ProjectionHeads.random(d, seed=1000 + seed)
        analytic = contrastive_loss_grad(batch, None, heads, mode).flat()
        numeric = _finite_difference(batch, heads, mode)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
        params += analytic.size
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 10.0
    report("gradient check", ok, f"{params} parameters over 20 cases, max rel err {worst:.2e}", elapsed, 10)


def _recall_at5(corpus, queries, heads):
    grid = run_ablation(corpus.items, queries, heads, [CHANNEL_KINDS], ["log_on_sentence"], [5])
    return grid.cell(CHANNEL_KINDS, "log_on_sentence", 5).recall


def test_training_efficacy(report):
    corpus, queries = generate_synthetic(SyntheticSpec(seed=11, corpus_size=500, relevant_per_query=5))
    pairs = [(q.question, g) for q in queries for g in q.relevant]
    assert len(pairs) == 500
    start = time.perf_counter()
    before = _recall_at5(corpus, queries, ProjectionHeads.identity(64))
    result = train_heads(pairs, corpus.items, TrainConfig(learning_rate=1e-4, batch_size=100, epochs=20, seed=0))
    after = _recall_at5(corpus, queries, result.heads)
    elapsed = time.perf_counter() - start
    first, last = result.history[0], result.history[-1]
    ok = last < first and after >= before and elapsed < 120.0
    report(
        "training efficacy",
        ok,
        f"loss {first:.6f} -> {last:.6f}, recall@5 {before:.3f} -> {after:.3f}",
        elapsed,
        120,
    )


def test_fusion_mode_ordering(report):
    holds = 0
    rows = []
    start = time.perf_counter()
    for seed in range(10):
        corpus, queries = generate_synthetic(SyntheticSpec(seed=seed, corpus_size=200))
        grid = run_ablation(
            corpus.items, queries, ProjectionHeads.identity(64), [CHANNEL_KINDS],
            ["log_on_sentence", "sentence_only", "word_only"], [5],
        )
        fused, sent, word = (grid.cell(CHANNEL_KINDS, m, 5).recall for m in ("log_on_sentence", "sentence_only", "word_only"))
        holds += fused >= sent and fused >= word
        rows.append(f"{fused:.3f}/{sent:.3f}/{word:.3f}")
    elapsed = time.perf_counter() - start
    report(
        "fusion ordering (fused >= sentence-only, word-only)",
        holds >= 9,
        f"holds on {holds}/10 seeds; recall@5 fused/sentence/word: {' '.join(rows)}",
        elapsed,
    )


def test_channel_mask_ordering(report):
    violations = []
    rows = []
    start = time.perf_counter()
    singles = [(c,) for c in CHANNEL_KINDS]
    for seed in range(10):
        corpus, queries = generate_synthetic(SyntheticSpec(seed=seed, corpus_size=200))
        grid = run_ablation(corpus.items, queries, ProjectionHeads.identity(64), singles + [CHANNEL_KINDS], ["log_on_sentence"], [5])
        full = grid.cell(CHANNEL_KINDS, "log_on_sentence", 5).recall
        best = max(grid.cell(m, "log_on_sentence", 5).recall for m in singles)
        if full < best:
            violations.append(seed)
        rows.append(f"{full:.3f}>={best:.3f}")
    elapsed = time.perf_counter() - start
    report(
        "channel ordering (all channels >= any single channel)",
        not violations,
        f"violations on seeds {violations}; full vs best single: {' '.join(rows)}",
        elapsed,
    )


def test_loss_spot_values(report):
    batch = ContrastiveBatch([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]])
    ce = contrastive_loss(batch, 0, "as_written")
    sample = AnswerDistribution(np.full((1, 4), 0.25), np.eye(4)[[1]])
    vqa = vqa_cross_entropy([sample])
    ok = abs(ce - math.log(2)) <= 1e-9 and abs(vqa - 0.25 * math.log(4)) <= 1e-9
    report(
        "loss spot values",
        ok,
        f"contrastive {ce:.12f} (ln 2 = {math.log(2):.12f}), cross-entropy {vqa:.12f} (ln4/4 = {math.log(4) / 4:.12f})",
    )


def test_union_bound_and_determinism(report):
    rng = random.Random(99)
    words = [f"w{i}" for i in range(30)]
    start = time.perf_counter()
    over_bound = nondeterministic = 0
    spec = EmbedderSpec(dimension=32)
    cases = 300
    for case in range(cases):
        corpus = [
            make_item(f"c{n:03d}", {c: " ".join(rng.sample(words, rng.randint(1, 6))) for c in CHANNEL_KINDS}, spec)
            for n in range(rng.randint(1, 40))
        ]
        q = embed_text(" ".join(rng.sample(words, rng.randint(1, 5))), spec)
        heads = ProjectionHeads.random(32, seed=case, scale=0.2) if case % 2 else ProjectionHeads.identity(32)
        k = rng.randint(1, 12)
        mask = rng.choice(ALL_MASKS)
        cfg = FusionConfig(rng.choice(list(FusionMode)))
        runs = [retrieve(q, corpus, heads, cfg, k, mask, workers=w) for w in (1, 1, 3)]
        dumps = [json.dumps(r.to_dict(), sort_keys=True).encode() for r in runs]
        over_bound += len(runs[0]) > 3 * k
        nondeterministic += len(set(dumps)) != 1
    elapsed = time.perf_counter() - start
    report(
        "union bound and determinism",
        over_bound == 0 and nondeterministic == 0,
        f"{cases} fuzzed cases, {over_bound} over 3K, {nondeterministic} non-identical reruns",
        elapsed,
    )


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
