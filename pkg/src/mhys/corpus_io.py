"""
Corpus, query and projection-head files, plus the synthetic corpus generator.

Corpus and query files are UTF-8, one JSON object per line. The first line is
a header: a fixed sentinel token, one space, then a JSON object. See
``docs/FORMAT.md`` for the field-by-field reference.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .embedding import ChannelEmbedding, EmbedderSpec, embed_sentence, embed_text, embed_tokens
from .errors import ContractError, CorpusIntegrityError, CorpusParseError
from .ranker import CHANNEL_KINDS, CHANNEL_PROMPTS, ChannelKind, CorpusItem, SummaryChannel
from .similarity import HEAD_NAMES, AffineMap, ProjectionHeads

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CORPUS_SENTINEL = "#mhys-corpus"
QUERIES_SENTINEL = "#mhys-queries"
HEADS_FORMAT = "mhys-heads"

# stored embeddings may come from another writer; allow last-bit drift only
EMBEDDING_ATOL = 1e-9


@dataclass
class CorpusFile:
    embedder: EmbedderSpec
    items: list[CorpusItem]
    prompts: dict[str, str] = field(
        default_factory=lambda: {k.value: p for k, p in CHANNEL_PROMPTS.items()}
    )

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[CorpusItem]:
        return iter(self.items)

    @property
    def ids(self) -> list[str]:
        return [item.item_id for item in self.items]


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    question: str
    relevant: tuple[str, ...]
    answer: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "query_id": self.query_id,
            "question": self.question,
            "relevant": list(self.relevant),
        }
        if self.answer is not None:
            out["answer"] = self.answer
        return out


def make_item(item_id: str, texts: Mapping[ChannelKind | str, str], spec: EmbedderSpec) -> CorpusItem:
    """Build a corpus item by embedding each channel's text."""
    channels = {}
    for kind, text in texts.items():
        kind = ChannelKind(kind)
        channels[kind] = SummaryChannel(kind, text, embed_text(text, spec))
    return CorpusItem(item_id, channels)


# ---------------------------------------------------------------------------
# Line-level helpers
# ---------------------------------------------------------------------------


def _dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _records(path: Path, sentinel: str) -> Iterator[tuple[int, Any]]:
    """Yield ``(line_number, object)``; the header comes first with number 1."""
    seen_header = False
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if not seen_header:
                if not line.startswith(sentinel + " "):
                    raise CorpusParseError(
                        f"expected header line starting with {sentinel!r}", str(path), lineno
                    )
                line = line[len(sentinel) + 1 :]
                seen_header = True
            elif line.startswith("#"):
                raise CorpusParseError("unexpected header or comment line", str(path), lineno)
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(f"invalid JSON: {exc.msg}", str(path), lineno) from None
            if not isinstance(obj, dict):
                raise CorpusParseError("record must be a JSON object", str(path), lineno)
            yield lineno, obj
    if not seen_header:
        raise CorpusParseError(f"empty file, missing {sentinel!r} header", str(path))


def _require(obj: dict, key: str, kind: type, path: Path, lineno: int) -> Any:
    if key not in obj:
        raise CorpusParseError(f"missing field {key!r}", str(path), lineno)
    value = obj[key]
    if not isinstance(value, kind):
        raise CorpusParseError(f"field {key!r} must be {kind.__name__}", str(path), lineno)
    return value


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------


def _check_version(header: dict, path: Path) -> None:
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CorpusParseError(f"unsupported format_version {version!r}", str(path), 1)


def _parse_channel(
    kind: ChannelKind, raw: Any, spec: EmbedderSpec, item_id: str, path: Path, lineno: int
) -> SummaryChannel:
    if not isinstance(raw, dict) or not isinstance(raw.get("text"), str):
        raise CorpusParseError(
            f"channel {kind.value} of item {item_id!r} needs a string 'text'", str(path), lineno
        )
    text = raw["text"]
    sentence = embed_sentence(text, spec)
    tokens = embed_tokens(text, spec)
    for name, computed in (("sentence", sentence), ("tokens", tokens)):
        if name not in raw:
            continue
        try:
            stored = np.asarray(raw[name], dtype=np.float64)
        except (TypeError, ValueError):
            raise CorpusParseError(
                f"channel {kind.value} of item {item_id!r}: {name} is not numeric", str(path), lineno
            ) from None
        if stored.shape != computed.shape or not np.allclose(stored, computed, rtol=0, atol=EMBEDDING_ATOL):
            raise CorpusIntegrityError(
                f"{path}:{lineno}: stored {name} embedding of item {item_id!r} "
                f"channel {kind.value} does not match its text"
            )
    return SummaryChannel(kind, text, ChannelEmbedding(sentence, tokens))


def load_corpus(path: str | Path) -> CorpusFile:
    """Parse and validate a corpus file, embedding any text-only channels."""
    path = Path(path)
    records = _records(path, CORPUS_SENTINEL)
    _, header = next(records)
    _check_version(header, path)
    try:
        spec = EmbedderSpec.from_dict(header["embedder"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusParseError(f"bad embedder header: {exc}", str(path), 1) from None
    prompts = header.get("prompts", {k.value: p for k, p in CHANNEL_PROMPTS.items()})

    items: list[CorpusItem] = []
    seen: dict[str, int] = {}
    for lineno, obj in records:
        item_id = _require(obj, "item_id", str, path, lineno)
        if item_id in seen:
            raise CorpusIntegrityError(
                f"{path}:{lineno}: duplicate item_id {item_id!r} (first seen on line {seen[item_id]})"
            )
        seen[item_id] = lineno
        raw_channels = _require(obj, "channels", dict, path, lineno)
        unknown = set(raw_channels) - {k.value for k in CHANNEL_KINDS}
        if unknown:
            raise CorpusIntegrityError(
                f"{path}:{lineno}: item {item_id!r} has unknown channels {sorted(unknown)}"
            )
        channels = {}
        for kind in CHANNEL_KINDS:
            if kind.value not in raw_channels:
                raise CorpusIntegrityError(
                    f"{path}:{lineno}: item {item_id!r} is missing the {kind.value} channel"
                )
            channels[kind] = _parse_channel(kind, raw_channels[kind.value], spec, item_id, path, lineno)
        items.append(CorpusItem(item_id, channels))
    logger.debug("loaded %d items from %s", len(items), path)
    return CorpusFile(spec, items, dict(prompts))


def dump_corpus(corpus: CorpusFile, include_embeddings: bool = False) -> str:
    header = {
        "format_version": FORMAT_VERSION,
        "embedder": corpus.embedder.to_dict(),
        "prompts": corpus.prompts,
    }
    lines = [f"{CORPUS_SENTINEL} {_dumps(header)}"]
    for item in corpus.items:
        channels = {}
        for kind in CHANNEL_KINDS:
            ch = item.channel(kind)
            rec: dict[str, Any] = {"text": ch.text}
            if include_embeddings:
                rec["sentence"] = ch.sentence.tolist()
                rec["tokens"] = ch.tokens.tolist()
            channels[kind.value] = rec
        lines.append(_dumps({"item_id": item.item_id, "channels": channels}))
    return "\n".join(lines) + "\n"


def save_corpus(path: str | Path, corpus: CorpusFile, include_embeddings: bool = False) -> None:
    Path(path).write_text(dump_corpus(corpus, include_embeddings), encoding="utf-8")


# ---------------------------------------------------------------------------
# Query files
# ---------------------------------------------------------------------------


def load_queries(path: str | Path, corpus_ids: Iterable[str] | None = None) -> list[QueryRecord]:
    """Parse a query file; with ``corpus_ids`` every gold id must resolve."""
    path = Path(path)
    records = _records(path, QUERIES_SENTINEL)
    _, header = next(records)
    _check_version(header, path)
    known = set(corpus_ids) if corpus_ids is not None else None

    out: list[QueryRecord] = []
    seen: set[str] = set()
    for lineno, obj in records:
        query_id = _require(obj, "query_id", str, path, lineno)
        question = _require(obj, "question", str, path, lineno)
        relevant = _require(obj, "relevant", list, path, lineno)
        if not all(isinstance(r, str) for r in relevant):
            raise CorpusParseError("'relevant' must be a list of item ids", str(path), lineno)
        answer = obj.get("answer")
        if answer is not None and not isinstance(answer, str):
            raise CorpusParseError("'answer' must be a string", str(path), lineno)
        if query_id in seen:
            raise CorpusIntegrityError(f"{path}:{lineno}: duplicate query_id {query_id!r}")
        seen.add(query_id)
        if known is not None:
            missing = [r for r in relevant if r not in known]
            if missing:
                raise CorpusIntegrityError(
                    f"{path}:{lineno}: query {query_id!r} references unknown items {missing}"
                )
        out.append(QueryRecord(query_id, question, tuple(relevant), answer))
    return out


def dump_queries(queries: Sequence[QueryRecord]) -> str:
    lines = [f"{QUERIES_SENTINEL} {_dumps({'format_version': FORMAT_VERSION})}"]
    lines.extend(_dumps(q.to_dict()) for q in queries)
    return "\n".join(lines) + "\n"


def save_queries(path: str | Path, queries: Sequence[QueryRecord]) -> None:
    Path(path).write_text(dump_queries(queries), encoding="utf-8")


# ---------------------------------------------------------------------------
# Projection heads
# ---------------------------------------------------------------------------


def dump_heads(heads: ProjectionHeads) -> str:
    """Flat float arrays with explicit shapes; floats round-trip exactly."""
    body: dict[str, Any] = {
        "format": HEADS_FORMAT,
        "format_version": FORMAT_VERSION,
        "dimension": heads.dimension,
        "heads": {},
    }
    for name in HEAD_NAMES:
        head = getattr(heads, name)
        body["heads"][name] = {
            "weight_shape": list(head.weight.shape),
            "weight": head.weight.ravel().tolist(),
            "bias_shape": list(head.bias.shape),
            "bias": head.bias.tolist(),
        }
    return json.dumps(body, indent=1) + "\n"


def save_heads(path: str | Path, heads: ProjectionHeads) -> None:
    Path(path).write_text(dump_heads(heads), encoding="utf-8")


def load_heads(path: str | Path) -> ProjectionHeads:
    path = Path(path)
    try:
        body = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusParseError(f"invalid heads JSON: {exc.msg}", str(path), exc.lineno) from None
    if body.get("format") != HEADS_FORMAT or body.get("format_version") != FORMAT_VERSION:
        raise CorpusParseError("not a projection-heads file", str(path))
    maps = []
    try:
        for name in HEAD_NAMES:
            raw = body["heads"][name]
            weight = np.asarray(raw["weight"], dtype=np.float64).reshape(raw["weight_shape"])
            bias = np.asarray(raw["bias"], dtype=np.float64).reshape(raw["bias_shape"])
            maps.append(AffineMap(weight, bias))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusParseError(f"malformed head entry: {exc}", str(path)) from None
    return ProjectionHeads(*maps)


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"

QUESTION_LEADS = ("what color", "how many", "what shape", "is there", "where is", "which")
SCENE_LEADS = ("are there", "what happens", "which objects", "what appears")
DESCRIPTION_LEAD = "a photo showing"

DEFAULT_SIGNAL = {
    ChannelKind.IMAGE_QUESTION.value: 0.9,
    ChannelKind.SCENE_QUESTION.value: 0.9,
    ChannelKind.DESCRIPTION.value: 0.6,
}


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for :func:`generate_synthetic`.

    ``channel_signal`` maps each channel to the probability that a gold item's
    channel carries the query's key tokens. ``num_queries`` defaults to as
    many queries as the corpus can give disjoint gold sets.
    """

    seed: int = 0
    corpus_size: int = 200
    relevant_per_query: int = 5
    vocabulary_size: int = 2000
    channel_signal: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_SIGNAL))
    num_queries: int | None = None
    dimension: int = 64
    key_tokens: int = 3
    detail_tokens: int = 4
    noise_tokens: int = 6

    def resolved_queries(self) -> int:
        if self.num_queries is not None:
            return self.num_queries
        return self.corpus_size // self.relevant_per_query

    def signal(self, kind: ChannelKind) -> float:
        return float(self.channel_signal.get(kind.value, DEFAULT_SIGNAL[kind.value]))

    def validate(self) -> None:
        for kind in CHANNEL_KINDS:
            rate = self.signal(kind)
            if not 0.0 <= rate <= 1.0:
                raise ContractError(f"signal rate for {kind.value} must lie in [0, 1], got {rate}")
        unknown = set(self.channel_signal) - {k.value for k in CHANNEL_KINDS}
        if unknown:
            raise ContractError(f"unknown channels in channel_signal: {sorted(unknown)}")
        if self.relevant_per_query < 1:
            raise ContractError("relevant_per_query must be >= 1")
        if self.corpus_size < self.relevant_per_query:
            raise ContractError("corpus_size must be >= relevant_per_query")
        n_queries = self.resolved_queries()
        if n_queries < 1 or n_queries * self.relevant_per_query > self.corpus_size:
            raise ContractError(
                f"{n_queries} queries x {self.relevant_per_query} gold items exceed "
                f"a corpus of {self.corpus_size}"
            )
        reserved = n_queries * (self.key_tokens + self.detail_tokens)
        if self.vocabulary_size < reserved + 4 * self.noise_tokens:
            raise ContractError(
                f"vocabulary_size {self.vocabulary_size} too small: topics alone need {reserved} words"
            )
        if self.key_tokens < 1 or self.noise_tokens < 1 or self.detail_tokens < 0:
            raise ContractError("key_tokens and noise_tokens must be >= 1, detail_tokens >= 0")


def _pseudo_words(rng: np.random.Generator, count: int) -> list[str]:
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    n = len(syllables)
    picks = rng.choice(n**3, size=count, replace=False)
    return [syllables[p // (n * n)] + syllables[(p // n) % n] + syllables[p % n] for p in picks]


def generate_synthetic(spec: SyntheticSpec) -> tuple[CorpusFile, list[QueryRecord]]:
    """Seeded corpus + queries whose channels carry controlled query overlap.

    Each query owns a disjoint set of key and detail words. Its gold items
    carry the keys in each channel with that channel's signal rate; question
    channels are short and question-shaped, descriptions are long and also
    carry the topic's detail words. Items outside a query's gold set never
    contain its keys, so any overlap they show comes from shared function
    words or hash collisions.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    embedder = EmbedderSpec(dimension=spec.dimension)
    n_queries = spec.resolved_queries()

    vocab = _pseudo_words(rng, spec.vocabulary_size)
    per_topic = spec.key_tokens + spec.detail_tokens
    topics = []
    for q in range(n_queries):
        words = vocab[q * per_topic : (q + 1) * per_topic]
        topics.append((words[: spec.key_tokens], words[spec.key_tokens :]))
    noise_pool = vocab[n_queries * per_topic :]

    width = len(str(spec.corpus_size - 1))
    item_ids = [f"img-{i:0{width}d}" for i in range(spec.corpus_size)]
    order = rng.permutation(spec.corpus_size)
    owner: dict[int, int] = {}
    for q in range(n_queries):
        for slot in range(spec.relevant_per_query):
            owner[int(order[q * spec.relevant_per_query + slot])] = q

    def noise(k: int) -> list[str]:
        return [noise_pool[i] for i in rng.choice(len(noise_pool), size=k, replace=False)]

    def shuffled(words: list[str]) -> str:
        return " ".join(words[i] for i in rng.permutation(len(words)))

    items = []
    for idx, item_id in enumerate(item_ids):
        q = owner.get(idx)
        if q is None:
            keys, details = noise(spec.key_tokens), noise(spec.detail_tokens)
            hits = {kind: True for kind in CHANNEL_KINDS}
        else:
            keys, details = topics[q]
            hits = {kind: bool(rng.random() < spec.signal(kind)) for kind in CHANNEL_KINDS}

        def content(kind: ChannelKind) -> list[str]:
            return list(keys) if hits[kind] else noise(spec.key_tokens)

        lead = QUESTION_LEADS[int(rng.integers(len(QUESTION_LEADS)))]
        qm = f"{lead} {shuffled(content(ChannelKind.IMAGE_QUESTION) + noise(1))}?"
        lead = SCENE_LEADS[int(rng.integers(len(SCENE_LEADS)))]
        qd = f"{lead} {shuffled(content(ChannelKind.SCENE_QUESTION) + noise(1))}?"
        desc_words = content(ChannelKind.DESCRIPTION) + list(details) + noise(spec.noise_tokens)
        desc = f"{DESCRIPTION_LEAD} {shuffled(desc_words)}."
        items.append(
            make_item(
                item_id,
                {
                    ChannelKind.IMAGE_QUESTION: qm,
                    ChannelKind.SCENE_QUESTION: qd,
                    ChannelKind.DESCRIPTION: desc,
                },
                embedder,
            )
        )

    queries = []
    qwidth = len(str(max(n_queries - 1, 0)))
    for q, (keys, details) in enumerate(topics):
        gold = sorted(item_ids[i] for i, o in owner.items() if o == q)
        lead = QUESTION_LEADS[int(rng.integers(len(QUESTION_LEADS)))]
        answer = details[0] if details else keys[0]
        queries.append(QueryRecord(f"q-{q:0{qwidth}d}", f"{lead} {' '.join(keys)}?", tuple(gold), answer))

    return CorpusFile(embedder, items), queries
