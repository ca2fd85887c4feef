"""Command-line entry point: ``mhys {gen,validate,retrieve,train,eval}``.

Settings resolve as command-line flags > ``--config`` file > built-in
defaults. The effective configuration is echoed to stderr as one JSON line
before any work starts. Exit codes: 0 success, 1 runtime or integrity
error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .corpus_io import (
    SyntheticSpec,
    dump_corpus,
    dump_queries,
    generate_synthetic,
    load_corpus,
    load_heads,
    load_queries,
    save_heads,
)
from .embedding import embed_text
from .errors import MhysError
from .evaluation import REPORT_NOTE, format_table, mask_label, run_ablation
from .ranker import CHANNEL_KINDS, ChannelKind, explain, retrieve
from .similarity import FusionConfig, FusionMode, ProjectionHeads
from .training import LossMode, OptimizerKind, TrainConfig, train_heads

logger = logging.getLogger("mhys")

CHANNEL_ALIASES = {
    "qm": ChannelKind.IMAGE_QUESTION,
    "qd": ChannelKind.SCENE_QUESTION,
    "d": ChannelKind.DESCRIPTION,
    **{k.value: k for k in CHANNEL_KINDS},
}

# channel subsets mirroring the summary-form ablation
CHANNEL_GRID = (
    (ChannelKind.IMAGE_QUESTION,),
    (ChannelKind.SCENE_QUESTION,),
    (ChannelKind.DESCRIPTION,),
    (ChannelKind.IMAGE_QUESTION, ChannelKind.SCENE_QUESTION),
    CHANNEL_KINDS,
)

REQUIRED = {
    "gen": ("size",),
    "validate": ("corpus",),
    "retrieve": ("corpus",),
    "train": ("corpus", "queries", "out"),
    "eval": ("corpus", "queries"),
}


class UsageError(Exception):
    pass


def parse_mask(value: str) -> tuple[ChannelKind, ...]:
    if value.strip() == "all":
        return CHANNEL_KINDS
    kinds = set()
    for part in value.split(","):
        part = part.strip()
        if part not in CHANNEL_ALIASES:
            raise argparse.ArgumentTypeError(
                f"unknown channel {part!r}; use qm, qd, d or full names"
            )
        kinds.add(CHANNEL_ALIASES[part])
    if not kinds:
        raise argparse.ArgumentTypeError("empty channel mask")
    return tuple(k for k in CHANNEL_KINDS if k in kinds)


def parse_channel(value: str) -> ChannelKind:
    mask = parse_mask(value)
    if len(mask) != 1:
        raise argparse.ArgumentTypeError(f"expected exactly one channel, got {value!r}")
    return mask[0]


def parse_k_range(value: str) -> list[int]:
    """``"1..10"`` or ``"1,3,5"``."""
    try:
        if ".." in value:
            lo, hi = value.split("..", 1)
            ks = list(range(int(lo), int(hi) + 1))
        else:
            ks = [int(v) for v in value.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K range {value!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError(f"K range {value!r} must be non-empty and >= 1")
    return ks


def positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def read_config(path: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; dashes and underscores are interchangeable."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value.strip("\"'")
    return values


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _fusion_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fusion", type=FusionMode, default=FusionMode.LOG_ON_SENTENCE,
                   choices=list(FusionMode), metavar="MODE",
                   help="fusion mode: " + ", ".join(m.value for m in FusionMode))
    p.add_argument("--epsilon", type=float, default=1e-6, help="log clamp floor")
    p.add_argument("--mask", type=parse_mask, default=CHANNEL_KINDS,
                   help="comma-separated channels (qm, qd, d) or 'all'")
    p.add_argument("--k", type=positive_int, default=5, help="per-channel top-K")
    p.add_argument("--heads", help="projection heads file (default: identity)")
    p.add_argument("--workers", type=positive_int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mhys", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mhys {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a seeded synthetic corpus and query file")
    _common(p)
    p.add_argument("--size", type=positive_int, help="number of corpus items (required)")
    p.add_argument("--relevant", type=positive_int, default=5, help="gold items per query")
    p.add_argument("--vocab", type=positive_int, default=2000, help="vocabulary size")
    p.add_argument("--num-queries", type=positive_int, default=None)
    p.add_argument("--signal-qm", type=float, default=0.9)
    p.add_argument("--signal-qd", type=float, default=0.9)
    p.add_argument("--signal-d", type=float, default=0.6)
    p.add_argument("--dim", type=positive_int, default=64, help="embedding dimension")
    p.add_argument("--corpus", default="corpus.jsonl", help="output corpus path")
    p.add_argument("--queries", default="queries.jsonl", help="output query path")
    p.add_argument("--with-embeddings", action="store_true", help="store vectors, not just text")

    p = sub.add_parser("validate", help="check corpus (and query) files")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--queries")

    p = sub.add_parser("retrieve", help="rank corpus items for one query")
    _common(p)
    p.add_argument("--corpus")
    _fusion_flags(p)
    p.add_argument("--explain", action="store_true", help="print per-channel score components")
    p.add_argument("--json", action="store_true", help="emit one JSON object instead of a table")
    p.add_argument("query", nargs="+", help="query text")

    p = sub.add_parser("train", help="train word-level projection heads")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--queries")
    p.add_argument("--out", help="where to write trained heads")
    p.add_argument("--init-heads", help="start from these heads instead of identity")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=positive_int, default=20)
    p.add_argument("--batch-size", type=positive_int, default=100)
    p.add_argument("--optimizer", type=OptimizerKind, default=OptimizerKind.ADAMW,
                   choices=list(OptimizerKind), metavar="{adamw,sgd}")
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--loss-mode", type=LossMode, default=LossMode.AS_WRITTEN,
                   choices=list(LossMode), metavar="{as_written,standard_infonce}")
    p.add_argument("--channel", type=parse_channel, default=ChannelKind.IMAGE_QUESTION,
                   help="summary channel providing positives (default qm)")
    p.add_argument("--history", help="write per-epoch losses as JSON lines")

    p = sub.add_parser("eval", help="retrieval metrics and ablation grids")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--queries")
    _fusion_flags(p)
    p.add_argument("--grid", choices=["none", "channels", "fusion", "k", "full"], default="none")
    p.add_argument("--k-range", type=parse_k_range, default=list(range(1, 11)))
    p.add_argument("--report", help="write rows as JSON lines to this path")
    p.add_argument("--per-query", action="store_true", help="include per-query metrics in --report")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        values = read_config(args.config)
    except OSError as exc:
        parser.error(f"cannot read config: {exc}")
    except UsageError as exc:
        parser.error(str(exc))
    subparser = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    known = {a.dest: a for a in subparser._actions}  # noqa: SLF001
    defaults: dict[str, Any] = {}
    for key, value in values.items():
        action = known.get(key)
        if action is None or key in ("config", "help", "query"):
            logger.warning("config key %r does not apply to %s", key, args.command)
            continue
        if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = value
    subparser.set_defaults(**defaults)
    # string defaults pass through each action's type converter here
    return parser.parse_args(argv)


def _effective(args: argparse.Namespace) -> dict[str, Any]:
    out = {}
    for key, value in sorted(vars(args).items()):
        if key == "func":
            continue
        if isinstance(value, tuple) and value and isinstance(value[0], ChannelKind):
            value = mask_label(value)
        elif hasattr(value, "value"):
            value = value.value
        out[key] = value
    return out


def _load_heads(path: str | None, dim: int) -> ProjectionHeads:
    heads = load_heads(path) if path else ProjectionHeads.identity(dim)
    heads.check_dimension(dim, "corpus")
    return heads


def cmd_gen(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        seed=args.seed,
        corpus_size=args.size,
        relevant_per_query=args.relevant,
        vocabulary_size=args.vocab,
        channel_signal={
            ChannelKind.IMAGE_QUESTION.value: args.signal_qm,
            ChannelKind.SCENE_QUESTION.value: args.signal_qd,
            ChannelKind.DESCRIPTION.value: args.signal_d,
        },
        num_queries=args.num_queries,
        dimension=args.dim,
    )
    corpus, queries = generate_synthetic(spec)
    Path(args.corpus).write_text(dump_corpus(corpus, args.with_embeddings), encoding="utf-8")
    Path(args.queries).write_text(dump_queries(queries), encoding="utf-8")
    print(f"wrote {len(corpus)} items to {args.corpus} and {len(queries)} queries to {args.queries}")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    msg = f"ok: {args.corpus}: {len(corpus)} items, embedder {corpus.embedder.name} d={corpus.embedder.dimension}"
    if args.queries:
        queries = load_queries(args.queries, corpus.ids)
        msg += f"; {args.queries}: {len(queries)} queries"
    print(msg)
    return 0


def cmd_retrieve(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    heads = _load_heads(args.heads, corpus.embedder.dimension)
    cfg = FusionConfig(args.fusion, args.epsilon)
    text = " ".join(args.query)
    query = embed_text(text, corpus.embedder)
    cands = retrieve(query, corpus.items, heads, cfg, args.k, args.mask, workers=args.workers)
    details = explain(query, corpus.items, heads, cfg, cands, args.mask) if args.explain else None

    if args.json:
        out = cands.to_dict()
        if details is not None:
            out["explain"] = {
                item_id: [
                    {"channel": c.kind.value, "word": c.word_score,
                     "sentence": c.sentence_score, "fused": c.fused_score}
                    for c in rows
                ]
                for item_id, rows in details.items()
            }
        print(json.dumps(out, indent=1))
        return 0

    for rank, item_id in enumerate(cands.ids, 1):
        channels = ",".join(k.value for k in cands.provenance[item_id])
        print(f"{rank}\t{item_id}\t{cands.scores[item_id]:.6f}\t{channels}")
        if details is not None:
            for c in details[item_id]:
                print(
                    f"\t{c.kind.value:<15} word={c.word_score:.6f} "
                    f"sentence={c.sentence_score:.6f} fused={c.fused_score:.6f}"
                )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    queries = load_queries(args.queries, corpus.ids)
    pairs = [(embed_text(q.question, corpus.embedder), gold) for q in queries for gold in q.relevant]
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        optimizer=args.optimizer,
        weight_decay=args.weight_decay,
        loss_mode=args.loss_mode,
        seed=args.seed,
    )
    init = _load_heads(args.init_heads, corpus.embedder.dimension)
    result = train_heads(pairs, corpus.items, cfg, heads=init, embedder=corpus.embedder, channel=args.channel)
    for epoch, loss in enumerate(result.history, 1):
        print(f"epoch {epoch:>3} loss {loss:.8f}")
    save_heads(args.out, result.heads)
    if args.history:
        with open(args.history, "w", encoding="utf-8") as fh:
            for epoch, loss in enumerate(result.history, 1):
                fh.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")
    print(f"wrote heads to {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    queries = load_queries(args.queries, corpus.ids)
    heads = _load_heads(args.heads, corpus.embedder.dimension)
    masks, modes, ks = [args.mask], [args.fusion], [args.k]
    if args.grid in ("channels", "full"):
        masks = list(CHANNEL_GRID)
    if args.grid in ("fusion", "full"):
        modes = list(FusionMode)
    if args.grid in ("k", "full"):
        ks = args.k_range
    grid = run_ablation(
        corpus.items, queries, heads, masks, modes, ks,
        embedder=corpus.embedder, epsilon=args.epsilon, workers=args.workers,
    )
    rows = grid.rows()
    print(format_table(rows))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"note": REPORT_NOTE, "config": _effective(args)}) + "\n")
            for r in rows:
                fh.write(json.dumps(r.to_dict(per_query=args.per_query)) + "\n")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "validate": cmd_validate,
    "retrieve": cmd_retrieve,
    "train": cmd_train,
    "eval": cmd_eval,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        missing = [name for name in REQUIRED[args.command] if getattr(args, name) is None]
        if missing:
            sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
            sub.error("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    print("# config " + json.dumps(_effective(args), sort_keys=True), file=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (MhysError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
