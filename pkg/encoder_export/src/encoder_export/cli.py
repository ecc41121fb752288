"""Command-line front end for the export operations.

Two subcommands mirror the two library operations::

    encoder-export embeddings --data corpus.jsonl --encoder stub-base --out emb.erce
    encoder-export futures    --data corpus.jsonl --encoder stub-base \
        --generator stub-dialog --m 5 --k 2 --out fut.erce

Exit codes: 0 success, 2 bad arguments, 3 corpus problems, 4 export
failures (tokenization aborts, non-finite vectors).
"""

from __future__ import annotations

import argparse
import logging
import sys

from .corpus import load_corpus
from .errors import CorpusError, ExportError
from .export import export_embeddings, generate_futures
from .generators import DecodingParams

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_CORPUS = 3
EXIT_EXPORT = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="encoder-export",
        description="Export utterance embeddings and pseudo-future stores.")
    sub = parser.add_subparsers(dest="command", required=True)

    emb = sub.add_parser("embeddings", help="encode every utterance to an ERCE store")
    emb.add_argument("--data", required=True, help="corpus JSONL file")
    emb.add_argument("--encoder", default="stub-base",
                     help="encoder id (stub-base, stub-large, hf:<model>)")
    emb.add_argument("--out", required=True, help="output ERCE path")
    emb.add_argument("--workers", type=int, default=1,
                     help="conversations encoded in parallel")

    fut = sub.add_parser("futures", help="generate and encode pseudo-futures")
    fut.add_argument("--data", required=True, help="corpus JSONL file")
    fut.add_argument("--encoder", default="stub-base",
                     help="encoder id (stub-base, stub-large, hf:<model>)")
    fut.add_argument("--generator", default="stub-dialog",
                     help="generator id (stub-dialog, hf:<model>)")
    fut.add_argument("--m", type=int, default=5, help="continuations per utterance")
    fut.add_argument("--k", type=int, default=2,
                     help="history utterances visible to the generator")
    fut.add_argument("--strategy", choices=("greedy", "sample"), default="greedy")
    fut.add_argument("--max-new-tokens", type=int, default=32)
    fut.add_argument("--temperature", type=float, default=1.0)
    fut.add_argument("--seed", type=int, default=0)
    fut.add_argument("--out", required=True, help="output ERCE path")
    fut.add_argument("--workers", type=int, default=1,
                     help="conversations generated in parallel")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ARGS if exc.code not in (0, None) else EXIT_OK
    try:
        corpus = load_corpus(args.data)
        if args.command == "embeddings":
            export_embeddings(corpus, args.encoder, args.out, workers=args.workers)
        else:
            decoding = DecodingParams(
                strategy=args.strategy, max_new_tokens=args.max_new_tokens,
                temperature=args.temperature, seed=args.seed)
            generate_futures(
                corpus, args.generator, args.out, m=args.m, k=args.k,
                encoder=args.encoder, decoding=decoding, workers=args.workers)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORPUS
    except CorpusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORPUS
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXPORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
