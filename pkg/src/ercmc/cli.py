"""Command-line surface: training, evaluation, analysis, mock data, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 data-consistency error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import config as C
from .data import (
    atomic_write_text,
    check_manifest,
    load_corpus,
    mock_encode,
    read_embeddings,
    write_embeddings,
)
from .errors import (
    ConfigurationError,
    ConsistencyError,
    ContractError,
    CoverageError,
    DegenerateRowError,
    DimensionError,
    FormatError,
    NumericError,
    ParseError,
    UndefinedMetricError,
    VocabularyError,
)
from .futures import build_mock_futures
from .gradcheck import run_all
from .metrics import WEIGHTINGS, sequences_emotion_consistency
from .model import load_checkpoint
from .training import DataBundle, evaluate, train, write_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_CONFIG_ERRORS = (ConfigurationError,)
_DATA_ERRORS = (ParseError, VocabularyError, FormatError, ConsistencyError,
                CoverageError, ContractError, UndefinedMetricError,
                FileNotFoundError)
_NUMERIC_ERRORS = (NumericError, DimensionError, DegenerateRowError)


def _effective(args) -> dict[str, str]:
    provided = C.load_config(args.config)
    provided = C.apply_overrides(provided, args.set or [])
    return C.effective_config(provided)


def _load_split(cfg: dict[str, str], split: str, needs_futures: bool,
                vocabulary: list[str] | None = None) -> DataBundle:
    data_key, emb_key, fut_key = (f"data.{split}", f"embeddings.{split}",
                                  f"futures.{split}")
    C.require_paths(cfg, [data_key, emb_key])
    corpus = load_corpus(cfg[data_key], vocabulary=vocabulary)
    embeddings = read_embeddings(cfg[emb_key])
    check_manifest(cfg[emb_key], corpus)
    futures = None
    if needs_futures:
        if not cfg.get(fut_key):
            raise CoverageError(
                f"the pseudo-future context is enabled but {fut_key} "
                "names no futures file")
        futures = read_embeddings(cfg[fut_key])
        check_manifest(cfg[fut_key], corpus)
    return DataBundle(corpus=corpus, embeddings=embeddings, futures=futures)


def _cmd_train(args) -> int:
    cfg = _effective(args)
    model_probe = C.model_config_from(cfg, n_labels=2)  # validates knobs early
    tcfg = C.train_config_from(cfg)
    needs_futures = (not model_probe.is_raw) and "pf" in model_probe.contexts
    bundle = _load_split(cfg, "train", needs_futures)

    dev = None
    if cfg.get("data.dev"):
        dev = _load_split(cfg, "dev", needs_futures,
                          vocabulary=bundle.corpus.labels)

    from .model import ContextModel
    model = ContextModel(C.model_config_from(cfg, bundle.corpus.n_labels))
    os.makedirs(args.out, exist_ok=True)
    checkpoint_path = os.path.join(args.out, "checkpoint.erck")
    result = train(model, bundle, tcfg, dev=dev,
                   checkpoint_path=checkpoint_path, config_echo=cfg)
    trace_doc = {
        "config": dict(sorted(cfg.items())),
        "trace": result.trace,
        "best_epoch": result.best_epoch,
        "best_metric": result.best_metric,
    }
    atomic_write_text(os.path.join(args.out, "trace.json"),
                      json.dumps(trace_doc, indent=2) + "\n")
    last = result.trace[-1]
    print(f"trained {tcfg.epochs} epochs; final train loss "
          f"{last['train_loss']:.6f}; checkpoint {checkpoint_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _effective(args)
    C.train_config_from(cfg)  # validates metric/neutral pairing up front
    model, labels, _stored = load_checkpoint(args.checkpoint)
    needs_futures = (not model.cfg.is_raw) and "pf" in model.cfg.contexts
    bundle = _load_split(cfg, args.split, needs_futures, vocabulary=labels)
    neutral = cfg["train.neutral_label"] or None
    report = evaluate(model, bundle, excluded_label=neutral)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.json")
    predictions_path = os.path.join(args.out, "predictions.jsonl")
    write_report(report, report_path, predictions_path, config_echo=cfg)
    metric = cfg["train.metric"]
    print(f"evaluated {len(report.predictions)} utterances; "
          f"{metric} {report.metric_value(metric):.6f}; report {report_path}")
    return EXIT_OK


def _read_prediction_labels(path: str) -> dict[tuple[str, int], str]:
    preds: dict[tuple[str, int], str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                key = (rec["conversation"], int(rec["index"]))
                pred = rec["pred"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise ParseError(f"{path}:{lineno}: bad prediction record")
            if key in preds and preds[key] != pred:
                raise ConsistencyError(
                    f"{path}:{lineno}: conflicting predictions for {key}")
            preds[key] = pred
    return preds


def _cmd_analyze_ec(args) -> int:
    corpus = load_corpus(args.data)
    preds = _read_prediction_labels(args.predictions)
    label_index = {name: i for i, name in enumerate(corpus.labels)}

    pred_seqs = []
    for conv in corpus.conversations:
        seq = []
        for utt in conv.utterances:
            key = (conv.conv_id, utt.conv_index)
            if key not in preds:
                raise ConsistencyError(
                    f"no prediction for conversation {conv.conv_id!r} "
                    f"utterance {utt.conv_index}")
            name = preds[key]
            if name not in label_index:
                raise VocabularyError(
                    f"predicted label {name!r} is not in the data vocabulary")
            seq.append(label_index[name])
        pred_seqs.append(seq)

    ec_pred, n_pred = sequences_emotion_consistency(pred_seqs, args.window,
                                                    args.weighting)
    gold_seqs = [[u.label for u in conv.utterances]
                 for conv in corpus.conversations
                 if all(u.label is not None for u in conv.utterances)]
    ec_gold, _n_gold = sequences_emotion_consistency(gold_seqs, args.window,
                                                     args.weighting)

    doc = {
        "window": args.window,
        "weighting": args.weighting,
        "qualifying_utterances": n_pred,
        "ec_predicted": ec_pred,
        "ec_gold": ec_gold,
        "args": {"predictions": args.predictions, "data": args.data,
                 "window": str(args.window), "weighting": args.weighting},
    }
    atomic_write_text(args.out, json.dumps(doc, indent=2) + "\n")
    if n_pred == 0:
        print(f"warning: no conversation has {args.window} followers for any "
              "utterance; report is empty", file=sys.stderr)
        print(f"consistency report (empty) written to {args.out}")
    else:
        print(f"consistency over {n_pred} utterances: predicted "
              f"{ec_pred:.4f}; report {args.out}")
    return EXIT_OK


def _write_meta(out_path: str, fields: dict[str, str]) -> None:
    atomic_write_text(out_path + ".meta.json",
                      json.dumps(dict(sorted(fields.items())), indent=2) + "\n")


def _cmd_mock_encode(args) -> int:
    corpus = load_corpus(args.data)
    store = mock_encode(corpus, dim=args.dim, seed=args.seed)
    write_embeddings(store, args.out)
    _write_meta(args.out, {"command": "mock-encode", "data": args.data,
                           "dim": str(args.dim), "seed": str(args.seed)})
    print(f"wrote {store.rows.shape[0]} base vectors (dim {args.dim}) "
          f"to {args.out}")
    return EXIT_OK


def _cmd_mock_futures(args) -> int:
    corpus = load_corpus(args.data)
    embeddings = read_embeddings(args.embeddings)
    store = build_mock_futures(corpus, embeddings, m=args.m, k=args.k,
                               seed=args.seed)
    write_embeddings(store, args.out)
    _write_meta(args.out, {"command": "mock-futures", "data": args.data,
                           "embeddings": args.embeddings, "m": str(args.m),
                           "k": str(args.k), "seed": str(args.seed)})
    print(f"wrote {store.rows.shape[0]} future vectors (m {args.m}) "
          f"to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results = run_all(seed=args.seed, include_model=not args.skip_model)
    worst = 0.0
    failed = 0
    for res in results:
        print(res.line())
        worst = max(worst, res.max_rel_err)
        failed += 0 if res.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks ok; "
          f"worst relative error {worst:.3e}")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ercmc",
        description="Conversation-level emotion tagging engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_train.add_argument("--out", required=True,
                         help="directory for checkpoint.erck and trace.json")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", required=True, choices=("dev", "test"))
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_eval.add_argument("--out", required=True,
                        help="directory for report.json and predictions.jsonl")
    p_eval.set_defaults(func=_cmd_eval)

    p_ec = sub.add_parser("analyze-ec",
                          help="emotion-consistency report for predictions")
    p_ec.add_argument("--predictions", required=True)
    p_ec.add_argument("--data", required=True)
    p_ec.add_argument("--window", type=int, default=5)
    p_ec.add_argument("--weighting", choices=WEIGHTINGS, default="uniform")
    p_ec.add_argument("--out", required=True, help="report JSON path")
    p_ec.set_defaults(func=_cmd_analyze_ec)

    p_enc = sub.add_parser("mock-encode",
                           help="write deterministic hash-based embeddings")
    p_enc.add_argument("--data", required=True)
    p_enc.add_argument("--dim", type=int, default=768)
    p_enc.add_argument("--seed", type=int, default=0)
    p_enc.add_argument("--out", required=True)
    p_enc.set_defaults(func=_cmd_mock_encode)

    p_fut = sub.add_parser("mock-futures",
                           help="write retrieval-based future embeddings")
    p_fut.add_argument("--data", required=True)
    p_fut.add_argument("--embeddings", required=True)
    p_fut.add_argument("--m", type=int, default=5)
    p_fut.add_argument("--k", type=int, default=2)
    p_fut.add_argument("--seed", type=int, default=0)
    p_fut.add_argument("--out", required=True)
    p_fut.set_defaults(func=_cmd_mock_futures)

    p_gc = sub.add_parser("gradcheck",
                          help="finite-difference check of every operation")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--skip-model", action="store_true",
                      help="check primitives only")
    p_gc.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
