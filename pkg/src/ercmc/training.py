"""Training loop with conversation batching, and deterministic evaluation.

Conversations are shuffled each epoch from a seeded stream. One optimizer
step covers ``batch_conversations * grad_accum`` conversations: micro-batches
of ``batch_conversations`` are forwarded one conversation at a time, each
conversation's mean NLL is scaled by the reciprocal of the step's
conversation count, and gradients accumulate until the step. This makes an
accumulated step bitwise-equal to the same conversations in one batch.

Evaluation runs with dropout off and parameters rounded through float32 (the
checkpoint storage precision), so metrics computed before saving match those
after a load exactly. ``ERCMC_THREADS`` caps conversation-level parallelism
during evaluation (default 1).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Corpus, EmbeddingStore, atomic_write_text, bind_embeddings
from .errors import ConfigurationError, ConsistencyError, NumericError
from .futures import StoreFuturesProvider
from .metrics import (
    confusion_matrix,
    micro_f1_excluding,
    per_class_stats,
    weighted_f1,
)
from .model import ContextModel, save_checkpoint
from .tensor import AdamW

METRICS = ("weighted_f1", "micro_f1")


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 3e-5
    batch_conversations: int = 1
    grad_accum: int = 4
    seed: int = 0
    precision: str = "f64"
    metric: str = "weighted_f1"
    neutral_label: str | None = None
    weight_decay: float = 0.01
    clip_norm: float | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_conversations < 1 or self.grad_accum < 1:
            raise ConfigurationError("batch_conversations and grad_accum must be >= 1")
        if self.metric not in METRICS:
            raise ConfigurationError(
                f"metric must be one of {METRICS}, got {self.metric!r}"
            )
        if self.metric == "micro_f1" and self.neutral_label is None:
            raise ConfigurationError("micro_f1 needs train.neutral_label")

    def to_config_dict(self) -> dict[str, str]:
        return {
            "train.epochs": str(self.epochs),
            "train.lr": repr(self.lr),
            "train.batch_conversations": str(self.batch_conversations),
            "train.grad_accum": str(self.grad_accum),
            "train.seed": str(self.seed),
            "train.precision": self.precision,
            "train.metric": self.metric,
            "train.neutral_label": self.neutral_label or "",
        }


@dataclass
class DataBundle:
    """A corpus with its bound embedding store and optional futures store."""
    corpus: Corpus
    embeddings: EmbeddingStore
    futures: EmbeddingStore | None = None
    _provider: StoreFuturesProvider | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        bind_embeddings(self.embeddings, self.corpus)
        if self.futures is not None:
            self._provider = StoreFuturesProvider(self.corpus, self.futures)

    def conversation_arrays(self, conv_pos: int) -> tuple[np.ndarray, np.ndarray | None]:
        conv = self.corpus.conversations[conv_pos]
        start = self.corpus.flat_index(conv_pos, 0)
        emb = self.embeddings.rows[start:start + len(conv)]
        fut = None
        if self._provider is not None:
            fut = self._provider.conversation_futures(conv_pos)
        return emb, fut


@dataclass
class PredictionRecord:
    conv_id: str
    index: int
    gold: int | None
    pred: int
    probs: np.ndarray


@dataclass
class EvalReport:
    labels: list[str]
    per_class: list
    weighted_f1: float | None
    micro_f1_excluding: float | None
    excluded_label: str | None
    confusion: np.ndarray | None
    predictions: list[PredictionRecord]

    def metric_value(self, metric: str) -> float:
        if metric == "weighted_f1":
            if self.weighted_f1 is None:
                raise ConsistencyError("no gold labels, weighted F1 undefined")
            return self.weighted_f1
        if metric == "micro_f1":
            if self.micro_f1_excluding is None:
                raise ConsistencyError("micro F1 was not computed")
            return self.micro_f1_excluding
        raise ConfigurationError(f"unknown metric {metric!r}")

    def accuracy(self) -> float:
        scored = [(r.gold, r.pred) for r in self.predictions if r.gold is not None]
        if not scored:
            raise ConsistencyError("no gold labels, accuracy undefined")
        return sum(1 for g, p in scored if g == p) / len(scored)

    def to_json_dict(self, config_echo: dict[str, str] | None = None) -> dict:
        out = {
            "labels": self.labels,
            "per_class": [
                {"label": self.labels[c], "precision": s.precision,
                 "recall": s.recall, "f1": s.f1, "support": s.support}
                for c, s in enumerate(self.per_class)
            ],
            "weighted_f1": self.weighted_f1,
            "micro_f1_excluding": self.micro_f1_excluding,
            "excluded_label": self.excluded_label,
            "confusion": None if self.confusion is None else self.confusion.tolist(),
            "n_utterances": len(self.predictions),
        }
        if config_echo is not None:
            out["config"] = dict(sorted(config_echo.items()))
        return out

    def predictions_jsonl(self) -> str:
        lines = []
        for r in self.predictions:
            lines.append(json.dumps({
                "conversation": r.conv_id,
                "index": r.index,
                "gold": None if r.gold is None else self.labels[r.gold],
                "pred": self.labels[r.pred],
                "distribution": [float(x) for x in r.probs],
            }))
        return "\n".join(lines) + "\n"


def write_report(report: EvalReport, report_path: str, predictions_path: str,
                 config_echo: dict[str, str] | None = None) -> None:
    atomic_write_text(report_path,
                      json.dumps(report.to_json_dict(config_echo), indent=2) + "\n")
    atomic_write_text(predictions_path, report.predictions_jsonl())


def _eval_threads() -> int:
    raw = os.environ.get("ERCMC_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"ERCMC_THREADS must be an integer, got {raw!r}")
    return max(1, value)


def evaluate(model: ContextModel, bundle: DataBundle,
             excluded_label: str | None = None) -> EvalReport:
    """Deterministic scoring pass: dropout off, storage-precision parameters."""
    labels = bundle.corpus.labels
    n_classes = len(labels)
    if n_classes != model.cfg.n_labels:
        raise ConsistencyError(
            f"model has {model.cfg.n_labels} classes, corpus has {n_classes}"
        )
    if model.cfg.d_m != bundle.embeddings.dim:
        raise ConsistencyError(
            f"model d_m={model.cfg.d_m}, embedding store dim={bundle.embeddings.dim}"
        )
    excluded_idx: int | None = None
    if excluded_label is not None:
        if excluded_label not in labels:
            raise ConsistencyError(
                f"excluded label {excluded_label!r} not in vocabulary {labels}"
            )
        excluded_idx = labels.index(excluded_label)

    def run_one(conv_pos: int) -> list[PredictionRecord]:
        conv = bundle.corpus.conversations[conv_pos]
        emb, fut = bundle.conversation_arrays(conv_pos)
        probs, preds = model.predict_conversation(conv, emb, fut)
        return [PredictionRecord(conv.conv_id, utt.conv_index, utt.label,
                                 preds[utt.conv_index], probs[utt.conv_index])
                for utt in conv.utterances]

    n_convs = len(bundle.corpus.conversations)
    threads = _eval_threads()
    with T.no_grad(), model.published_precision():
        if threads > 1 and n_convs > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                per_conv = list(pool.map(run_one, range(n_convs)))
        else:
            per_conv = [run_one(cp) for cp in range(n_convs)]
    records = [rec for chunk in per_conv for rec in chunk]

    gold = [r.gold for r in records if r.gold is not None]
    pred = [r.pred for r in records if r.gold is not None]
    wf1 = weighted_f1(gold, pred, n_classes) if gold else None
    stats = per_class_stats(gold, pred, n_classes) if gold else []
    conf = confusion_matrix(gold, pred, n_classes) if gold else None
    micro = None
    if gold and excluded_idx is not None:
        micro = micro_f1_excluding(gold, pred, excluded_idx)
    return EvalReport(labels=list(labels), per_class=stats, weighted_f1=wf1,
                      micro_f1_excluding=micro, excluded_label=excluded_label,
                      confusion=conf, predictions=records)


@dataclass
class TrainResult:
    trace: list[dict]
    best_epoch: int
    best_metric: float | None


def _conversation_targets(corpus: Corpus) -> list[list[int]]:
    targets = []
    for conv in corpus.conversations:
        rows = []
        for utt in conv.utterances:
            if utt.label is None:
                raise ConsistencyError(
                    f"conversation {conv.conv_id!r} utterance {utt.conv_index} "
                    "has no gold label; training needs fully labeled data"
                )
            rows.append(utt.label)
        targets.append(rows)
    return targets


def train(model: ContextModel, data: DataBundle, cfg: TrainConfig,
          dev: DataBundle | None = None, checkpoint_path: str | None = None,
          config_echo: dict[str, str] | None = None,
          optimizer: AdamW | None = None) -> TrainResult:
    """Optimize in place; with a dev bundle the best-epoch parameters win.

    The model is left holding the selected parameters (best dev epoch, or the
    final epoch without dev). ``optimizer`` may be supplied to continue a
    previous run's moments (warm starts); by default a fresh one is built.
    """
    targets = _conversation_targets(data.corpus)
    params = model.parameters()
    opt = optimizer if optimizer is not None else AdamW(
        params, lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    n_convs = len(data.corpus.conversations)
    step_span = cfg.batch_conversations * cfg.grad_accum
    echo = dict(config_echo or {})
    echo.update(model.cfg.to_config_dict())
    echo.update(cfg.to_config_dict())

    trace: list[dict] = []
    best_metric: float | None = None
    best_epoch = -1
    best_state: list[np.ndarray] | None = None

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n_convs)
        epoch_loss = 0.0
        try:
            for window_start in range(0, n_convs, step_span):
                window = order[window_start:window_start + step_span]
                inv = 1.0 / len(window)
                for micro_start in range(0, len(window), cfg.batch_conversations):
                    micro = window[micro_start:micro_start + cfg.batch_conversations]
                    parts = []
                    for conv_pos in micro:
                        conv = data.corpus.conversations[conv_pos]
                        emb, fut = data.conversation_arrays(conv_pos)
                        log_probs = model.forward_conversation(
                            conv, emb, fut, training=True)
                        loss = T.nll_loss(log_probs, targets[conv_pos])
                        value = loss.item()
                        if not np.isfinite(value):
                            raise NumericError(
                                f"non-finite loss {value} in conversation "
                                f"{conv.conv_id!r} (epoch {epoch})"
                            )
                        epoch_loss += value
                        parts.append(loss)
                    micro_loss = parts[0]
                    for extra in parts[1:]:
                        micro_loss = T.add(micro_loss, extra)
                    T.backward(T.scale(micro_loss, inv))
                opt.step()
        except BaseException:
            T.clear_tape()
            raise
        row: dict = {"epoch": epoch, "train_loss": epoch_loss / n_convs}
        if dev is not None:
            report = evaluate(model, dev, excluded_label=cfg.neutral_label)
            value = report.metric_value(cfg.metric)
            row[f"dev_{cfg.metric}"] = value
            if best_metric is None or value > best_metric:
                best_metric = value
                best_epoch = epoch
                best_state = [p.data.copy() for p in params]
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, model, data.corpus.labels, echo)
        trace.append(row)

    if dev is not None and best_state is not None:
        for p, data_arr in zip(params, best_state):
            p.data = data_arr
    else:
        best_epoch = cfg.epochs - 1
        if checkpoint_path:
            save_checkpoint(checkpoint_path, model, data.corpus.labels, echo)
    return TrainResult(trace=trace, best_epoch=best_epoch, best_metric=best_metric)
