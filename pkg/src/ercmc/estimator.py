"""Scikit-learn-style front door for conversation-level emotion tagging.

``ConversationTagger`` wraps model construction, training, and inference
behind the familiar ``fit`` / ``predict`` / ``get_params`` surface so the
engine can sit in pipelines and grid searches without adapters.
"""

from __future__ import annotations

import inspect

import numpy as np

from . import tensor as T
from .data import Corpus, EmbeddingStore
from .errors import ConfigurationError, ContractError
from .model import ContextModel, ModelConfig
from .tensor import AdamW
from .training import DataBundle, EvalReport, TrainConfig, evaluate, train
from .validation import (
    check_is_fitted,
    ensure_corpus,
    ensure_fully_labeled,
    ensure_same_labels,
    ensure_store,
)


class ConversationTagger:
    """Conversation-level emotion tagger with three fused context tracks.

    Parameters mirror the model and training knobs one-to-one; construction
    performs no work and no validation (scikit-learn contract), so invalid
    settings surface on ``fit``. Trailing-underscore attributes (``model_``,
    ``classes_``, ``trace_``, ...) appear after fitting.
    """

    def __init__(self, d_m: int = 768, n_heads: int = 8, window: int = 5,
                 n_futures: int = 5, k: int = 2, dropout: float = 0.1,
                 pos_mode: str = "relative", contexts=("c", "s", "pf"),
                 use_h: bool = True, use_s: bool = True, use_t: bool = True,
                 share_rp: bool = False, precision: str = "f64",
                 epochs: int = 20, lr: float = 3e-5,
                 batch_conversations: int = 1, grad_accum: int = 4,
                 weight_decay: float = 0.01, clip_norm: float | None = None,
                 metric: str = "weighted_f1", neutral_label: str | None = None,
                 seed: int = 0, warm_start: bool = False):
        self.d_m = d_m
        self.n_heads = n_heads
        self.window = window
        self.n_futures = n_futures
        self.k = k
        self.dropout = dropout
        self.pos_mode = pos_mode
        self.contexts = contexts
        self.use_h = use_h
        self.use_s = use_s
        self.use_t = use_t
        self.share_rp = share_rp
        self.precision = precision
        self.epochs = epochs
        self.lr = lr
        self.batch_conversations = batch_conversations
        self.grad_accum = grad_accum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.metric = metric
        self.neutral_label = neutral_label
        self.seed = seed
        self.warm_start = warm_start
        self.model_: ContextModel | None = None
        self.classes_: list[str] | None = None
        self.trace_: list[dict] | None = None
        self.best_epoch_: int | None = None
        self.best_metric_: float | None = None
        self._optimizer: AdamW | None = None

    # -- parameter surface --------------------------------------------------

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [n for n in sig.parameters if n != "self"]

    def get_params(self, deep: bool = True) -> dict:
        del deep  # no nested estimators
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "ConversationTagger":
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ConfigurationError(
                    f"unknown parameter {name!r} for ConversationTagger; "
                    f"valid names: {sorted(valid)}")
            setattr(self, name, value)
        return self

    def __repr__(self) -> str:
        sig = inspect.signature(type(self).__init__)
        shown = []
        for name in self._param_names():
            value = getattr(self, name)
            if value != sig.parameters[name].default:
                shown.append(f"{name}={value!r}")
        return f"{type(self).__name__}({', '.join(shown)})"

    # -- configuration assembly ----------------------------------------------

    def _model_config(self, n_labels: int) -> ModelConfig:
        return ModelConfig(
            d_m=self.d_m, n_heads=self.n_heads, window=self.window,
            n_futures=self.n_futures, n_labels=n_labels, k=self.k,
            dropout=self.dropout, pos_mode=self.pos_mode,
            contexts=self.contexts, use_h=self.use_h, use_s=self.use_s,
            use_t=self.use_t, share_rp=self.share_rp,
            precision=self.precision, seed=self.seed)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, lr=self.lr,
            batch_conversations=self.batch_conversations,
            grad_accum=self.grad_accum, seed=self.seed,
            precision=self.precision, metric=self.metric,
            neutral_label=self.neutral_label,
            weight_decay=self.weight_decay, clip_norm=self.clip_norm)

    def _bundle(self, corpus: Corpus, embeddings: EmbeddingStore,
                futures: EmbeddingStore | None, name: str) -> DataBundle:
        ensure_corpus(corpus, name)
        ensure_store(embeddings, "base", f"{name} embeddings")
        needs_futures = not (isinstance(self.contexts, str)
                             and self.contexts == "raw") and "pf" in tuple(self.contexts)
        if needs_futures and futures is None:
            raise ContractError(
                f"{name}: the pseudo-future context is enabled but no "
                "futures store was provided")
        if futures is not None:
            ensure_store(futures, "futures", f"{name} futures")
        return DataBundle(corpus=corpus, embeddings=embeddings, futures=futures)

    # -- estimator API --------------------------------------------------------

    def fit(self, corpus: Corpus, embeddings: EmbeddingStore,
            futures: EmbeddingStore | None = None, *,
            dev: Corpus | None = None,
            dev_embeddings: EmbeddingStore | None = None,
            dev_futures: EmbeddingStore | None = None,
            checkpoint_path: str | None = None) -> "ConversationTagger":
        bundle = self._bundle(corpus, embeddings, futures, "training corpus")
        ensure_fully_labeled(corpus, "training corpus")
        classes = list(corpus.labels)

        dev_bundle = None
        if dev is not None:
            if dev_embeddings is None:
                raise ContractError("dev corpus given without dev embeddings")
            dev_bundle = self._bundle(dev, dev_embeddings, dev_futures,
                                      "dev corpus")
            ensure_fully_labeled(dev, "dev corpus")
            ensure_same_labels(dev, classes, "dev corpus")
        elif dev_embeddings is not None or dev_futures is not None:
            raise ContractError("dev embeddings given without a dev corpus")

        cfg = self._model_config(n_labels=len(classes))
        continuing = (self.warm_start and self.model_ is not None)
        if continuing:
            if self.model_.cfg != cfg:
                raise ConfigurationError(
                    "warm_start requires an unchanged model configuration; "
                    "clear model_ or refit with warm_start=False")
            if list(self.classes_) != classes:
                raise ConfigurationError(
                    "warm_start requires the same label vocabulary as the "
                    "previous fit")
            model = self.model_
            optimizer = self._optimizer
        else:
            model = ContextModel(cfg)
            optimizer = None

        tcfg = self._train_config()
        if optimizer is None:
            optimizer = AdamW(model.parameters(), lr=tcfg.lr,
                              weight_decay=tcfg.weight_decay,
                              clip_norm=tcfg.clip_norm)
        result = train(model, bundle, tcfg, dev=dev_bundle,
                       checkpoint_path=checkpoint_path, optimizer=optimizer)

        self.model_ = model
        self.classes_ = classes
        self.trace_ = result.trace
        self.best_epoch_ = result.best_epoch
        self.best_metric_ = result.best_metric
        self.n_features_in_ = self.d_m
        self._optimizer = optimizer
        return self

    def predict_proba(self, corpus: Corpus, embeddings: EmbeddingStore,
                      futures: EmbeddingStore | None = None) -> np.ndarray:
        """Class distributions, one row per utterance in corpus order."""
        check_is_fitted(self)
        bundle = self._bundle(corpus, embeddings, futures, "corpus")
        out = np.zeros((corpus.n_utterances, len(self.classes_)))
        with T.no_grad(), self.model_.published_precision():
            for conv_pos, conv in enumerate(corpus.conversations):
                emb, fut = bundle.conversation_arrays(conv_pos)
                probs, _preds = self.model_.predict_conversation(conv, emb, fut)
                start = corpus.flat_index(conv_pos, 0)
                out[start:start + len(conv.utterances)] = probs
        return out

    def predict(self, corpus: Corpus, embeddings: EmbeddingStore,
                futures: EmbeddingStore | None = None) -> np.ndarray:
        """Label indices into ``classes_``, one per utterance in corpus order."""
        probs = self.predict_proba(corpus, embeddings, futures)
        return np.argmax(probs, axis=1)

    def evaluate_report(self, corpus: Corpus, embeddings: EmbeddingStore,
                        futures: EmbeddingStore | None = None) -> EvalReport:
        """Full evaluation (per-class stats, confusion, predictions)."""
        check_is_fitted(self)
        ensure_same_labels(ensure_corpus(corpus), self.classes_, "corpus")
        bundle = self._bundle(corpus, embeddings, futures, "corpus")
        return evaluate(self.model_, bundle, excluded_label=self.neutral_label)

    def score(self, corpus: Corpus, embeddings: EmbeddingStore,
              futures: EmbeddingStore | None = None) -> float:
        """The configured selection metric on a fully labeled corpus."""
        ensure_fully_labeled(ensure_corpus(corpus))
        report = self.evaluate_report(corpus, embeddings, futures)
        return report.metric_value(self.metric)
