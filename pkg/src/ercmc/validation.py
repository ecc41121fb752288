"""Input-validation helpers shared by the estimator and CLI layers."""

from __future__ import annotations

from .data import Corpus, EmbeddingStore
from .errors import ConsistencyError, ContractError


def ensure_corpus(obj, name: str = "corpus") -> Corpus:
    """Return *obj* if it is a Corpus, else raise a ContractError."""
    if not isinstance(obj, Corpus):
        raise ContractError(f"{name} must be a Corpus, got {type(obj).__name__}")
    return obj


def ensure_store(obj, kind: str, name: str) -> EmbeddingStore:
    """Return *obj* if it is an EmbeddingStore of the expected kind."""
    if not isinstance(obj, EmbeddingStore):
        raise ContractError(
            f"{name} must be an EmbeddingStore, got {type(obj).__name__}")
    if obj.kind != kind:
        raise ContractError(f"{name} must hold {kind} rows, found {obj.kind}")
    return obj


def ensure_fully_labeled(corpus: Corpus, name: str = "corpus") -> Corpus:
    """Require a label on every utterance (training / scoring corpora)."""
    for _pos, conv, utt, _row in corpus.iter_flat():
        if utt.label is None:
            raise ConsistencyError(
                f"{name}: conversation {conv.conv_id!r} utterance "
                f"{utt.conv_index} has no label")
    return corpus


def ensure_same_labels(corpus: Corpus, classes: list[str], name: str) -> Corpus:
    """Require *corpus* to use exactly the label vocabulary in *classes*."""
    if list(corpus.labels) != list(classes):
        raise ConsistencyError(
            f"{name}: label vocabulary {corpus.labels!r} does not match "
            f"the fitted classes {classes!r}")
    return corpus


def check_is_fitted(estimator, attr: str = "model_") -> None:
    """Raise if *estimator* has not been fitted yet."""
    if getattr(estimator, attr, None) is None:
        raise ContractError(
            f"{type(estimator).__name__} is not fitted yet; call fit() "
            "before using this method")
