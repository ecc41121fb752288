"""Classification metrics and the label-consistency analyzer.

Weighted F1 averages per-class F1 with gold-support weights. The pooled
variant sums TP/FP/FN over every class except one designated (typically a
dominant neutral) class. Consistency scores the next ``window`` utterances of
a conversation against the starting utterance's label, with either uniform or
proximity-biased weights, scaled to [0, 100].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Corpus
from .errors import ContractError, UndefinedMetricError

WEIGHTINGS = ("uniform", "proximal")


@dataclass
class ClassStats:
    precision: float
    recall: float
    f1: float
    support: int


def _check_lengths(gold, pred) -> None:
    if len(gold) != len(pred):
        raise ContractError(f"{len(gold)} gold labels vs {len(pred)} predictions")
    if len(gold) == 0:
        raise ContractError("empty label sequences")


def per_class_stats(gold, pred, n_classes: int) -> list[ClassStats]:
    _check_lengths(gold, pred)
    g = np.asarray(gold, dtype=np.intp)
    p = np.asarray(pred, dtype=np.intp)
    stats = []
    for c in range(n_classes):
        tp = int(np.sum((g == c) & (p == c)))
        fp = int(np.sum((g != c) & (p == c)))
        fn = int(np.sum((g == c) & (p != c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        stats.append(ClassStats(precision, recall, f1, tp + fn))
    return stats


def confusion_matrix(gold, pred, n_classes: int) -> np.ndarray:
    _check_lengths(gold, pred)
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (np.asarray(gold, dtype=np.intp),
                       np.asarray(pred, dtype=np.intp)), 1)
    return matrix


def weighted_f1(gold, pred, n_classes: int) -> float:
    """Support-weighted mean of per-class F1; zero-support classes weigh 0."""
    stats = per_class_stats(gold, pred, n_classes)
    return sum(s.support * s.f1 for s in stats) / len(gold)


def micro_f1_excluding(gold, pred, excluded: int) -> float:
    """Pooled-count F1 over all classes except ``excluded``.

    A prediction of the excluded class on other gold counts only as a miss;
    an excluded-gold utterance predicted otherwise counts only as a false
    positive of the predicted class.
    """
    _check_lengths(gold, pred)
    g = np.asarray(gold, dtype=np.intp)
    p = np.asarray(pred, dtype=np.intp)
    if np.all(g == excluded):
        raise UndefinedMetricError(
            f"every gold label is the excluded class {excluded}"
        )
    tp = int(np.sum((g == p) & (g != excluded)))
    fp = int(np.sum((g != p) & (p != excluded)))
    fn = int(np.sum((g != p) & (g != excluded)))
    if tp == 0:
        return 0.0
    # single division: equals 2PR/(P+R) exactly, without intermediate rounding
    return 2 * tp / (2 * tp + fp + fn)


# ---------------------------------------------------------------------------
# emotion consistency

def ec_weights(window: int, weighting: str) -> np.ndarray:
    """Follower weights, indexed by follower offset 1..window; they sum to 1.

    Uniform gives 1/window each. Proximal weights follower i by
    exp(e^(window-i)) normalized over the window, favoring followers close to
    the starting utterance; computed with max-shifted exponents so large
    windows cannot overflow.
    """
    if window < 1:
        raise ContractError(f"window must be >= 1, got {window}")
    if weighting not in WEIGHTINGS:
        raise ContractError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    if weighting == "uniform":
        return np.full(window, 1.0 / window)
    exponents = np.exp(np.arange(window - 1, -1, -1, dtype=np.float64))
    shifted = np.exp(exponents - exponents.max())
    return shifted / shifted.sum()


def emotion_consistency(labels, start: int, window: int, weighting: str) -> float:
    """Weighted share of the next ``window`` labels equal to labels[start],
    scaled to [0, 100]."""
    if start < 0 or start + window >= len(labels):
        raise ContractError(
            f"start {start} needs {window} followers in a sequence of "
            f"length {len(labels)}"
        )
    weights = ec_weights(window, weighting)
    first = labels[start]
    matches = np.array([1.0 if labels[start + i] == first else 0.0
                        for i in range(1, window + 1)])
    return 100.0 * float(matches @ weights)


def sequences_emotion_consistency(label_seqs, window: int,
                                  weighting: str) -> tuple[float | None, int]:
    """Mean consistency over every position with ``window`` followers.

    ``label_seqs`` is an iterable of per-conversation label sequences.
    Returns (score, qualifying position count); score is None when no
    position qualifies.
    """
    scores = []
    for labels in label_seqs:
        labels = list(labels)
        for start in range(len(labels)):
            if len(labels) - 1 - start >= window:
                scores.append(emotion_consistency(labels, start, window, weighting))
    if not scores:
        return None, 0
    return float(np.mean(scores)), len(scores)


def corpus_emotion_consistency(corpus: Corpus, window: int,
                               weighting: str) -> tuple[float | None, int]:
    """Mean consistency over every utterance with ``window`` followers.

    Conversations with any unlabeled utterance are left out (no gold
    sequence to score). Returns (score, qualifying utterance count); score
    is None when no utterance qualifies.
    """
    seqs = []
    for conv in corpus.conversations:
        labels = [u.label for u in conv.utterances]
        if all(lab is not None for lab in labels):
            seqs.append(labels)
    return sequences_emotion_consistency(seqs, window, weighting)
