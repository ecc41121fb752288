"""Conversation corpus reading and content checksums.

Corpus files are UTF-8 JSON lines: one conversation per line with fields
``id`` (string) and ``utterances`` (list of ``{speaker, text, label?}``).
The exporter never trains on labels; they are carried only so the corpus
checksum covers the exact content a downstream consumer will load.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .errors import CorpusError


@dataclass(frozen=True)
class Utterance:
    speaker: str
    text: str
    label: str | None = None


@dataclass(frozen=True)
class Conversation:
    conv_id: str
    utterances: tuple[Utterance, ...]

    def __len__(self) -> int:
        return len(self.utterances)


@dataclass(frozen=True)
class Corpus:
    conversations: tuple[Conversation, ...]

    @property
    def n_utterances(self) -> int:
        return sum(len(conv) for conv in self.conversations)

    def utterance_ids(self):
        """Yield (conversation id, index) pairs in corpus order."""
        for conv in self.conversations:
            for j in range(len(conv)):
                yield conv.conv_id, j


def load_corpus(path: str) -> Corpus:
    """Parse a JSONL corpus file, preserving conversation and utterance order."""
    conversations: list[Conversation] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            conversations.append(_parse_conversation(record, path, line_no))
    if not conversations:
        raise CorpusError(f"{path}: corpus has no conversations")
    return Corpus(tuple(conversations))


def _parse_conversation(record: object, path: str, line_no: int) -> Conversation:
    if not isinstance(record, dict):
        raise CorpusError(f"{path}:{line_no}: record is not a map")
    conv_id = record.get("id")
    if not isinstance(conv_id, str) or not conv_id:
        raise CorpusError(f"{path}:{line_no}: missing or non-string id")
    raw_utts = record.get("utterances")
    if not isinstance(raw_utts, list) or not raw_utts:
        raise CorpusError(f"{path}:{line_no}: utterances must be a non-empty array")
    utts: list[Utterance] = []
    for j, raw in enumerate(raw_utts):
        if not isinstance(raw, dict):
            raise CorpusError(f"{path}:{line_no}: utterance {j} is not a map")
        speaker = raw.get("speaker")
        text = raw.get("text")
        if not isinstance(speaker, str):
            raise CorpusError(f"{path}:{line_no}: utterance {j} missing string speaker")
        if not isinstance(text, str):
            raise CorpusError(f"{path}:{line_no}: utterance {j} missing string text")
        label = raw.get("label")
        if label is not None and not isinstance(label, str):
            raise CorpusError(f"{path}:{line_no}: utterance {j} label must be a string")
        utts.append(Utterance(speaker=speaker, text=text, label=label))
    return Conversation(conv_id=conv_id, utterances=tuple(utts))


def corpus_checksum(corpus: Corpus) -> str:
    """Stable content hash binding an export to the corpus it came from.

    SHA-256 over every conversation id and every utterance's speaker, text,
    and label name (empty when unlabeled), each field-separated by 0x1f and
    record-separated by 0x1e, in corpus order. Consumers compute the same
    hash over their own corpus copy and refuse stores whose manifest
    disagrees.
    """
    digest = hashlib.sha256()
    for conv in corpus.conversations:
        digest.update(conv.conv_id.encode("utf-8") + b"\x1e")
        for utt in conv.utterances:
            label_name = "" if utt.label is None else utt.label
            record = "\x1f".join((utt.speaker, utt.text, label_name))
            digest.update(record.encode("utf-8") + b"\x1e")
    return digest.hexdigest()
