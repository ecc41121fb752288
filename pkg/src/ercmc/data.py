"""Corpus ingestion, label vocabulary, and bit-exact embedding storage.

Corpus files are UTF-8 JSON lines: one conversation per line with fields
``id`` (string) and ``utterances`` (list of ``{speaker, text, label?}``).
Conversation order in the file is authoritative; embedding rows address
utterances implicitly by that order.

Embedding files ("ERCE") are little-endian binary: magic ``ERCE``, u32
version (=1), u32 dim, u64 row count, one flag byte (0 = base store,
1 = futures store, the latter followed by u32 m), then row-major float32
payload. Futures stores hold m consecutive rows per utterance.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConsistencyError,
    ContractError,
    FormatError,
    ParseError,
    VocabularyError,
)

ERCE_MAGIC = b"ERCE"
ERCE_VERSION = 1


@dataclass
class Utterance:
    speaker: str
    text: str
    label: int | None = None
    conv_index: int = -1


@dataclass
class Conversation:
    conv_id: str
    utterances: list[Utterance]

    def __post_init__(self) -> None:
        if not self.utterances:
            raise ContractError(f"conversation {self.conv_id!r} has no utterances")
        for pos, utt in enumerate(self.utterances):
            utt.conv_index = pos

    def __len__(self) -> int:
        return len(self.utterances)


@dataclass
class Corpus:
    conversations: list[Conversation]
    labels: list[str]
    _offsets: list[int] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        self._offsets = []
        total = 0
        for conv in self.conversations:
            self._offsets.append(total)
            total += len(conv)

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def n_utterances(self) -> int:
        return self._offsets[-1] + len(self.conversations[-1]) if self.conversations else 0

    def flat_index(self, conv_pos: int, utt_index: int) -> int:
        return self._offsets[conv_pos] + utt_index

    def iter_flat(self):
        """Yield (conv_pos, conversation, utterance, flat_row) in corpus order."""
        for conv_pos, conv in enumerate(self.conversations):
            base = self._offsets[conv_pos]
            for utt in conv.utterances:
                yield conv_pos, conv, utt, base + utt.conv_index


def _parse_conversation(record: dict, line_no: int, vocab: list[str],
                        fixed_vocab: bool) -> Conversation:
    if not isinstance(record, dict):
        raise ParseError(f"line {line_no}: record is not a map")
    conv_id = record.get("id")
    if not isinstance(conv_id, str) or not conv_id:
        raise ParseError(f"line {line_no}: missing or non-string id")
    raw_utts = record.get("utterances")
    if not isinstance(raw_utts, list) or not raw_utts:
        raise ParseError(f"line {line_no}: utterances must be a non-empty array")
    utts: list[Utterance] = []
    for j, raw in enumerate(raw_utts):
        if not isinstance(raw, dict):
            raise ParseError(f"line {line_no}: utterance {j} is not a map")
        speaker = raw.get("speaker")
        text = raw.get("text")
        if not isinstance(speaker, str):
            raise ParseError(f"line {line_no}: utterance {j} missing string speaker")
        if not isinstance(text, str):
            raise ParseError(f"line {line_no}: utterance {j} missing string text")
        label_name = raw.get("label")
        label: int | None = None
        if label_name is not None:
            if not isinstance(label_name, str):
                raise ParseError(f"line {line_no}: utterance {j} label must be a string")
            if label_name not in vocab:
                if fixed_vocab:
                    raise VocabularyError(
                        f"line {line_no}: unknown label {label_name!r} "
                        f"(vocabulary {vocab})"
                    )
                vocab.append(label_name)
            label = vocab.index(label_name)
        utts.append(Utterance(speaker=speaker, text=text, label=label))
    return Conversation(conv_id=conv_id, utterances=utts)


def load_corpus(path: str, vocabulary: list[str] | None = None) -> Corpus:
    """Read a JSON-lines conversation file.

    With ``vocabulary`` given, labels outside it are an error; otherwise the
    vocabulary is built in first-appearance order.
    """
    fixed = vocabulary is not None
    vocab = list(vocabulary) if fixed else []
    conversations: list[Conversation] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {line_no}: {exc.msg}") from None
            conversations.append(_parse_conversation(record, line_no, vocab, fixed))
    return Corpus(conversations=conversations, labels=vocab)


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_corpus(corpus: Corpus, path: str) -> None:
    lines = []
    for conv in corpus.conversations:
        utts = []
        for utt in conv.utterances:
            rec = {"speaker": utt.speaker, "text": utt.text}
            if utt.label is not None:
                rec["label"] = corpus.labels[utt.label]
            utts.append(rec)
        lines.append(json.dumps({"id": conv.conv_id, "utterances": utts},
                                ensure_ascii=False))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# embedding stores

@dataclass
class EmbeddingStore:
    dim: int
    rows: np.ndarray  # (n, dim) float32
    kind: str = "base"  # "base" | "futures"
    m: int | None = None  # rows per utterance, futures stores only

    def __post_init__(self) -> None:
        arr = np.asarray(self.rows, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise ContractError(f"store rows {arr.shape} do not match dim {self.dim}")
        if self.kind not in ("base", "futures"):
            raise ContractError(f"unknown store kind {self.kind!r}")
        if self.kind == "futures" and (self.m is None or self.m < 1):
            raise ContractError("futures store requires m >= 1")
        self.rows = arr

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    def vector(self, flat_row: int) -> np.ndarray:
        return self.rows[flat_row]

    def futures_block(self, flat_row: int) -> np.ndarray:
        """The m future vectors for the utterance at flat_row."""
        if self.kind != "futures":
            raise ContractError("futures_block on a base store")
        start = flat_row * self.m
        return self.rows[start:start + self.m]


def write_embeddings(store: EmbeddingStore, path: str) -> None:
    if not np.all(np.isfinite(store.rows)):
        raise ContractError("embedding store contains non-finite values")
    header = ERCE_MAGIC + struct.pack("<II", ERCE_VERSION, store.dim)
    header += struct.pack("<Q", store.n_rows)
    if store.kind == "futures":
        header += struct.pack("<BI", 1, store.m)
    else:
        header += struct.pack("<B", 0)
    payload = np.ascontiguousarray(store.rows, dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def read_embeddings(path: str) -> EmbeddingStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 21 or blob[:4] != ERCE_MAGIC:
        raise FormatError(f"{path}: not an embedding file (bad magic)")
    version, dim = struct.unpack_from("<II", blob, 4)
    if version != ERCE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim < 1:
        raise FormatError(f"{path}: non-positive dim {dim}")
    (n_rows,) = struct.unpack_from("<Q", blob, 12)
    flag = blob[20]
    offset = 21
    m: int | None = None
    if flag == 1:
        if len(blob) < offset + 4:
            raise FormatError(f"{path}: truncated futures header")
        (m,) = struct.unpack_from("<I", blob, offset)
        offset += 4
    elif flag != 0:
        raise FormatError(f"{path}: unknown flag byte {flag}")
    expected = n_rows * dim * 4
    if len(blob) - offset != expected:
        raise FormatError(
            f"{path}: payload is {len(blob) - offset} bytes, expected {expected}"
        )
    rows = np.frombuffer(blob, dtype="<f4", count=n_rows * dim, offset=offset)
    rows = rows.reshape(n_rows, dim).copy()
    kind = "futures" if flag == 1 else "base"
    return EmbeddingStore(dim=dim, rows=rows, kind=kind, m=m)


def bind_embeddings(store: EmbeddingStore, corpus: Corpus) -> None:
    """Check base-store row count against the corpus before any compute."""
    if store.kind != "base":
        raise ContractError("bind_embeddings expects a base store")
    if store.n_rows != corpus.n_utterances:
        raise ConsistencyError(
            f"embedding store has {store.n_rows} rows but corpus has "
            f"{corpus.n_utterances} utterances"
        )


def bind_futures(store: EmbeddingStore, corpus: Corpus) -> None:
    if store.kind != "futures":
        raise ConsistencyError("store is not a futures store (flag byte 0)")
    expected = corpus.n_utterances * store.m
    if store.n_rows != expected:
        raise ConsistencyError(
            f"futures store has {store.n_rows} rows but corpus needs "
            f"{expected} ({corpus.n_utterances} utterances x m={store.m})"
        )


# ---------------------------------------------------------------------------
# deterministic mock encoder

def _hash_value(data: bytes, key: bytes) -> int:
    digest = hashlib.blake2b(data, digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def _text_vector(text: str, dim: int, key: bytes) -> np.ndarray:
    framed = ("\x02" + text + "\x03").encode("utf-8")
    vec = np.zeros(dim, dtype=np.float64)
    for i in range(len(framed) - 2):
        val = _hash_value(framed[i:i + 3], key)
        bucket = val % dim
        sign = 1.0 if val < (1 << 63) else -1.0
        vec[bucket] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        # empty text (or full sign cancellation): seeded unit basis vector
        vec[:] = 0.0
        vec[_hash_value(b"", key) % dim] = 1.0
        return vec
    return vec / norm


def mock_encode(corpus: Corpus, dim: int, seed: int) -> EmbeddingStore:
    """Hash character trigrams into dim signed buckets, unit-normalized.

    Vectors depend only on (text, dim, seed), never on corpus position.
    """
    if dim < 1:
        raise ContractError(f"dim must be >= 1, got {dim}")
    key = (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    rows = np.zeros((corpus.n_utterances, dim), dtype=np.float64)
    for _, _, utt, flat in corpus.iter_flat():
        rows[flat] = _text_vector(utt.text, dim, key)
    return EmbeddingStore(dim=dim, rows=rows.astype(np.float32), kind="base")


# ---------------------------------------------------------------------------
# simplified test sets

@dataclass
class SimplifiedCorpus:
    """Utterances with at least ``window`` followers, grouped as before.

    ``original_indices[c]`` maps each retained utterance back to its index in
    the source conversation; conversations left empty are dropped.
    """
    corpus: Corpus
    original_indices: list[list[int]]


def simplify_testset(corpus: Corpus, window: int) -> SimplifiedCorpus:
    if window < 1:
        raise ContractError(f"window must be >= 1, got {window}")
    kept_convs: list[Conversation] = []
    bookkeeping: list[list[int]] = []
    for conv in corpus.conversations:
        keep = [utt.conv_index for utt in conv.utterances
                if (len(conv) - 1 - utt.conv_index) >= window]
        if not keep:
            continue
        utts = [Utterance(speaker=conv.utterances[i].speaker,
                          text=conv.utterances[i].text,
                          label=conv.utterances[i].label)
                for i in keep]
        kept_convs.append(Conversation(conv_id=conv.conv_id, utterances=utts))
        bookkeeping.append(keep)
    sub = Corpus(conversations=kept_convs, labels=list(corpus.labels))
    return SimplifiedCorpus(corpus=sub, original_indices=bookkeeping)


# ---------------------------------------------------------------------------
# export manifests

MANIFEST_SUFFIX = ".manifest.json"


def corpus_checksum(corpus: Corpus) -> str:
    """Stable content hash binding an embedding file to its corpus.

    SHA-256 over every conversation id and every utterance's speaker, text,
    and label name (empty when unlabeled), each field-separated by 0x1f and
    record-separated by 0x1e, in corpus order. External exporters write the
    same hash into their manifests, so mismatched corpora are caught at load
    time without shipping the corpus itself.
    """
    digest = hashlib.sha256()
    for conv in corpus.conversations:
        digest.update(conv.conv_id.encode("utf-8") + b"\x1e")
        for utt in conv.utterances:
            label_name = "" if utt.label is None else corpus.labels[utt.label]
            record = "\x1f".join((utt.speaker, utt.text, label_name))
            digest.update(record.encode("utf-8") + b"\x1e")
    return digest.hexdigest()


def read_manifest(erce_path: str) -> dict | None:
    """The JSON manifest written beside an ERCE file, or None if absent."""
    path = erce_path + MANIFEST_SUFFIX
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: manifest is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: manifest must be a JSON object")
    return doc


def check_manifest(erce_path: str, corpus: Corpus) -> None:
    """Refuse an ERCE file whose manifest was built from a different corpus.

    Files without a manifest pass (mock stores carry none); a manifest with
    a ``corpus_checksum`` field must match ``corpus_checksum(corpus)``.
    """
    manifest = read_manifest(erce_path)
    if manifest is None:
        return
    recorded = manifest.get("corpus_checksum")
    if recorded is None:
        return
    actual = corpus_checksum(corpus)
    if recorded != actual:
        raise ConsistencyError(
            f"{erce_path}: manifest corpus checksum {recorded[:12]}... does "
            f"not match the loaded corpus ({actual[:12]}...)")
