"""The two export operations: utterance embeddings and pseudo-futures.

Both walk the corpus in order, run a deterministic encoder (and, for
futures, a generator), and write an ERCE file plus its provenance
manifest. Conversations are independent, so both operations can fan
out over a thread pool; results are always assembled in corpus order,
so the output bytes do not depend on worker count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .corpus import Conversation, Corpus, corpus_checksum
from .encoders import Encoder, get_encoder
from .erce import write_erce
from .errors import ExportError
from .generators import DecodingParams, Generator, get_generator
from .manifest import ExportManifest, now_iso, write_manifest

log = logging.getLogger("encoder_export")

# Stand-in text when a generator produces an empty continuation: the
# single end-of-utterance token, so the row count contract still holds.
END_OF_UTTERANCE = "</u>"


def _resolve_encoder(encoder: Encoder | str) -> Encoder:
    return get_encoder(encoder) if isinstance(encoder, str) else encoder


def _resolve_generator(generator: Generator | str) -> Generator:
    return get_generator(generator) if isinstance(generator, str) else generator


def _encode_conversation(conv: Conversation, encoder: Encoder) -> np.ndarray:
    rows = np.empty((len(conv), encoder.dim), dtype=np.float32)
    for idx, utt in enumerate(conv.utterances):
        try:
            rows[idx] = encoder.encode(utt.text)
        except ExportError as exc:
            raise ExportError(
                f"utterance {conv.conv_id!r}[{idx}]: {exc}") from exc
    return rows


def _map_conversations(corpus: Corpus, fn, workers: int) -> list[np.ndarray]:
    if workers <= 1:
        return [fn(conv) for conv in corpus.conversations]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, corpus.conversations))


def export_embeddings(corpus: Corpus, encoder: Encoder | str, out_path: str,
                      *, workers: int = 1) -> ExportManifest:
    """Encode every utterance and write a base ERCE store plus manifest.

    One row per utterance, in corpus order. A tokenization failure aborts
    the whole export naming the offending utterance — a store with silently
    skipped rows would misalign every row after the gap.
    """
    enc = _resolve_encoder(encoder)
    blocks = _map_conversations(
        corpus, lambda conv: _encode_conversation(conv, enc), workers)
    matrix = np.concatenate(blocks, axis=0)
    write_erce(out_path, matrix)
    manifest = ExportManifest(
        kind="embeddings",
        encoder_name=enc.name,
        encoder_revision=enc.revision,
        corpus_checksum=corpus_checksum(corpus),
        created_at=now_iso(),
    )
    write_manifest(out_path, manifest)
    log.info("wrote %d x %d embeddings to %s", matrix.shape[0], enc.dim, out_path)
    return manifest


def _future_texts(conv: Conversation, generator: Generator, m: int, k: int,
                  decoding: DecodingParams) -> list[str]:
    """The m continuations per utterance, generated recursively.

    For utterance i the generator sees the last min(i, k)+1 utterances
    (target last) plus its own earlier continuations for that target, so
    later continuations diverge from earlier ones instead of repeating.
    """
    texts = [utt.text for utt in conv.utterances]
    out: list[str] = []
    for i in range(len(texts)):
        history = texts[max(0, i - k): i + 1]
        prior: list[str] = []
        for _ in range(m):
            gen = generator.generate(history, prior, decoding)
            if not gen.strip():
                log.warning(
                    "empty continuation for utterance %r[%d]; substituting %r",
                    conv.conv_id, i, END_OF_UTTERANCE)
                gen = END_OF_UTTERANCE
            prior.append(gen)
        out.extend(prior)
    return out


def generate_futures(corpus: Corpus, generator: Generator | str, out_path: str,
                     *, m: int, k: int, encoder: Encoder | str,
                     decoding: DecodingParams | None = None,
                     workers: int = 1) -> ExportManifest:
    """Generate and encode m pseudo-futures per utterance; write ERCE + manifest.

    The futures store holds m consecutive rows per utterance in corpus
    order, encoded by the same encoder family as the base store so the
    vectors live in one space. Continuations are generated recursively:
    each conditions on a short history window (k earlier utterances plus
    the target) and on the continuations already produced for that target.
    """
    if m <= 0:
        raise ExportError(f"m must be positive, got {m}")
    if k < 0:
        raise ExportError(f"k must be non-negative, got {k}")
    gen = _resolve_generator(generator)
    enc = _resolve_encoder(encoder)
    params = decoding if decoding is not None else DecodingParams()

    def one(conv: Conversation) -> np.ndarray:
        continuations = _future_texts(conv, gen, m, k, params)
        rows = np.empty((len(continuations), enc.dim), dtype=np.float32)
        for idx, text in enumerate(continuations):
            try:
                rows[idx] = enc.encode(text)
            except ExportError as exc:
                raise ExportError(
                    f"continuation for utterance {conv.conv_id!r}"
                    f"[{idx // m}]: {exc}") from exc
        return rows

    blocks = _map_conversations(corpus, one, workers)
    matrix = np.concatenate(blocks, axis=0)
    if matrix.shape[0] != corpus.n_utterances * m:
        raise ExportError(
            f"internal row-count mismatch: {matrix.shape[0]} rows for "
            f"{corpus.n_utterances} utterances x m={m}")
    write_erce(out_path, matrix, futures_m=m)
    manifest = ExportManifest(
        kind="futures",
        encoder_name=enc.name,
        encoder_revision=enc.revision,
        corpus_checksum=corpus_checksum(corpus),
        created_at=now_iso(),
        generator_name=gen.name,
        generator_revision=gen.revision,
        decoding=params.to_dict(),
        m=m,
        k=k,
    )
    write_manifest(out_path, manifest)
    log.info("wrote %d x %d futures (m=%d) to %s",
             matrix.shape[0], enc.dim, m, out_path)
    return manifest
