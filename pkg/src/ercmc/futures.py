"""Pseudo-future vectors per utterance: precomputed stores and retrieval mocks.

A provider answers ``futures_for`` with exactly m vectors of dimension d_m
for any utterance. The precomputed provider reads m consecutive rows per
utterance from a futures embedding store. The mock builder retrieves nearest
neighbors by cosine from the corpus's own embeddings, folding each selection
into a running query mean so later picks condition on earlier ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Corpus, EmbeddingStore, bind_embeddings, bind_futures
from .errors import ConsistencyError, ContractError, CoverageError


@dataclass
class FuturesRequest:
    conv_id: str
    index: int  # utterance position i within the conversation
    m: int
    k: int  # history window; effective history size is min(index, k)

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ContractError(f"m must be >= 1, got {self.m}")
        if self.k < 0:
            raise ContractError(f"k must be >= 0, got {self.k}")


class StoreFuturesProvider:
    """Serves verbatim rows [flat(i)*m, flat(i)*m + m) of a futures store."""

    def __init__(self, corpus: Corpus, store: EmbeddingStore):
        bind_futures(store, corpus)
        self._corpus = corpus
        self._store = store
        self._by_id: dict[str, int] = {}
        for pos, conv in enumerate(corpus.conversations):
            if conv.conv_id in self._by_id:
                raise ConsistencyError(f"duplicate conversation id {conv.conv_id!r}")
            self._by_id[conv.conv_id] = pos

    @property
    def m(self) -> int:
        return self._store.m

    @property
    def dim(self) -> int:
        return self._store.dim

    def futures_for(self, req: FuturesRequest) -> np.ndarray:
        conv_pos = self._by_id.get(req.conv_id)
        if conv_pos is None:
            raise CoverageError(f"no conversation {req.conv_id!r} in the bound corpus")
        conv = self._corpus.conversations[conv_pos]
        if not (0 <= req.index < len(conv)):
            raise CoverageError(
                f"conversation {req.conv_id!r} has {len(conv)} utterances, "
                f"index {req.index} requested"
            )
        if req.m != self._store.m:
            raise CoverageError(
                f"store holds m={self._store.m} rows per utterance, "
                f"request asks for m={req.m}"
            )
        flat = self._corpus.flat_index(conv_pos, req.index)
        return self._store.futures_block(flat)

    def conversation_futures(self, conv_pos: int) -> np.ndarray:
        """All futures for one conversation, shaped (n_utterances, m, dim)."""
        conv = self._corpus.conversations[conv_pos]
        flat0 = self._corpus.flat_index(conv_pos, 0)
        block = self._store.rows[flat0 * self.m:(flat0 + len(conv)) * self.m]
        return block.reshape(len(conv), self.m, self.dim)


def build_mock_futures(corpus: Corpus, embeddings: EmbeddingStore, m: int, k: int,
                       seed: int = 0) -> EmbeddingStore:
    """Retrieval-based stand-in for generated futures.

    For utterance i the query starts as the mean of the min(i,k)+1 most
    recent embeddings (u_{i-k}..u_i). Each of the m picks is the corpus
    embedding with the highest cosine to the current query, excluding u_i
    itself and earlier picks, ties broken by ascending flat row; the pick is
    folded into the query mean before the next selection. With no candidates
    left the current query itself is emitted. The procedure is fully
    deterministic; ``seed`` is accepted for provenance only and never drawn
    from.
    """
    if m < 1:
        raise ContractError(f"m must be >= 1, got {m}")
    if k < 0:
        raise ContractError(f"k must be >= 0, got {k}")
    bind_embeddings(embeddings, corpus)
    del seed
    pool = embeddings.rows.astype(np.float64)
    pool_norms = np.linalg.norm(pool, axis=1)
    total = corpus.n_utterances
    out = np.zeros((total * m, embeddings.dim), dtype=np.float64)
    for conv_pos, conv, utt, flat in corpus.iter_flat():
        i = utt.conv_index
        conv_start = flat - i
        members = [pool[conv_start + j] for j in range(i - min(i, k), i + 1)]
        excluded = np.zeros(total, dtype=bool)
        excluded[flat] = True
        for step in range(m):
            query = np.mean(members, axis=0)
            qn = float(np.linalg.norm(query))
            if qn == 0.0:
                sims = np.zeros(total)
            else:
                sims = pool @ query
                safe = np.where(pool_norms == 0.0, 1.0, pool_norms)
                sims = np.where(pool_norms == 0.0, 0.0, sims / (safe * qn))
            sims[excluded] = -np.inf
            if not np.isfinite(sims).any():
                pick = query.copy()
                members.append(query.copy())
            else:
                best = int(np.argmax(sims))
                pick = pool[best].copy()
                excluded[best] = True
                members.append(pool[best])
            out[flat * m + step] = pick
    return EmbeddingStore(dim=embeddings.dim, rows=out.astype(np.float32),
                          kind="futures", m=m)


def mock_futures_provider(corpus: Corpus, embeddings: EmbeddingStore, m: int,
                          k: int, seed: int = 0) -> StoreFuturesProvider:
    store = build_mock_futures(corpus, embeddings, m, k, seed)
    return StoreFuturesProvider(corpus, store)
