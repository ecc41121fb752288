"""Utterance encoders producing fixed-width embedding vectors.

Every encoder tokenizes an utterance, truncates it to ``max_length``
tokens, and returns the first-token (sequence-summary) representation
as a float32 vector. Two deterministic hash-projection encoders ship
by default so exports are reproducible without model downloads:
``stub-base`` (768 dimensions) and ``stub-large`` (1024 dimensions).
``hf:<model>`` selects a transformer encoder when the optional
dependencies are installed.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ExportError

MAX_TOKENS = 128
BOUNDARY_TOKEN = "<s>"


class Encoder:
    """Interface: ``encode(text)`` returns a (dim,) float32 vector."""

    name: str
    revision: str
    dim: int
    max_length: int = MAX_TOKENS

    def encode(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def encode_all(self, texts: list[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            out[i] = self.encode(text)
        return out


class HashProjectionEncoder(Encoder):
    """Deterministic stand-in for a pretrained encoder.

    Whitespace tokens (after a prepended boundary token, truncated to
    ``max_length``) are hashed to pseudo-random unit-scale vectors, then
    folded left-to-right through a bounded recurrence so the final
    first-token state reflects content *and* order. Same text in, same
    vector out — on any machine, with no weights to download.
    """

    def __init__(self, name: str, dim: int, revision: str = "1") -> None:
        self.name = name
        self.revision = revision
        self.dim = dim

    def _tokenize(self, text: str) -> list[str]:
        # A tokenizer sees bytes; undecodable text (lone surrogates) is a
        # tokenization failure, not something to silently repair.
        text.encode("utf-8")
        tokens = [BOUNDARY_TOKEN] + text.split()
        return tokens[: self.max_length]

    def _token_vector(self, token: str, position: int) -> np.ndarray:
        key = hashlib.blake2b(
            f"{position}\x1f{token}".encode(), digest_size=8,
            person=self.name.encode()[:16],
        ).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(key, "little")))
        return rng.standard_normal(self.dim).astype(np.float32)

    def encode(self, text: str) -> np.ndarray:
        try:
            tokens = self._tokenize(text)
        except UnicodeEncodeError as exc:
            raise ExportError(f"tokenization failed: {exc}") from exc
        state = self._token_vector(tokens[0], 0)
        for position, token in enumerate(tokens[1:], start=1):
            state = np.tanh(0.7 * state + 0.5 * self._token_vector(token, position))
        norm = float(np.linalg.norm(state))
        if norm > 0.0:
            state = state / norm
        return state.astype(np.float32)


class TransformersEncoder(Encoder):
    """First-token pooling over a Hugging Face transformer encoder.

    Requires the ``hf`` extra (transformers + torch). The model's own
    tokenizer is used with truncation at ``max_length``; the embedding is
    ``last_hidden_state[:, 0]`` — 768-wide for base models, 1024 for large.
    """

    def __init__(self, model_name: str, revision: str = "main") -> None:
        try:
            import torch  # noqa: F401
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise ExportError(
                f"encoder {model_name!r} needs the 'hf' extra installed") from exc
        self.name = model_name
        self.revision = revision
        self._tokenizer = AutoTokenizer.from_pretrained(model_name, revision=revision)
        self._model = AutoModel.from_pretrained(model_name, revision=revision)
        self._model.eval()
        self.dim = int(self._model.config.hidden_size)

    def encode(self, text: str) -> np.ndarray:
        import torch

        try:
            batch = self._tokenizer(
                text, return_tensors="pt", truncation=True, max_length=self.max_length)
        except Exception as exc:
            raise ExportError(f"tokenization failed: {exc}") from exc
        with torch.no_grad():
            hidden = self._model(**batch).last_hidden_state
        return hidden[0, 0].cpu().numpy().astype(np.float32)


_STUB_DIMS = {"stub-base": 768, "stub-large": 1024}


def get_encoder(encoder_id: str) -> Encoder:
    """Resolve an encoder id: ``stub-base``, ``stub-large``, or ``hf:<model>``."""
    if encoder_id in _STUB_DIMS:
        return HashProjectionEncoder(encoder_id, dim=_STUB_DIMS[encoder_id])
    if encoder_id.startswith("hf:"):
        return TransformersEncoder(encoder_id[len("hf:"):])
    known = ", ".join(sorted(_STUB_DIMS))
    raise ExportError(f"unknown encoder {encoder_id!r} (known: {known}, or hf:<model>)")
