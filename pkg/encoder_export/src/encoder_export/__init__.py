"""Offline export tool for conversation embedding stores.

Runs an utterance encoder over a conversation corpus and writes the
resulting vectors as ERCE files, and generates pseudo-future
continuations per utterance (recursively, conditioned on a short
history window) whose encodings are written as an ERCE futures file.
Every output file is accompanied by a provenance manifest recording
the encoder, generator, decoding parameters, and a corpus checksum so
downstream consumers can refuse stores built from a different corpus.
"""

from .corpus import Conversation, Corpus, Utterance, corpus_checksum, load_corpus
from .encoders import Encoder, HashProjectionEncoder, get_encoder
from .erce import write_erce
from .errors import CorpusError, ExportError
from .export import export_embeddings, generate_futures
from .generators import DecodingParams, Generator, TemplateGenerator, get_generator
from .manifest import ExportManifest, manifest_path

__all__ = [
    "Conversation",
    "Corpus",
    "CorpusError",
    "DecodingParams",
    "Encoder",
    "ExportError",
    "ExportManifest",
    "Generator",
    "HashProjectionEncoder",
    "TemplateGenerator",
    "Utterance",
    "corpus_checksum",
    "export_embeddings",
    "generate_futures",
    "get_encoder",
    "get_generator",
    "load_corpus",
    "manifest_path",
    "write_erce",
]
