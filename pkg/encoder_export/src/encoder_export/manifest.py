"""Provenance manifests written beside every exported ERCE file.

A manifest records what produced the file: the encoder (name and
revision), the generator and its decoding parameters for futures
stores, the per-utterance future count m and history window k, a
checksum of the source corpus, and a creation timestamp. Consumers
match ``corpus_checksum`` against their own corpus copy and refuse
the store on disagreement; the remaining fields are provenance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from datetime import datetime, timezone

from .errors import ExportError

MANIFEST_SUFFIX = ".manifest.json"


@dataclass(frozen=True)
class ExportManifest:
    kind: str                             # "embeddings" | "futures"
    encoder_name: str
    encoder_revision: str
    corpus_checksum: str
    created_at: str
    generator_name: str | None = None
    generator_revision: str | None = None
    decoding: dict | None = None          # strategy, max_new_tokens, ...
    m: int | None = None
    k: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def manifest_path(erce_path: str) -> str:
    return erce_path + MANIFEST_SUFFIX


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(erce_path: str, manifest: ExportManifest) -> str:
    path = manifest_path(erce_path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(manifest.to_json())
    return path


def read_manifest(erce_path: str) -> ExportManifest:
    path = manifest_path(erce_path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ExportError(f"{path}: manifest is not a JSON object")
    try:
        return ExportManifest(**raw)
    except TypeError as exc:
        raise ExportError(f"{path}: unexpected manifest fields: {exc}") from exc
