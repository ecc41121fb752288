"""Pseudo-future generators: short plausible continuations of a dialogue.

A generator sees the recent history (the target utterance last) plus the
continuations it already produced for that target, and returns the next
continuation as text. Decoding is greedy by default; every decoding knob
lives in :class:`DecodingParams` so it can be recorded in the manifest.
The default ``stub-dialog`` generator is a deterministic template mixer,
reproducible anywhere with no model downloads; ``hf:<model>`` selects a
causal language model when the optional dependencies are installed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .errors import ExportError


@dataclass(frozen=True)
class DecodingParams:
    strategy: str = "greedy"        # "greedy" | "sample"
    max_new_tokens: int = 32
    temperature: float = 1.0        # used by "sample" only
    seed: int = 0                   # used by "sample" only

    def __post_init__(self) -> None:
        if self.strategy not in ("greedy", "sample"):
            raise ExportError(f"unknown decoding strategy {self.strategy!r}")
        if self.max_new_tokens <= 0:
            raise ExportError(f"max_new_tokens must be positive, got {self.max_new_tokens}")
        if self.temperature <= 0.0:
            raise ExportError(f"temperature must be positive, got {self.temperature}")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "max_new_tokens": self.max_new_tokens,
            "temperature": self.temperature,
            "seed": self.seed,
        }


class Generator:
    """Interface: ``generate(history, prior, params)`` returns continuation text."""

    name: str
    revision: str

    def generate(self, history: list[str], prior: list[str],
                 params: DecodingParams) -> str:
        raise NotImplementedError


_TEMPLATES = (
    "so {tail}?",
    "i hear you about {tail}.",
    "{tail}",
    "what makes you say {tail}?",
    "right, {tail} — tell me more.",
    "hm, {tail} then.",
    "that changes things about {tail}.",
)


class TemplateGenerator(Generator):
    """Deterministic stand-in for a dialogue language model.

    The continuation is a template filled with the tail words of the most
    recent utterance; which template fires is a hash of the full
    conditioning context (history, prior continuations, decoding knobs),
    so the output is a pure function of exactly what a real generator
    would condition on. An empty source utterance can legitimately yield
    an empty continuation (the echo template), which exercises the same
    degenerate path real sampling does.
    """

    def __init__(self, name: str = "stub-dialog", revision: str = "1") -> None:
        self.name = name
        self.revision = revision

    def generate(self, history: list[str], prior: list[str],
                 params: DecodingParams) -> str:
        if not history:
            raise ExportError("generator needs at least the target utterance")
        digest = hashlib.blake2b(digest_size=8, person=self.name.encode()[:16])
        digest.update("\x1f".join(history).encode("utf-8") + b"\x1e")
        digest.update("\x1f".join(prior).encode("utf-8") + b"\x1e")
        digest.update(params.strategy.encode())
        if params.strategy == "sample":
            digest.update(f"\x1f{params.seed}\x1f{params.temperature}".encode())
        choice = int.from_bytes(digest.digest(), "little")
        template = _TEMPLATES[choice % len(_TEMPLATES)]
        tail = " ".join(history[-1].split()[-3:])
        words = template.format(tail=tail).split()
        return " ".join(words[: params.max_new_tokens])


class TransformersGenerator(Generator):
    """Continuation sampling from a Hugging Face causal language model.

    Requires the ``hf`` extra (transformers + torch). The prompt is the
    history and prior continuations joined line by line; greedy decoding
    maps to ``do_sample=False`` and sampling seeds torch's RNG so runs
    stay reproducible per (seed, temperature).
    """

    def __init__(self, model_name: str, revision: str = "main") -> None:
        try:
            import torch  # noqa: F401
            from transformers import AutoModelForCausalLM, AutoTokenizer
        except ImportError as exc:
            raise ExportError(
                f"generator {model_name!r} needs the 'hf' extra installed") from exc
        self.name = model_name
        self.revision = revision
        self._tokenizer = AutoTokenizer.from_pretrained(model_name, revision=revision)
        self._model = AutoModelForCausalLM.from_pretrained(model_name, revision=revision)
        self._model.eval()

    def generate(self, history: list[str], prior: list[str],
                 params: DecodingParams) -> str:
        import torch

        prompt = "\n".join([*history, *prior]) + "\n"
        batch = self._tokenizer(prompt, return_tensors="pt", truncation=True)
        if params.strategy == "sample":
            torch.manual_seed(params.seed)
        with torch.no_grad():
            out = self._model.generate(
                **batch,
                max_new_tokens=params.max_new_tokens,
                do_sample=params.strategy == "sample",
                temperature=params.temperature,
                pad_token_id=self._tokenizer.eos_token_id,
            )
        new_tokens = out[0, batch["input_ids"].shape[1]:]
        return self._tokenizer.decode(new_tokens, skip_special_tokens=True).strip()


def get_generator(generator_id: str) -> Generator:
    """Resolve a generator id: ``stub-dialog`` or ``hf:<model>``."""
    if generator_id == "stub-dialog":
        return TemplateGenerator()
    if generator_id.startswith("hf:"):
        return TransformersGenerator(generator_id[len("hf:"):])
    raise ExportError(
        f"unknown generator {generator_id!r} (known: stub-dialog, or hf:<model>)")
