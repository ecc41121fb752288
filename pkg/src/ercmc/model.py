"""Multi-context conversation tagger.

For each utterance three local areas are built over precomputed embeddings:
a historical window, a same-speaker window (target last in both), and the
utterance followed by its pseudo-future vectors (target first). Each enabled
area runs through its own branch: multi-head attention with learned
relative-position offsets, a position-wise feed-forward, a state gate that
summarizes the non-target positions against the target, and a per-branch
recurrent cell tracking the gated states across the conversation. Branch
outputs are fused per component (local-aware h, gated s, tracked t) and
classified; training minimizes negative log-likelihood.

Checkpoints ("ERCK") store every named tensor as float32 plus the label
vocabulary and the effective configuration.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Conversation, atomic_write_bytes
from .errors import ConfigurationError, ConsistencyError, FormatError
from .tensor import Tensor

CONTEXT_ORDER = ("c", "s", "pf")
POS_MODES = ("relative", "none", "sinusoidal", "learned")
ERCK_MAGIC = b"ERCK"
ERCK_VERSION = 1


@dataclass
class ModelConfig:
    d_m: int
    n_heads: int
    window: int  # local-area history size (area capacity = window + 1)
    n_futures: int
    n_labels: int
    k: int = 2  # history turns a futures request conditions on
    dropout: float = 0.1
    pos_mode: str = "relative"
    contexts: tuple[str, ...] = ("c", "s", "pf")
    use_h: bool = True
    use_s: bool = True
    use_t: bool = True
    share_rp: bool = False
    precision: str = "f64"
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.contexts, str):
            self.contexts = (self.contexts,)
        else:
            self.contexts = tuple(self.contexts)
        if self.d_m < 1 or self.n_heads < 1:
            raise ConfigurationError("d_m and n_heads must be positive")
        if self.d_m % self.n_heads != 0:
            raise ConfigurationError(
                f"d_m={self.d_m} is not divisible by n_heads={self.n_heads}"
            )
        if self.window < 1:
            raise ConfigurationError(f"window must be >= 1, got {self.window}")
        if self.n_labels < 2:
            raise ConfigurationError(f"need at least 2 labels, got {self.n_labels}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.pos_mode not in POS_MODES:
            raise ConfigurationError(
                f"pos_mode must be one of {POS_MODES}, got {self.pos_mode!r}"
            )
        if self.precision not in ("f64", "f32"):
            raise ConfigurationError(f"precision must be f64 or f32, got {self.precision!r}")
        if self.is_raw:
            if self.contexts != ("raw",):
                raise ConfigurationError("raw mode excludes other contexts")
        else:
            if not self.contexts:
                raise ConfigurationError("contexts must be non-empty (or raw)")
            for c in self.contexts:
                if c not in CONTEXT_ORDER:
                    raise ConfigurationError(f"unknown context {c!r}")
            # canonical order, duplicates dropped
            self.contexts = tuple(c for c in CONTEXT_ORDER if c in self.contexts)
            if not (self.use_h or self.use_s or self.use_t):
                raise ConfigurationError("at least one of use_h/use_s/use_t required")
            if "pf" in self.contexts and self.n_futures < 1:
                raise ConfigurationError("future context enabled but n_futures < 1")

    @property
    def is_raw(self) -> bool:
        return "raw" in self.contexts

    @property
    def d_k(self) -> int:
        return self.d_m // self.n_heads

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def to_config_dict(self) -> dict[str, str]:
        return {
            "model.d_m": str(self.d_m),
            "model.n_h": str(self.n_heads),
            "model.window": str(self.window),
            "model.m": str(self.n_futures),
            "model.k": str(self.k),
            "model.dropout": repr(self.dropout),
            "model.pos_mode": self.pos_mode,
            "model.contexts": ",".join(self.contexts),
            "model.use_h": "true" if self.use_h else "false",
            "model.use_s": "true" if self.use_s else "false",
            "model.use_t": "true" if self.use_t else "false",
            "model.share_rp": "true" if self.share_rp else "false",
            "train.precision": self.precision,
            "train.seed": str(self.seed),
        }

    @classmethod
    def from_config_dict(cls, cfg: dict[str, str], n_labels: int) -> "ModelConfig":
        def flag(key: str, default: str) -> bool:
            return cfg.get(key, default).strip().lower() == "true"

        return cls(
            d_m=int(cfg["model.d_m"]),
            n_heads=int(cfg["model.n_h"]),
            window=int(cfg["model.window"]),
            n_futures=int(cfg["model.m"]),
            n_labels=n_labels,
            k=int(cfg.get("model.k", "2")),
            dropout=float(cfg.get("model.dropout", "0.1")),
            pos_mode=cfg.get("model.pos_mode", "relative"),
            contexts=tuple(cfg.get("model.contexts", "c,s,pf").split(",")),
            use_h=flag("model.use_h", "true"),
            use_s=flag("model.use_s", "true"),
            use_t=flag("model.use_t", "true"),
            share_rp=flag("model.share_rp", "false"),
            precision=cfg.get("train.precision", "f64"),
            seed=int(cfg.get("train.seed", "0")),
        )


@dataclass
class LocalArea:
    vectors: np.ndarray  # (size, d_m)
    target_pos: int
    kind: str  # "c" | "s" | "pf"


def build_local_areas(conv: Conversation, embeddings: np.ndarray,
                      futures: np.ndarray | None, index: int, window: int,
                      n_futures: int, enabled: tuple[str, ...]) -> dict[str, LocalArea]:
    """Areas for utterance ``index``: history and same-speaker windows end at
    the target; the future area starts with it."""
    areas: dict[str, LocalArea] = {}
    if "c" in enabled:
        size = min(index, window) + 1
        vecs = embeddings[index - size + 1:index + 1]
        areas["c"] = LocalArea(vecs, target_pos=size - 1, kind="c")
    if "s" in enabled:
        speaker = conv.utterances[index].speaker
        prior = [j for j in range(index)
                 if conv.utterances[j].speaker == speaker][-window:]
        rows = prior + [index]
        areas["s"] = LocalArea(embeddings[rows], target_pos=len(rows) - 1, kind="s")
    if "pf" in enabled:
        vecs = np.concatenate([embeddings[index:index + 1],
                               futures[index][:n_futures]], axis=0)
        areas["pf"] = LocalArea(vecs, target_pos=0, kind="pf")
    return areas


def sinusoidal_table(n_positions: int, d_m: int) -> np.ndarray:
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    dim = np.arange(d_m, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * np.floor(dim / 2.0)) / d_m)
    return np.where(np.arange(d_m)[None, :] % 2 == 0, np.sin(angle), np.cos(angle))


_GRU_NAMES = ("wz", "uz", "bz", "wr", "ur", "br", "wn", "un", "bn")


class ContextModel:
    """Owns all trainable tensors and runs the per-conversation forward."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        streams = np.random.SeedSequence(cfg.seed).spawn(3)
        init_rng = np.random.default_rng(streams[0])
        self._dropout_rng = np.random.default_rng(streams[1])
        self._params: dict[str, Tensor] = {}
        self._build(init_rng)

    # -- construction -------------------------------------------------------

    def _add(self, name: str, rows: int, cols: int, rng, zero: bool = False) -> Tensor:
        data = (np.zeros((rows, cols), dtype=self.cfg.dtype) if zero
                else T.glorot_uniform(rows, cols, rng, dtype=self.cfg.dtype))
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        if cfg.is_raw:
            self._add("classifier.wm", cfg.d_m, cfg.n_labels, rng)
            self._add("classifier.bm", 1, cfg.n_labels, rng, zero=True)
            return
        for kind in cfg.contexts:
            pre = f"branch.{kind}"
            for p in range(cfg.n_heads):
                self._add(f"{pre}.head{p}.wq", cfg.d_m, cfg.d_k, rng)
                self._add(f"{pre}.head{p}.wk", cfg.d_m, cfg.d_k, rng)
                self._add(f"{pre}.head{p}.wv", cfg.d_m, cfg.d_k, rng)
            self._add(f"{pre}.wo", cfg.d_m, cfg.d_m, rng)
            self._add(f"{pre}.ffn.w1", cfg.d_m, 4 * cfg.d_m, rng)
            self._add(f"{pre}.ffn.b1", 1, 4 * cfg.d_m, rng, zero=True)
            self._add(f"{pre}.ffn.w2", 4 * cfg.d_m, cfg.d_m, rng)
            self._add(f"{pre}.ffn.b2", 1, cfg.d_m, rng, zero=True)
            if cfg.pos_mode == "relative":
                n_dist = 2 * cfg.window + 1
                if cfg.share_rp:
                    self._add(f"{pre}.rpk.shared", n_dist, cfg.d_k, rng)
                    self._add(f"{pre}.rpv.shared", n_dist, cfg.d_k, rng)
                else:
                    for p in range(cfg.n_heads):
                        self._add(f"{pre}.rpk.head{p}", n_dist, cfg.d_k, rng)
                        self._add(f"{pre}.rpv.head{p}", n_dist, cfg.d_k, rng)
            elif cfg.pos_mode == "learned":
                capacity = (cfg.n_futures if kind == "pf" else cfg.window) + 1
                self._add(f"{pre}.pos_table", capacity, cfg.d_m, rng)
            self._add(f"{pre}.gate.ws", cfg.d_m, cfg.d_m, rng)
            for gname in _GRU_NAMES:
                rows = 1 if gname.startswith("b") else cfg.d_m
                self._add(f"{pre}.gru.{gname}", rows, cfg.d_m, rng,
                          zero=gname.startswith("b"))
        n_ctx = len(cfg.contexts)
        if cfg.use_h:
            self._add("fusion.wf_h", n_ctx * cfg.d_m, cfg.d_m, rng)
        if cfg.use_s:
            self._add("fusion.wf_s", n_ctx * cfg.d_m, cfg.d_m, rng)
        if cfg.use_t:
            self._add("fusion.wf_t", n_ctx * cfg.d_m, cfg.d_m, rng)
        n_comp = sum((cfg.use_h, cfg.use_s, cfg.use_t))
        self._add("classifier.wm", n_comp * cfg.d_m, cfg.n_labels, rng)
        self._add("classifier.bm", 1, cfg.n_labels, rng, zero=True)

    # -- parameter access ----------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def parameter_signature(self) -> list[tuple[str, tuple[int, int]]]:
        return [(name, p.shape) for name, p in self._params.items()]

    @contextmanager
    def published_precision(self):
        """Round parameters through float32 for the duration (idempotent for
        values that already survived a checkpoint round trip)."""
        saved = [p.data for p in self.parameters()]
        for p in self.parameters():
            p.data = p.data.astype(np.float32).astype(self.cfg.dtype)
        try:
            yield
        finally:
            for p, data in zip(self.parameters(), saved):
                p.data = data

    # -- forward -------------------------------------------------------------

    def _distance_index(self, size: int) -> np.ndarray:
        span = np.arange(size)
        dist = span[None, :] - span[:, None]
        return np.clip(dist, -self.cfg.window, self.cfg.window) + self.cfg.window

    def _area_input(self, kind: str, area: LocalArea) -> Tensor:
        cfg = self.cfg
        vecs = area.vectors.astype(cfg.dtype)
        if cfg.pos_mode == "sinusoidal":
            vecs = vecs + sinusoidal_table(vecs.shape[0], cfg.d_m).astype(cfg.dtype)
            return Tensor(vecs)
        x = Tensor(vecs)
        if cfg.pos_mode == "learned":
            table = self._params[f"branch.{kind}.pos_table"]
            return T.add(x, T.slice_rows(table, 0, vecs.shape[0]))
        return x

    def _attention(self, kind: str, x: Tensor, training: bool) -> Tensor:
        cfg = self.cfg
        size = x.shape[0]
        pre = f"branch.{kind}"
        relative = cfg.pos_mode == "relative"
        idx = self._distance_index(size) if relative else None
        inv_sqrt = 1.0 / math.sqrt(cfg.d_k)
        heads = []
        for p in range(cfg.n_heads):
            q = T.matmul(x, self._params[f"{pre}.head{p}.wq"])
            k = T.matmul(x, self._params[f"{pre}.head{p}.wk"])
            v = T.matmul(x, self._params[f"{pre}.head{p}.wv"])
            scores = T.matmul(q, T.transpose(k))
            if relative:
                rp_name = "shared" if cfg.share_rp else f"head{p}"
                rpk = self._params[f"{pre}.rpk.{rp_name}"]
                scores = T.add(scores, T.relpos_score(q, rpk, idx))
            alpha = T.softmax_lastdim(T.scale(scores, inv_sqrt))
            head = T.matmul(alpha, v)
            if relative:
                rp_name = "shared" if cfg.share_rp else f"head{p}"
                rpv = self._params[f"{pre}.rpv.{rp_name}"]
                head = T.add(head, T.relpos_combine(alpha, rpv, idx))
            heads.append(head)
        h_prime = T.matmul(T.concat_lastdim(heads), self._params[f"{pre}.wo"])
        inner = T.relu(T.add(T.matmul(h_prime, self._params[f"{pre}.ffn.w1"]),
                             self._params[f"{pre}.ffn.b1"]))
        h = T.add(T.matmul(inner, self._params[f"{pre}.ffn.w2"]),
                  self._params[f"{pre}.ffn.b2"])
        return T.dropout(h, cfg.dropout, training, self._dropout_rng)

    def _state_gate(self, kind: str, h: Tensor, target_pos: int) -> Tensor:
        size = h.shape[0]
        if size == 1:
            return Tensor(np.zeros((1, self.cfg.d_m), dtype=self.cfg.dtype))
        ws = self._params[f"branch.{kind}.gate.ws"]
        h_target = T.slice_rows(h, target_pos, target_pos + 1)
        scores = T.tanh(T.matmul(T.matmul(h, ws), T.transpose(h_target)))
        mask = np.ones((1, size), dtype=bool)
        mask[0, target_pos] = False
        beta = T.softmax_lastdim(T.transpose(scores), mask)
        return T.matmul(beta, h)

    def _global_track(self, kind: str, s: Tensor, t_prev: Tensor) -> Tensor:
        p = self._params
        pre = f"branch.{kind}.gru"
        z = T.sigmoid(T.add(T.add(T.matmul(s, p[f"{pre}.wz"]),
                                  T.matmul(t_prev, p[f"{pre}.uz"])), p[f"{pre}.bz"]))
        r = T.sigmoid(T.add(T.add(T.matmul(s, p[f"{pre}.wr"]),
                                  T.matmul(t_prev, p[f"{pre}.ur"])), p[f"{pre}.br"]))
        n = T.tanh(T.add(T.add(T.matmul(s, p[f"{pre}.wn"]),
                               T.mul(r, T.matmul(t_prev, p[f"{pre}.un"]))),
                         p[f"{pre}.bn"]))
        # (1-z)*n + z*t_prev, written to reuse n
        return T.add(n, T.mul(z, T.sub(t_prev, n)))

    def branch_forward(self, kind: str, area: LocalArea, t_prev: Tensor,
                       training: bool = False) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Run one branch on one area: returns (h_all, h_target, s, t)."""
        x = self._area_input(kind, area)
        h = self._attention(kind, x, training)
        h_target = T.slice_rows(h, area.target_pos, area.target_pos + 1)
        s = self._state_gate(kind, h, area.target_pos)
        t = self._global_track(kind, s, t_prev)
        return h, h_target, s, t

    def initial_state(self) -> dict[str, Tensor]:
        return {kind: Tensor(np.zeros((1, self.cfg.d_m), dtype=self.cfg.dtype))
                for kind in self.cfg.contexts}

    def forward_conversation(self, conv: Conversation, embeddings: np.ndarray,
                             futures: np.ndarray | None,
                             training: bool = False) -> Tensor:
        """Log-probabilities, one row per utterance in conversation order."""
        cfg = self.cfg
        n = len(conv)
        embeddings = np.asarray(embeddings)
        if embeddings.shape != (n, cfg.d_m):
            raise ConsistencyError(
                f"conversation {conv.conv_id!r}: embeddings shaped "
                f"{embeddings.shape}, expected ({n}, {cfg.d_m})"
            )
        if not cfg.is_raw and "pf" in cfg.contexts:
            if futures is None:
                raise ConsistencyError(
                    f"conversation {conv.conv_id!r}: future context enabled "
                    "but no futures supplied"
                )
            futures = np.asarray(futures)
            if futures.shape != (n, cfg.n_futures, cfg.d_m):
                raise ConsistencyError(
                    f"conversation {conv.conv_id!r}: futures shaped "
                    f"{futures.shape}, expected ({n}, {cfg.n_futures}, {cfg.d_m})"
                )
        x_all = embeddings.astype(cfg.dtype)
        fut_all = None if futures is None else futures.astype(cfg.dtype)
        rows: list[Tensor] = []
        if cfg.is_raw:
            for i in range(n):
                f = Tensor(x_all[i:i + 1])
                f = T.dropout(f, cfg.dropout, training, self._dropout_rng)
                logits = T.add(T.matmul(f, self._params["classifier.wm"]),
                               self._params["classifier.bm"])
                rows.append(T.log_softmax_lastdim(logits))
            return T.concat_rows(rows)
        t_prev = self.initial_state()
        for i in range(n):
            areas = build_local_areas(conv, x_all, fut_all, i, cfg.window,
                                      cfg.n_futures, cfg.contexts)
            h_targets: list[Tensor] = []
            s_states: list[Tensor] = []
            t_states: list[Tensor] = []
            for kind in cfg.contexts:
                _, h_t, s, t = self.branch_forward(kind, areas[kind],
                                                   t_prev[kind], training)
                t_prev[kind] = t
                h_targets.append(h_t)
                s_states.append(s)
                t_states.append(t)
            comps: list[Tensor] = []
            if cfg.use_h:
                comps.append(T.matmul(T.concat_lastdim(h_targets),
                                      self._params["fusion.wf_h"]))
            if cfg.use_s:
                comps.append(T.matmul(T.concat_lastdim(s_states),
                                      self._params["fusion.wf_s"]))
            if cfg.use_t:
                comps.append(T.matmul(T.concat_lastdim(t_states),
                                      self._params["fusion.wf_t"]))
            f = comps[0] if len(comps) == 1 else T.concat_lastdim(comps)
            f = T.dropout(f, cfg.dropout, training, self._dropout_rng)
            logits = T.add(T.matmul(f, self._params["classifier.wm"]),
                           self._params["classifier.bm"])
            rows.append(T.log_softmax_lastdim(logits))
        return T.concat_rows(rows)

    def predict_conversation(self, conv: Conversation, embeddings: np.ndarray,
                             futures: np.ndarray | None) -> tuple[np.ndarray, list[int]]:
        """Class distributions and argmax labels (dropout off, no recording)."""
        with T.no_grad():
            log_probs = self.forward_conversation(conv, embeddings, futures,
                                                  training=False)
        probs = np.exp(log_probs.data)
        preds = [int(np.argmax(row)) for row in probs]
        return probs, preds


# ---------------------------------------------------------------------------
# checkpoint format

def save_checkpoint(path: str, model: ContextModel, labels: list[str],
                    extra_config: dict[str, str] | None = None) -> None:
    if len(labels) != model.cfg.n_labels:
        raise ConsistencyError(
            f"{len(labels)} labels for a {model.cfg.n_labels}-class model"
        )
    config = dict(model.cfg.to_config_dict())
    if extra_config:
        config.update(extra_config)
    named = model.named_parameters()
    out = bytearray()
    out += ERCK_MAGIC
    out += struct.pack("<II", ERCK_VERSION, len(named))
    for name, tensor in named.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        rows, cols = tensor.shape
        out += struct.pack("<I", 2)
        out += struct.pack("<QQ", rows, cols)
        out += np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
    out += struct.pack("<I", len(labels))
    for label in labels:
        encoded = label.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
    blob = "\n".join(f"{k}={v}" for k, v in sorted(config.items())).encode("utf-8")
    out += struct.pack("<I", len(blob))
    out += blob
    atomic_write_bytes(path, bytes(out))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def utf8(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path: str) -> tuple[ContextModel, list[str], dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != ERCK_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    r = _Reader(blob, path)
    r.take(4)
    version = r.u32()
    if version != ERCK_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    n_tensors = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name = r.utf8()
        rank = r.u32()
        dims = [r.u64() for _ in range(rank)]
        count = 1
        for d in dims:
            count *= d
        data = np.frombuffer(r.take(count * 4), dtype="<f4").reshape(dims)
        tensors[name] = data
    labels = [r.utf8() for _ in range(r.u32())]
    config: dict[str, str] = {}
    for line in r.utf8().splitlines():
        if line:
            key, _, value = line.partition("=")
            config[key] = value
    cfg = ModelConfig.from_config_dict(config, n_labels=len(labels))
    model = ContextModel(cfg)
    named = model.named_parameters()
    if set(named) != set(tensors):
        missing = sorted(set(named) - set(tensors))
        extra = sorted(set(tensors) - set(named))
        raise FormatError(
            f"{path}: tensor names do not match the configuration "
            f"(missing {missing}, unexpected {extra})"
        )
    for name, tensor in named.items():
        stored = tensors[name]
        if tuple(stored.shape) != tensor.shape:
            raise FormatError(
                f"{path}: tensor {name} shaped {stored.shape}, "
                f"expected {tensor.shape}"
            )
        tensor.data = stored.astype(cfg.dtype)
        tensor.grad = np.zeros_like(tensor.data)
    return model, labels, config
