"""Key=value run configuration: parsing, defaults, overrides, factories."""

from __future__ import annotations

from .errors import ConfigurationError, ParseError
from .model import ModelConfig
from .training import TrainConfig

# Path keys have no defaults; a command requires the ones it reads.
PATH_KEYS = frozenset(
    f"{group}.{split}"
    for group in ("data", "embeddings", "futures")
    for split in ("train", "dev", "test")
)

DEFAULTS: dict[str, str] = {
    "model.d_m": "768",
    "model.n_h": "8",
    "model.window": "5",
    "model.m": "5",
    "model.k": "2",
    "model.dropout": "0.1",
    "model.pos_mode": "relative",
    "model.contexts": "c,s,pf",
    "model.use_h": "true",
    "model.use_s": "true",
    "model.use_t": "true",
    "model.share_rp": "false",
    "train.epochs": "20",
    "train.lr": "3e-5",
    "train.batch_conversations": "1",
    "train.grad_accum": "4",
    "train.seed": "0",
    "train.precision": "f64",
    "train.metric": "weighted_f1",
    "train.neutral_label": "",
}

KNOWN_KEYS = PATH_KEYS | frozenset(DEFAULTS)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse key=value lines; blank lines and #-comments are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in KNOWN_KEYS:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config_text(text, source=path)


def apply_overrides(cfg: dict[str, str], sets: list[str]) -> dict[str, str]:
    """Apply --set key=value pairs on top of the parsed file."""
    out = dict(cfg)
    for item in sets:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in KNOWN_KEYS:
            raise ConfigurationError(f"--set: unknown key {key!r}")
        out[key] = value.strip()
    return out


def effective_config(provided: dict[str, str]) -> dict[str, str]:
    """Defaults overlaid with the provided keys: what commands echo."""
    out = dict(DEFAULTS)
    out.update(provided)
    return out


def _as_int(cfg: dict[str, str], key: str) -> int:
    try:
        return int(cfg[key])
    except ValueError:
        raise ConfigurationError(f"{key} must be an integer, got {cfg[key]!r}")


def _as_float(cfg: dict[str, str], key: str) -> float:
    try:
        return float(cfg[key])
    except ValueError:
        raise ConfigurationError(f"{key} must be a number, got {cfg[key]!r}")


def _as_bool(cfg: dict[str, str], key: str) -> bool:
    value = cfg[key].lower()
    if value in ("true", "1", "yes"):
        return True
    if value in ("false", "0", "no"):
        return False
    raise ConfigurationError(f"{key} must be true or false, got {cfg[key]!r}")


def _as_contexts(value: str):
    value = value.strip()
    if value == "raw":
        return ("raw",)
    parts = tuple(p.strip() for p in value.split(",") if p.strip())
    if not parts:
        raise ConfigurationError("model.contexts must be non-empty or 'raw'")
    return parts


def model_config_from(cfg: dict[str, str], n_labels: int) -> ModelConfig:
    """Build the model configuration from an effective config map."""
    return ModelConfig(
        d_m=_as_int(cfg, "model.d_m"),
        n_heads=_as_int(cfg, "model.n_h"),
        window=_as_int(cfg, "model.window"),
        n_futures=_as_int(cfg, "model.m"),
        n_labels=n_labels,
        k=_as_int(cfg, "model.k"),
        dropout=_as_float(cfg, "model.dropout"),
        pos_mode=cfg["model.pos_mode"],
        contexts=_as_contexts(cfg["model.contexts"]),
        use_h=_as_bool(cfg, "model.use_h"),
        use_s=_as_bool(cfg, "model.use_s"),
        use_t=_as_bool(cfg, "model.use_t"),
        share_rp=_as_bool(cfg, "model.share_rp"),
        precision=cfg["train.precision"],
        seed=_as_int(cfg, "train.seed"),
    )


def train_config_from(cfg: dict[str, str]) -> TrainConfig:
    neutral = cfg["train.neutral_label"] or None
    return TrainConfig(
        epochs=_as_int(cfg, "train.epochs"),
        lr=_as_float(cfg, "train.lr"),
        batch_conversations=_as_int(cfg, "train.batch_conversations"),
        grad_accum=_as_int(cfg, "train.grad_accum"),
        seed=_as_int(cfg, "train.seed"),
        precision=cfg["train.precision"],
        metric=cfg["train.metric"],
        neutral_label=neutral,
    )


def require_paths(cfg: dict[str, str], keys: list[str]) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ConfigurationError(
            f"config is missing required path keys: {', '.join(missing)}")
