"""Run configuration files: ``key = value`` lines, ``#`` comments.

Keys are the ModelConfig fields plus the trainer options.  Unknown keys,
duplicate keys and unparsable values are rejected with the offending line
number.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .model import ModelConfig
from .train import TrainOptions


class ConfigError(ValueError):
    pass


MODEL_KEYS = {
    "channels": int,
    "layers": int,
    "levels": int,
    "attn_channels": int,
    "embed_dim": int,
    "freq_bins": int,
    "window_frames": int,
    "attention": bool,
    "attn_blocks": tuple,
}

TRAIN_KEYS = {
    "lr": float,
    "steps": int,
    "seed": int,
    "checkpoint_every": int,
    "val_every": int,
    "val_fraction": float,
    "augment": bool,
    "gain_low": float,
    "gain_high": float,
    "batch": int,
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _parse_value(kind, text: str):
    if kind is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind is tuple:
        if text.lower() in ("default", "none", ""):
            return None
        return tuple(int(p) for p in text.replace(",", " ").split())
    if kind is int:
        if text.lower() in ("default", "none"):
            return None
        return int(text)
    return float(text)


def _format_value(value) -> str:
    if value is None:
        return "default"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainOptions = dataclasses.field(default_factory=TrainOptions)

    def dumps(self) -> str:
        lines = ["# model"]
        md = self.model.to_dict()
        for k in MODEL_KEYS:
            lines.append(f"{k} = {_format_value(md[k])}")
        lines.append("# training")
        for k in TRAIN_KEYS:
            lines.append(f"{k} = {_format_value(getattr(self.train, k))}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    model_kw, train_kw = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in MODEL_KEYS:
            target, kind = model_kw, MODEL_KEYS[key]
        elif key in TRAIN_KEYS:
            target, kind = train_kw, TRAIN_KEYS[key]
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in target:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            target[key] = _parse_value(kind, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    for k in [k for k, v in model_kw.items() if v is None]:
        del model_kw[k]  # "default" falls through to the dataclass default
    if None in train_kw.values():
        raise ConfigError(f"{source}: trainer options have no 'default' value")
    try:
        model = ModelConfig(**model_kw)
        train = TrainOptions(**train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return RunConfig(model, train)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
