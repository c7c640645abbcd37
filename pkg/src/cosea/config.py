"""Flat ``key = value`` run configuration shared by the CLI commands."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import ConfigurationError, ParseError


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(",", " ").split())


SCHEMA = {
    # paths
    "data_dir": str,
    "out_dir": str,
    "pretrained_code": str,
    "pretrained_query": str,
    # seeds
    "seed": int,
    "init_seed": int,
    "pool_seed": int,
    # encoder
    "embed_dim": int,
    "hidden_dim": int,
    "num_layers": int,
    "kernel_sizes": _ints,
    "max_code_len": int,
    "max_query_len": int,
    "layer_attention": _bool,
    # training
    "margin": float,
    "lr": float,
    "batch_size": int,
    "epochs": int,
    "loss": str,
    "patience": int,
}

DEFAULTS = {
    "seed": 0,
    "init_seed": 0,
    "pool_seed": 0,
}

ENCODER_KEYS = ("embed_dim", "hidden_dim", "num_layers", "kernel_sizes", "max_code_len", "max_query_len",
                "layer_attention")
PATH_KEYS = ("data_dir", "out_dir", "pretrained_code", "pretrained_query")
TRAIN_KEYS = ("margin", "lr", "batch_size", "epochs", "loss", "patience")


class RunConfig(dict):
    """Validated configuration mapping; unknown keys are rejected."""

    def set(self, key: str, raw: str):
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        try:
            self[key] = SCHEMA[key](raw.strip())
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key}: {exc}") from None

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls(DEFAULTS)
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{source}: expected 'key = value'", lineno)
            key, value = line.split("=", 1)
            try:
                cfg.set(key, value)
            except ConfigurationError as exc:
                raise ParseError(f"{source}: {exc}", lineno) from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), str(path))

    def apply_overrides(self, overrides):
        for item in overrides or ():
            if "=" not in item:
                raise ConfigurationError(f"override must be key=value, got {item!r}")
            key, value = item.split("=", 1)
            self.set(key, value)

    def require(self, *keys):
        missing = [k for k in keys if k not in self]
        if missing:
            raise ConfigurationError(f"missing configuration key(s): {', '.join(missing)}")

    def subset(self, keys) -> dict:
        return {k: self[k] for k in keys if k in self}

    def canonical(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.items())}

    def digest(self) -> str:
        """Hash of every non-path setting, so relocated runs share a digest."""
        settings = {k: v for k, v in self.canonical().items() if k not in PATH_KEYS}
        return hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()[:16]
