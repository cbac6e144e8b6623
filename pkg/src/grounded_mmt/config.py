"""Flat ``key = value`` configuration files for training runs.

Blank lines and ``#`` comments are ignored.  Keys are the fields of
:class:`~grounded_mmt.trainer.TrainConfig`; relative paths are resolved
against the directory of the config file.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


PATH_KEYS = ("train_src", "train_tgt", "train_feat", "valid_src", "valid_tgt", "valid_feat", "valid_amb", "out_dir")

_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _convert(key: str, raw: str, lineno: int):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: '{key}' expects {kind}, got '{raw}'") from None
    return raw


def parse_config(text: str, base_dir: str | Path | None = None) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        values[key] = _convert(key, raw, lineno)
    if base_dir is not None:
        for key in PATH_KEYS:
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(Path(base_dir) / values[key])
    cfg = TrainConfig(**values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> TrainConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
