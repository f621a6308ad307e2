"""TOML config loading with error messages that point at the offending spot."""

from __future__ import annotations

import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError


def load_toml(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_toml(text, str(path))


def parse_toml(text: str, where: str = "<config>") -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # the decoder message already carries "(at line N, column M)"
        raise ConfigError(f"{where}: {exc}") from None
