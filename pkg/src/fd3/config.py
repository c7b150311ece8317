"""Flat ``key = value`` config files with dotted keys.

Lines starting with ``#`` are comments. A JSON run manifest can be passed
wherever a config file is expected; its ``config`` mapping is used.
"""
from __future__ import annotations

import json
import os
from pathlib import Path


def parse_config_text(text: str, source: str = "<string>") -> dict[str, str]:
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        cfg[key.strip()] = value.strip()
    return cfg


def load_config(path: str | os.PathLike) -> dict[str, str]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        data = json.loads(text)
        data = data.get("config", data)
        return {k: _to_text(v) for k, v in data.items()}
    return parse_config_text(text, str(path))


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {_to_text(cfg[k])}\n" for k in sorted(cfg))


def _to_text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_to_text(x) for x in v)
    return str(v)


def get_bool(cfg: dict, key: str, default: bool) -> bool:
    if key not in cfg:
        return default
    v = str(cfg[key]).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{key}: expected a boolean, got {cfg[key]!r}")


def get_ints(cfg: dict, key: str, default: tuple[int, ...]) -> tuple[int, ...]:
    if key not in cfg:
        return default
    raw = str(cfg[key]).replace("[", "").replace("]", "").replace("(", "").replace(")", "")
    return tuple(int(x) for x in raw.split(",") if x.strip())
