"""YAML config loading with line-numbered errors."""

from __future__ import annotations

import dataclasses
import re
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


def load_yaml(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark is not None else str(path)
        raise ConfigError(f"{where}: {exc.problem}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping of keys to values")
    return data


def dump_yaml(data: dict[str, Any]) -> str:
    return yaml.safe_dump(data, sort_keys=True, default_flow_style=None)


def key_line(path: str | Path, key: str) -> int | None:
    """1-based line of the first ``key:`` in a YAML file, if any."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError:
        return None
    pat = re.compile(rf"^\s*{re.escape(str(key))}\s*:")
    return next((i for i, ln in enumerate(lines, start=1) if pat.match(ln)), None)


def from_mapping(cls, data: dict[str, Any] | None, where: str = "config", path: str | Path | None = None):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys.

    With ``path`` given, errors about a key point at its line in that file.
    """
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        line = key_line(path, unknown[0]) if path is not None else None
        loc = f"{path}:{line}" if line else where
        raise ConfigError(f"{loc}: unknown key(s) {', '.join(unknown)} in {where}")
    for f in dataclasses.fields(cls):
        if f.name in data and isinstance(data[f.name], list):
            data[f.name] = _tuplify(data[f.name])
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        line = None
        if path is not None:
            bad = [k for k in data if k in str(exc)]
            line = key_line(path, bad[0]) if bad else None
        loc = f"{path}:{line}" if line else where
        raise ConfigError(f"{loc}: {exc}") from None


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def to_mapping(obj) -> dict[str, Any]:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return {k: plain(v) for k, v in dataclasses.asdict(obj).items()}
