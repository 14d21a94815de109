"""Checkpoint container: a zip of ``.npy`` tensors plus a JSON header.

Entries carry a fixed timestamp so identical weights give identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..config import from_mapping, to_mapping
from .config import ModelConfig
from .model import Model, build_model

FORMAT = "stdet-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path: str | Path, model: Model, extra: dict | None = None) -> None:
    header = {
        "format": FORMAT,
        "version": VERSION,
        "model": to_mapping(model.cfg),
        "dtype": np.dtype(model.dtype).name,
        "tensors": list(model.params),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _entry(zf, "header.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for name, p in model.params.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(p.data), allow_pickle=False)
            _entry(zf, f"tensors/{name}.npy", buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path: str | Path):
    """Returns ``(ModelConfig, OrderedDict name -> array, header)``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != FORMAT:
                raise CheckpointError(f"{path}: not a checkpoint file")
            if header.get("version") != VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
            state = OrderedDict()
            for name in header["tensors"]:
                state[name] = np.lib.format.read_array(io.BytesIO(zf.read(f"tensors/{name}.npy")), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    cfg = from_mapping(ModelConfig, header["model"], f"{path}:model")
    return cfg, state, header


def load_model(path: str | Path) -> Model:
    cfg, state, header = read_checkpoint(path)
    model = build_model(cfg, 0, dtype=np.dtype(header.get("dtype", "float32")).type)
    model.load_state_dict(state, strict=True)
    return model


def warm_start(model: Model, path: str | Path) -> list[str]:
    """Copy every tensor whose name and shape match; returns the names transferred."""
    _, state, _ = read_checkpoint(path)
    return model.load_state_dict(state, strict=False)
