"""Atomic, schema-versioned persistence for checkpoints, keys and reports."""
from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import torch

CHECKPOINT_SCHEMA = 1


class SchemaError(ValueError):
    pass


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    _atomic_write_bytes(Path(path), text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path, schema: int | None = None) -> dict:
    obj = json.loads(Path(path).read_text())
    if schema is not None and obj.get("schema") != schema:
        raise SchemaError(f"{path}: unsupported schema {obj.get('schema')!r} (expected {schema})")
    return obj


def save_checkpoint(path, payload: dict) -> None:
    """Write ``payload`` (nested dicts of tensors/scalars) with a schema tag, atomically."""
    buf = io.BytesIO()
    torch.save({"schema": CHECKPOINT_SCHEMA, **payload}, buf)
    _atomic_write_bytes(Path(path), buf.getvalue())


def load_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("schema") != CHECKPOINT_SCHEMA:
        found = payload.get("schema") if isinstance(payload, dict) else None
        raise SchemaError(f"{path}: unsupported checkpoint schema {found!r}")
    return payload
