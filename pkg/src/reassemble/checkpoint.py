"""Versioned binary checkpoints with an embedded JSON header.

Layout::

    magic      4 bytes  b"RSMB"
    version    uint16   little endian
    header_len uint32   little endian
    header     header_len bytes of UTF-8 JSON
    payload    torch.save() bytes (tensors, dicts, lists, scalars only)

The header is readable without torch so tools can inspect a checkpoint's
configuration cheaply.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import torch

from .errors import IncompatibleCheckpoint

MAGIC = b"RSMB"
FORMAT_VERSION = 1
SCHEMA_VERSION = 1


def save_checkpoint(path, kind: str, header: dict, payload: dict) -> None:
    head = dict(header)
    head.setdefault("schema_version", SCHEMA_VERSION)
    head["kind"] = kind
    head_bytes = json.dumps(head, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(head_bytes)))
        fh.write(head_bytes)
        fh.write(buf.getvalue())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_head(fh)


def _read_head(fh) -> dict:
    magic = fh.read(4)
    if magic != MAGIC:
        raise IncompatibleCheckpoint(f"not a checkpoint (magic {magic!r})")
    version, n = struct.unpack("<HI", fh.read(6))
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        header = _read_head(fh)
        payload = torch.load(io.BytesIO(fh.read()), weights_only=True)
    if kind is not None and header.get("kind") != kind:
        raise IncompatibleCheckpoint(f"expected a {kind!r} checkpoint, got {header.get('kind')!r}")
    return header, payload
