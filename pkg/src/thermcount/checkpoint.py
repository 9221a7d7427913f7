"""Single-file checkpoint container with a magic header and format version.

Layout: 8 magic bytes, little-endian ``uint32`` version, then a ``torch.save``
payload (a plain dict of tensors, numbers and strings).
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import torch

from .errors import InvalidConfiguration, MissingArtifact, ParseError

MAGIC = b"THERMCNT"
VERSION = 1


def save_checkpoint(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<I", VERSION))
        f.write(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ParseError(f"{path}: not a thermcount checkpoint (bad magic)")
    if len(data) < 12:
        raise ParseError(f"{path}: truncated header")
    (version,) = struct.unpack("<I", data[8:12])
    if version != VERSION:
        raise ParseError(f"{path}: checkpoint format version {version}, this build reads {VERSION}")
    try:
        payload = torch.load(io.BytesIO(data[12:]), weights_only=False)
    except Exception as exc:  # torch raises a zoo of types on corrupt payloads
        raise ParseError(f"{path}: corrupt payload ({exc})") from exc
    if kind is not None and payload.get("kind") != kind:
        raise InvalidConfiguration(f"{path}: expected a {kind!r} checkpoint, found {payload.get('kind')!r}")
    return payload
