"""Canonical byte encodings shared by the key-management and provenance layers."""

from __future__ import annotations

import base64
import hashlib

ZERO_HASH = b"\x00" * 32


def lp(part: bytes | str) -> bytes:
    """Length-prefix one field: 4-byte big-endian length followed by the raw bytes."""
    raw = part.encode("utf-8") if isinstance(part, str) else part
    return len(raw).to_bytes(4, "big") + raw


def lp_concat(*parts: bytes | str) -> bytes:
    """Concatenate length-prefixed fields; unambiguous for any field contents."""
    return b"".join(lp(p) for p in parts)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def b64e(raw: bytes) -> str:
    return base64.b64encode(raw).decode("ascii")


def b64d(text: str) -> bytes:
    """Strict base64 decode: rejects non-alphabet input and non-canonical encodings."""
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    if base64.b64encode(raw).decode("ascii") != text:
        raise ValueError("non-canonical base64")
    return raw
