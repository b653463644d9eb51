"""Tamper-evident life-cycle records and sealed transfer envelopes.

Each data object owns an append-only chain of records.  A record's canonical
serialization is the length-prefixed concatenation of its fields in declared
order; the previous record's SHA-256 over that serialization links the chain,
and Ed25519 signatures bind every record to its actor.  Verification localizes
the earliest failure and says whether it broke the sequence, the hash link, or
the signature.

Envelopes for network transfer encrypt the payload with AES-256-GCM and carry
an HMAC-SHA-256 over header and ciphertext; the MAC is always checked before
any decryption is attempted.
"""

from __future__ import annotations

import dataclasses
import hmac as hmac_mod
import json
import os
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .canon import ZERO_HASH, b64d, b64e, lp, lp_concat, sha256

OP_KINDS = ("create", "read", "update", "export", "transfer")

_TIMESTAMP_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\.\d{6}Z$")
_RECORD_KEYS = {
    "seq",
    "data_ref",
    "actor",
    "role",
    "op_kind",
    "state_hash",
    "prev_hash",
    "timestamp",
    "signature",
}


class ProvenanceError(Exception):
    """Base class for provenance failures."""


class InvalidChain(ProvenanceError):
    pass


class SigningFailure(ProvenanceError):
    pass


class UnknownActor(ProvenanceError):
    pass


class MacFailure(ProvenanceError):
    pass


class DecryptFailure(ProvenanceError):
    pass


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


@dataclass(frozen=True)
class ProvenanceRecord:
    seq: int
    data_ref: str
    actor: str
    role: str
    op_kind: str
    state_hash: bytes
    prev_hash: bytes
    timestamp: str
    signature: bytes


def signing_bytes(rec: ProvenanceRecord) -> bytes:
    """Byte string the actor signs: every field before the signature, in order."""
    return lp_concat(
        str(rec.seq),
        rec.data_ref,
        rec.actor,
        rec.role,
        rec.op_kind,
        rec.state_hash,
        rec.prev_hash,
        rec.timestamp,
    )


def record_bytes(rec: ProvenanceRecord) -> bytes:
    return signing_bytes(rec) + lp(rec.signature)


def record_hash(rec: ProvenanceRecord) -> bytes:
    return sha256(record_bytes(rec))


def chain_head_hash(chain: Sequence[ProvenanceRecord]) -> bytes:
    return record_hash(chain[-1]) if chain else ZERO_HASH


def _check_links(chain: Sequence[ProvenanceRecord]) -> None:
    prev = ZERO_HASH
    for i, rec in enumerate(chain):
        if rec.seq != i:
            raise InvalidChain(f"record {i} carries seq {rec.seq}")
        if rec.prev_hash != prev:
            raise InvalidChain(f"record {i} does not link to its predecessor")
        prev = record_hash(rec)


def append(
    chain: Sequence[ProvenanceRecord],
    *,
    op_kind: str,
    actor: str,
    role: str,
    data_ref: str,
    state_hash: bytes,
    signing_key: Ed25519PrivateKey,
    timestamp: str | None = None,
) -> ProvenanceRecord:
    """Build, sign, and return the next record for this chain (caller appends)."""
    if op_kind not in OP_KINDS:
        raise ValueError(f"op_kind must be one of {OP_KINDS}, got {op_kind!r}")
    if len(state_hash) != 32:
        raise ValueError("state_hash must be 32 bytes")
    _check_links(chain)
    rec = ProvenanceRecord(
        seq=len(chain),
        data_ref=data_ref,
        actor=actor,
        role=role,
        op_kind=op_kind,
        state_hash=state_hash,
        prev_hash=chain_head_hash(chain),
        timestamp=timestamp if timestamp is not None else utc_now(),
        signature=b"",
    )
    try:
        sig = signing_key.sign(signing_bytes(rec))
    except Exception as exc:  # pragma: no cover - key object misuse
        raise SigningFailure(str(exc)) from exc
    return dataclasses.replace(rec, signature=sig)


@dataclass(frozen=True)
class ChainVerdict:
    valid: bool
    first_bad_seq: int | None = None
    reason: str | None = None  # "sequence" | "link" | "signature"

    def to_dict(self) -> dict:
        return {"valid": self.valid, "first_bad_seq": self.first_bad_seq, "reason": self.reason}


def verify_chain(
    chain: Sequence[ProvenanceRecord],
    public_keys: Mapping[str, Ed25519PublicKey | bytes],
) -> ChainVerdict:
    """Check sequence numbers, hash links, and signatures; localize the first failure."""
    prev = ZERO_HASH
    for i, rec in enumerate(chain):
        if rec.seq != i:
            return ChainVerdict(False, i, "sequence")
        if rec.prev_hash != prev:
            return ChainVerdict(False, i, "link")
        key = public_keys.get(rec.actor)
        if key is None:
            raise UnknownActor(rec.actor)
        if isinstance(key, bytes):
            key = Ed25519PublicKey.from_public_bytes(key)
        try:
            key.verify(rec.signature, signing_bytes(rec))
        except InvalidSignature:
            return ChainVerdict(False, i, "signature")
        prev = record_hash(rec)
    return ChainVerdict(True)


# -- JSON-lines persistence ----------------------------------------------------


def to_json_line(rec: ProvenanceRecord) -> str:
    return json.dumps(
        {
            "seq": rec.seq,
            "data_ref": rec.data_ref,
            "actor": rec.actor,
            "role": rec.role,
            "op_kind": rec.op_kind,
            "state_hash": b64e(rec.state_hash),
            "prev_hash": b64e(rec.prev_hash),
            "timestamp": rec.timestamp,
            "signature": b64e(rec.signature),
        },
        sort_keys=True,
        separators=(",", ":"),
    )


def parse_json_line(line: str) -> ProvenanceRecord:
    """Strict parse: exact key set, canonical base64, fixed digest/signature sizes,
    and byte-for-byte re-serialization equality."""
    doc = json.loads(line)
    if not isinstance(doc, dict) or set(doc) != _RECORD_KEYS:
        raise ValueError("unexpected record fields")
    if not isinstance(doc["seq"], int):
        raise ValueError("seq must be an integer")
    for key in ("data_ref", "actor", "role", "op_kind", "timestamp"):
        if not isinstance(doc[key], str):
            raise ValueError(f"{key} must be a string")
    if doc["op_kind"] not in OP_KINDS:
        raise ValueError(f"bad op_kind {doc['op_kind']!r}")
    if not _TIMESTAMP_RE.match(doc["timestamp"]):
        raise ValueError("bad timestamp format")
    state_hash = b64d(doc["state_hash"])
    prev_hash = b64d(doc["prev_hash"])
    signature = b64d(doc["signature"])
    if len(state_hash) != 32 or len(prev_hash) != 32 or len(signature) != 64:
        raise ValueError("bad digest or signature length")
    rec = ProvenanceRecord(
        seq=doc["seq"],
        data_ref=doc["data_ref"],
        actor=doc["actor"],
        role=doc["role"],
        op_kind=doc["op_kind"],
        state_hash=state_hash,
        prev_hash=prev_hash,
        timestamp=doc["timestamp"],
        signature=signature,
    )
    if to_json_line(rec) != line:
        raise ValueError("non-canonical record serialization")
    return rec


_SAFE_REF = re.compile(r"^[A-Za-z0-9._-]+$")


class ProvenanceLog:
    """Directory of per-object chains, one canonical JSON line per record."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, data_ref: str) -> Path:
        name = data_ref if _SAFE_REF.match(data_ref) else sha256(data_ref.encode()).hex()
        return self.directory / f"{name}.jsonl"

    def chain(self, data_ref: str) -> list[ProvenanceRecord]:
        path = self._path(data_ref)
        if not path.exists():
            return []
        return [parse_json_line(line) for line in path.read_text().splitlines() if line]

    def data_refs(self) -> list[str]:
        refs = []
        for path in sorted(self.directory.glob("*.jsonl")):
            lines = path.read_text().splitlines()
            if lines:
                refs.append(parse_json_line(lines[0]).data_ref)
        return refs

    def append(
        self,
        *,
        op_kind: str,
        actor: str,
        role: str,
        data_ref: str,
        state_hash: bytes,
        signing_key: Ed25519PrivateKey,
        timestamp: str | None = None,
    ) -> ProvenanceRecord:
        chain = self.chain(data_ref)
        rec = append(
            chain,
            op_kind=op_kind,
            actor=actor,
            role=role,
            data_ref=data_ref,
            state_hash=state_hash,
            signing_key=signing_key,
            timestamp=timestamp,
        )
        with self._path(data_ref).open("a") as fh:
            fh.write(to_json_line(rec) + "\n")
        return rec

    def verify_all(self, public_keys: Mapping[str, Ed25519PublicKey | bytes]) -> dict[str, ChainVerdict]:
        return {ref: verify_chain(self.chain(ref), public_keys) for ref in self.data_refs()}


# -- transfer envelopes -------------------------------------------------------------


@dataclass(frozen=True)
class TransferEnvelope:
    sender: str
    receiver: str
    chain_head_hash: bytes
    nonce: bytes
    payload: bytes
    mac: bytes

    def to_dict(self) -> dict:
        return {
            "sender": self.sender,
            "receiver": self.receiver,
            "chain_head_hash": b64e(self.chain_head_hash),
            "nonce": b64e(self.nonce),
            "payload": b64e(self.payload),
            "mac": b64e(self.mac),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TransferEnvelope":
        return cls(
            sender=doc["sender"],
            receiver=doc["receiver"],
            chain_head_hash=b64d(doc["chain_head_hash"]),
            nonce=b64d(doc["nonce"]),
            payload=b64d(doc["payload"]),
            mac=b64d(doc["mac"]),
        )


def _transfer_keys(shared_key: bytes) -> tuple[bytes, bytes]:
    enc = HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=b"transfer-enc").derive(shared_key)
    mac = HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=b"transfer-mac").derive(shared_key)
    return enc, mac


def _envelope_header(sender: str, receiver: str, chain_head: bytes, nonce: bytes) -> bytes:
    return lp_concat(sender, receiver, chain_head, nonce)


def seal_transfer(
    payload: bytes,
    shared_key: bytes,
    sender: str,
    receiver: str,
    chain_head: bytes,
) -> TransferEnvelope:
    enc_key, mac_key = _transfer_keys(shared_key)
    nonce = os.urandom(12)
    ct = AESGCM(enc_key).encrypt(nonce, payload, None)
    mac = hmac_mod.new(mac_key, _envelope_header(sender, receiver, chain_head, nonce) + ct, "sha256").digest()
    return TransferEnvelope(
        sender=sender,
        receiver=receiver,
        chain_head_hash=chain_head,
        nonce=nonce,
        payload=ct,
        mac=mac,
    )


def open_transfer(envelope: TransferEnvelope, shared_key: bytes) -> bytes:
    """MAC first, always: nothing is decrypted unless the envelope authenticates."""
    enc_key, mac_key = _transfer_keys(shared_key)
    header = _envelope_header(envelope.sender, envelope.receiver, envelope.chain_head_hash, envelope.nonce)
    expected = hmac_mod.new(mac_key, header + envelope.payload, "sha256").digest()
    if not hmac_mod.compare_digest(expected, envelope.mac):
        raise MacFailure("envelope MAC does not verify")
    try:
        return AESGCM(enc_key).decrypt(envelope.nonce, envelope.payload, None)
    except InvalidTag as exc:
        raise DecryptFailure("authenticated decryption failed") from exc
