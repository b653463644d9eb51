"""Append-only request audit trail protected by a daily hash chain.

Every entry carries the SHA-256 of its predecessor's canonical bytes; the
chain restarts from a zero hash at each UTC day boundary.  There is no API to
modify or delete entries, and direct file edits break the chain on
verification.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .canon import ZERO_HASH, b64d, b64e, lp_concat, sha256

_ENTRY_KEYS = {"timestamp", "day", "actor", "role", "endpoint", "outcome", "detail", "prev_hash", "hash"}


@dataclass(frozen=True)
class AuditEntry:
    timestamp: str
    day: str
    actor: str
    role: str
    endpoint: str
    outcome: str
    detail: str
    prev_hash: bytes

    def canonical_bytes(self) -> bytes:
        return lp_concat(
            self.timestamp,
            self.day,
            self.actor,
            self.role,
            self.endpoint,
            self.outcome,
            self.detail,
            self.prev_hash,
        )

    def entry_hash(self) -> bytes:
        return sha256(self.canonical_bytes())


def _to_line(entry: AuditEntry) -> str:
    return json.dumps(
        {
            "timestamp": entry.timestamp,
            "day": entry.day,
            "actor": entry.actor,
            "role": entry.role,
            "endpoint": entry.endpoint,
            "outcome": entry.outcome,
            "detail": entry.detail,
            "prev_hash": b64e(entry.prev_hash),
            "hash": b64e(entry.entry_hash()),
        },
        sort_keys=True,
        separators=(",", ":"),
    )


def _parse_line(line: str) -> tuple[AuditEntry, bytes]:
    doc = json.loads(line)
    if not isinstance(doc, dict) or set(doc) != _ENTRY_KEYS:
        raise ValueError("unexpected audit entry fields")
    entry = AuditEntry(
        timestamp=doc["timestamp"],
        day=doc["day"],
        actor=doc["actor"],
        role=doc["role"],
        endpoint=doc["endpoint"],
        outcome=doc["outcome"],
        detail=doc["detail"],
        prev_hash=b64d(doc["prev_hash"]),
    )
    if _to_line(entry) != line:
        raise ValueError("non-canonical audit entry")
    return entry, b64d(doc["hash"])


@dataclass(frozen=True)
class AuditVerdict:
    valid: bool
    first_bad_index: int | None = None
    reason: str | None = None

    def to_dict(self) -> dict:
        return {"valid": self.valid, "first_bad_index": self.first_bad_index, "reason": self.reason}


class AuditLog:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._last: AuditEntry | None = None
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line:
                    self._last, _ = _parse_line(line)

    def append(
        self,
        actor: str,
        role: str,
        endpoint: str,
        outcome: str,
        detail: str = "",
        now: datetime | None = None,
    ) -> AuditEntry:
        now = now or datetime.now(timezone.utc)
        day = now.strftime("%Y-%m-%d")
        if self._last is not None and self._last.day == day:
            prev = self._last.entry_hash()
        else:
            prev = ZERO_HASH
        entry = AuditEntry(
            timestamp=now.strftime("%Y-%m-%dT%H:%M:%S.%fZ"),
            day=day,
            actor=actor,
            role=role,
            endpoint=endpoint,
            outcome=outcome,
            detail=detail,
            prev_hash=prev,
        )
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as fh:
            fh.write(_to_line(entry) + "\n")
        self._last = entry
        return entry

    def entries(self) -> list[AuditEntry]:
        if not self.path.exists():
            return []
        return [_parse_line(line)[0] for line in self.path.read_text().splitlines() if line]

    @staticmethod
    def verify_file(path: str | Path) -> AuditVerdict:
        path = Path(path)
        if not path.exists():
            return AuditVerdict(True)
        prev_entry: AuditEntry | None = None
        for i, line in enumerate(path.read_text().splitlines()):
            if not line:
                continue
            try:
                entry, recorded_hash = _parse_line(line)
            except (ValueError, json.JSONDecodeError):
                return AuditVerdict(False, i, "parse")
            if recorded_hash != entry.entry_hash():
                return AuditVerdict(False, i, "hash")
            if prev_entry is not None and entry.day == prev_entry.day:
                expected_prev = prev_entry.entry_hash()
            else:
                expected_prev = ZERO_HASH
            if entry.prev_hash != expected_prev:
                return AuditVerdict(False, i, "link")
            prev_entry = entry
        return AuditVerdict(True)

    def verify(self) -> AuditVerdict:
        return self.verify_file(self.path)
