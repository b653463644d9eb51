"""Encrypted clinical record store with cohorts, reports, and de-identified export.

Records are bound to a data-sensitivity node and persisted only as AES-256-GCM
ciphertext under that node's current key version (an append-log of encrypted
blobs plus an index file).  Reads require the session role to derive the data
node's key; care-scoped roles are additionally restricted to their own
patients via the record's attending set.  Every mutation and export writes a
provenance record; reads do so only when audit mode is on.

After a key rotation old blobs stay readable through the retained key history
and migrate to the new version lazily, on their next write.
"""

from __future__ import annotations

import json
import os
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from datetime import date
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .biocapsule import SessionGrant
from .canon import b64d, b64e, lp_concat, sha256
from .keymgr import KeyManager, NotDerivable
from .provenance import ProvenanceLog

NONCE_BYTES = 12


class RecordStoreError(Exception):
    """Base class for record-store failures."""


class Unauthorized(RecordStoreError):
    pass


class ExpiredSession(RecordStoreError):
    pass


class UnknownDataNode(RecordStoreError):
    pass


class UnknownRecord(RecordStoreError):
    pass


class UnknownCohort(RecordStoreError):
    pass


class ResidualIdentifier(RecordStoreError):
    pass


@dataclass(frozen=True)
class ClinicalRecord:
    record_id: str
    patient_id: str
    data_node: str
    attending: frozenset[str]
    fields: dict

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "patient_id": self.patient_id,
            "data_node": self.data_node,
            "attending": sorted(self.attending),
            "fields": self.fields,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ClinicalRecord":
        return cls(
            record_id=doc["record_id"],
            patient_id=doc["patient_id"],
            data_node=doc["data_node"],
            attending=frozenset(doc["attending"]),
            fields=doc["fields"],
        )


@dataclass(frozen=True)
class Cohort:
    cohort_id: str
    description: str
    members: tuple[str, ...]


# Safe-Harbor deny-list: field names whose values must not survive export.
DENY_FIELDS = frozenset(
    {
        "name",
        "address",
        "city",
        "zip",
        "phone",
        "fax",
        "email",
        "ssn",
        "mrn",
        "health_plan_id",
        "account_number",
        "license_number",
        "vehicle_id",
        "device_id",
        "url",
        "ip_address",
        "biometric_id",
        "photo_ref",
        "other_id",
    }
)
# Date elements are generalized to year only (dropped entirely at age >= 90).
DATE_FIELDS = frozenset({"birth_date", "admission_date"})

SCAN_PATTERNS = {
    "phone": re.compile(r"\b\d{3}[-.\s]\d{3}[-.\s]\d{4}\b"),
    "ssn": re.compile(r"\b\d{3}-\d{2}-\d{4}\b"),
    "email": re.compile(r"\b[\w.+-]+@[\w-]+\.[\w.-]+\b"),
    "ip": re.compile(r"\b\d{1,3}\.\d{1,3}\.\d{1,3}\.\d{1,3}\b"),
    "url": re.compile(r"https?://\S+"),
}


def scan_for_identifiers(text: str) -> list[str]:
    """Deny-listed element names plus pattern hits found in an export document."""
    findings = [f"pattern:{name}" for name, rx in SCAN_PATTERNS.items() if rx.search(text)]
    try:
        root = ET.fromstring(text)
        tags = {el.tag for el in root.iter()}
    except ET.ParseError:
        tags = set()
    findings.extend(f"field:{tag}" for tag in sorted(tags & DENY_FIELDS))
    return findings


def age_on(birth_date: str, as_of: date) -> int:
    year, month, day = (int(p) for p in birth_date.split("-"))
    age = as_of.year - year - ((as_of.month, as_of.day) < (month, day))
    return max(age, 0)


def age_bucket(age: int) -> str:
    if age >= 90:
        return "90+"
    low = (age // 10) * 10
    return f"{low}-{low + 9}"


class RecordStore:
    """Disk-backed store; all authorization flows through key derivability."""

    def __init__(
        self,
        directory: str | Path,
        keys: KeyManager,
        provenance: ProvenanceLog,
        care_scoped_roles: frozenset[str] = frozenset(),
        audit_reads: bool = False,
    ):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.keys = keys
        self.provenance = provenance
        self.care_scoped_roles = frozenset(care_scoped_roles)
        self.audit_reads = audit_reads
        self._log_path = self.directory / "records.log"
        self._index_path = self.directory / "index.json"
        self._cohort_path = self.directory / "cohorts.json"
        self._index: dict[str, dict] = {}
        self._blobs: dict[str, dict] = {}
        self._cohorts: dict[str, Cohort] = {}
        self._counter = 0
        self._cohort_counter = 0
        self._load()

    # -- persistence -----------------------------------------------------------

    def _load(self) -> None:
        if self._log_path.exists():
            for line in self._log_path.read_text().splitlines():
                if not line:
                    continue
                blob = json.loads(line)
                self._blobs[blob["record_id"]] = blob
        if self._index_path.exists():
            doc = json.loads(self._index_path.read_text())
            self._index = doc["records"]
            self._counter = doc["counter"]
        if self._cohort_path.exists():
            doc = json.loads(self._cohort_path.read_text())
            self._cohort_counter = doc["counter"]
            self._cohorts = {
                c["cohort_id"]: Cohort(c["cohort_id"], c["description"], tuple(c["members"]))
                for c in doc["cohorts"]
            }

    def _save_index(self) -> None:
        self._index_path.write_text(
            json.dumps({"counter": self._counter, "records": self._index}, indent=2, sort_keys=True)
        )

    def _save_cohorts(self) -> None:
        self._cohort_path.write_text(
            json.dumps(
                {
                    "counter": self._cohort_counter,
                    "cohorts": [
                        {"cohort_id": c.cohort_id, "description": c.description, "members": list(c.members)}
                        for c in sorted(self._cohorts.values(), key=lambda c: c.cohort_id)
                    ],
                },
                indent=2,
                sort_keys=True,
            )
        )

    # -- helpers -------------------------------------------------------------------

    def _graph(self):
        return self.keys.graph

    def _check_session(self, session: SessionGrant) -> None:
        if session.expired():
            raise ExpiredSession(f"session for {session.user} expired")

    def _role_can_reach(self, role: str, data_node: str) -> bool:
        """Cryptographic authorization: can the session role derive the node key?"""
        try:
            role_key = self.keys.current_key(role)
            self.keys.derive_key(role, role_key, data_node)
            return True
        except NotDerivable:
            return False

    def _readable(self, session: SessionGrant, entry: dict, attending: frozenset[str]) -> bool:
        if not self._role_can_reach(session.role, entry["data_node"]):
            return False
        if session.role in self.care_scoped_roles and session.user not in attending:
            return False
        return True

    def _decrypt(self, record_id: str) -> ClinicalRecord:
        blob = self._blobs[record_id]
        key = self.keys.key_for_version(blob["data_node"], blob["key_version"])
        aad = lp_concat(record_id, blob["data_node"], str(blob["key_version"]))
        try:
            plaintext = AESGCM(key.key).decrypt(b64d(blob["nonce"]), b64d(blob["ct"]), aad)
        except InvalidTag as exc:
            raise RecordStoreError(f"stored blob for {record_id} failed authentication") from exc
        return ClinicalRecord.from_dict(json.loads(plaintext.decode()))

    def _append_provenance(self, op_kind: str, session: SessionGrant, record_id: str, state_hash: bytes) -> None:
        secret = self.keys.personal_secret(session.user)
        self.provenance.append(
            op_kind=op_kind,
            actor=session.user,
            role=session.role,
            data_ref=record_id,
            state_hash=state_hash,
            signing_key=secret.signing_key(),
        )

    # -- operations --------------------------------------------------------------------

    def put_record(self, session: SessionGrant, record: ClinicalRecord) -> str:
        self._check_session(session)
        graph = self._graph()
        if record.data_node not in graph.data_nodes:
            raise UnknownDataNode(record.data_node)
        if record.data_node not in graph.accessible_data(session.role):
            raise Unauthorized(f"{session.role} cannot write {record.data_node}")

        record_id = record.record_id
        if not record_id:
            self._counter += 1
            record_id = f"rec-{self._counter:06d}"
        is_new = record_id not in self._index
        stored = ClinicalRecord(
            record_id=record_id,
            patient_id=record.patient_id,
            data_node=record.data_node,
            attending=record.attending,
            fields=record.fields,
        )
        key = self.keys.current_key(record.data_node)
        nonce = os.urandom(NONCE_BYTES)
        aad = lp_concat(record_id, record.data_node, str(key.version))
        ct = AESGCM(key.key).encrypt(
            nonce, json.dumps(stored.to_dict(), sort_keys=True).encode(), aad
        )
        blob = {
            "record_id": record_id,
            "data_node": record.data_node,
            "key_version": key.version,
            "nonce": b64e(nonce),
            "ct": b64e(ct),
        }
        with self._log_path.open("a") as fh:
            fh.write(json.dumps(blob, sort_keys=True) + "\n")
        self._blobs[record_id] = blob
        self._index[record_id] = {"data_node": record.data_node, "key_version": key.version}
        self._save_index()
        self._append_provenance("create" if is_new else "update", session, record_id, sha256(ct))
        return record_id

    def get_record(self, session: SessionGrant, record_id: str) -> ClinicalRecord:
        self._check_session(session)
        entry = self._index.get(record_id)
        if entry is None:
            raise UnknownRecord(record_id)
        if not self._role_can_reach(session.role, entry["data_node"]):
            raise Unauthorized(f"{session.role} cannot read {entry['data_node']}")
        record = self._decrypt(record_id)
        if session.role in self.care_scoped_roles and session.user not in record.attending:
            raise Unauthorized(f"{session.user} is not attending {record.patient_id}")
        if self.audit_reads:
            self._append_provenance("read", session, record_id, sha256(b64d(self._blobs[record_id]["ct"])))
        return record

    def readable_records(self, session: SessionGrant) -> list[str]:
        self._check_session(session)
        out = []
        for record_id in sorted(self._index):
            entry = self._index[record_id]
            if not self._role_can_reach(session.role, entry["data_node"]):
                continue
            record = self._decrypt(record_id)
            if session.role in self.care_scoped_roles and session.user not in record.attending:
                continue
            out.append(record_id)
        return out

    def query_cohort(self, session: SessionGrant, diagnosis_codes, description: str = "") -> Cohort:
        self._check_session(session)
        codes = set(diagnosis_codes)
        members = []
        if codes:
            for record_id in self.readable_records(session):
                record = self._decrypt(record_id)
                if codes & set(record.fields.get("diagnoses", [])):
                    members.append(record_id)
        self._cohort_counter += 1
        cohort = Cohort(
            cohort_id=f"cohort-{self._cohort_counter:04d}",
            description=description or f"diagnoses in {sorted(codes)}",
            members=tuple(members),
        )
        self._cohorts[cohort.cohort_id] = cohort
        self._save_cohorts()
        return cohort

    def cohort(self, cohort_id: str) -> Cohort:
        try:
            return self._cohorts[cohort_id]
        except KeyError:
            raise UnknownCohort(cohort_id) from None

    def aggregate_report(
        self,
        session: SessionGrant,
        cohort_id: str,
        dimensions: str = "age_gender",
        as_of: date | None = None,
    ) -> dict:
        """Counts per bucket over a cohort; buckets partition the cohort exactly."""
        self._check_session(session)
        cohort = self.cohort(cohort_id)
        as_of = as_of or date.today()
        rows: dict[tuple, int] = {}
        for record_id in cohort.members:
            record = self.get_record(session, record_id)
            if dimensions == "age_gender":
                bucket = age_bucket(age_on(record.fields["birth_date"], as_of))
                key = (bucket, record.fields["gender"])
            elif dimensions == "procedure_code":
                procedures = record.fields.get("procedures") or ["none"]
                key = (procedures[0],)  # primary procedure keeps buckets a partition
            else:
                raise ValueError(f"unknown report dimensions {dimensions!r}")
            rows[key] = rows.get(key, 0) + 1
        if dimensions == "age_gender":
            table = [
                {"age_bucket": k[0], "gender": k[1], "count": n}
                for k, n in sorted(rows.items())
            ]
        else:
            table = [{"procedure_code": k[0], "count": n} for k, n in sorted(rows.items())]
        return {"cohort_id": cohort_id, "dimensions": dimensions, "rows": table, "total": len(cohort.members)}

    # -- de-identified export -------------------------------------------------------------

    def export_deidentified(self, session: SessionGrant, cohort_id: str, as_of: date | None = None) -> str:
        self._check_session(session)
        cohort = self.cohort(cohort_id)
        as_of = as_of or date.today()
        root = ET.Element("deidentified_export", {"cohort": cohort_id, "records": str(len(cohort.members))})
        for i, record_id in enumerate(cohort.members, start=1):
            record = self.get_record(session, record_id)  # enforces authorization per member
            el = ET.SubElement(root, "record", {"subject": f"subject-{i:04d}"})
            demo = ET.SubElement(el, "demographics")
            age = age_on(record.fields["birth_date"], as_of)
            if age >= 90:
                ET.SubElement(demo, "age_group").text = "90+"
            else:
                ET.SubElement(demo, "birth_year").text = record.fields["birth_date"][:4]
            ET.SubElement(demo, "gender").text = record.fields["gender"]
            ET.SubElement(demo, "state").text = record.fields["state"]
            if "admission_date" in record.fields:
                ET.SubElement(el, "admission_year").text = record.fields["admission_date"][:4]
            dx = ET.SubElement(el, "diagnoses")
            for code in record.fields.get("diagnoses", []):
                ET.SubElement(dx, "code").text = code
            px = ET.SubElement(el, "procedures")
            for code in record.fields.get("procedures", []):
                ET.SubElement(px, "code").text = code
            obs = ET.SubElement(el, "observations")
            for ob in record.fields.get("observations", []):
                ET.SubElement(obs, "observation", {"code": str(ob["code"]), "value": str(ob["value"])})
        document = ET.tostring(root, encoding="unicode")
        findings = scan_for_identifiers(document)
        if findings:
            raise ResidualIdentifier(", ".join(findings))
        for record_id in cohort.members:
            self._append_provenance(
                "export", session, record_id, sha256(b64d(self._blobs[record_id]["ct"]))
            )
        return document

    # -- maintenance ------------------------------------------------------------------------

    def blob_key_versions(self) -> dict[str, int]:
        """Live record_id -> key version map (lazy re-encryption bookkeeping)."""
        return {rid: entry["key_version"] for rid, entry in self._index.items()}

    def data_node_of(self, record_id: str) -> str:
        entry = self._index.get(record_id)
        if entry is None:
            raise UnknownRecord(record_id)
        return entry["data_node"]

    def record_ids(self) -> list[str]:
        return sorted(self._index)

    def current_state_hash(self, record_id: str) -> bytes:
        entry = self._blobs.get(record_id)
        if entry is None:
            raise UnknownRecord(record_id)
        return sha256(b64d(entry["ct"]))
