"""Request gateway tying hierarchy, keys, capsules, provenance, and records together.

Every request is a JSON object with an `op` and, except for login, a bearer
session token.  Denials and allows are both audited; the audit trail is
hash-chained and has no mutating endpoint.  A token-bucket rate limiter keyed
by authenticated principal (all unauthenticated traffic shares one bucket)
keeps junk bursts from starving logged-in users.
"""

from __future__ import annotations

import json
import threading
import time
from datetime import date
from pathlib import Path

import numpy as np

from . import hierarchy, provenance, records
from .audit import AuditLog
from .biocapsule import CapsuleRegistry, SessionGrant, SessionTable
from .canon import sha256
from .config import GatewayConfig, master_key_from_env
from .hierarchy import HierarchyGraph
from .keymgr import KeyManager
from .provenance import ProvenanceLog, TransferEnvelope, chain_head_hash, open_transfer, seal_transfer, to_json_line
from .records import ClinicalRecord, RecordStore


class GatewayError(Exception):
    pass


class AuthRequired(GatewayError):
    pass


class RateLimited(GatewayError):
    pass


class UnknownOperation(GatewayError):
    pass


class BadRequest(GatewayError):
    pass


# Error classes whose denial is a security decision (CLI exit code 2) versus an
# integrity failure (exit code 3); anything else is a usage/config problem.
SECURITY_ERRORS = frozenset(
    {
        "Unauthorized",
        "ExpiredSession",
        "AuthRequired",
        "RateLimited",
        "MatchBelowThreshold",
        "NotEnrolled",
        "StaleCapsule",
        "NotAssigned",
        "NotDerivable",
        "WrongUser",
        "StaleWrap",
        "StaleKey",
    }
)
INTEGRITY_ERRORS = frozenset({"MacFailure", "DecryptFailure", "InvalidChain", "ResidualIdentifier"})


class TokenBucket:
    """Per-principal token buckets; unauthenticated requests share the "anon" bucket."""

    def __init__(self, capacity: int, refill_per_sec: float):
        self.capacity = capacity
        self.refill = refill_per_sec
        self._lock = threading.Lock()
        self._state: dict[str, tuple[float, float]] = {}  # principal -> (tokens, stamp)

    def allow(self, principal: str, now: float | None = None) -> bool:
        now = now if now is not None else time.monotonic()
        with self._lock:
            tokens, stamp = self._state.get(principal, (float(self.capacity), now))
            tokens = min(float(self.capacity), tokens + (now - stamp) * self.refill)
            if tokens < 1.0:
                self._state[principal] = (tokens, now)
                return False
            self._state[principal] = (tokens - 1.0, now)
            return True


class Gateway:
    def __init__(self, config: GatewayConfig, master_key: bytes | None = None):
        self.config = config
        self.master_key = master_key if master_key is not None else master_key_from_env()
        store = config.store_path
        store.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self.graph = HierarchyGraph()
        self.keys = KeyManager(self.graph)
        self.registry = CapsuleRegistry(
            self.graph,
            dim=config.dim,
            tau=config.tau,
            session_ttl=config.session_ttl_seconds,
        )
        self.sessions = SessionTable()
        self.provlog = ProvenanceLog(store / "provenance")
        self.audit = AuditLog(store / "audit.jsonl")
        self.records = RecordStore(
            store / "records",
            self.keys,
            self.provlog,
            care_scoped_roles=frozenset(config.care_scoped_roles),
            audit_reads=config.audit_reads,
        )
        self.limiter = TokenBucket(config.rate_capacity, config.rate_refill_per_sec)
        self._load_state()
        self._handlers = {
            "logout": self._op_logout,
            "whoami": self._op_whoami,
            "admin/add-role": self._op_add_role,
            "admin/add-data": self._op_add_data,
            "admin/add-edge": self._op_add_edge,
            "admin/remove-edge": self._op_remove_edge,
            "admin/remove-node": self._op_remove_node,
            "admin/associate": self._op_associate,
            "admin/assign": self._op_assign,
            "admin/revoke": self._op_revoke,
            "admin/reissue-rs": self._op_reissue_rs,
            "admin/enroll": self._op_enroll,
            "record/put": self._op_record_put,
            "record/get": self._op_record_get,
            "cohort/query": self._op_cohort_query,
            "cohort/report": self._op_cohort_report,
            "cohort/export": self._op_cohort_export,
            "prov/chain": self._op_prov_chain,
            "prov/verify": self._op_prov_verify,
            "audit/verify": self._op_audit_verify,
            "transfer/send": self._op_transfer_send,
            "transfer/receive": self._op_transfer_receive,
        }

    # -- state ------------------------------------------------------------------

    def _paths(self) -> dict[str, Path]:
        store = self.config.store_path
        return {
            "hierarchy": store / "hierarchy.json",
            "keystore": store / "keystore.json",
            "capsules": store / "capsules.json",
            "sessions": store / "sessions.json",
        }

    def _load_state(self) -> None:
        paths = self._paths()
        if paths["hierarchy"].exists():
            self.graph = HierarchyGraph.loads(paths["hierarchy"].read_text())
            self.keys.graph = self.graph
            self.registry.graph = self.graph
        if paths["keystore"].exists():
            self.keys.load_encrypted_dict(json.loads(paths["keystore"].read_text()), self.master_key)
        if paths["capsules"].exists():
            self.registry.load_dict(json.loads(paths["capsules"].read_text()))
        if paths["sessions"].exists():
            self.sessions.load_dict(json.loads(paths["sessions"].read_text()))

    def save_state(self) -> None:
        paths = self._paths()
        paths["hierarchy"].write_text(self.graph.dumps())
        paths["keystore"].write_text(
            json.dumps(self.keys.to_encrypted_dict(self.master_key), indent=2, sort_keys=True)
        )
        paths["capsules"].write_text(json.dumps(self.registry.to_dict(), indent=2, sort_keys=True))
        paths["sessions"].write_text(json.dumps(self.sessions.to_dict(), indent=2, sort_keys=True))

    def _sync_graph(self, graph: HierarchyGraph) -> None:
        self.graph = graph
        self.keys.update_graph(graph)
        self.registry.update_graph(graph)

    # -- dispatch ------------------------------------------------------------------

    def handle(self, request: dict) -> dict:
        if not isinstance(request, dict) or not isinstance(request.get("op"), str):
            return {"ok": False, "error": "BadRequest", "message": "request must carry an op"}
        op = request["op"]
        token = request.get("token", "")
        grant = self.sessions.lookup(token) if isinstance(token, str) and token else None
        principal = f"user:{grant.user}" if grant else "anon"
        actor = grant.user if grant else str(request.get("user", "")) or "anon"
        role = grant.role if grant else ""

        if not self.limiter.allow(principal):
            self.audit.append(actor, role, op, "deny", "RateLimited")
            return {"ok": False, "error": "RateLimited", "message": "too many requests"}

        try:
            with self._lock:
                if op == "login":
                    result = self._op_login(request)
                else:
                    if grant is None:
                        raise AuthRequired("missing or expired session token")
                    handler = self._handlers.get(op)
                    if handler is None:
                        raise UnknownOperation(op)
                    result = handler(grant, request)
            self.audit.append(actor, role, op, "allow", result.pop("_audit_detail", ""))
            return {"ok": True, **result}
        except Exception as exc:
            error = type(exc).__name__
            outcome = "deny" if error in SECURITY_ERRORS else "error"
            self.audit.append(actor, role, op, outcome, error)
            return {"ok": False, "error": error, "message": str(exc)}

    # -- helpers ----------------------------------------------------------------------

    def _require_admin(self, grant: SessionGrant) -> None:
        if grant.role != self.config.admin_role:
            raise records.Unauthorized(f"{grant.role} is not the admin role")

    @staticmethod
    def _need(request: dict, *names: str):
        values = []
        for name in names:
            if name not in request:
                raise BadRequest(f"missing parameter {name!r}")
            values.append(request[name])
        return values[0] if len(values) == 1 else values

    def register_user(self, user: str) -> None:
        """Idempotent personal-secret registration (used by assign and fixtures)."""
        if user not in self.keys.verify_keys():
            self.keys.register_user(user)

    def issue_session(self, user: str, role: str, ttl: float | None = None) -> SessionGrant:
        """Directly issue a session (fixture seeding / tests); bypasses biometrics."""
        import os as _os

        grant = SessionGrant(
            user=user,
            role=role,
            expires_at=time.time() + (ttl if ttl is not None else self.config.session_ttl_seconds),
            token=_os.urandom(32),
        )
        self.sessions.insert(grant)
        return grant

    # -- endpoints ----------------------------------------------------------------------

    def _op_login(self, request: dict) -> dict:
        user, role, sample = self._need(request, "user", "role", "sample")
        grant = self.registry.authenticate(user, role, np.asarray(sample, dtype=np.float64))
        self.sessions.insert(grant)
        self.save_state()
        return {
            "token": grant.token_hex(),
            "user": grant.user,
            "role": grant.role,
            "expires_at": grant.expires_at,
            "_audit_detail": f"user={user} role={role}",
        }

    def _op_logout(self, grant: SessionGrant, request: dict) -> dict:
        self.sessions.revoke(request.get("token", ""))
        self.save_state()
        return {}

    def _op_whoami(self, grant: SessionGrant, request: dict) -> dict:
        return {"user": grant.user, "role": grant.role, "expires_at": grant.expires_at}

    def _op_add_role(self, grant: SessionGrant, request: dict) -> dict:
        self._require_admin(grant)
        node = self._need(request, "id")
        self._sync_graph(self.graph.add_node(hierarchy.ROLE, node))
        self.keys.generate_node_key(node)
        self.save_state()
        return {"id": node, "_audit_detail": f"role={node}"}

    def _op_add_data(self, grant: SessionGrant, request: dict) -> dict:
        self._require_admin(grant)
        node = self._need(request, "id")
        self._sync_graph(self.graph.add_node(hierarchy.DATA, node))
        self.keys.generate_node_key(node)
        self.save_state()
        return {"id": node, "_audit_detail": f"data={node}"}

    def _op_add_edge(self, grant: SessionGrant, request: dict) -> dict:
        self._require_admin(grant)
        kind, parent, child = self._need(request, "kind", "parent", "child")
        self._sync_graph(self.graph.add_edge(kind, parent, child))
        self.keys.publish_edge_token(self.keys.current_key(parent), self.keys.current_key(child))
        self.save_state()
        return {"_audit_detail": f"{kind}:{parent}->{child}"}

    def _op_remove_edge(self, grant: SessionGrant, request: dict) -> dict:
        self._require_admin(grant)
        parent, child = self._need(request, "parent", "child")
        self._sync_graph(self.graph.remove_edge(parent, child))
        report = self.keys.rotate_on_change(child, "edge-removed")
        self.save_state()
        return {"rotated": report.rotated, "_audit_detail": f"{parent}->{child}"}

    def _op_remove_node(self, grant: SessionGrant, request: dict) -> dict:
        self._require_admin(grant)
        node = self._need(request, "id")
        former_children = sorted({c for (p, c) in self.graph.all_edges() if p == node})
        self._sync_graph(self.graph.remove_node(node))
        rotated: dict[str, int] = {}
        for child in former_children:
            if child in self.graph.role_nodes or child in self.graph.data_nodes:
                rotated.update(self.keys.rotate_on_change(child, "node-removed").rotated)
        self.save_state()
        return {"rotated": rotated, "_audit_detail": f"node={node}"}

    def _op_associate(self, grant: SessionGrant, request: dict) -> dict:
        self._require_admin(grant)
        role, data = self._need(request, "role", "data")
        self._sync_graph(self.graph.associate(role, data))
        self.keys.publish_edge_token(self.keys.current_key(role), self.keys.current_key(data))
        self.save_state()
        return {"_audit_detail": f"{role}<->{data}"}

    def _op_assign(self, grant: SessionGrant, request: dict) -> dict:
        self._require_admin(grant)
        user, role = self._need(request, "user", "role")
        self._sync_graph(self.graph.assign_user(user, role))
        self.register_user(user)
        self.keys.wrap_for_user(self.keys.personal_secret(user), self.keys.current_key(role))
        self.save_state()
        return {"_audit_detail": f"{user}+={role}"}

    def _op_revoke(self, grant: SessionGrant, request: dict) -> dict:
        self._require_admin(grant)
        user, role = self._need(request, "user", "role")
        self._sync_graph(self.graph.revoke_user(user, role))
        report = self.keys.rotate_on_change(role, "user-revoked")
        self.save_state()
        return {"rotated": report.rotated, "_audit_detail": f"{user}-={role}"}

    def _op_reissue_rs(self, grant: SessionGrant, request: dict) -> dict:
        self._require_admin(grant)
        role = self._need(request, "role")
        rs = self.registry.reissue_rs(role)
        self.save_state()
        return {"rs_id": rs.rs_id, "_audit_detail": f"role={role}"}

    def _op_enroll(self, grant: SessionGrant, request: dict) -> dict:
        self._require_admin(grant)
        user, role, samples = self._need(request, "user", "role", "samples")
        capsule = self.registry.enroll(
            user, role, [np.asarray(s, dtype=np.float64) for s in samples]
        )
        self.save_state()
        return {"rs_id": capsule.rs_id, "_audit_detail": f"user={user} role={role}"}

    def _op_record_put(self, grant: SessionGrant, request: dict) -> dict:
        doc = self._need(request, "record")
        for key in ("patient_id", "data_node", "fields"):
            if key not in doc:
                raise BadRequest(f"record is missing {key!r}")
        record = ClinicalRecord(
            record_id=doc.get("record_id", ""),
            patient_id=doc["patient_id"],
            data_node=doc["data_node"],
            attending=frozenset(doc.get("attending", [])),
            fields=doc["fields"],
        )
        record_id = self.records.put_record(grant, record)
        return {"record_id": record_id, "_audit_detail": f"record={record_id}"}

    def _op_record_get(self, grant: SessionGrant, request: dict) -> dict:
        record_id = self._need(request, "record_id")
        record = self.records.get_record(grant, record_id)
        return {"record": record.to_dict(), "_audit_detail": f"record={record_id}"}

    def _op_cohort_query(self, grant: SessionGrant, request: dict) -> dict:
        codes = self._need(request, "codes")
        cohort = self.records.query_cohort(grant, codes, request.get("description", ""))
        return {
            "cohort_id": cohort.cohort_id,
            "size": len(cohort.members),
            "members": list(cohort.members),
            "_audit_detail": f"cohort={cohort.cohort_id} size={len(cohort.members)}",
        }

    @staticmethod
    def _as_of(request: dict) -> date | None:
        raw = request.get("as_of")
        return date.fromisoformat(raw) if raw else None

    def _op_cohort_report(self, grant: SessionGrant, request: dict) -> dict:
        cohort_id = self._need(request, "cohort_id")
        report = self.records.aggregate_report(
            grant, cohort_id, request.get("dimensions", "age_gender"), self._as_of(request)
        )
        return {"report": report, "_audit_detail": f"cohort={cohort_id}"}

    def _op_cohort_export(self, grant: SessionGrant, request: dict) -> dict:
        cohort_id = self._need(request, "cohort_id")
        document = self.records.export_deidentified(grant, cohort_id, self._as_of(request))
        return {"document": document, "_audit_detail": f"cohort={cohort_id}"}

    def _op_prov_chain(self, grant: SessionGrant, request: dict) -> dict:
        self._require_admin(grant)
        data_ref = self._need(request, "data_ref")
        chain = self.provlog.chain(data_ref)
        verdict = provenance.verify_chain(chain, self.keys.verify_keys())
        return {
            "records": [json.loads(to_json_line(rec)) for rec in chain],
            "verdict": verdict.to_dict(),
        }

    def _op_prov_verify(self, grant: SessionGrant, request: dict) -> dict:
        self._require_admin(grant)
        verdicts = self.provlog.verify_all(self.keys.verify_keys())
        audit_verdict = self.audit.verify()
        valid = audit_verdict.valid and all(v.valid for v in verdicts.values())
        return {
            "chains": {ref: v.to_dict() for ref, v in sorted(verdicts.items())},
            "audit": audit_verdict.to_dict(),
            "valid": valid,
        }

    def _op_audit_verify(self, grant: SessionGrant, request: dict) -> dict:
        self._require_admin(grant)
        return {"audit": self.audit.verify().to_dict()}

    def _op_transfer_send(self, grant: SessionGrant, request: dict) -> dict:
        record_id, receiver = self._need(request, "record_id", "receiver")
        record = self.records.get_record(grant, record_id)  # sender authorization
        data_node = record.data_node
        shared = self.keys.current_key(data_node).key
        head = chain_head_hash(self.provlog.chain(record_id))
        envelope = seal_transfer(
            json.dumps(record.to_dict(), sort_keys=True).encode(),
            shared,
            sender=grant.user,
            receiver=receiver,
            chain_head=head,
        )
        secret = self.keys.personal_secret(grant.user)
        self.provlog.append(
            op_kind="transfer",
            actor=grant.user,
            role=grant.role,
            data_ref=record_id,
            state_hash=sha256(envelope.payload),
            signing_key=secret.signing_key(),
        )
        return {
            "envelope": envelope.to_dict(),
            "data_node": data_node,
            "_audit_detail": f"record={record_id} to={receiver}",
        }

    def _op_transfer_receive(self, grant: SessionGrant, request: dict) -> dict:
        doc, data_node = self._need(request, "envelope", "data_node")
        envelope = TransferEnvelope.from_dict(doc)
        if envelope.receiver != grant.user:
            raise records.Unauthorized(f"envelope addressed to {envelope.receiver}, not {grant.user}")
        role_key = self.keys.current_key(grant.role)
        shared = self.keys.derive_key(grant.role, role_key, data_node).key
        payload = open_transfer(envelope, shared)
        return {"record": json.loads(payload.decode()), "_audit_detail": f"from={envelope.sender}"}
