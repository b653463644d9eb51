"""Dual-level key management over the hierarchy graph.

Every role and data node carries a versioned 32-byte symmetric key.  Each
directed edge (role->role, role->data association, data->data) publishes an
*edge token*: the child's key encrypted with AES-256-GCM under a key derived
from the parent's key with HKDF-SHA-256.  Holding a node's key therefore lets
you walk tokens downward and recover every descendant key, while walking
upward is blocked by the AEAD.  User-level access is a per-user wrap of the
role key under that user's personal secret.

Rotation on a dynamic change (revocation, edge/node removal) re-keys the
changed node's full downward closure, republishes the affected tokens, and
re-issues wraps for the remaining members; superseded key versions are kept in
a version-indexed history so old ciphertext stays readable to authorized
parties until it is lazily re-encrypted on the next write.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .canon import b64d, b64e, lp_concat
from .hierarchy import HierarchyGraph, NotAssigned, UnknownEdge, UnknownNode

KEY_BYTES = 32
NONCE_BYTES = 12


class KeyManagementError(Exception):
    """Base class for key-management failures."""


class KeyExists(KeyManagementError):
    pass


class VersionMismatch(KeyManagementError):
    pass


class NotDerivable(KeyManagementError):
    """No token path from the supplied key reaches the target node."""


class StaleKey(KeyManagementError):
    pass


class WrongUser(KeyManagementError):
    pass


class StaleWrap(KeyManagementError):
    pass


@dataclass(frozen=True)
class NodeKey:
    node: str
    version: int
    key: bytes


@dataclass(frozen=True)
class EdgeToken:
    parent: str
    child: str
    parent_version: int
    child_version: int
    nonce: bytes
    token: bytes

    def to_dict(self) -> dict:
        return {
            "parent": self.parent,
            "child": self.child,
            "parent_version": self.parent_version,
            "child_version": self.child_version,
            "nonce": b64e(self.nonce),
            "token": b64e(self.token),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EdgeToken":
        return cls(
            parent=doc["parent"],
            child=doc["child"],
            parent_version=int(doc["parent_version"]),
            child_version=int(doc["child_version"]),
            nonce=b64d(doc["nonce"]),
            token=b64d(doc["token"]),
        )


@dataclass(frozen=True)
class UserKeyWrap:
    user: str
    role: str
    role_version: int
    nonce: bytes
    wrap: bytes


@dataclass(frozen=True)
class PersonalSecret:
    """Per-user client-side material: a wrap secret plus a signing keypair."""

    user: str
    secret: bytes
    signing_key_bytes: bytes

    def signing_key(self) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(self.signing_key_bytes)

    def verify_key_bytes(self) -> bytes:
        from cryptography.hazmat.primitives.serialization import (
            Encoding,
            PublicFormat,
        )

        return self.signing_key().public_key().public_bytes(
            Encoding.Raw, PublicFormat.Raw
        )


@dataclass
class RekeyReport:
    changed: str
    reason: str
    rotated: dict[str, int]
    tokens_republished: int = 0
    wraps_reissued: int = 0
    wraps_dropped: int = 0


def _hkdf(key: bytes, info: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=KEY_BYTES, salt=None, info=info).derive(key)


def edge_derivation_key(parent_key: bytes, parent: str, child: str, child_version: int) -> bytes:
    """Key used to seal/open the token on one edge, bound to the edge identity."""
    return _hkdf(parent_key, lp_concat("edge", parent, child, str(child_version)))


def wrap_derivation_key(secret: bytes, user: str, role: str, role_version: int) -> bytes:
    return _hkdf(secret, lp_concat("user-wrap", user, role, str(role_version)))


def _seal(master_key: bytes, label: str, plaintext: bytes) -> dict:
    key = _hkdf(master_key, lp_concat("store", label))
    nonce = os.urandom(NONCE_BYTES)
    return {"nonce": b64e(nonce), "ct": b64e(AESGCM(key).encrypt(nonce, plaintext, None))}


def _open(master_key: bytes, label: str, doc: dict) -> bytes:
    key = _hkdf(master_key, lp_concat("store", label))
    try:
        return AESGCM(key).decrypt(b64d(doc["nonce"]), b64d(doc["ct"]), None)
    except InvalidTag as exc:
        raise KeyManagementError(f"keystore entry {label!r} failed authentication") from exc


@lru_cache(maxsize=262144)
def _open_token(parent_key: bytes, token: EdgeToken) -> bytes | None:
    """Try to open one edge token with the key in hand; None if the AEAD rejects it."""
    dk = edge_derivation_key(parent_key, token.parent, token.child, token.child_version)
    try:
        return AESGCM(dk).decrypt(token.nonce, token.token, None)
    except InvalidTag:
        return None


def seal_edge_token(parent_key: NodeKey, child_key: NodeKey, nonce: bytes | None = None) -> EdgeToken:
    """Publishable token: the child key encrypted under the parent-derived key."""
    nonce = nonce if nonce is not None else os.urandom(NONCE_BYTES)
    dk = edge_derivation_key(parent_key.key, parent_key.node, child_key.node, child_key.version)
    ct = AESGCM(dk).encrypt(nonce, child_key.key, None)
    return EdgeToken(
        parent=parent_key.node,
        child=child_key.node,
        parent_version=parent_key.version,
        child_version=child_key.version,
        nonce=nonce,
        token=ct,
    )


def derive_key(
    start: str,
    start_key: NodeKey,
    target: str,
    tokens: Iterable[EdgeToken],
) -> NodeKey:
    """Walk edge tokens downward from `start` until `target`'s key is recovered.

    Pure function over the supplied token set: a token is usable only when its
    recorded parent version matches the key in hand and the AEAD opens.  Search
    is breadth-first with children visited in lexicographic order, so the
    derivation path (and any failure) is deterministic.  Raises NotDerivable
    when no usable token path exists, which is exactly what makes upward or
    sideways derivation impossible.
    """
    if target == start:
        return start_key
    by_parent: dict[str, list[EdgeToken]] = {}
    for tok in tokens:
        by_parent.setdefault(tok.parent, []).append(tok)
    for lst in by_parent.values():
        lst.sort(key=lambda t: t.child)

    frontier: list[tuple[str, bytes, int]] = [(start, start_key.key, start_key.version)]
    seen = {start}
    while frontier:
        node, key, version = frontier.pop(0)
        for tok in by_parent.get(node, ()):
            if tok.child in seen or tok.parent_version != version:
                continue
            child_key = _open_token(key, tok)
            if child_key is None:
                continue
            if tok.child == target:
                return NodeKey(node=target, version=tok.child_version, key=child_key)
            seen.add(tok.child)
            frontier.append((tok.child, child_key, tok.child_version))
    raise NotDerivable(f"{start} cannot derive {target}")


def derivable_keys(start: str, start_key: NodeKey, tokens: Iterable[EdgeToken]) -> dict[str, NodeKey]:
    """Every key reachable from `start` in one breadth-first token walk."""
    by_parent: dict[str, list[EdgeToken]] = {}
    for tok in tokens:
        by_parent.setdefault(tok.parent, []).append(tok)
    for lst in by_parent.values():
        lst.sort(key=lambda t: t.child)

    found = {start: start_key}
    frontier = [start]
    while frontier:
        node = frontier.pop(0)
        key = found[node]
        for tok in by_parent.get(node, ()):
            if tok.child in found or tok.parent_version != key.version:
                continue
            child = _open_token(key.key, tok)
            if child is None:
                continue
            found[tok.child] = NodeKey(node=tok.child, version=tok.child_version, key=child)
            frontier.append(tok.child)
    return found


class KeyManager:
    """Server-side key table bound to a hierarchy snapshot.

    Holds current node keys, the version-indexed key history (for reads of
    ciphertext that predates a rotation), published edge tokens, per-user role
    wraps, and the simulated client-side personal secrets.
    """

    def __init__(self, graph: HierarchyGraph):
        self.graph = graph
        self._keys: dict[str, NodeKey] = {}
        self._history: dict[tuple[str, int], bytes] = {}
        self._tokens: dict[tuple[str, str], EdgeToken] = {}
        self._wraps: dict[tuple[str, str], UserKeyWrap] = {}
        self._secrets: dict[str, PersonalSecret] = {}

    # -- graph lifecycle -----------------------------------------------------

    def update_graph(self, graph: HierarchyGraph) -> None:
        """Adopt a new hierarchy snapshot and drop key material for anything gone."""
        self.graph = graph
        nodes = graph.role_nodes | graph.data_nodes
        for node in [n for n in self._keys if n not in nodes]:
            del self._keys[node]
        for nv in [nv for nv in self._history if nv[0] not in nodes]:
            del self._history[nv]
        edges = graph.all_edges()
        for edge in [e for e in self._tokens if e not in edges]:
            del self._tokens[edge]
        for user, role in [ur for ur in self._wraps]:
            if role not in graph.user_roles.get(user, frozenset()):
                del self._wraps[(user, role)]

    # -- users ----------------------------------------------------------------

    def register_user(self, user: str) -> PersonalSecret:
        if user in self._secrets:
            raise KeyExists(f"personal secret for {user}")
        secret = PersonalSecret(
            user=user,
            secret=os.urandom(KEY_BYTES),
            signing_key_bytes=Ed25519PrivateKey.generate().private_bytes_raw(),
        )
        self._secrets[user] = secret
        return secret

    def personal_secret(self, user: str) -> PersonalSecret:
        try:
            return self._secrets[user]
        except KeyError:
            raise UnknownNode(f"no personal secret for {user}") from None

    def verify_keys(self) -> dict[str, Ed25519PublicKey]:
        return {
            u: s.signing_key().public_key() for u, s in self._secrets.items()
        }

    # -- node keys -------------------------------------------------------------

    def generate_node_key(self, node: str) -> NodeKey:
        if node not in self.graph.role_nodes and node not in self.graph.data_nodes:
            raise UnknownNode(node)
        if node in self._keys:
            raise KeyExists(node)
        key = NodeKey(node=node, version=1, key=os.urandom(KEY_BYTES))
        self._keys[node] = key
        self._history[(node, 1)] = key.key
        return key

    def current_key(self, node: str) -> NodeKey:
        try:
            return self._keys[node]
        except KeyError:
            raise UnknownNode(f"no key for {node}") from None

    def key_for_version(self, node: str, version: int) -> NodeKey:
        try:
            return NodeKey(node=node, version=version, key=self._history[(node, version)])
        except KeyError:
            raise UnknownNode(f"no version {version} key for {node}") from None

    def ensure_node_keys(self) -> list[str]:
        """Generate keys for any node that lacks one; returns the nodes keyed."""
        created = []
        for node in sorted(self.graph.role_nodes | self.graph.data_nodes):
            if node not in self._keys:
                self.generate_node_key(node)
                created.append(node)
        return created

    # -- edge tokens -------------------------------------------------------------

    def publish_edge_token(self, parent_key: NodeKey, child_key: NodeKey) -> EdgeToken:
        edge = (parent_key.node, child_key.node)
        if edge not in self.graph.all_edges():
            raise UnknownEdge(f"{edge[0]} -> {edge[1]}")
        for supplied in (parent_key, child_key):
            current = self.current_key(supplied.node)
            if supplied.version != current.version:
                raise VersionMismatch(
                    f"{supplied.node} v{supplied.version} is not current (v{current.version})"
                )
        token = seal_edge_token(parent_key, child_key)
        self._tokens[edge] = token
        return token

    def publish_all_tokens(self) -> int:
        count = 0
        for parent, child in sorted(self.graph.all_edges()):
            if (parent, child) not in self._tokens:
                self.publish_edge_token(self.current_key(parent), self.current_key(child))
                count += 1
        return count

    def tokens(self) -> list[EdgeToken]:
        return [self._tokens[e] for e in sorted(self._tokens)]

    # -- derivation ---------------------------------------------------------------

    def derive_key(self, start: str, start_key: NodeKey, target: str, tokens=None) -> NodeKey:
        """Derive `target`'s key from `start_key` over the current token set.

        The managed entry point additionally rejects keys it knows to be
        superseded (StaleKey); the raw token walk in `derive_key` above is
        what an offline holder of cached key bytes is limited to.
        """
        if tokens is None:
            tokens = self.tokens()
            current = self.current_key(start)
            if start_key.version != current.version:
                raise StaleKey(f"{start} key v{start_key.version}; current is v{current.version}")
        return derive_key(start, start_key, target, tokens)

    # -- user wraps ------------------------------------------------------------------

    def wrap_for_user(self, secret: PersonalSecret, role_key: NodeKey) -> UserKeyWrap:
        if role_key.node not in self.graph.user_roles.get(secret.user, frozenset()):
            raise NotAssigned(f"{secret.user} does not hold {role_key.node}")
        nonce = os.urandom(NONCE_BYTES)
        dk = wrap_derivation_key(secret.secret, secret.user, role_key.node, role_key.version)
        wrap = UserKeyWrap(
            user=secret.user,
            role=role_key.node,
            role_version=role_key.version,
            nonce=nonce,
            wrap=AESGCM(dk).encrypt(nonce, role_key.key, None),
        )
        self._wraps[(secret.user, role_key.node)] = wrap
        return wrap

    def unwrap(self, secret: PersonalSecret, wrap: UserKeyWrap) -> NodeKey:
        current = self.current_key(wrap.role)
        if wrap.role_version != current.version:
            raise StaleWrap(
                f"wrap for {wrap.role} v{wrap.role_version}; current is v{current.version}"
            )
        dk = wrap_derivation_key(secret.secret, wrap.user, wrap.role, wrap.role_version)
        try:
            key = AESGCM(dk).decrypt(wrap.nonce, wrap.wrap, None)
        except InvalidTag:
            raise WrongUser(f"secret of {secret.user} cannot open wrap for {wrap.user}") from None
        return NodeKey(node=wrap.role, version=wrap.role_version, key=key)

    def wrap_of(self, user: str, role: str) -> UserKeyWrap:
        try:
            return self._wraps[(user, role)]
        except KeyError:
            raise NotAssigned(f"no wrap for ({user}, {role})") from None

    def issue_wraps_for_user(self, user: str) -> list[UserKeyWrap]:
        secret = self.personal_secret(user)
        return [
            self.wrap_for_user(secret, self.current_key(role))
            for role in sorted(self.graph.user_roles.get(user, frozenset()))
        ]

    # -- at-rest persistence ---------------------------------------------------------------

    def to_encrypted_dict(self, master_key: bytes) -> dict:
        """Keystore document: key material sealed under the store master key,
        edge tokens and wraps as base64 (they are already ciphertext)."""
        return {
            "nodes": {
                node: {"version": k.version, "key": _seal(master_key, f"node:{node}:{k.version}", k.key)}
                for node, k in sorted(self._keys.items())
            },
            "history": [
                {"node": node, "version": version, "key": _seal(master_key, f"node:{node}:{version}", key)}
                for (node, version), key in sorted(self._history.items())
            ],
            "tokens": [self._tokens[e].to_dict() for e in sorted(self._tokens)],
            "wraps": [
                {
                    "user": w.user,
                    "role": w.role,
                    "role_version": w.role_version,
                    "nonce": b64e(w.nonce),
                    "wrap": b64e(w.wrap),
                }
                for (_, _), w in sorted(self._wraps.items())
            ],
            "secrets": [
                {
                    "user": s.user,
                    "secret": _seal(master_key, f"client:{s.user}:secret", s.secret),
                    "signing_key": _seal(master_key, f"client:{s.user}:signing", s.signing_key_bytes),
                    "verify_key": b64e(s.verify_key_bytes()),
                }
                for _, s in sorted(self._secrets.items())
            ],
        }

    def load_encrypted_dict(self, doc: dict, master_key: bytes) -> None:
        self._keys = {
            node: NodeKey(node=node, version=d["version"], key=_open(master_key, f"node:{node}:{d['version']}", d["key"]))
            for node, d in doc["nodes"].items()
        }
        self._history = {
            (d["node"], d["version"]): _open(master_key, f"node:{d['node']}:{d['version']}", d["key"])
            for d in doc["history"]
        }
        self._tokens = {}
        for d in doc["tokens"]:
            tok = EdgeToken.from_dict(d)
            self._tokens[(tok.parent, tok.child)] = tok
        self._wraps = {
            (d["user"], d["role"]): UserKeyWrap(
                user=d["user"],
                role=d["role"],
                role_version=d["role_version"],
                nonce=b64d(d["nonce"]),
                wrap=b64d(d["wrap"]),
            )
            for d in doc["wraps"]
        }
        self._secrets = {
            d["user"]: PersonalSecret(
                user=d["user"],
                secret=_open(master_key, f"client:{d['user']}:secret", d["secret"]),
                signing_key_bytes=_open(master_key, f"client:{d['user']}:signing", d["signing_key"]),
            )
            for d in doc["secrets"]
        }

    # -- rotation -------------------------------------------------------------------------

    def rotate_on_change(self, changed: str, reason: str) -> RekeyReport:
        """Re-key `changed` and its full downward closure after a hierarchy change.

        The closure is conservative: a revoked principal may hold cached
        descendant keys, so everything below the change rotates.  Affected
        edge tokens are republished against the new versions and wraps for
        still-assigned users are re-issued; ciphertext migration is lazy.
        """
        if changed not in self.graph.role_nodes and changed not in self.graph.data_nodes:
            raise UnknownNode(changed)
        closure = {changed} | self.graph.reach(changed)
        rotated: dict[str, int] = {}
        for node in sorted(closure):
            old = self.current_key(node)
            new = NodeKey(node=node, version=old.version + 1, key=os.urandom(KEY_BYTES))
            self._keys[node] = new
            self._history[(node, new.version)] = new.key
            rotated[node] = new.version

        report = RekeyReport(changed=changed, reason=reason, rotated=rotated)
        for parent, child in sorted(self.graph.all_edges()):
            if parent in closure or child in closure:
                self._tokens[(parent, child)] = seal_edge_token(
                    self.current_key(parent), self.current_key(child)
                )
                report.tokens_republished += 1
        for (user, role) in sorted(self._wraps):
            if role not in closure:
                continue
            if role in self.graph.user_roles.get(user, frozenset()):
                self.wrap_for_user(self.personal_secret(user), self.current_key(role))
                report.wraps_reissued += 1
            else:
                del self._wraps[(user, role)]
                report.wraps_dropped += 1
        return report
