"""Capsule-based password-less login that authorizes a role in the same step.

Each role owns exactly one active Reference Subject (RS), a random unit
feature vector.  Enrollment fuses the user's template with the role's RS into
a stored capsule; login fuses a fresh sample with the same RS and accepts on
cosine similarity.  Because the capsule is bound to the role's RS, a
successful match simultaneously proves identity and authorizes that single
role, and replacing the RS cancels every capsule enrolled under it.

Fusion is the element-wise product of the two unit vectors, renormalized.  It
gives the behaviors required here (same user + different RS => unrelated
capsules; shared RS => per-user capsules) but is not claimed to be a
non-invertible template protection scheme.

A pluggable synthetic feature source stands in for a real face-embedding
pipeline: per-user centroids drawn from a seeded generator, samples perturbed
with spherical Gaussian noise of total magnitude `noise_sigma`.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass

import numpy as np

from .hierarchy import HierarchyGraph, NotAssigned, UnknownNode

DIM = 512
UNIT_TOL = 1e-9
DEFAULT_TAU = 0.85
DEFAULT_SESSION_TTL = 30 * 60.0

_CENTROID_STREAM = 0xC3
_NOISE_STREAM = 0x5A


class BioCapsuleError(Exception):
    """Base class for enrollment/authentication failures."""


class DimensionMismatch(BioCapsuleError):
    pass


class DegenerateFusion(BioCapsuleError):
    pass


class TooFewSamples(BioCapsuleError):
    pass


class NoActiveRS(BioCapsuleError):
    pass


class NotEnrolled(BioCapsuleError):
    pass


class MatchBelowThreshold(BioCapsuleError):
    def __init__(self, score: float, tau: float):
        super().__init__(f"match score {score:.4f} below threshold {tau:.4f}")
        self.score = score
        self.tau = tau


class StaleCapsule(BioCapsuleError):
    pass


def normalize(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm < 1e-12 or not np.isfinite(norm):
        raise DegenerateFusion("cannot normalize a (near-)zero or non-finite vector")
    return v / norm


def feature(values, dim: int = DIM) -> np.ndarray:
    """Validate an externally supplied feature vector: finite, unit norm, right size."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (dim,):
        raise DimensionMismatch(f"expected shape ({dim},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise BioCapsuleError("feature vector has non-finite entries")
    if abs(float(np.linalg.norm(v)) - 1.0) > UNIT_TOL:
        raise BioCapsuleError("feature vector is not unit norm")
    return v


def fuse(user_features: np.ndarray, rs_features: np.ndarray) -> np.ndarray:
    """Element-wise product of two unit vectors, renormalized to unit norm."""
    u = np.asarray(user_features, dtype=np.float64)
    r = np.asarray(rs_features, dtype=np.float64)
    if u.shape != r.shape:
        raise DimensionMismatch(f"{u.shape} vs {r.shape}")
    return normalize(u * r)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))


def synth_centroid(user_seed: int, dim: int = DIM) -> np.ndarray:
    rng = np.random.default_rng([_CENTROID_STREAM, user_seed])
    return normalize(rng.standard_normal(dim))


def synth_sample(user_seed: int, noise_sigma: float, draw: int = 0, dim: int = DIM) -> np.ndarray:
    """Deterministic synthetic biometric sample for (user_seed, draw, noise_sigma).

    The perturbation is spherical Gaussian with expected total norm
    `noise_sigma` relative to the unit centroid (per-component std
    sigma/sqrt(dim)), so sigma is the relative noise level of a capture.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    centroid = synth_centroid(user_seed, dim)
    if noise_sigma == 0:
        return centroid
    rng = np.random.default_rng([_NOISE_STREAM, user_seed, draw])
    noise = rng.standard_normal(dim) * (noise_sigma / np.sqrt(dim))
    return normalize(centroid + noise)


def random_feature(rng: np.random.Generator, dim: int = DIM) -> np.ndarray:
    return normalize(rng.standard_normal(dim))


@dataclass(frozen=True)
class ReferenceSubject:
    rs_id: str
    role: str
    features: np.ndarray
    created_at: float


@dataclass(frozen=True)
class BioCapsule:
    user: str
    role: str
    rs_id: str
    fused: np.ndarray


@dataclass(frozen=True)
class SessionGrant:
    user: str
    role: str
    expires_at: float
    token: bytes

    def token_hex(self) -> str:
        return self.token.hex()

    def expired(self, now: float | None = None) -> bool:
        return (now if now is not None else time.time()) >= self.expires_at


def equal_error_threshold(genuine: np.ndarray, impostor: np.ndarray) -> float:
    """Threshold where false-accept and false-reject rates cross on these scores."""
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    candidates = np.unique(np.concatenate([genuine, impostor]))
    g_sorted = np.sort(genuine)
    i_sorted = np.sort(impostor)
    frr = np.searchsorted(g_sorted, candidates, side="left") / len(genuine)
    far = 1.0 - np.searchsorted(i_sorted, candidates, side="left") / len(impostor)
    best = int(np.argmin(np.abs(far - frr)))
    return float(candidates[best])


class CapsuleRegistry:
    """Per-role Reference Subjects plus the enrolled capsules and the matcher."""

    def __init__(
        self,
        graph: HierarchyGraph,
        dim: int = DIM,
        tau: float = DEFAULT_TAU,
        session_ttl: float = DEFAULT_SESSION_TTL,
        rng: np.random.Generator | None = None,
    ):
        self.graph = graph
        self.dim = dim
        self.tau = tau
        self.session_ttl = session_ttl
        self._rng = rng if rng is not None else np.random.default_rng()
        self._active_rs: dict[str, ReferenceSubject] = {}
        self._archived_rs: list[ReferenceSubject] = []
        self._capsules: dict[tuple[str, str], BioCapsule] = {}
        self._rs_counter = 0

    def update_graph(self, graph: HierarchyGraph) -> None:
        self.graph = graph

    # -- reference subjects ---------------------------------------------------

    def reissue_rs(self, role: str) -> ReferenceSubject:
        """Activate a fresh RS for the role; capsules under the old RS go stale."""
        if role not in self.graph.role_nodes:
            raise UnknownNode(f"role node {role!r}")
        old = self._active_rs.get(role)
        if old is not None:
            self._archived_rs.append(old)
        self._rs_counter += 1
        rs = ReferenceSubject(
            rs_id=f"rs-{self._rs_counter:04d}",
            role=role,
            features=random_feature(self._rng, self.dim),
            created_at=time.time(),
        )
        self._active_rs[role] = rs
        return rs

    def active_rs(self, role: str) -> ReferenceSubject:
        rs = self._active_rs.get(role)
        if rs is None:
            raise NoActiveRS(role)
        return rs

    def archived_rs(self) -> list[ReferenceSubject]:
        return list(self._archived_rs)

    # -- enrollment / authentication ----------------------------------------------

    def enroll(self, user: str, role: str, samples: list[np.ndarray]) -> BioCapsule:
        if role not in self.graph.user_roles.get(user, frozenset()):
            raise NotAssigned(f"{user} does not hold {role}")
        rs = self.active_rs(role)
        if len(samples) < 3:
            raise TooFewSamples(f"need >= 3 enrollment samples, got {len(samples)}")
        validated = [feature(s, self.dim) for s in samples]
        template = normalize(np.mean(validated, axis=0))
        capsule = BioCapsule(user=user, role=role, rs_id=rs.rs_id, fused=fuse(template, rs.features))
        self._capsules[(user, role)] = capsule
        return capsule

    def capsule_of(self, user: str, role: str) -> BioCapsule:
        try:
            return self._capsules[(user, role)]
        except KeyError:
            raise NotEnrolled(f"({user}, {role})") from None

    def match_score(self, user: str, role: str, fresh_sample: np.ndarray) -> float:
        """Similarity between the fresh capture (fused with the active RS) and the
        stored capsule; raises StaleCapsule if the RS changed since enrollment."""
        capsule = self.capsule_of(user, role)
        rs = self.active_rs(role)
        if capsule.rs_id != rs.rs_id:
            raise StaleCapsule(f"capsule for ({user}, {role}) predates RS {rs.rs_id}")
        probe = fuse(feature(fresh_sample, self.dim), rs.features)
        return cosine(probe, capsule.fused)

    def authenticate(self, user: str, role: str, fresh_sample: np.ndarray) -> SessionGrant:
        """One-step login: a single match both confirms identity and grants the
        role the matched RS belongs to."""
        score = self.match_score(user, role, fresh_sample)
        if score < self.tau:
            raise MatchBelowThreshold(score, self.tau)
        grant = SessionGrant(
            user=user,
            role=role,
            expires_at=time.time() + self.session_ttl,
            token=os.urandom(32),
        )
        assert grant.role == role  # a grant never carries any role but the matched one
        return grant

    # -- persistence ------------------------------------------------------------------

    def to_dict(self) -> dict:
        def rs_doc(rs: ReferenceSubject) -> dict:
            return {
                "rs_id": rs.rs_id,
                "role": rs.role,
                "features": [float(x) for x in rs.features],
                "created_at": rs.created_at,
            }

        return {
            "dim": self.dim,
            "rs_counter": self._rs_counter,
            "active_rs": {role: rs_doc(rs) for role, rs in sorted(self._active_rs.items())},
            "archived_rs": [rs_doc(rs) for rs in self._archived_rs],
            "capsules": [
                {
                    "user": c.user,
                    "role": c.role,
                    "rs_id": c.rs_id,
                    "fused": [float(x) for x in c.fused],
                }
                for (_, _), c in sorted(self._capsules.items())
            ],
        }

    def load_dict(self, doc: dict) -> None:
        def rs_from(d: dict) -> ReferenceSubject:
            return ReferenceSubject(
                rs_id=d["rs_id"],
                role=d["role"],
                features=np.asarray(d["features"], dtype=np.float64),
                created_at=float(d["created_at"]),
            )

        self.dim = int(doc["dim"])
        self._rs_counter = int(doc["rs_counter"])
        self._active_rs = {role: rs_from(d) for role, d in doc["active_rs"].items()}
        self._archived_rs = [rs_from(d) for d in doc["archived_rs"]]
        self._capsules = {
            (d["user"], d["role"]): BioCapsule(
                user=d["user"],
                role=d["role"],
                rs_id=d["rs_id"],
                fused=np.asarray(d["fused"], dtype=np.float64),
            )
            for d in doc["capsules"]
        }


class SessionTable:
    """Token-indexed session grants with atomic insert/lookup."""

    def __init__(self):
        self._lock = threading.Lock()
        self._grants: dict[str, SessionGrant] = {}

    def insert(self, grant: SessionGrant) -> str:
        with self._lock:
            self._grants[grant.token_hex()] = grant
        return grant.token_hex()

    def lookup(self, token_hex: str, now: float | None = None) -> SessionGrant | None:
        with self._lock:
            grant = self._grants.get(token_hex)
        if grant is None or grant.expired(now):
            return None
        return grant

    def revoke(self, token_hex: str) -> bool:
        with self._lock:
            return self._grants.pop(token_hex, None) is not None

    def to_dict(self) -> dict:
        with self._lock:
            return {
                tok: {"user": g.user, "role": g.role, "expires_at": g.expires_at}
                for tok, g in sorted(self._grants.items())
            }

    def load_dict(self, doc: dict) -> None:
        with self._lock:
            self._grants = {
                tok: SessionGrant(
                    user=d["user"],
                    role=d["role"],
                    expires_at=float(d["expires_at"]),
                    token=bytes.fromhex(tok),
                )
                for tok, d in doc.items()
            }
