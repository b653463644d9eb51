"""Role and data-sensitivity hierarchies with reachability-based access queries.

Two DAGs share one value type: role nodes (edges point senior -> junior) and
data nodes (edges point more-sensitive parent -> less-sensitive child), plus
role->data associations and user->role assignments.  A role reaches everything
below it, so access questions reduce to graph reachability.

Graphs are immutable values: every mutation returns a new graph, so readers can
keep using a snapshot while a single writer advances the current version.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Literal

Kind = Literal["role", "data"]

ROLE: Kind = "role"
DATA: Kind = "data"


class HierarchyError(Exception):
    """Base class for hierarchy violations."""


class DuplicateNode(HierarchyError):
    pass


class UnknownNode(HierarchyError):
    pass


class DuplicateEdge(HierarchyError):
    pass


class UnknownEdge(HierarchyError):
    pass


class CycleDetected(HierarchyError):
    pass


class KindMismatch(HierarchyError):
    pass


class DuplicateAssociation(HierarchyError):
    pass


class NodeInUse(HierarchyError):
    pass


class UnknownUser(HierarchyError):
    pass


class DuplicateAssignment(HierarchyError):
    pass


class NotAssigned(HierarchyError):
    pass


Edge = tuple[str, str]


def _reachable(starts: Iterable[str], edges: Iterable[Edge]) -> set[str]:
    """Nodes reachable from `starts` (excluding the starts themselves unless revisited)."""
    out: dict[str, list[str]] = {}
    for parent, child in edges:
        out.setdefault(parent, []).append(child)
    seen: set[str] = set()
    queue = deque(starts)
    while queue:
        node = queue.popleft()
        for child in out.get(node, ()):
            if child not in seen:
                seen.add(child)
                queue.append(child)
    return seen


@dataclass(frozen=True)
class HierarchyGraph:
    """Immutable snapshot of the role/data hierarchies and their relations."""

    role_nodes: frozenset[str] = frozenset()
    data_nodes: frozenset[str] = frozenset()
    role_edges: frozenset[Edge] = frozenset()
    data_edges: frozenset[Edge] = frozenset()
    associations: frozenset[Edge] = frozenset()
    user_roles: dict[str, frozenset[str]] = field(default_factory=dict)

    # -- mutations (return a new graph) ------------------------------------

    def add_node(self, kind: Kind, node_id: str) -> "HierarchyGraph":
        if node_id in self.role_nodes or node_id in self.data_nodes:
            raise DuplicateNode(node_id)
        if kind == ROLE:
            return replace(self, role_nodes=self.role_nodes | {node_id})
        if kind == DATA:
            return replace(self, data_nodes=self.data_nodes | {node_id})
        raise KindMismatch(f"unknown node kind: {kind}")

    def add_edge(self, kind: Kind, parent: str, child: str) -> "HierarchyGraph":
        nodes = self.role_nodes if kind == ROLE else self.data_nodes
        edges = self.role_edges if kind == ROLE else self.data_edges
        for node in (parent, child):
            if node not in nodes:
                raise UnknownNode(f"{kind} node {node!r}")
        if (parent, child) in edges:
            raise DuplicateEdge(f"{parent} -> {child}")
        if parent == child or parent in _reachable([child], edges):
            raise CycleDetected(f"{parent} -> {child}")
        if kind == ROLE:
            return replace(self, role_edges=edges | {(parent, child)})
        return replace(self, data_edges=edges | {(parent, child)})

    def remove_node(self, node_id: str) -> "HierarchyGraph":
        if node_id in self.role_nodes:
            if any(node_id in roles for roles in self.user_roles.values()):
                raise NodeInUse(node_id)
            return replace(
                self,
                role_nodes=self.role_nodes - {node_id},
                role_edges=frozenset(e for e in self.role_edges if node_id not in e),
                associations=frozenset(a for a in self.associations if a[0] != node_id),
            )
        if node_id in self.data_nodes:
            return replace(
                self,
                data_nodes=self.data_nodes - {node_id},
                data_edges=frozenset(e for e in self.data_edges if node_id not in e),
                associations=frozenset(a for a in self.associations if a[1] != node_id),
            )
        raise UnknownNode(node_id)

    def remove_edge(self, parent: str, child: str) -> "HierarchyGraph":
        """Remove a role edge, data edge, or association identified by its endpoints."""
        edge = (parent, child)
        if edge in self.role_edges:
            return replace(self, role_edges=self.role_edges - {edge})
        if edge in self.data_edges:
            return replace(self, data_edges=self.data_edges - {edge})
        if edge in self.associations:
            return replace(self, associations=self.associations - {edge})
        raise UnknownEdge(f"{parent} -> {child}")

    def associate(self, role: str, data: str) -> "HierarchyGraph":
        if role in self.data_nodes or data in self.role_nodes:
            raise KindMismatch(f"associate({role!r}, {data!r}) expects (role, data)")
        if role not in self.role_nodes:
            raise UnknownNode(f"role node {role!r}")
        if data not in self.data_nodes:
            raise UnknownNode(f"data node {data!r}")
        if (role, data) in self.associations:
            raise DuplicateAssociation(f"{role} <-> {data}")
        return replace(self, associations=self.associations | {(role, data)})

    def assign_user(self, user: str, role: str) -> "HierarchyGraph":
        if role not in self.role_nodes:
            raise UnknownNode(f"role node {role!r}")
        held = self.user_roles.get(user, frozenset())
        if role in held:
            raise DuplicateAssignment(f"{user} already holds {role}")
        users = dict(self.user_roles)
        users[user] = held | {role}
        return replace(self, user_roles=users)

    def revoke_user(self, user: str, role: str) -> "HierarchyGraph":
        if user not in self.user_roles:
            raise UnknownUser(user)
        held = self.user_roles[user]
        if role not in held:
            raise NotAssigned(f"{user} does not hold {role}")
        users = dict(self.user_roles)
        remaining = held - {role}
        if remaining:
            users[user] = remaining
        else:
            del users[user]
        return replace(self, user_roles=users)

    # -- queries ------------------------------------------------------------

    def all_edges(self) -> frozenset[Edge]:
        """Every directed edge access can flow down: role, association, and data edges."""
        return self.role_edges | self.associations | self.data_edges

    def role_descendants(self, role: str) -> set[str]:
        if role not in self.role_nodes:
            raise UnknownNode(f"role node {role!r}")
        return _reachable([role], self.role_edges)

    def data_descendants(self, data: str) -> set[str]:
        if data not in self.data_nodes:
            raise UnknownNode(f"data node {data!r}")
        return _reachable([data], self.data_edges)

    def reach(self, node: str) -> set[str]:
        """All nodes reachable from `node` across every edge kind (node excluded)."""
        if node not in self.role_nodes and node not in self.data_nodes:
            raise UnknownNode(node)
        return _reachable([node], self.all_edges())

    def accessible_data(self, role: str) -> set[str]:
        """Data nodes the role can access: associations of the role and its junior
        roles, each expanded downward through the data hierarchy."""
        roles = {role} | self.role_descendants(role)
        direct = {d for (r, d) in self.associations if r in roles}
        return direct | _reachable(direct, self.data_edges)

    def can_access(self, user: str, data: str) -> bool:
        if user not in self.user_roles:
            raise UnknownUser(user)
        if data not in self.data_nodes:
            raise UnknownNode(f"data node {data!r}")
        return any(data in self.accessible_data(r) for r in self.user_roles[user])

    def users_of(self, role: str) -> set[str]:
        return {u for u, roles in self.user_roles.items() if role in roles}

    def is_acyclic(self) -> bool:
        """Exhaustive cycle search over both edge sets (diagnostic / test hook)."""
        for nodes, edges in ((self.role_nodes, self.role_edges), (self.data_nodes, self.data_edges)):
            for node in nodes:
                if node in _reachable([node], edges):
                    return False
        return True

    # -- persistence ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "roles": sorted(self.role_nodes),
            "data": sorted(self.data_nodes),
            "role_edges": sorted([list(e) for e in self.role_edges]),
            "data_edges": sorted([list(e) for e in self.data_edges]),
            "associations": sorted([list(e) for e in self.associations]),
            "user_roles": {u: sorted(rs) for u, rs in sorted(self.user_roles.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HierarchyGraph":
        return cls(
            role_nodes=frozenset(doc.get("roles", [])),
            data_nodes=frozenset(doc.get("data", [])),
            role_edges=frozenset(tuple(e) for e in doc.get("role_edges", [])),
            data_edges=frozenset(tuple(e) for e in doc.get("data_edges", [])),
            associations=frozenset(tuple(e) for e in doc.get("associations", [])),
            user_roles={u: frozenset(rs) for u, rs in doc.get("user_roles", {}).items()},
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "HierarchyGraph":
        return cls.from_dict(json.loads(text))

    def iter_nodes(self) -> Iterator[str]:
        yield from sorted(self.role_nodes | self.data_nodes)
