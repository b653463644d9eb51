"""Seeded demo environment: hierarchy, users, keys, capsules, and patient records.

Builds the canonical clinical fixture used by the scenario suites and tests:
a Physician > RN > CNA role chain over a FullRecord > Notes > Demographics
sensitivity chain, a non-care-scoped Researcher, an Admin operator, and a
deterministic synthetic patient population.  Writes a manifest (no PHI) so
scenario runners can resolve actors and records symbolically.
"""

from __future__ import annotations

import json
import time

import numpy as np

from . import hierarchy
from .biocapsule import synth_sample
from .config import GatewayConfig
from .gateway import Gateway
from .records import ClinicalRecord
from .synth import generate_patients, identifier_markers

ROLE_EDGES = [("Physician", "RN"), ("RN", "CNA")]
DATA_EDGES = [("FullRecord", "Notes"), ("Notes", "Demographics")]
ASSOCIATIONS = [
    ("Physician", "FullRecord"),
    ("RN", "Notes"),
    ("CNA", "Demographics"),
    ("Researcher", "Notes"),
]
DATA_NODES = ["FullRecord", "Notes", "Demographics"]
ROLES = ["Admin", "Physician", "RN", "CNA", "Researcher"]

USERS = {
    "admin": {"roles": ["Admin"], "seed": 9000},
    "phys1": {"roles": ["Physician"], "seed": 9001},
    "phys2": {"roles": ["Physician"], "seed": 9002},
    "rn1": {"roles": ["RN"], "seed": 9003},
    "cna1": {"roles": ["CNA"], "seed": 9004},
    "res1": {"roles": ["Researcher"], "seed": 9005},
}

ENROLL_SAMPLES = 5


def build_fixture(
    config: GatewayConfig,
    master_key: bytes | None = None,
    seed: int = 7,
    patients: int = 20,
) -> Gateway:
    """Populate the store directory and return a live gateway over it."""
    gw = Gateway(config, master_key=master_key)
    gw.registry._rng = np.random.default_rng([0xF1, seed])  # reproducible RS features

    graph = gw.graph
    for role in ROLES:
        graph = graph.add_node(hierarchy.ROLE, role)
    for node in DATA_NODES:
        graph = graph.add_node(hierarchy.DATA, node)
    for parent, child in ROLE_EDGES:
        graph = graph.add_edge(hierarchy.ROLE, parent, child)
    for parent, child in DATA_EDGES:
        graph = graph.add_edge(hierarchy.DATA, parent, child)
    for role, data in ASSOCIATIONS:
        graph = graph.associate(role, data)
    for user, info in USERS.items():
        for role in info["roles"]:
            graph = graph.assign_user(user, role)
    gw._sync_graph(graph)

    gw.keys.ensure_node_keys()
    gw.keys.publish_all_tokens()
    for user in USERS:
        gw.register_user(user)
        for role in USERS[user]["roles"]:
            gw.keys.wrap_for_user(gw.keys.personal_secret(user), gw.keys.current_key(role))

    for role in ROLES:
        gw.registry.reissue_rs(role)
    for user, info in USERS.items():
        for role in info["roles"]:
            samples = [
                synth_sample(info["seed"], config.synth_sigma, draw=d, dim=config.dim)
                for d in range(ENROLL_SAMPLES)
            ]
            gw.registry.enroll(user, role, samples)

    population = generate_patients(seed, patients)
    seeding_session = gw.issue_session("phys1", "Physician", ttl=3600.0)
    record_ids: list[str] = []
    record_nodes: dict[str, str] = {}
    for i, patient in enumerate(population):
        data_node = DATA_NODES[i % len(DATA_NODES)]
        attending = {"phys1"} | ({"rn1"} if i % 2 == 0 else set())
        record = ClinicalRecord(
            record_id="",
            patient_id=patient.patient_id,
            data_node=data_node,
            attending=frozenset(attending),
            fields=patient.fields,
        )
        record_id = gw.records.put_record(seeding_session, record)
        record_ids.append(record_id)
        record_nodes[record_id] = data_node
    gw.sessions.revoke(seeding_session.token_hex())

    manifest = {
        "seed": seed,
        "patients": patients,
        "created_at": time.time(),
        "sigma": config.synth_sigma,
        "dim": config.dim,
        "users": USERS,
        "roles": ROLES,
        "data_nodes": DATA_NODES,
        "records": record_ids,
        "record_data_nodes": record_nodes,
    }
    (config.store_path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    gw.save_state()
    return gw


def load_manifest(config: GatewayConfig) -> dict:
    return json.loads((config.store_path / "manifest.json").read_text())


def fixture_markers(seed: int, patients: int) -> set[str]:
    """Plaintext identifier strings of the seeded population (for hygiene scans)."""
    return identifier_markers(generate_patients(seed, patients))
