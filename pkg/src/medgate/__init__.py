"""Secure data-sharing gateway for sensitive records.

Building blocks: role/data hierarchies with reachability queries, dual-level
key management with downward-only derivation, capsule-based one-step biometric
login, tamper-evident provenance chains and sealed transfer envelopes, an
encrypted clinical record store with de-identified export, CVSS v3.0 scoring,
and a scenario harness that drives security workflows end to end.
"""

__version__ = "0.1.0"
