"""Gateway configuration: TOML file plus the store master key from the environment."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MASTER_KEY_ENV = "MEDGATE_MASTER_KEY"


class ConfigError(Exception):
    pass


@dataclass
class GatewayConfig:
    store_dir: str = "medgate-store"
    dim: int = 512
    tau: float = 0.85
    synth_sigma: float = 0.1
    session_ttl_minutes: float = 30.0
    audit_reads: bool = False
    host: str = "127.0.0.1"
    port: int = 7700
    admin_role: str = "Admin"
    care_scoped_roles: list[str] = field(default_factory=lambda: ["Physician", "RN", "CNA"])
    rate_capacity: int = 100
    rate_refill_per_sec: float = 50.0

    @property
    def store_path(self) -> Path:
        return Path(self.store_dir)

    @property
    def session_ttl_seconds(self) -> float:
        return self.session_ttl_minutes * 60.0


def load_config(path: str | Path | None) -> GatewayConfig:
    if path is None:
        return GatewayConfig()
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"bad config file {path}: {exc}") from None
    known = {f.name for f in fields(GatewayConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return GatewayConfig(**doc)


def master_key_from_env() -> bytes:
    """32-byte store master key, hex-encoded in MEDGATE_MASTER_KEY."""
    value = os.environ.get(MASTER_KEY_ENV)
    if not value:
        raise ConfigError(f"{MASTER_KEY_ENV} is not set (expected 64 hex characters)")
    try:
        key = bytes.fromhex(value.strip())
    except ValueError:
        raise ConfigError(f"{MASTER_KEY_ENV} is not valid hex") from None
    if len(key) != 32:
        raise ConfigError(f"{MASTER_KEY_ENV} must decode to 32 bytes, got {len(key)}")
    return key
