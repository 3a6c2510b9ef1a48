"""TOML configuration for the server and CLI."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PLANNER_MODES = ("scripted", "remote")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class RemotePlannerConfig:
    endpoint: str
    model: str
    api_key_env: str = "AMI_PLANNER_API_KEY"

    def api_key(self) -> str:
        return os.environ.get(self.api_key_env, "")


@dataclass(frozen=True)
class SeedUser:
    username: str
    password_hash: str
    display_name: str = ""
    email: str = ""
    notification_threshold_pm2_5: Optional[float] = None


@dataclass(frozen=True)
class Config:
    bind_address: str = "127.0.0.1:8080"
    data_dir: Optional[str] = None
    static_dir: Optional[str] = None
    planner_mode: str = "scripted"
    scripted_rules_path: Optional[str] = None
    remote: Optional[RemotePlannerConfig] = None
    device_key: Optional[str] = None
    seed_users: tuple = ()

    def __post_init__(self):
        if self.planner_mode not in PLANNER_MODES:
            raise ConfigError(f"planner_mode: must be one of {PLANNER_MODES}")
        if self.planner_mode == "scripted" and not self.scripted_rules_path:
            raise ConfigError("scripted_rules_path: required when planner_mode is 'scripted'")
        if self.planner_mode == "remote":
            if self.remote is None or not self.remote.endpoint or not self.remote.model:
                raise ConfigError("remote: endpoint and model required when planner_mode is 'remote'")

    def host_port(self):
        host, _, port = self.bind_address.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"bind_address: expected host:port, got {self.bind_address!r}")
        return host, int(port)


def _expect(table: dict, key: str, kind, where: str):
    value = table.get(key)
    if value is not None and not isinstance(value, kind):
        raise ConfigError(f"{where}{key}: expected {kind.__name__}")
    return value


def load_config(path) -> Config:
    p = Path(path)
    try:
        with p.open("rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: invalid TOML: {exc}") from exc

    remote = None
    if "remote" in data:
        table = data["remote"]
        if not isinstance(table, dict):
            raise ConfigError("remote: expected a table")
        remote = RemotePlannerConfig(
            endpoint=_expect(table, "endpoint", str, "remote.") or "",
            model=_expect(table, "model", str, "remote.") or "",
            api_key_env=_expect(table, "api_key_env", str, "remote.") or "AMI_PLANNER_API_KEY",
        )

    seed_users = []
    for i, entry in enumerate(data.get("seed_users", [])):
        if not isinstance(entry, dict):
            raise ConfigError(f"seed_users[{i}]: expected a table")
        username = entry.get("username")
        password_hash = entry.get("password_hash")
        if not username or not isinstance(username, str):
            raise ConfigError(f"seed_users[{i}].username: required string")
        if not password_hash or not isinstance(password_hash, str):
            raise ConfigError(f"seed_users[{i}].password_hash: required string")
        threshold = entry.get("notification_threshold_pm2_5")
        if threshold is not None and (isinstance(threshold, bool)
                                      or not isinstance(threshold, (int, float)) or threshold < 0):
            raise ConfigError(f"seed_users[{i}].notification_threshold_pm2_5: "
                              "must be a non-negative number")
        seed_users.append(SeedUser(
            username=username,
            password_hash=password_hash,
            display_name=_expect(entry, "display_name", str, f"seed_users[{i}].") or "",
            email=_expect(entry, "email", str, f"seed_users[{i}].") or "",
            notification_threshold_pm2_5=float(threshold) if threshold is not None else None,
        ))

    # Relative paths resolve against the config file's directory.
    base = p.parent

    def _resolve(value):
        if value is None:
            return None
        candidate = Path(value)
        return str(candidate if candidate.is_absolute() else base / candidate)

    return Config(
        bind_address=_expect(data, "bind_address", str, "") or "127.0.0.1:8080",
        data_dir=_resolve(_expect(data, "data_dir", str, "")),
        static_dir=_resolve(_expect(data, "static_dir", str, "")),
        planner_mode=_expect(data, "planner_mode", str, "") or "scripted",
        scripted_rules_path=_resolve(_expect(data, "scripted_rules_path", str, "")),
        remote=remote,
        device_key=_expect(data, "device_key", str, "") or None,
        seed_users=tuple(seed_users),
    )
