"""Service configuration.

One JSON file, every key optional, each overridable by an environment
variable prefixed ``SKILLFLOW_``.  Environment wins over file, file wins
over defaults.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

_ENV_PREFIX = "SKILLFLOW_"


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    data_dir: Path = Path("skillflow-data")
    webhook_url: str | None = None


def load_config(
    path: str | Path | None = None, env: dict[str, str] | None = None
) -> ServiceConfig:
    """Build a ServiceConfig from an optional file plus the environment."""
    values: dict[str, object] = {}
    if path is not None:
        raw = Path(path).read_bytes()
        try:
            doc = json.loads(raw)
        except ValueError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(doc) - {"host", "port", "dataDir", "webhookUrl"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "host" in doc:
            values["host"] = str(doc["host"])
        if "port" in doc:
            values["port"] = doc["port"]
        if "dataDir" in doc:
            values["data_dir"] = Path(str(doc["dataDir"]))
        if "webhookUrl" in doc:
            values["webhook_url"] = doc["webhookUrl"]

    environ = os.environ if env is None else env
    if _ENV_PREFIX + "HOST" in environ:
        values["host"] = environ[_ENV_PREFIX + "HOST"]
    if _ENV_PREFIX + "PORT" in environ:
        values["port"] = environ[_ENV_PREFIX + "PORT"]
    if _ENV_PREFIX + "DATA_DIR" in environ:
        values["data_dir"] = Path(environ[_ENV_PREFIX + "DATA_DIR"])
    if _ENV_PREFIX + "WEBHOOK_URL" in environ:
        values["webhook_url"] = environ[_ENV_PREFIX + "WEBHOOK_URL"] or None

    if "port" in values:
        try:
            values["port"] = int(values["port"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"port must be an integer: {values['port']!r}") from exc
        if not 0 <= values["port"] <= 65535:
            raise ConfigError(f"port out of range: {values['port']}")
    return ServiceConfig(**values)  # type: ignore[arg-type]
