#!/usr/bin/env python3
"""
Configuration for blade-sim: environment settings and experiment files
"""

import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .blade_schemas import SimConfig
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

VERSION = "1.0.0"


class Settings(BaseSettings):
    """Application settings with environment variable support"""

    # Parallelism for sweeps (BLADE_SIM_THREADS)
    threads: int = 1

    # Logging
    log_level: str = "INFO"
    log_json: bool = False

    # Outputs
    output_dir: str = "results"

    # Service
    port: int = 8000
    debug: bool = False
    allowed_origins: List[str] = ["*"]

    model_config = SettingsConfigDict(
        env_prefix="BLADE_SIM_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


def _toml_parser():
    try:
        import tomllib
    except ImportError:
        try:
            import tomli as tomllib
        except ImportError as e:
            raise ConfigError("TOML configs need Python 3.11+ or the tomli package") from e
    return tomllib


def _read_document(path: Path) -> Dict[str, Any]:
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".toml":
        return _toml_parser().loads(text)
    return json.loads(text)


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply ``a.b.c=value`` overrides onto a nested config document"""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"Override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = document
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"Override '{key}' descends into non-section '{part}'")
            node = child
        node[parts[-1]] = _parse_value(raw.strip())
    return document


def build_sim_config(document: Optional[Dict[str, Any]] = None,
                     overrides: Optional[List[str]] = None) -> SimConfig:
    """Validate a config document (plus overrides) into a SimConfig"""
    document = apply_overrides(copy.deepcopy(document or {}), overrides or [])
    try:
        return SimConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment config: {e}") from e


def load_sim_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[List[str]] = None) -> SimConfig:
    """Load a JSON/TOML experiment file; no path means all defaults"""
    document: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            document = _read_document(path)
        except (json.JSONDecodeError, ValueError) as e:
            raise ConfigError(f"Cannot parse {path}: {e}") from e
        logger.info(f"Loaded experiment config {path}")
    return build_sim_config(document, overrides)
