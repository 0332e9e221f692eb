"""
Configuration management for SNARM runs
"""

import hashlib
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml
from dotenv import load_dotenv
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from ..schemas.config import RunConfig
from .exceptions import ConfigError

# Load environment variables
load_dotenv()

BASE_DIR = Path(__file__).parent.parent.parent
DEFAULT_CONFIG_PATH = BASE_DIR / "config.yaml"

# Sections that change the learned model or its inputs
MODEL_SECTIONS = ("encoder", "bank", "navigator", "snmm", "decoder", "ablation")


class EnvSettings(BaseSettings):
    """Environment overrides (SNARM_CACHE, SNARM_LOG_LEVEL)"""

    model_config = SettingsConfigDict(env_prefix="SNARM_", env_file=".env", extra="ignore")

    cache: Optional[Path] = None
    log_level: Optional[str] = None


def _read_yaml(path: Path) -> Dict[str, Any]:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping of sections")
    return data


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """
    Validate a raw mapping into a RunConfig

    Args:
        data: Parsed YAML sections

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: On any schema violation
    """
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}") from e

    env = EnvSettings()
    if env.log_level:
        cfg.logging.level = env.log_level.upper()
    return cfg


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Load a run configuration from YAML

    Args:
        path: Config file; the repository config.yaml when omitted

    Returns:
        Validated RunConfig
    """
    config_path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    cfg = config_from_dict(_read_yaml(config_path))

    # Relative dataset/output paths are taken relative to the config file
    base = config_path.resolve().parent
    if not cfg.dataset.root.is_absolute():
        cfg.dataset.root = base / cfg.dataset.root
    if not cfg.run.output_dir.is_absolute():
        cfg.run.output_dir = base / cfg.run.output_dir
    return cfg


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 over the model-relevant sections in canonical JSON"""
    dumped = cfg.model_dump(mode="json", include=set(MODEL_SECTIONS))
    canonical = json.dumps(dumped, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def cache_dir() -> Optional[Path]:
    """Feature cache directory from SNARM_CACHE, created on demand"""
    directory = EnvSettings().cache
    if directory is None:
        return None
    directory.mkdir(parents=True, exist_ok=True)
    return directory


@lru_cache(maxsize=1)
def get_settings() -> RunConfig:
    """Default configuration (repository config.yaml), loaded once"""
    return load_config(DEFAULT_CONFIG_PATH)
