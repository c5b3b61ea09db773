"""Visual-prompt score distillation - desk-scale text-to-3D generation."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Union

import yaml

from src.errors import ConfigError

__version__ = "2026.10.19"
APP_NAME = "Visual-Prompt Score Distillation"

# Project root (one level above the package)
ROOT_DIR = Path(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

# Default output root for run artifacts; override with VP_DISTILL_OUTPUT_ROOT
OUTPUT_ROOT_ENV = "VP_DISTILL_OUTPUT_ROOT"


def output_root() -> Path:
    """Return the default artifact root, honouring the environment override."""
    root = os.environ.get(OUTPUT_ROOT_ENV, "").strip()
    return Path(root) if root else ROOT_DIR / "runs"


def load_config(path: Union[str, Path, None] = None) -> dict[str, Any]:
    """Load a flat YAML config file. Returns empty dict if *path* is None.

    Nested mappings are rejected; every value must be a scalar or a list of
    scalars so the file stays a flat key-value document.
    """
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            config = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"could not parse {path}: {e}") from e
    if not isinstance(config, dict):
        raise ConfigError(f"{path} must contain a key-value mapping")
    for key, val in config.items():
        if isinstance(val, dict):
            raise ConfigError(f"config key '{key}' is nested; use flat keys")
    return config
