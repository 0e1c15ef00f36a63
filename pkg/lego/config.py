#!/usr/bin/env python3
"""
Configuration Module
Loads runtime configuration from environment variables with sensible
defaults, and experiment hyperparameters from key=value files.
"""

import dataclasses
import json
import os
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar, Union

import torch
from dotenv import dotenv_values, load_dotenv

from . import log
from .errors import ConfigurationError
from .integrity import sha256_hex

# Load .env file using default approach
load_dotenv()

T = TypeVar("T")


class Config:
    """Process-level settings for the LEGO pipeline."""

    def __init__(self):
        self._setup_root_directory()
        self._setup_paths()
        self._setup_logging()
        self._setup_runtime()
        self._setup_perceptual()

    def _setup_root_directory(self):
        """Setup root directory that relative paths resolve against."""
        root_env = os.getenv("LEGO_ROOT_DIR")

        if root_env:
            self.root_dir = Path(root_env).resolve()
            log.info("Using specified root directory: %s", self.root_dir)
        else:
            self.root_dir = Path.cwd()
            log.debug("No root directory set, using cwd: %s", self.root_dir)

    def _resolve_path(self, env_key: str, default_relative_path: str) -> Path:
        """
        Resolve path using root directory + override logic.

        Args:
            env_key: Environment variable name to check
            default_relative_path: Default path relative to root_dir

        Returns:
            Resolved path
        """
        specific_path = os.getenv(env_key)

        if specific_path:
            if Path(specific_path).is_absolute():
                return Path(specific_path)
            return self.root_dir / specific_path
        return self.root_dir / default_relative_path

    def _setup_paths(self):
        """Setup data and run output paths."""
        self.data_dir = self._resolve_path("LEGO_DATA_DIR", "data")
        self.runs_dir = self._resolve_path("LEGO_RUNS_DIR", "runs")

    def _setup_logging(self):
        """Setup logging configuration."""
        self.log_level = os.getenv("LEGO_LOG_LEVEL", "INFO")
        self.log_dir = self._resolve_path("LEGO_LOG_DIR", "logs")

    def _setup_runtime(self):
        """Setup device, threading and determinism."""
        self.device = os.getenv("LEGO_DEVICE", "cpu")
        threads = os.getenv("LEGO_NUM_THREADS")
        self.num_threads = int(threads) if threads else None
        self.deterministic = self._parse_bool(
            os.getenv("LEGO_DETERMINISTIC", "false")
        )
        self.prefetch_workers = int(os.getenv("LEGO_PREFETCH_WORKERS", "0"))

    def _setup_perceptual(self):
        """Setup the perceptual-loss feature extractor backend."""
        self.perceptual_backend = os.getenv(
            "LEGO_PERCEPTUAL_BACKEND", "fixed"
        ).lower()
        if self.perceptual_backend not in ("fixed", "vgg16"):
            raise ConfigurationError(
                "LEGO_PERCEPTUAL_BACKEND must be 'fixed' or 'vgg16', "
                f"got {self.perceptual_backend!r}"
            )
        self.perceptual_seed = int(os.getenv("LEGO_PERCEPTUAL_SEED", "1234"))

    def _parse_bool(self, value: str) -> bool:
        """Parse boolean from string"""
        return value.lower() in ("true", "yes", "1", "on")

    def apply_runtime(self) -> None:
        """Apply thread count and determinism settings to torch."""
        if self.num_threads:
            torch.set_num_threads(self.num_threads)
        if self.deterministic:
            torch.use_deterministic_algorithms(True)
            log.info("Deterministic kernels enabled (LEGO_DETERMINISTIC=1)")

    def __repr__(self) -> str:
        """String representation of config"""
        return (
            f"Config(\n"
            f"  root_dir={self.root_dir},\n"
            f"  data_dir={self.data_dir},\n"
            f"  runs_dir={self.runs_dir},\n"
            f"  device={self.device},\n"
            f"  deterministic={self.deterministic},\n"
            f"  perceptual_backend={self.perceptual_backend}\n"
            f")"
        )


# Module-level singleton
class _ConfigSingleton:
    """Config singleton holder."""

    _instance: Optional[Config] = None

    @classmethod
    def get_instance(cls) -> Config:
        """Get the singleton config instance."""
        if cls._instance is None:
            cls._instance = Config()
        return cls._instance

    @classmethod
    def reload_instance(cls) -> Config:
        """Reload configuration from environment."""
        cls._instance = Config()
        return cls._instance


def get_config() -> Config:
    """Get the singleton config instance"""
    return _ConfigSingleton.get_instance()


def reload_config() -> Config:
    """Reload configuration from environment"""
    return _ConfigSingleton.reload_instance()


# Hyperparameter dataclasses share the helpers below.


def _coerce(value: str, target: Any, key: str) -> Any:
    """Convert a key=value string into the type of a field default."""
    try:
        if isinstance(target, bool):
            return value.strip().lower() in ("true", "yes", "1", "on")
        if isinstance(target, int):
            return int(value)
        if isinstance(target, float):
            return float(value)
        if isinstance(target, tuple):
            parts = [p for p in value.replace(",", " ").split() if p]
            return tuple(type(target[0])(p) for p in parts)
    except ValueError as e:
        raise ConfigurationError(f"Bad value for {key!r}: {value!r}") from e
    return value


def load_dataclass(
    cls: Type[T],
    path: Union[str, Path, None] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> T:
    """
    Build a hyperparameter dataclass from a key=value file.

    Args:
        cls: Dataclass type; every field needs a default
        path: Optional file with one ``key=value`` per line (``#`` comments)
        overrides: Values applied after the file

    Returns:
        Populated dataclass instance

    Raises:
        ConfigurationError: Unknown key or unparsable value
    """
    defaults = cls()
    fields = {f.name for f in dataclasses.fields(cls)}
    values: Dict[str, Any] = {}

    if path is not None:
        if not Path(path).exists():
            raise ConfigurationError(f"Config file not found: {path}")
        for key, raw in dotenv_values(path).items():
            if key not in fields:
                raise ConfigurationError(
                    f"Unknown key {key!r} in {path}; "
                    f"expected one of {sorted(fields)}"
                )
            if raw is None:
                raise ConfigurationError(f"Key {key!r} has no value")
            values[key] = _coerce(raw, getattr(defaults, key), key)
        log.info("Loaded %s from %s", cls.__name__, path)

    for key, value in (overrides or {}).items():
        if key not in fields:
            raise ConfigurationError(f"Unknown key {key!r}")
        values[key] = value

    return dataclasses.replace(defaults, **values)


def config_hash(cfg: Any) -> str:
    """Stable SHA-256 of a hyperparameter dataclass."""
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return sha256_hex(payload.encode("utf-8"))
