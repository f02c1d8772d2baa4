"""
Run directories, manifests and configuration resolution.

A run directory holds everything one command produced::

    <run>/manifest.json
    <run>/logs/run.log, logs/*.csv
    <run>/reports/*.json, *.md, *.csv
    <run>/data/...

The manifest records the command, the effective configuration, the seed, the
package versions and a SHA-256 digest of every input and output, so a run can
be replayed from it and its outputs compared byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import sys
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar

import numpy as np

from .core import ConfigError, ConfigMixin
from .parser import decode_json

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
MANIFEST_NAME = "manifest.json"
_PACKAGE_LOGGER = "pycascade"

_C = TypeVar("_C", bound=ConfigMixin)


def configure_logging(level: str | int = "INFO", log_file: str | Path | None = None) -> logging.Logger:
    """
    Attach handlers to the package logger.

    Handlers installed by an earlier call are removed first, so repeated CLI
    invocations in one process do not duplicate output.

    Args:
        level: Logging level name or number
        log_file: Optional file that also receives every record

    Returns:
        The package logger
    """
    package_logger = logging.getLogger(_PACKAGE_LOGGER)
    for handler in list(package_logger.handlers):
        package_logger.removeHandler(handler)
        handler.close()
    package_logger.setLevel(level if isinstance(level, int) else level.upper())
    formatter = logging.Formatter(LOG_FORMAT)
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(formatter)
    package_logger.addHandler(stream)
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(formatter)
        package_logger.addHandler(file_handler)
    package_logger.propagate = False
    return package_logger


def file_digest(path: str | Path) -> str:
    """SHA-256 hex digest of a file's bytes."""
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def versions() -> dict[str, str]:
    from . import __version__

    return {"pycascade": __version__, "numpy": np.__version__, "python": platform.python_version()}


def load_config_file(path: str | Path | None) -> dict[str, Any]:
    """
    Read a JSON config file.

    A run manifest is accepted too; its ``config`` section is returned.

    Raises:
        ConfigError: If the file is not a JSON object
    """
    if path is None:
        return {}
    try:
        data = decode_json(Path(path).read_bytes())
    except ValueError as exc:
        raise ConfigError(f"Config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a JSON object")
    if "command" in data and isinstance(data.get("config"), dict):
        return dict(data["config"])
    return data


def resolve_config(
    config_cls: type[_C],
    file_section: Mapping[str, Any] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> _C:
    """
    Build a config with precedence flags > config file > defaults.

    Args:
        config_cls: Config dataclass with ``from_dict``
        file_section: Values read from the config file for this component
        overrides: Flag values; entries that are None were not given

    Returns:
        The effective config

    Examples:
        >>> from pycascade.evaluation import EvalConfig
        >>> resolve_config(EvalConfig, {"cap_per_class": 50}, {"cap_per_class": 7}).cap_per_class
        7
    """
    merged: dict[str, Any] = dict(file_section or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_cls.from_dict(merged)


def json_ready(obj: Any) -> Any:
    """Replace non-finite floats by None, recursively."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, Mapping):
        return {str(k): json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_ready(v) for v in obj]
    if isinstance(obj, np.generic):
        return json_ready(obj.item())
    return obj


def _relative(path: Path, root: Path) -> str:
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return str(path)


@dataclass
class RunContext:
    """
    One command's run directory.

    Args:
        root: Run directory, created on demand
        command: Subcommand name
        config: Effective configuration, echoed into the manifest
        seed: Top-level seed
    """
    root: Path
    command: str
    config: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        for sub in ("logs", "reports", "data"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    @property
    def log_file(self) -> Path:
        return self.root / "logs" / "run.log"

    def path(self, kind: str, name: str) -> Path:
        """Path of an output file, e.g. ``path("reports", "eval.json")``."""
        target = self.root / kind / name
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def add_inputs(self, paths: Iterable[str | Path | None]) -> None:
        for p in paths:
            if p is not None:
                self.inputs[str(p)] = file_digest(p)

    def record_output(self, path: str | Path) -> Path:
        path = Path(path)
        self.outputs[_relative(path, self.root)] = file_digest(path)
        return path

    def write_json(self, kind: str, name: str, obj: Any) -> Path:
        target = self.path(kind, name)
        text = json.dumps(json_ready(obj), indent=2, sort_keys=True, allow_nan=False)
        target.write_text(text + "\n", encoding="utf-8")
        return self.record_output(target)

    def write_text(self, kind: str, name: str, text: str) -> Path:
        target = self.path(kind, name)
        target.write_text(text, encoding="utf-8")
        return self.record_output(target)

    def manifest(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "versions": versions(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
        }

    def write_manifest(self) -> Path:
        """Write ``manifest.json``; it carries no timestamps."""
        target = self.root / MANIFEST_NAME
        target.write_text(json.dumps(json_ready(self.manifest()), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info("Wrote manifest %s with %d outputs", target, len(self.outputs))
        return target


def load_manifest(path: str | Path) -> dict[str, Any]:
    """Read a manifest from a file or from a run directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    data = decode_json(path.read_bytes())
    if not isinstance(data, dict) or "command" not in data:
        raise ConfigError(f"{path} is not a run manifest")
    return data
