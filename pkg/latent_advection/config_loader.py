"""Load training configurations, presets and dataset manifests into validated models."""

from pathlib import Path
from typing import Dict, Union

import yaml
from pydantic import ValidationError

from . import config
from .models import DatasetManifest, TrainConfig


class ConfigError(ValueError):
    """Raised when a configuration or manifest file cannot be used."""


# =================================================================================================
# TRAINING CONFIGURATION
# =================================================================================================


def parse_key_values(text: str, source: str = "<config>") -> Dict[str, object]:
    """Parse flat ``key = value`` lines; values are read as YAML scalars or flow lists.

    Blank lines and lines starting with ``#`` are skipped.
    """
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: key '{key}' given twice")
        try:
            values[key] = yaml.safe_load(raw) if raw else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{source}:{lineno}: cannot parse value of '{key}': {exc}") from exc
    return values


def _explain(exc: ValidationError, source: str) -> ConfigError:
    problems = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        if err["type"] == "missing":
            problems.append(f"missing required key '{key}'")
        elif err["type"] == "extra_forbidden":
            problems.append(f"unknown key '{key}'")
        else:
            problems.append(f"key '{key}': {err['msg']}")
    return ConfigError(f"{source}: " + "; ".join(problems))


def train_config_from_text(text: str, source: str = "<config>") -> TrainConfig:
    values = parse_key_values(text, source)
    try:
        return TrainConfig(**values)
    except ValidationError as exc:
        raise _explain(exc, source) from exc


def load_train_config(path: Union[str, Path]) -> TrainConfig:
    """Load and validate a flat training configuration file.

    Args:
        path: Path to a ``.cfg`` file.

    Returns:
        The validated `TrainConfig`; unknown or missing keys raise `ConfigError`.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    return train_config_from_text(text, str(path))


def load_presets(folder: Union[str, Path] = config.PRESETS_DIR) -> Dict[str, TrainConfig]:
    """Load every ``*.cfg`` preset in ``folder``, keyed by file stem."""
    return {p.stem: load_train_config(p) for p in sorted(Path(folder).glob("*.cfg"))}


# =================================================================================================
# DATASET MANIFEST
# =================================================================================================


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Load a YAML manifest and resolve its file lists relative to the manifest's directory."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: manifest must be a mapping")
    for key in ("x0", "x1"):
        if isinstance(data.get(key), str):
            data[key] = [data[key]]
    try:
        manifest = DatasetManifest(**data)
    except ValidationError as exc:
        raise _explain(exc, str(path)) from exc
    base = path.parent
    return manifest.model_copy(
        update={
            "x0": [str((base / p).resolve()) for p in manifest.x0],
            "x1": [str((base / p).resolve()) for p in manifest.x1],
        }
    )


def write_manifest(path: Union[str, Path], manifest: DatasetManifest) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(manifest.model_dump(exclude_none=True), sort_keys=False), encoding="utf-8")
    return path
