import logging
import tomllib
from pathlib import Path
from typing import Any, Optional, Self

import yaml
from pydantic import BaseModel, ValidationError

from madformer.application import AblationGrid, ConfigError, ConfigSource, RunConfig

logger = logging.getLogger(__name__)

YAML_SUFFIXES = (".yml", ".yaml")


def _describe(error: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(part) for part in item['loc']) or '<root>'}: {item['msg']}"
        for item in error.errors()
    )


def read_mapping(path: Path) -> dict[str, Any]:
    """
    Reads `section.key = value` lines (TOML dotted keys) or, for .yml/.yaml
    files, a nested YAML mapping.

    Raises:
        ConfigError: If the file is missing or does not parse to a mapping
    """
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e

    try:
        if path.suffix in YAML_SUFFIXES:
            data = yaml.safe_load(text)
        else:
            data = tomllib.loads(text)
    except (tomllib.TOMLDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e

    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping of sections, got {type(data).__name__}")
    return data


def validate(model: type[BaseModel], data: dict[str, Any], source: str) -> Any:
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration in {source}: {_describe(e)}") from e


class FileConfigLoader(ConfigSource):
    def load_config(self: Self, path: Optional[Path]) -> RunConfig:
        if path is None:
            return RunConfig()
        config = validate(RunConfig, read_mapping(Path(path)), str(path))
        logger.debug("loaded configuration from %s", path)
        return config

    def load_grid(self: Self, path: Optional[Path], n_layers: int) -> AblationGrid:
        if path is None:
            return AblationGrid.published_axes(n_layers)
        return validate(AblationGrid, read_mapping(Path(path)), str(path))
