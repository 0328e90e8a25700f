import json
import re
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from pydantic_settings import BaseSettings, SettingsConfigDict

from app.infrastructure.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

_TOML_POSITION = re.compile(r"\(at line (\d+), column (\d+)\)")


class Settings(BaseSettings):
    PROJECT_NAME: str = "Discontinuous Langevin Lab"
    DATABASE_URL: str = "sqlite+aiosqlite:///./langevin_runs.db"

    # Worker pool
    MAX_WORKERS: int = 4
    CHAIN_BLOCK_SIZE: int = 1024  # chains sharing one noise counter block

    # Outputs
    OUTPUT_DIR: str = "results"
    DEFAULT_SEED: int = 20240501
    LOG_LEVEL: str = "INFO"

    # Numerical defaults
    REFERENCE_REFINEMENT: int = 64
    CONSISTENCY_REFINEMENT: int = 256
    DENSE_SUBSTEPS: int = 8
    SLICED_PROJECTIONS: int = 128
    BOOTSTRAP_SAMPLES: int = 2000

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")


settings = Settings()


def read_document(path: Union[str, Path]) -> Dict[str, Any]:
    """Parse a TOML or JSON config file, reporting decode errors with their position."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e.msg}", line=e.lineno, column=e.colno) from e
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            line, column = _toml_position(e)
            message = _TOML_POSITION.sub("", str(e)).strip()
            raise ConfigError(f"{path}: {message}", line=line, column=column) from e

    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    return data


def _toml_position(error: Exception) -> Tuple[Optional[int], Optional[int]]:
    # newer parsers expose lineno/colno; older ones only put them in the message
    line = getattr(error, "lineno", None)
    column = getattr(error, "colno", None)
    if line is not None:
        return line, column
    match = _TOML_POSITION.search(str(error))
    if match is None:
        return None, None
    return int(match.group(1)), int(match.group(2))
