from pydantic_settings import BaseSettings, SettingsConfigDict
from pathlib import Path
import re
from typing import Dict, Optional, Union

from msfin.core.exceptions import ConfigurationError


class Settings(BaseSettings):
    # Application Settings
    APP_NAME: str = "msfin"
    PROJECT_DESCRIPTION: str = "Lightweight multi-scale feature interaction super-resolution"
    APP_VERSION: str = "1.0.0"

    # Logging Settings
    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = True
    LOG_TO_FILE: bool = False
    LOG_DIR: str = "logs"

    # Compute Settings
    MSFIN_THREADS: Optional[int] = None  # caps BLAS threads and worker pools
    DATA_WORKERS: int = 2
    DEFAULT_SEED: int = 0

    model_config = SettingsConfigDict(
        env_file=".env",
        case_sensitive=True,
        extra="ignore"
    )

    @property
    def worker_count(self) -> int:
        """Worker threads for patch sampling and evaluation, bounded by MSFIN_THREADS."""
        if self.MSFIN_THREADS is not None:
            return max(1, min(self.DATA_WORKERS, self.MSFIN_THREADS))
        return max(1, self.DATA_WORKERS)


settings = Settings()


_COMMENT = re.compile(r"(^|\s)#.*$")


def parse_config_text(text: str, source: str = "<text>") -> Dict[str, str]:
    """Parse flat `key = value` text; blank lines are skipped.

    `#` starts a comment at the beginning of a line or after whitespace, so `runs/#3` is a value.
    """
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _COMMENT.sub("", raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """Read a flat config file into raw string values."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"Cannot read config file {path}: {str(e)}") from e
    return parse_config_text(text, source=str(path))


def format_config_text(values: Dict[str, object]) -> str:
    """Inverse of parse_config_text for already-resolved values."""
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
