import os
import sys

from loguru import logger

LOG_PATH = os.getenv("GOREG_LOG_PATH", "logs/goreg.log")
LOG_LEVEL = os.getenv("GOREG_LOG_LEVEL", "INFO").upper()
# JSON lines in the file sink, so failures can be grepped by stage
LOG_JSON = os.getenv("GOREG_LOG_JSON", "0").strip().lower() in {"1", "true", "yes"}

LOG_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | "
    "<level>{level}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - "
    "{message}"
)


def set_level(level: str) -> None:
    """(Re)installs the stderr and rotating file sinks at `level`."""
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT)
    logger.add(
        LOG_PATH,
        rotation="10 MB",       # rotation des fichiers
        retention="10 days",
        compression="zip",
        level=level.upper(),
        serialize=LOG_JSON,
        format=LOG_FORMAT,
    )


os.makedirs(os.path.dirname(LOG_PATH) or ".", exist_ok=True)
set_level(LOG_LEVEL)

__all__ = ["logger", "set_level"]
