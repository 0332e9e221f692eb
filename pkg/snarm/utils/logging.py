"""
Logging setup driven by the logging section of the config
"""

import logging
from pathlib import Path
from typing import Optional

from ..schemas.config import LoggingConfig


def setup_logging(cfg: Optional[LoggingConfig] = None) -> None:
    """
    Configure the root "snarm" logger

    Args:
        cfg: Logging section; defaults when omitted
    """
    cfg = cfg or LoggingConfig()
    logger = logging.getLogger("snarm")
    logger.setLevel(cfg.level.upper())

    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    formatter = logging.Formatter(cfg.format)
    stream = logging.StreamHandler()
    stream.setFormatter(formatter)
    logger.addHandler(stream)

    if cfg.file is not None:
        Path(cfg.file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(cfg.file)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
