"""
Multi-Perspective Anomaly Detection
Process settings read from the environment (.env supported) and logging setup
"""

import logging
import os
from typing import Optional

from dotenv import load_dotenv

load_dotenv()

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _env_flag(name: str, default: bool = False) -> bool:
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


LOG_LEVEL = os.getenv("MVSVDD_LOG_LEVEL", "INFO").upper()
OUTPUT_DIR = os.getenv("MVSVDD_OUTPUT_DIR", "runs")
NDGRAD_DEBUG = _env_flag("NDGRAD_DEBUG")
N_JOBS = int(os.getenv("MVSVDD_N_JOBS", "1"))
MNIST_DIR = os.getenv("MVSVDD_MNIST_DIR", "data/mnist")


def configure_logging(level: Optional[str] = None) -> None:
    """Configure root logging once for command line use"""
    logging.basicConfig(format=LOG_FORMAT, level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO))
