from dotenv import load_dotenv
from pathlib import Path
from typing import Optional
import os

from errors import InputValidationError

# Load environment variables
load_dotenv()

# Raw values; parsed lazily so a bad value only fails the command that uses it
COCREG_SEED = os.getenv("COCREG_SEED")
COCREG_THREADS = os.getenv("COCREG_THREADS")
COCREG_LOG_CONFIG = os.getenv("COCREG_LOG_CONFIG", str(Path(__file__).resolve().parent / "logging.ini"))

DEFAULT_SEED = 0
DEFAULT_THREADS = -1  # joblib: all available cores


def _parse_int(name: str, raw: Optional[str]) -> Optional[int]:
    if raw is None or not raw.strip():
        return None
    try:
        return int(raw.strip())
    except ValueError:
        raise InputValidationError(f"Environment variable {name} must be an integer, got {raw!r}")


def env_seed() -> Optional[int]:
    """Seed override from COCREG_SEED, or None when unset"""
    seed = _parse_int("COCREG_SEED", COCREG_SEED)
    if seed is not None and not 0 <= seed < 2**64:
        raise InputValidationError("COCREG_SEED must be an unsigned 64-bit integer")
    return seed


def env_threads() -> int:
    threads = _parse_int("COCREG_THREADS", COCREG_THREADS)
    if threads is None:
        return DEFAULT_THREADS
    if threads == 0:
        raise InputValidationError("COCREG_THREADS cannot be 0")
    return threads
