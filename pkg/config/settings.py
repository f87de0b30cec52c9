# config/settings.py
"""
Process-level settings read from the environment (optionally a .env file)
"""

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

PROJECT_ROOT = Path(__file__).resolve().parent.parent


@dataclass(frozen=True)
class Settings:
    log_level: str = "INFO"
    log_file: Optional[str] = None
    output_dir: str = "runs"
    threads: int = 1
    data_dir: str = str(PROJECT_ROOT / "data")


def load_settings() -> Settings:
    """Build settings from environment variables; call load_dotenv() first"""
    threads = int(os.getenv("DTQN_THREADS", "1"))
    if threads < 1:
        raise ValueError(f"DTQN_THREADS must be >= 1, got {threads}")
    return Settings(
        log_level=os.getenv("DTQN_LOG_LEVEL", "INFO").upper(),
        log_file=os.getenv("DTQN_LOG_FILE") or None,
        output_dir=os.getenv("DTQN_OUTPUT_DIR", "runs"),
        threads=threads,
        data_dir=os.getenv("DTQN_DATA_DIR", str(PROJECT_ROOT / "data")),
    )
