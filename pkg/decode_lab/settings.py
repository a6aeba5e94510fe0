import os
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field

load_dotenv()


class Settings(BaseModel):
    threads: int = Field(default=1, ge=1)
    log_level: str = "INFO"
    checkpoint: Optional[str] = None
    max_jobs: int = Field(default=200, ge=1)


def get_settings() -> Settings:
    """Read the DECODE_LAB_* environment (a local .env file is honoured)."""
    return Settings(
        threads=int(os.getenv("DECODE_LAB_THREADS", "1")),
        log_level=os.getenv("DECODE_LAB_LOG_LEVEL", "INFO").upper(),
        checkpoint=os.getenv("DECODE_LAB_CHECKPOINT") or None,
        max_jobs=int(os.getenv("DECODE_LAB_MAX_JOBS", "200")),
    )
