from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import time

from pydantic import BaseModel, Field, PrivateAttr

from app import __version__
from utils.logger import logger


class RunManifest(BaseModel):
    """Provenance record written next to the outputs of every artifact-producing command."""

    command: str
    config: Dict[str, Any] = Field(default_factory=dict, description="Resolved configuration snapshot")
    seed: Optional[int] = None
    code_version: str = __version__
    input_hashes: Dict[str, str] = Field(default_factory=dict, description="sha256 of every input file")
    outputs: Dict[str, str] = Field(default_factory=dict, description="Named output paths")
    stages: Dict[str, Any] = Field(default_factory=dict, description="Per-stage details")
    failures: List[Dict[str, str]] = Field(default_factory=list)
    exit_code: int = 0
    started_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    wall_time: float = 0.0

    _clock: float = PrivateAttr(default_factory=time.monotonic)

    def finish(self, path: Union[str, Path], exit_code: int = 0) -> Path:
        self.exit_code = exit_code
        self.wall_time = round(time.monotonic() - self._clock, 3)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2))
        logger.info(f"Wrote manifest {path}")
        return path
