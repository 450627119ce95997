from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union
import json

from pydantic import ValidationError
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

from utils.logger import logger
from .network import AgainVC, ModelConfig
from .ops import ModelError

FORMAT_TAG = "again-vc-checkpoint/1"
HEADER_KEY = "again_vc"


class CheckpointError(ModelError):
    """Custom exception for checkpoint read/write errors"""
    pass


class ConfigMismatchError(CheckpointError):
    """Raised when checkpoint weights or header disagree with the expected configuration"""
    pass


def save_checkpoint(
    model: AgainVC,
    path: Union[str, Path],
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write weights as a flat name→array map with a JSON header holding the full ModelConfig.

    Identical weights and metadata always produce identical bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {name: tensor.detach().cpu().contiguous() for name, tensor in model.state_dict().items()}
    header = {
        "format": FORMAT_TAG,
        "model_config": model.config.model_dump(mode="json"),
        "extra": extra or {},
    }
    metadata = {HEADER_KEY: json.dumps(header, sort_keys=True)}
    try:
        save_file(tensors, str(path), metadata=metadata)
    except Exception as e:
        raise CheckpointError(f"Failed to save checkpoint {path}: {str(e)}") from e
    logger.info(f"Saved checkpoint {path}")
    return path


def read_header(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as f:
            metadata = f.metadata() or {}
    except (SafetensorError, OSError) as e:
        raise CheckpointError(f"Failed to read checkpoint {path}: {str(e)}") from e
    try:
        header = json.loads(metadata[HEADER_KEY])
    except (KeyError, json.JSONDecodeError) as e:
        raise ConfigMismatchError(f"Checkpoint {path} has no readable header: {str(e)}") from e
    if header.get("format") != FORMAT_TAG:
        raise ConfigMismatchError(f"Unsupported checkpoint format {header.get('format')!r} in {path}")
    return header


def load_checkpoint(
    path: Union[str, Path],
    expected: Optional[ModelConfig] = None,
) -> Tuple[AgainVC, Dict[str, Any]]:
    """Rebuild the model described by the checkpoint header and load its weights.

    Raises:
        CheckpointError: missing or unreadable file
        ConfigMismatchError: header config differs from `expected`, or weights do not fit the header config
    """
    header = read_header(path)
    try:
        config = ModelConfig(**header["model_config"])
    except ValidationError as e:
        raise ConfigMismatchError(f"Invalid model config in {path}: {str(e)}") from e

    if expected is not None and expected.model_dump() != config.model_dump():
        raise ConfigMismatchError(f"Checkpoint {path} was built with a different model config")

    model = AgainVC(config)
    try:
        model.load_state_dict(load_file(str(path)), strict=True)
    except RuntimeError as e:
        raise ConfigMismatchError(f"Weights in {path} do not fit their header config: {str(e)}") from e
    return model, header
