from .ops import (
    ActivationSpec,
    InvalidInputError,
    ModelError,
    ShapeError,
    adain,
    apply_activation,
    channel_stats,
    instance_norm,
    l1_loss,
)
from .network import (
    AgainVC,
    ContentEmbedding,
    ModelConfig,
    StyleStats,
    build_model,
    convert,
    encode_style,
    parameter_count,
    style_distance,
    style_proximity,
)
from .checkpoint import CheckpointError, ConfigMismatchError, load_checkpoint, save_checkpoint
