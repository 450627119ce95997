"""Single-encoder auto-encoder with activation-guided content and IN/AdaIN style skips.

Encoder block l: conv → LeakyReLU → IN, emitting (mu_l, sigma_l).
Content head: 1x1 conv to the bottleneck width → IN → activation guidance. The
head IN only standardizes the embedding; its statistics are not style.
Decoder: 1x1 conv up from the bottleneck → IN, then mirrored blocks
conv → LeakyReLU → AdaIN(mu_l, sigma_l) in reverse layer order, then a 1x1
projection back to n_mels. Each AdaIN standardizes its input first, so the
features it restyles always have unit channel variance.
"""
from dataclasses import dataclass
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union
import math

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, Field, model_validator

from .ops import (
    ActivationSpec,
    ShapeError,
    adain,
    apply_activation,
    instance_norm,
    instance_norm_with_stats,
)


class ModelConfig(BaseModel):
    """Architecture of the voice-conversion auto-encoder."""

    n_mels: int = Field(default=80, gt=0, description="Mel bins of input and output")
    segment_length: int = Field(default=128, gt=0, description="Frames per conversion window")
    n_blocks: int = Field(default=4, ge=1, description="Encoder (and decoder) blocks")
    channels: List[int] = Field(default_factory=lambda: [256, 256, 256, 256], description="Width of each encoder block")
    bottleneck_channels: int = Field(default=4, gt=0, description="Channels of the content embedding")
    kernel_size: int = Field(default=5, ge=1, description="Odd 1-D convolution kernel size")
    epsilon: float = Field(default=1e-5, description="Variance stabilizer inside sigma")
    negative_slope: float = Field(default=0.2, ge=0.0, description="LeakyReLU slope inside blocks")
    activation: ActivationSpec = Field(default_factory=ActivationSpec, description="Activation guidance on the content embedding")
    variant: Literal["single_encoder", "dual_encoder"] = Field(default="single_encoder", description="One shared encoder or independent content/style encoders")
    seed: int = Field(default=0, description="Weight initialization seed")

    @model_validator(mode="after")
    def _check(self):
        if len(self.channels) != self.n_blocks:
            raise ValueError(f"{self.n_blocks} blocks need {self.n_blocks} widths, got {self.channels}")
        if any(width <= 0 for width in self.channels):
            raise ValueError(f"Channel widths must be positive: {self.channels}")
        if not 0 < self.epsilon <= 1e-3:
            raise ValueError(f"epsilon must be in (0, 1e-3], got {self.epsilon}")
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        return self

    def updated(self, **changes) -> "ModelConfig":
        """Validated copy with some fields replaced."""
        return ModelConfig(**{**self.model_dump(), **changes})


@dataclass
class StyleStats:
    """Per-encoder-layer (mu, sigma), each of shape (batch, width_l)."""

    layers: List[Tuple[torch.Tensor, torch.Tensor]]

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> List[int]:
        return [mu.shape[-1] for mu, _ in self.layers]

    def flatten(self) -> torch.Tensor:
        return torch.cat([torch.cat([mu, sigma], dim=-1) for mu, sigma in self.layers], dim=-1)

    def expand(self, batch: int) -> "StyleStats":
        return StyleStats([(mu.expand(batch, -1), sigma.expand(batch, -1)) for mu, sigma in self.layers])


@dataclass
class ContentEmbedding:
    values: torch.Tensor
    activation: ActivationSpec


class ConvBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, negative_slope: float):
        super().__init__()
        self.conv = nn.Conv1d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        self.act = nn.LeakyReLU(negative_slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv(x))


class InstanceNormStats(nn.Module):
    """Instance normalization that also returns the statistics it removed."""

    def __init__(self, epsilon: float):
        super().__init__()
        self.epsilon = epsilon

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return instance_norm_with_stats(x, self.epsilon)


class AdaptiveInstanceNorm(nn.Module):
    """AdaIN over standardized features: output channel stats are (mu, sigma) up to a 1 - epsilon/2 factor."""

    def __init__(self, epsilon: float):
        super().__init__()
        self.epsilon = epsilon

    def forward(self, h: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
        return adain(instance_norm(h, self.epsilon), mu, sigma, self.epsilon)


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig, with_content_head: bool = True):
        super().__init__()
        self.epsilon = config.epsilon
        blocks = []
        in_channels = config.n_mels
        for width in config.channels:
            blocks.append(ConvBlock(in_channels, width, config.kernel_size, config.negative_slope))
            in_channels = width
        self.blocks = nn.ModuleList(blocks)
        self.norms = nn.ModuleList(InstanceNormStats(config.epsilon) for _ in config.channels)
        self.content_head = nn.Conv1d(in_channels, config.bottleneck_channels, 1) if with_content_head else None

    def forward(self, x: torch.Tensor) -> Tuple[Optional[torch.Tensor], List[Tuple[torch.Tensor, torch.Tensor]]]:
        stats = []
        h = x
        for block, norm in zip(self.blocks, self.norms):
            h, mu, sigma = norm(block(h))
            stats.append((mu, sigma))
        content = None
        if self.content_head is not None:
            content = instance_norm(self.content_head(h), self.epsilon)
        return content, stats


class Decoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.epsilon = config.epsilon
        self.in_layer = nn.Conv1d(config.bottleneck_channels, config.channels[-1], 1)
        blocks = []
        in_channels = config.channels[-1]
        for width in reversed(config.channels):
            blocks.append(ConvBlock(in_channels, width, config.kernel_size, config.negative_slope))
            in_channels = width
        self.blocks = nn.ModuleList(blocks)
        self.adains = nn.ModuleList(AdaptiveInstanceNorm(config.epsilon) for _ in config.channels)
        self.out_layer = nn.Conv1d(config.channels[0], config.n_mels, 1)

    def forward(self, content: torch.Tensor, stats: Sequence[Tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
        h = instance_norm(self.in_layer(content), self.epsilon)
        for block, norm, (mu, sigma) in zip(self.blocks, self.adains, reversed(list(stats))):
            h = norm(block(h), mu, sigma)
        return self.out_layer(h)


class AgainVC(nn.Module):
    """Activation-guided, IN/AdaIN auto-encoder for one-shot voice conversion."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        # fan-in scaled uniform init (torch defaults) drawn from a private seeded stream
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.encoder = Encoder(config)
            self.style_encoder = Encoder(config, with_content_head=False) if config.variant == "dual_encoder" else None
            self.decoder = Decoder(config)

    def _check_input(self, x: torch.Tensor):
        if x.dim() != 3 or x.shape[1] != self.config.n_mels or x.shape[2] < 1:
            raise ShapeError(f"Expected (batch, {self.config.n_mels}, frames), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> Tuple[ContentEmbedding, StyleStats]:
        self._check_input(x)
        content, stats = self.encoder(x)
        if self.style_encoder is not None:
            _, stats = self.style_encoder(x)
        spec = self.config.activation
        return ContentEmbedding(apply_activation(content, spec), spec), StyleStats(stats)

    def decode(self, content: Union[ContentEmbedding, torch.Tensor], style: StyleStats) -> torch.Tensor:
        values = content.values if isinstance(content, ContentEmbedding) else content
        if values.dim() != 3 or values.shape[1] != self.config.bottleneck_channels:
            raise ShapeError(
                f"Content must be (batch, {self.config.bottleneck_channels}, frames), got {tuple(values.shape)}"
            )
        if style.widths != list(self.config.channels):
            raise ShapeError(f"Style layers {style.widths} do not match encoder widths {self.config.channels}")
        for mu, _ in style.layers:
            if mu.shape[0] != values.shape[0]:
                raise ShapeError(f"Style batch {mu.shape[0]} does not match content batch {values.shape[0]}")
        return self.decoder(values, style.layers)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        content, style = self.encode(x)
        return self.decode(content, style)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.reconstruct(x)

    def content_parameters(self) -> Iterator[nn.Parameter]:
        return self.encoder.parameters()

    def style_parameters(self) -> Iterator[nn.Parameter]:
        if self.style_encoder is not None:
            return self.style_encoder.parameters()
        return (p for name, p in self.encoder.named_parameters() if not name.startswith("content_head"))


def build_model(config: ModelConfig) -> AgainVC:
    return AgainVC(config)


def parameter_count(model: nn.Module) -> int:
    """Total scalar parameters (frozen or not)."""
    return sum(p.numel() for p in model.parameters())


def style_distance(a: StyleStats, b: StyleStats) -> float:
    """L2 distance between flattened style statistics."""
    return float(torch.linalg.vector_norm(a.flatten() - b.flatten()))


def _as_tensor(values: Union[np.ndarray, torch.Tensor], model: AgainVC) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        tensor = values
    else:
        tensor = torch.from_numpy(np.ascontiguousarray(values))
    param = next(model.parameters())
    return tensor.to(device=param.device, dtype=param.dtype)


def _left_pad_by_repetition(values: np.ndarray, length: int) -> np.ndarray:
    frames = values.shape[1]
    if frames >= length:
        return values
    repeats = math.ceil(length / frames)
    return np.concatenate([values] * repeats, axis=1)[:, -length:]


def plan_windows(frames: int, length: int) -> List[Tuple[int, int]]:
    """Non-overlapping (start, size) windows covering [0, frames).

    Every window but the last has `size == length`; a shorter last window is
    left-padded by repetition to `length` before encoding and trimmed back to
    `size` frames after decoding.
    """
    return [(start, min(length, frames - start)) for start in range(0, frames, length)]


@torch.no_grad()
def encode_style(model: AgainVC, target: Union[np.ndarray, torch.Tensor]) -> StyleStats:
    """Style statistics from one encoder pass over the full target utterance."""
    target = target.detach().cpu().numpy() if isinstance(target, torch.Tensor) else np.asarray(target)
    target = _left_pad_by_repetition(target, model.config.segment_length)
    _, style = model.encode(_as_tensor(target, model)[None])
    return style


@torch.no_grad()
def convert(
    model: AgainVC,
    source: Union[np.ndarray, torch.Tensor],
    target: Union[np.ndarray, torch.Tensor],
) -> np.ndarray:
    """Convert a (n_mels, T) source to the voice of a (n_mels, T') target.

    The source is processed in segment_length windows; the result has the
    source's frame count.
    """
    was_training = model.training
    model.eval()
    source = source.detach().cpu().numpy() if isinstance(source, torch.Tensor) else np.asarray(source)
    length = model.config.segment_length
    frames = source.shape[1]

    windows = plan_windows(frames, length)
    batch = np.stack([_left_pad_by_repetition(source[:, start:start + size], length) for start, size in windows])

    style = encode_style(model, target)
    content, _ = model.encode(_as_tensor(batch, model))
    decoded = model.decode(content, style.expand(len(windows))).cpu().numpy()

    pieces = [decoded[i, :, length - size:] for i, (_, size) in enumerate(windows)]
    model.train(was_training)
    return np.concatenate(pieces, axis=1)


def style_proximity(
    model: AgainVC,
    converted: Union[np.ndarray, torch.Tensor],
    source: Union[np.ndarray, torch.Tensor],
    target: Union[np.ndarray, torch.Tensor],
) -> Dict[str, float]:
    """L2 distances from the re-encoded style of a converted mel to the source and target styles."""
    converted_style = encode_style(model, converted)
    return {
        "to_source": style_distance(converted_style, encode_style(model, source)),
        "to_target": style_distance(converted_style, encode_style(model, target)),
    }
