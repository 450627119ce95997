from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field

from utils.logger import logger


class ProbeError(Exception):
    """Custom exception for probe classifier errors"""
    pass


class DegenerateProbeError(ProbeError):
    """Raised when a probe would have fewer than two classes or an empty split"""
    pass


class ProbeConfig(BaseModel):
    """Post-hoc speaker classifier: three Conv1d+ReLU layers, time pooling, linear head."""

    conv_layers: Literal[3] = Field(default=3, description="Conv1d/ReLU pairs (fixed)")
    hidden_channels: int = Field(default=64, gt=0, description="Width of the conv layers")
    kernel_size: int = Field(default=3, ge=1, description="Odd conv kernel size")
    learning_rate: float = Field(default=1e-3, gt=0.0, description="Adam learning rate")
    steps: int = Field(default=400, ge=1, description="Optimizer steps")
    batch_size: int = Field(default=64, ge=1, description="Examples per step")
    seed: int = Field(default=0, description="Seed for the utterance split, crops, init and batching")
    segments_per_utterance: int = Field(default=4, ge=1, description="Random crops drawn per utterance")
    eval_fraction: float = Field(default=0.25, gt=0.0, lt=1.0, description="Share of each speaker's utterances held out")
    flag_threshold: float = Field(default=70.0, description="acc_C (%) above which a model is flagged as unlikely to convert")


class SpeakerProbe(nn.Module):
    def __init__(self, in_channels: int, n_speakers: int, config: ProbeConfig):
        super().__init__()
        layers = []
        channels = in_channels
        for _ in range(config.conv_layers):
            layers += [nn.Conv1d(channels, config.hidden_channels, config.kernel_size, padding=config.kernel_size // 2), nn.ReLU()]
            channels = config.hidden_channels
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(channels, n_speakers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).mean(dim=-1))


@dataclass
class ProbeResult:
    accuracy: float
    chance: float
    classifier: SpeakerProbe
    n_train: int
    n_eval: int


def fit_probe(
    train_x: torch.Tensor,
    train_y: torch.Tensor,
    eval_x: torch.Tensor,
    eval_y: torch.Tensor,
    n_classes: int,
    config: ProbeConfig,
) -> ProbeResult:
    """Train a SpeakerProbe on (N, C, T) features and report held-out accuracy in percent.

    Features are standardized per channel with training-set statistics.
    """
    if n_classes < 2:
        raise DegenerateProbeError(f"A speaker probe needs at least 2 speakers, got {n_classes}")
    if len(train_x) == 0 or len(eval_x) == 0:
        raise DegenerateProbeError("Probe train and eval sets must both be non-empty")

    train_x = train_x.detach().float()
    eval_x = eval_x.detach().float()
    mean = train_x.mean(dim=(0, 2), keepdim=True)
    std = train_x.std(dim=(0, 2), keepdim=True).clamp_min(1e-6)
    train_x = (train_x - mean) / std
    eval_x = (eval_x - mean) / std

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        probe = SpeakerProbe(train_x.shape[1], n_classes, config)
    optimizer = torch.optim.Adam(probe.parameters(), lr=config.learning_rate)
    generator = torch.Generator().manual_seed(config.seed)

    probe.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(train_x), (min(config.batch_size, len(train_x)),), generator=generator)
        loss = F.cross_entropy(probe(train_x[idx]), train_y[idx])
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

    probe.eval()
    with torch.no_grad():
        predictions = probe(eval_x).argmax(dim=-1)
    accuracy = 100.0 * float((predictions == eval_y).float().mean())
    logger.debug(f"Probe on {tuple(train_x.shape[1:])} features: {accuracy:.1f}% (chance {100.0 / n_classes:.1f}%)")
    return ProbeResult(
        accuracy=accuracy,
        chance=100.0 / n_classes,
        classifier=probe,
        n_train=len(train_x),
        n_eval=len(eval_x),
    )
