from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union
import math
import time

import pandas as pd
import torch
from pydantic import BaseModel, Field

from app.services.model.checkpoint import save_checkpoint
from app.services.model.network import AgainVC, ModelConfig
from app.services.model.ops import InvalidInputError, l1_loss
from config import get_config
from utils.logger import logger
from .corpus import Batch, BatchStream, CorpusIndex, MelStore, TrainingError


class DivergenceError(TrainingError):
    """Raised when the reconstruction loss becomes NaN or infinite"""

    def __init__(self, message: str, step: Optional[int] = None, history: Optional[List[float]] = None):
        super().__init__(message)
        self.step = step
        self.history = history or []


class TrainConfig(BaseModel):
    """Optimizer and loop settings; defaults follow the published recipe except total_steps."""

    learning_rate: float = Field(default=5e-4, gt=0.0, description="Adam learning rate")
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0, description="Adam first-moment decay")
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0, description="Adam second-moment decay")
    adam_eps: float = Field(default=1e-8, gt=0.0, description="Adam denominator epsilon")
    batch_size: int = Field(default=32, ge=1, description="Segments per step")
    total_steps: int = Field(default=2000, ge=0, description="Optimizer steps (published run: 100000)")
    seed: int = Field(default=0, description="Seed for batch sampling")
    checkpoint_every: int = Field(default=500, ge=1, description="Steps between periodic checkpoints")
    log_every: int = Field(default=100, ge=1, description="Steps between loss log lines")
    grad_clip: Optional[float] = Field(default=None, gt=0.0, description="Max gradient norm; None disables clipping")
    num_threads: int = Field(default=1, ge=1, description="torch intra-op threads")
    prefetch_workers: int = Field(default=0, ge=0, description="Batch prefetch threads (0 = inline)")
    smoothing_window: int = Field(default=50, ge=1, description="Rolling window for smoothed loss")


@dataclass
class TrainingResult:
    checkpoint_path: Path
    history: List[float]
    history_path: Path
    checkpoints: List[Path] = field(default_factory=list)
    wall_time: float = 0.0
    model: Optional[AgainVC] = None


def build_optimizer(
    parameters: Iterable[torch.nn.Parameter],
    learning_rate: float = 5e-4,
    betas: Sequence[float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> torch.optim.Adam:
    return torch.optim.Adam(parameters, lr=learning_rate, betas=tuple(betas), eps=eps)


def train_step(
    model: AgainVC,
    batch: Union[Batch, torch.Tensor],
    optimizer: torch.optim.Optimizer,
    grad_clip: Optional[float] = None,
) -> float:
    """One Adam step on the mean L1 self-reconstruction loss.

    Model weights and optimizer moments are updated in place.

    Returns:
        float: loss measured before the step

    Raises:
        DivergenceError: if the loss or an intermediate activation is not finite (no update is applied)
        InvalidInputError: if the batch itself holds non-finite values
    """
    x = batch.mels if isinstance(batch, Batch) else batch
    param = next(model.parameters())
    x = x.to(device=param.device, dtype=param.dtype)

    model.train()
    optimizer.zero_grad(set_to_none=True)
    try:
        loss = l1_loss(x, model(x))
    except InvalidInputError as e:
        if not bool(torch.isfinite(x).all()):
            raise
        raise DivergenceError(f"Non-finite activations: {str(e)}") from e
    value = float(loss.detach())
    if not math.isfinite(value):
        raise DivergenceError(f"Reconstruction loss is {value}")

    loss.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return value


def smooth_losses(history: Sequence[float], window: int = 50) -> List[float]:
    return pd.Series(history, dtype="float64").rolling(window, min_periods=1).mean().tolist()


def write_loss_history(history: Sequence[float], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"step": range(len(history)), "loss": list(history)}).to_csv(path, index=False)
    return path


def read_loss_history(path: Union[str, Path]) -> List[float]:
    return pd.read_csv(path)["loss"].tolist()


def run_training(
    index: CorpusIndex,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: Union[str, Path],
    store: Optional[MelStore] = None,
) -> TrainingResult:
    """Train from scratch, writing periodic checkpoints, `final.safetensors` and `loss_history.csv`.

    Deterministic for a fixed (index, configs) when num_threads == 1.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(train_config.num_threads)
    torch.manual_seed(train_config.seed)
    device = torch.device(get_config().DEVICE)

    model = AgainVC(model_config).to(device)
    optimizer = build_optimizer(
        model.parameters(),
        learning_rate=train_config.learning_rate,
        betas=(train_config.beta1, train_config.beta2),
        eps=train_config.adam_eps,
    )
    stream = BatchStream(
        index,
        steps=train_config.total_steps,
        seed=train_config.seed,
        batch_size=train_config.batch_size,
        segment_length=model_config.segment_length,
        store=store,
        workers=train_config.prefetch_workers,
    )

    history: List[float] = []
    checkpoints: List[Path] = []
    history_path = out_dir / "loss_history.csv"
    started = time.time()
    logger.info(
        f"Training {model_config.variant} ({model_config.activation.label}, C_b={model_config.bottleneck_channels}) "
        f"for {train_config.total_steps} steps on {len(index.train_speakers)} speakers"
    )

    for step, batch in enumerate(stream):
        try:
            loss = train_step(model, batch, optimizer, grad_clip=train_config.grad_clip)
        except DivergenceError as e:
            write_loss_history(history, history_path)
            logger.error(f"Training diverged at step {step}: {str(e)}")
            raise DivergenceError(f"Training diverged at step {step}: {str(e)}", step=step, history=history) from e
        history.append(loss)

        done = step + 1
        if done % train_config.log_every == 0:
            smoothed = smooth_losses(history[-train_config.smoothing_window:], train_config.smoothing_window)[-1]
            logger.info(f"step {done}/{train_config.total_steps} loss {loss:.4f} (smoothed {smoothed:.4f})")
        if done % train_config.checkpoint_every == 0 and done < train_config.total_steps:
            checkpoints.append(save_checkpoint(model, out_dir / f"step_{done:06d}.safetensors", extra={"step": done}))

    final = save_checkpoint(model, out_dir / "final.safetensors", extra={"step": train_config.total_steps})
    checkpoints.append(final)
    write_loss_history(history, history_path)
    wall_time = time.time() - started
    logger.info(f"Training finished in {wall_time:.1f}s; final checkpoint {final}")
    return TrainingResult(
        checkpoint_path=final,
        history=history,
        history_path=history_path,
        checkpoints=checkpoints,
        wall_time=wall_time,
        model=model,
    )
