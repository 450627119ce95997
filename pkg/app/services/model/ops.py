"""Channel statistics, (adaptive) instance normalization, activation guidance and the L1 loss.

All functions take tensors whose last two dimensions are (channels, time);
leading dimensions are treated as batch. Gradients come from autograd.
"""
from typing import Literal, Optional, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator


class ModelError(Exception):
    """Custom exception for model errors"""
    pass


class ShapeError(ModelError):
    """Raised when tensor shapes disagree with each other or with the model config"""
    pass


class InvalidInputError(ModelError):
    """Raised on non-finite numerical input"""
    pass


ActivationKind = Literal["none", "relu", "elu", "tanh", "sigmoid"]


class ActivationSpec(BaseModel):
    """Bottleneck nonlinearity applied to the content embedding."""

    kind: ActivationKind = Field(default="sigmoid", description="Activation applied to the content embedding")
    alpha: float = Field(default=0.1, description="Sigmoid slope; ignored for other kinds")

    @model_validator(mode="after")
    def _check_alpha(self):
        if self.kind == "sigmoid" and not self.alpha > 0:
            raise ValueError(f"sigmoid alpha must be positive, got {self.alpha}")
        return self

    @classmethod
    def parse(cls, text: str) -> "ActivationSpec":
        """Parse `kind` or `sigmoid:alpha` as used on the command line."""
        kind, _, alpha = text.strip().partition(":")
        kind = kind.lower()
        if kind == "sigmoid":
            return cls(kind="sigmoid", alpha=float(alpha) if alpha else 1.0)
        if alpha:
            raise ValueError(f"Only sigmoid takes a parameter: {text!r}")
        return cls(kind=kind)

    @property
    def label(self) -> str:
        return f"sigmoid:{self.alpha:g}" if self.kind == "sigmoid" else self.kind

    @property
    def effective_alpha(self) -> Optional[float]:
        return self.alpha if self.kind == "sigmoid" else None


def _check_finite(z: torch.Tensor, name: str):
    if not bool(torch.isfinite(z).all()):
        raise InvalidInputError(f"{name} contains non-finite values")


def channel_stats(z: torch.Tensor, epsilon: float = 1e-5) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-channel mean and sqrt(biased variance + epsilon) over the time axis."""
    if z.dim() < 2 or z.shape[-1] < 1:
        raise ShapeError(f"Expected (..., C, T>=1), got {tuple(z.shape)}")
    _check_finite(z, "channel_stats input")
    mu = z.mean(dim=-1)
    var = (z - mu.unsqueeze(-1)).pow(2).mean(dim=-1)
    sigma = torch.sqrt(var + epsilon)
    return mu, sigma


def instance_norm(z: torch.Tensor, epsilon: float = 1e-5) -> torch.Tensor:
    mu, sigma = channel_stats(z, epsilon)
    return (z - mu.unsqueeze(-1)) / sigma.unsqueeze(-1)


def instance_norm_with_stats(z: torch.Tensor, epsilon: float = 1e-5) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """IN(z) together with the (mu, sigma) it removed."""
    mu, sigma = channel_stats(z, epsilon)
    return (z - mu.unsqueeze(-1)) / sigma.unsqueeze(-1), mu, sigma


def adain(h: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor, epsilon: float = 1e-5) -> torch.Tensor:
    """sigma * IN(h) + mu, broadcasting the style vectors over time."""
    if mu.shape != sigma.shape or mu.shape != h.shape[:-1]:
        raise ShapeError(
            f"AdaIN style shapes mu={tuple(mu.shape)} sigma={tuple(sigma.shape)} "
            f"do not match features {tuple(h.shape)}"
        )
    return sigma.unsqueeze(-1) * instance_norm(h, epsilon) + mu.unsqueeze(-1)


def _inside(y: torch.Tensor, low: float, high: float) -> torch.Tensor:
    """Clamp onto the largest closed interval of representable values strictly inside (low, high)."""
    lo = torch.nextafter(torch.tensor(low, dtype=y.dtype), torch.tensor(high, dtype=y.dtype))
    hi = torch.nextafter(torch.tensor(high, dtype=y.dtype), torch.tensor(low, dtype=y.dtype))
    return y.clamp(min=float(lo), max=float(hi))


def apply_activation(x: torch.Tensor, spec: ActivationSpec) -> torch.Tensor:
    """Activation guidance. tanh stays in (-1, 1) and sigmoid in (0, 1) even where the float result saturates."""
    if spec.kind == "none":
        return x
    if spec.kind == "relu":
        return F.relu(x)
    if spec.kind == "elu":
        return F.elu(x)
    if spec.kind == "tanh":
        return _inside(torch.tanh(x), -1.0, 1.0)
    return _inside(torch.sigmoid(spec.alpha * x), 0.0, 1.0)


def l1_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all elements."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"Loss operands differ in shape: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).abs().mean()
