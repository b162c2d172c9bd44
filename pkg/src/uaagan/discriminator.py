"""Real-vs-adversarial image discriminator."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .errors import ConfigurationError, ShapeError
from .generator import MIN_SPATIAL, FallbackBatchNorm2d, init_weights

__all__ = ["DiscriminatorSpec", "Discriminator", "build_discriminator", "discriminator_forward"]


@dataclass
class DiscriminatorSpec:
    input_channels: int = 3
    conv_blocks: list = field(default_factory=lambda: [8, 16, 32])
    kernel_size: int = 4
    head_kernel_size: int = 3
    leaky_slope: float = 0.2

    def __post_init__(self):
        self.conv_blocks = [int(v) for v in self.conv_blocks]

    def validate(self) -> "DiscriminatorSpec":
        if self.input_channels < 1:
            raise ConfigurationError("input_channels must be positive")
        if not self.conv_blocks or any(k < 1 for k in self.conv_blocks):
            raise ConfigurationError(f"conv_blocks must be positive counts, got {self.conv_blocks}")
        if not 0 < self.leaky_slope < 1:
            raise ConfigurationError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        if self.kernel_size < 2:
            raise ConfigurationError("kernel_size must be >= 2")
        if self.head_kernel_size < 1 or self.head_kernel_size % 2 == 0:
            raise ConfigurationError("head_kernel_size must be a positive odd number")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorSpec":
        return cls(**d)


class Discriminator(nn.Module):
    """Scores each image in a batch with the probability that it is real."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        blocks = []
        cin = spec.input_channels
        for kernels in spec.conv_blocks:
            # padding 1 halves even inputs exactly for 4x4 stride-2 kernels
            blocks.append(nn.Sequential(
                nn.Conv2d(cin, kernels, spec.kernel_size, stride=2, padding=1),
                FallbackBatchNorm2d(kernels),
                nn.LeakyReLU(spec.leaky_slope),
            ))
            cin = kernels
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv2d(cin, 1, spec.head_kernel_size, padding=spec.head_kernel_size // 2)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.spec.input_channels:
            raise ShapeError(
                f"expected [batch, {self.spec.input_channels}, H, W], got {tuple(x.shape)}")
        if min(x.shape[-2:]) < MIN_SPATIAL:
            raise ShapeError(f"spatial dims must be >= {MIN_SPATIAL}, got {tuple(x.shape[-2:])}")
        logits = self.head(self.blocks(x)).mean(dim=(1, 2, 3))
        return torch.sigmoid(logits)


def build_discriminator(spec: DiscriminatorSpec | None = None, seed: int = 0,
                        dtype: torch.dtype = torch.float32) -> Discriminator:
    spec = (spec or DiscriminatorSpec()).validate()
    disc = Discriminator(spec).to(dtype)
    init_weights(disc, torch.Generator().manual_seed(int(seed)))
    return disc


def discriminator_forward(disc: Discriminator, images: torch.Tensor) -> torch.Tensor:
    return disc(images)
