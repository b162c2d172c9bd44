"""Perturbation generator and the clipping rules that turn its output into
adversarial queries.

The generator is an encoder/decoder: a stack of conv + InstanceNorm + ReLU
blocks (some with stride 2), a chain of residual blocks, and a decoder that
upsamples with nearest-neighbour resize followed by a stride-1 conv.  Its
final conv has no activation; the L-inf bound is enforced only by
:func:`clip_perturbation`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ShapeError

__all__ = [
    "GeneratorSpec",
    "Generator",
    "FallbackBatchNorm2d",
    "build_generator",
    "generator_forward",
    "clip_perturbation",
    "compose_adversarial",
    "perturb",
    "representable_bound",
    "init_weights",
    "MIN_SPATIAL",
]

#: Bump when parameter naming changes; stored in checkpoints.
PARAM_SCHEMA_VERSION = 1
MIN_SPATIAL = 16
INIT_STD = 0.02


@dataclass
class GeneratorSpec:
    input_channels: int = 3
    down_blocks: list = field(default_factory=lambda: [(8, 1), (16, 2), (32, 2)])
    residual_blocks: int = 4
    residual_channels: int = 32
    up_blocks: list = field(default_factory=lambda: [16, 8, 3])
    kernel_size: int = 3
    epsilon: float = 0.1
    instance_affine: bool = True

    def __post_init__(self):
        self.down_blocks = [tuple(int(v) for v in b) for b in self.down_blocks]
        self.up_blocks = [int(v) for v in self.up_blocks]

    @property
    def n_downsamples(self) -> int:
        return sum(1 for _, s in self.down_blocks if s == 2)

    @property
    def size_multiple(self) -> int:
        return 2 ** self.n_downsamples

    def validate(self) -> "GeneratorSpec":
        if self.input_channels < 1:
            raise ConfigurationError("input_channels must be positive")
        if not self.down_blocks:
            raise ConfigurationError("down_blocks must not be empty")
        for k, s in self.down_blocks:
            if k < 1:
                raise ConfigurationError(f"down block kernel count must be positive, got {k}")
            if s not in (1, 2):
                raise ConfigurationError(f"down block stride must be 1 or 2, got {s}")
        if self.residual_blocks < 0:
            raise ConfigurationError("residual_blocks must be >= 0")
        if self.residual_blocks and self.residual_channels != self.down_blocks[-1][0]:
            raise ConfigurationError(
                "residual_channels must equal the last down block's kernel count "
                f"({self.residual_channels} != {self.down_blocks[-1][0]})")
        if any(k < 1 for k in self.up_blocks):
            raise ConfigurationError("up block kernel counts must be positive")
        if len(self.up_blocks) <= self.n_downsamples:
            raise ConfigurationError(
                f"need more than {self.n_downsamples} up blocks to undo the downsampling "
                "and project back to image channels")
        if self.up_blocks[-1] != self.input_channels:
            raise ConfigurationError(
                f"last up block must emit {self.input_channels} channels, got {self.up_blocks[-1]}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be a positive odd number")
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["down_blocks"] = [list(b) for b in self.down_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(**d)


class FallbackBatchNorm2d(nn.BatchNorm2d):
    """BatchNorm that uses its running statistics when it sees a single sample.

    Batch statistics from one image are too noisy to normalize with, so in
    training mode a batch of one is treated like evaluation mode (and the
    running statistics are left untouched).
    """

    def forward(self, x):
        if self.training and x.shape[0] == 1:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight,
                                self.bias, False, 0.0, self.eps)
        return super().forward(x)


def _conv(cin, cout, k, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=True)


class ResidualBlock(nn.Module):
    def __init__(self, channels, k):
        super().__init__()
        self.conv1 = _conv(channels, channels, k)
        self.bn1 = FallbackBatchNorm2d(channels)
        self.conv2 = _conv(channels, channels, k)
        self.bn2 = FallbackBatchNorm2d(channels)

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        return x + self.bn2(self.conv2(h))


class Generator(nn.Module):
    """Maps an image batch to an unclipped perturbation of the same shape."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        k = spec.kernel_size
        cin = spec.input_channels
        down = []
        for kernels, stride in spec.down_blocks:
            down.append(nn.Sequential(
                _conv(cin, kernels, k, stride),
                nn.InstanceNorm2d(kernels, affine=spec.instance_affine),
                nn.ReLU(inplace=True),
            ))
            cin = kernels
        self.down = nn.ModuleList(down)
        self.res = nn.ModuleList(ResidualBlock(cin, k) for _ in range(spec.residual_blocks))
        up = []
        n_resize = spec.n_downsamples
        for i, kernels in enumerate(spec.up_blocks[:-1]):
            up.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest") if i < n_resize else nn.Identity(),
                _conv(cin, kernels, k),
                nn.InstanceNorm2d(kernels, affine=spec.instance_affine),
                nn.ReLU(inplace=True),
            ))
            cin = kernels
        self.up = nn.ModuleList(up)
        # validate() guarantees every resize happened above
        self.head = _conv(cin, spec.up_blocks[-1], k)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.spec.input_channels:
            raise ShapeError(
                f"expected [batch, {self.spec.input_channels}, H, W], got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h < MIN_SPATIAL or w < MIN_SPATIAL:
            raise ShapeError(f"spatial dims must be >= {MIN_SPATIAL}, got {h}x{w}")
        m = self.spec.size_multiple
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        out = x
        for block in self.down:
            out = block(out)
        for block in self.res:
            out = block(out)
        for block in self.up:
            out = block(out)
        out = self.head(out)
        return out[..., :h, :w]


def init_weights(module: nn.Module, generator: torch.Generator, std: float = INIT_STD):
    """Conv weights ~ N(0, std^2) drawn from ``generator``; biases zero.

    Normalization affine parameters start at weight 1, bias 0.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)):
            if m.affine:
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            if getattr(m, "running_mean", None) is not None:
                m.reset_running_stats()


def build_generator(spec: GeneratorSpec | None = None, seed: int = 0,
                    dtype: torch.dtype = torch.float32) -> Generator:
    spec = (spec or GeneratorSpec()).validate()
    gen = Generator(spec).to(dtype)
    init_weights(gen, torch.Generator().manual_seed(int(seed)))
    return gen


def generator_forward(gen: Generator, x: torch.Tensor) -> torch.Tensor:
    return gen(x)


class _StraightThroughClamp(torch.autograd.Function):
    @staticmethod
    def forward(ctx, raw, lo, hi):
        return raw.clamp(lo, hi)

    @staticmethod
    def backward(ctx, grad):
        return grad, None, None


def clip_perturbation(raw: torch.Tensor, epsilon: float, straight_through: bool = False):
    """Clamp ``raw`` into [-epsilon, epsilon].

    Gradients pass unchanged inside the band and are zero outside it, unless
    ``straight_through`` is set, in which case they always pass.
    """
    if not epsilon > 0:
        raise ConfigurationError(f"epsilon must be > 0, got {epsilon}")
    bound = representable_bound(epsilon, raw.dtype)
    if straight_through:
        return _StraightThroughClamp.apply(raw, -bound, bound)
    return raw.clamp(-bound, bound)


def representable_bound(epsilon: float, dtype=torch.float32) -> float:
    """Largest value of ``dtype`` that does not exceed ``epsilon``.

    float32(0.1) rounds up to 0.10000000149, so clamping at it would break
    the L-infinity budget by one ulp.
    """
    b = torch.tensor(epsilon, dtype=dtype)
    if float(b) > epsilon:
        b = torch.nextafter(b, torch.zeros((), dtype=dtype))
    return float(b)


def compose_adversarial(x: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    if x.shape != delta.shape:
        raise ShapeError(f"image {tuple(x.shape)} and perturbation {tuple(delta.shape)} differ")
    return (x + delta).clamp(0.0, 1.0)


def perturb(gen: Generator, x: torch.Tensor, epsilon: float | None = None,
            straight_through: bool = False):
    """Run ``gen`` on ``x`` and return ``(delta, x_adv)``, both clipped."""
    eps = gen.spec.epsilon if epsilon is None else epsilon
    delta = clip_perturbation(gen(x), eps, straight_through)
    return delta, compose_adversarial(x, delta)
