"""Generator/discriminator objectives.

All batch reductions are means.  Distances inside the metric loss use the
target's own metric so that training and ranking share one geometry.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .errors import ConfigurationError, ShapeError
from .targets import distance

__all__ = [
    "LossWeights",
    "PRESETS",
    "LossRecord",
    "recon_loss",
    "gan_loss_d",
    "gan_loss_g",
    "metric_loss",
    "generator_total_loss",
]


@dataclass
class LossWeights:
    lambda_r: float = 4.0
    lambda_m: float = 0.03
    margin: float = 1.0

    def validate(self) -> "LossWeights":
        if self.lambda_r < 0 or self.lambda_m < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if not self.margin > 0:
            raise ConfigurationError(f"margin must be > 0, got {self.margin}")
        return self

    @classmethod
    def preset(cls, task: str) -> "LossWeights":
        try:
            return cls(**PRESETS[task])
        except KeyError:
            raise ConfigurationError(f"unknown task preset {task!r}; expected one of {sorted(PRESETS)}")


PRESETS = {
    "retrieval": dict(lambda_r=4.0, lambda_m=0.03, margin=1.0),
    "reid": dict(lambda_r=8.0, lambda_m=0.05, margin=1.0),
    "face": dict(lambda_r=2.0, lambda_m=0.01, margin=1.0),
}


@dataclass
class LossRecord:
    gan_g: float
    gan_d: float
    recon: float
    metric: float
    total_g: float
    total_d: float

    FIELDS = ("gan_g", "gan_d", "recon", "metric", "total_g", "total_d")

    def as_dict(self):
        return asdict(self)


def _check_nonempty(t, name):
    if t.numel() == 0:
        raise ShapeError(f"{name} is empty")


def recon_loss(x_adv, x, mode: str = "rmse"):
    """Per-image reconstruction error averaged over the batch.

    ``rmse`` is ``sqrt(mean((x_adv - x)^2))`` per image, which keeps the
    weight independent of resolution; ``l2`` is the raw Euclidean norm.
    """
    if x_adv.shape != x.shape:
        raise ShapeError(f"shapes differ: {tuple(x_adv.shape)} vs {tuple(x.shape)}")
    _check_nonempty(x, "image batch")
    diff = (x_adv - x).reshape(x.shape[0], -1)
    sq = (diff * diff).sum(dim=1)
    if mode == "rmse":
        sq = sq / diff.shape[1]
    elif mode != "l2":
        raise ConfigurationError(f"unknown reconstruction mode {mode!r}")
    # zero residual: d sqrt / d x is infinite, report a zero gradient instead
    per_image = torch.where(sq > 0, sq.clamp_min(torch.finfo(sq.dtype).tiny).sqrt(),
                            torch.zeros_like(sq))
    return per_image.mean()


def gan_loss_d(real_scores, fake_scores):
    """Least-squares discriminator loss: real pushed to 1, fake to 0."""
    _check_nonempty(real_scores, "real scores")
    _check_nonempty(fake_scores, "fake scores")
    return ((real_scores - 1) ** 2).mean() + (fake_scores ** 2).mean()


def gan_loss_g(fake_scores):
    """Least-squares generator loss: fake pushed to 1."""
    _check_nonempty(fake_scores, "fake scores")
    return ((fake_scores - 1) ** 2).mean()


def metric_loss(f_x, f_neg, f_adv, margin: float = 1.0, metric: str = "euclidean"):
    """Hinge ``max(d(f_x, f_neg) + margin - d(f_x, f_adv), 0)`` averaged over the batch."""
    if not (f_x.shape == f_neg.shape == f_adv.shape):
        raise ShapeError(
            f"feature shapes differ: {tuple(f_x.shape)}, {tuple(f_neg.shape)}, {tuple(f_adv.shape)}")
    _check_nonempty(f_x, "features")
    hinge = distance(f_x, f_neg, metric) + margin - distance(f_x, f_adv, metric)
    return hinge.clamp_min(0).mean()


def generator_total_loss(gan_g, recon, metric, weights: LossWeights):
    return gan_g + weights.lambda_r * recon + weights.lambda_m * metric
