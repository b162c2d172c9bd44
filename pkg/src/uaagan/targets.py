"""Attacked retrieval models: backbone + pooling + distance.

A :class:`TargetModel` is frozen on construction.  The attack only ever
calls :meth:`TargetModel.embed` and :func:`distance`; the backbone itself is
opaque to it.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .errors import (ConfigurationError, DomainError, IncompatibleCheckpointError, ShapeError,
                     TrainingError)

log = logging.getLogger(__name__)

__all__ = [
    "AggregationSpec",
    "aggregate",
    "mac",
    "spoc",
    "gem",
    "rmac",
    "rmac_regions",
    "distance",
    "pairwise_distance",
    "ToyBackboneSpec",
    "ToyBackbone",
    "TargetModel",
    "build_toy_target",
    "train_toy_backbone",
    "save_target",
    "load_target",
]

METHODS = ("mac", "spoc", "gem", "rmac")
METRICS = ("euclidean", "cosine")


@dataclass
class AggregationSpec:
    method: str = "gem"
    p: float = 3.0
    levels: int = 3
    overlap: float = 0.4

    def validate(self) -> "AggregationSpec":
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown aggregation {self.method!r}; expected one of {METHODS}")
        if self.method == "gem" and not self.p >= 1:
            raise ConfigurationError(f"GeM exponent must be >= 1, got {self.p}")
        if self.levels < 1:
            raise ConfigurationError("R-MAC needs at least one scale")
        if not 0 <= self.overlap < 1:
            raise ConfigurationError(f"R-MAC overlap must lie in [0, 1), got {self.overlap}")
        return self


def _as_batch(chi):
    if chi.dim() == 3:
        return chi.unsqueeze(0), True
    if chi.dim() != 4:
        raise ShapeError(f"feature map must be [c,h,w] or [b,c,h,w], got {tuple(chi.shape)}")
    return chi, False


def mac(chi):
    x, single = _as_batch(chi)
    out = x.amax(dim=(-2, -1))
    return out[0] if single else out


def spoc(chi):
    x, single = _as_batch(chi)
    out = x.sum(dim=(-2, -1))
    return out[0] if single else out


def gem(chi, p: float = 3.0):
    """Generalized mean over spatial positions, ``(mean chi^p)^(1/p)``."""
    if p < 1:
        raise DomainError(f"GeM exponent must be >= 1, got {p}")
    x, single = _as_batch(chi)
    integer_p = float(p).is_integer()
    if not integer_p and bool((x < 0).any()):
        raise DomainError("GeM with a non-integer exponent needs nonnegative activations")
    n = x.shape[-2] * x.shape[-1]
    # sum / n rather than mean() so that spoc == h*w*gem(p=1) holds bit for bit on 2^k maps
    if p == 1:
        out = x.sum(dim=(-2, -1)) / n
    else:
        # factor out the per-channel max so x^p cannot overflow or underflow; the
        # identity gem(x) = s * gem(x / s) holds for any constant s > 0
        scale = x.detach().abs().amax(dim=(-2, -1), keepdim=True)
        scale = torch.where(scale > 0, scale, torch.ones_like(scale))
        m = (x / scale).pow(p).sum(dim=(-2, -1)) / n
        # the root has an infinite slope at zero (dead channels); keep gradients finite
        safe = m.abs().clamp_min(torch.finfo(m.dtype).tiny)
        root = safe.pow(1.0 / p) * torch.sign(m)
        out = scale[..., 0, 0] * torch.where(m != 0, root, torch.zeros_like(m))
    return out[0] if single else out


def rmac_regions(h: int, w: int, levels: int = 3, overlap: float = 0.4):
    """Square regions ``(top, left, size)`` of the multi-scale R-MAC grid.

    At scale ``l`` the side is ``2 min(h, w) / (l + 1)``.  Along the longer
    axis the number of extra regions is chosen so neighbouring regions
    overlap by roughly ``overlap``.
    """
    short = min(h, w)
    extra_w = extra_h = 0
    if h != w:
        steps = np.arange(2, 8)
        b = (max(h, w) - short) / (steps - 1)
        idx = int(np.argmin(np.abs((short ** 2 - short * b) / short ** 2 - overlap)))
        if h < w:
            extra_w = idx + 1
        else:
            extra_h = idx + 1
    regions = []
    for l in range(1, levels + 1):
        side = int(math.floor(2 * short / (l + 1)))
        if side == 0:
            continue
        half = math.floor(side / 2 - 1)

        def starts(n_regions, extent):
            if n_regions == 1:
                return [0]
            step = (extent - side) / (n_regions - 1)
            return [int(math.floor(half + i * step) - half) for i in range(n_regions)]

        for top in starts(l + extra_h, h):
            for left in starts(l + extra_w, w):
                regions.append((top, left, side))
    return regions


def _l2n(v, eps=1e-12):
    return v / v.norm(dim=-1, keepdim=True).clamp_min(eps)


def rmac(chi, levels: int = 3, overlap: float = 0.4):
    x, single = _as_batch(chi)
    total = torch.zeros(x.shape[:2], dtype=x.dtype, device=x.device)
    for top, left, side in rmac_regions(x.shape[-2], x.shape[-1], levels, overlap):
        region = x[..., top:top + side, left:left + side]
        total = total + _l2n(region.amax(dim=(-2, -1)))
    out = _l2n(total)
    return out[0] if single else out


def aggregate(chi, spec: AggregationSpec | None = None):
    spec = (spec or AggregationSpec()).validate()
    if spec.method == "mac":
        return mac(chi)
    if spec.method == "spoc":
        return spoc(chi)
    if spec.method == "gem":
        return gem(chi, spec.p)
    return rmac(chi, spec.levels, spec.overlap)


def _safe_norm(v):
    sq = (v * v).sum(dim=-1)
    # sqrt has an infinite slope at 0; report zero gradient there instead of NaN
    return torch.where(sq > 0, sq.clamp_min(1e-300 if v.dtype == torch.float64 else 1e-30).sqrt(),
                       torch.zeros_like(sq))


def distance(a, b, metric: str = "euclidean"):
    """Row-wise distance between equally shaped vectors (or batches of them)."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"vector lengths differ: {a.shape[-1]} vs {b.shape[-1]}")
    if metric == "euclidean":
        return _safe_norm(a - b)
    if metric == "cosine":
        na, nb = _safe_norm(a), _safe_norm(b)
        if bool((na == 0).any()) or bool((nb == 0).any()):
            raise DomainError("cosine distance is undefined for zero vectors")
        # rounding can push 1 - cos slightly outside [0, 2]
        return (1.0 - (a * b).sum(dim=-1) / (na * nb)).clamp(0.0, 2.0)
    raise ConfigurationError(f"unknown metric {metric!r}; expected one of {METRICS}")


def pairwise_distance(a, b, metric: str = "euclidean"):
    """``[n, m]`` matrix of distances between rows of ``a`` and rows of ``b``."""
    return distance(a[:, None, :], b[None, :, :], metric)


@dataclass
class ToyBackboneSpec:
    """Small convolutional classifier used as a desk-scale retrieval target.

    ``stages`` are ``(channels, stride)`` pairs of 3x3 conv + ReLU.
    """
    input_channels: int = 3
    stages: list = field(default_factory=lambda: [(16, 1), (32, 2), (32, 2), (32, 2)])
    num_classes: int = 10

    def __post_init__(self):
        self.stages = [tuple(int(v) for v in s) for s in self.stages]

    def validate(self) -> "ToyBackboneSpec":
        if not self.stages:
            raise ConfigurationError("toy backbone needs at least one stage")
        for c, s in self.stages:
            if c < 1 or s not in (1, 2):
                raise ConfigurationError(f"invalid stage {(c, s)}")
        if self.num_classes < 2:
            raise ConfigurationError("toy backbone needs at least two classes")
        return self

    @property
    def out_channels(self) -> int:
        return self.stages[-1][0]

    def map_shape(self, h: int, w: int):
        for _, s in self.stages:
            if s == 2:
                h, w = (h + 1) // 2, (w + 1) // 2
        return self.out_channels, h, w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d


class ToyBackbone(nn.Module):
    def __init__(self, spec: ToyBackboneSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        layers = []
        cin = spec.input_channels
        for c, s in spec.stages:
            layers += [nn.Conv2d(cin, c, 3, stride=s, padding=1), nn.ReLU()]
            cin = c
        self.features = nn.Sequential(*layers)
        # classifier head used only while training the backbone
        self.classifier = nn.Linear(cin, spec.num_classes)

    def forward(self, x):
        return self.features(x)


class TargetModel(nn.Module):
    """Frozen feature extractor with pooling, optional L2 normalization and a metric."""

    def __init__(self, backbone: nn.Module, aggregation: AggregationSpec | None = None,
                 metric: str = "euclidean", normalize: bool = True,
                 mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25), name: str = "toy",
                 layer: str | None = None):
        super().__init__()
        if metric not in METRICS:
            raise ConfigurationError(f"unknown metric {metric!r}; expected one of {METRICS}")
        self.aggregation = (aggregation or AggregationSpec()).validate()
        self.metric = metric
        self.normalize = normalize
        self.name = name
        self.layer = layer
        self.backbone = backbone
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))
        self._extract = backbone if layer is None else _LayerTap(backbone, layer)
        self.freeze()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # always evaluation mode; a frozen target never updates statistics
        return super().train(False)

    def with_aggregation(self, aggregation: AggregationSpec, name: str | None = None):
        """Another target sharing this backbone but pooling differently."""
        return TargetModel(self.backbone, aggregation, self.metric, self.normalize,
                           self.mean.flatten().tolist(), self.std.flatten().tolist(),
                           name or f"{self.name}-{aggregation.method}", self.layer)

    def feature_map(self, x):
        if x.dim() != 4 or x.shape[1] != self.mean.shape[1]:
            raise ShapeError(f"expected [batch, {self.mean.shape[1]}, H, W], got {tuple(x.shape)}")
        return self._extract((x - self.mean.to(x.dtype)) / self.std.to(x.dtype))

    def embed(self, x):
        f = aggregate(self.feature_map(x), self.aggregation)
        if self.normalize:
            f = _l2n(f)
        return f

    forward = embed

    def distance(self, a, b):
        return distance(a, b, self.metric)

    def config(self) -> dict:
        return {
            "name": self.name,
            "aggregation": asdict(self.aggregation),
            "metric": self.metric,
            "normalize": self.normalize,
            "mean": [round(v, 8) for v in self.mean.flatten().tolist()],
            "std": [round(v, 8) for v in self.std.flatten().tolist()],
            "layer": self.layer,
        }

    def fingerprint(self) -> str:
        """Hash of the target configuration and every weight, in a stable order.

        The display name is left out: it does not change what the target computes.
        """
        cfg = {k: v for k, v in self.config().items() if k != "name"}
        h = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode())
        for name, t in sorted(self.backbone.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


class _LayerTap(nn.Module):
    """Runs a backbone and returns the output of one named submodule."""

    def __init__(self, backbone, layer):
        super().__init__()
        modules = dict(backbone.named_modules())
        if layer not in modules:
            raise ConfigurationError(f"backbone has no layer named {layer!r}")
        self.backbone = backbone
        self.layer = layer
        self._module = modules[layer]

    def forward(self, x):
        captured = {}

        def hook(_m, _inp, out):
            captured["out"] = out

        handle = self._module.register_forward_hook(hook)
        try:
            self.backbone(x)
        finally:
            handle.remove()
        return captured["out"]


def train_toy_backbone(spec: ToyBackboneSpec, images, labels, seed: int = 0, epochs: int = 15,
                       batch_size: int = 32, lr: float = 2e-3, accuracy_floor: float = 0.95,
                       pooling: AggregationSpec | None = None, mean=(0.5, 0.5, 0.5),
                       std=(0.25, 0.25, 0.25), normalize: bool = True,
                       min_epochs: int = 2):
    """Train a :class:`ToyBackbone` classifier on labelled images.

    The pooled (and L2-normalized) descriptor feeds a linear classifier so the
    backbone learns features that are discriminative under the same pooling
    used for retrieval.  Returns ``(backbone, train_accuracy)``.
    """
    spec.validate()
    images = torch.as_tensor(images, dtype=torch.float32)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(images) == 0:
        raise TrainingError("cannot train a toy target on an empty dataset")
    if labels.shape[0] != images.shape[0]:
        raise ShapeError("images and labels must have the same length")
    if int(labels.max()) >= spec.num_classes or int(labels.min()) < 0:
        raise TrainingError(f"labels must lie in [0, {spec.num_classes})")
    pooling = (pooling or AggregationSpec()).validate()
    torch.manual_seed(seed)
    rng = torch.Generator().manual_seed(seed)
    net = ToyBackbone(spec)
    m = torch.tensor(mean).view(1, -1, 1, 1)
    s = torch.tensor(std).view(1, -1, 1, 1)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n = len(images)

    def logits_of(xb):
        f = aggregate(net((xb - m) / s), pooling)
        if normalize:
            # fixed temperature keeps the normalized-feature softmax trainable
            f = _l2n(f) * 16.0
        return net.classifier(f)

    acc = 0.0
    for epoch in range(epochs):
        net.train()
        order = torch.randperm(n, generator=rng)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            loss = F.cross_entropy(logits_of(images[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        net.eval()
        with torch.no_grad():
            correct = sum(int((logits_of(images[i:i + 256]).argmax(1) == labels[i:i + 256]).sum())
                          for i in range(0, n, 256))
        acc = correct / n
        log.info("toy target epoch %d: train accuracy %.3f", epoch, acc)
        if acc >= accuracy_floor and epoch + 1 >= min_epochs:
            break
    if acc < accuracy_floor:
        raise TrainingError(
            f"toy target reached only {acc:.3f} training accuracy (floor {accuracy_floor})",
            {"accuracy": acc, "epochs": epochs, "seed": seed})
    return net.eval(), acc


def build_toy_target(spec: ToyBackboneSpec | None, images, labels, seed: int = 0,
                     aggregation: AggregationSpec | None = None, metric: str = "euclidean",
                     normalize: bool = True, **train_kwargs) -> TargetModel:
    spec = spec or ToyBackboneSpec(num_classes=int(np.max(np.asarray(labels))) + 1 if len(labels) else 10)
    aggregation = aggregation or AggregationSpec()
    backbone, _ = train_toy_backbone(spec, images, labels, seed=seed, pooling=aggregation,
                                     normalize=normalize, **train_kwargs)
    return TargetModel(backbone, aggregation, metric, normalize, name=f"toy-{aggregation.method}")


def save_target(target: TargetModel, path, extra: dict | None = None):
    """Store a frozen toy target (backbone weights + retrieval settings)."""
    if not isinstance(target.backbone, ToyBackbone):
        raise ConfigurationError("only toy backbones can be archived")
    meta = {"backbone": "toy", "toy": target.backbone.spec.to_dict(), **target.config(),
            "extra": extra or {}}
    arrays = {k: v.detach().cpu().numpy() for k, v in target.backbone.state_dict().items()}
    return ckpt.write_archive(path, "target", meta, arrays)


def load_target(path, aggregation: AggregationSpec | None = None, name: str | None = None) -> TargetModel:
    """Load an archived target, optionally swapping its pooling."""
    meta, arrays = ckpt.read_archive(path, kind="target")
    backbone = ToyBackbone(ToyBackboneSpec(**meta["toy"]))
    expected = {k: tuple(v.shape) for k, v in backbone.state_dict().items()}
    for k in sorted(set(expected) | set(arrays)):
        if k not in arrays or k not in expected or tuple(arrays[k].shape) != expected[k]:
            raise IncompatibleCheckpointError(f"target layer {k!r} does not match the toy spec")
    backbone.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    agg = aggregation or AggregationSpec(**meta["aggregation"])
    return TargetModel(backbone.eval(), agg, meta["metric"], meta["normalize"], meta["mean"],
                       meta["std"], name or (meta["name"] if aggregation is None else f"toy-{agg.method}"),
                       meta.get("layer"))
