"""Run configuration (YAML) and dataset manifests.

Configs are strict: unknown keys are errors.  The ``task`` preset supplies
batch size and loss weights; any field written explicitly in the file wins.
Serializing a parsed config writes every field, so ``load(dump(c)) == c``.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .discriminator import DiscriminatorSpec
from .errors import ConfigurationError, ManifestError
from .generator import GeneratorSpec
from .losses import PRESETS, LossWeights
from .targets import AggregationSpec, ToyBackboneSpec
from .trainer import TrainConfig

__all__ = [
    "TASK_BATCH_SIZE",
    "ToyTrainConfig",
    "TargetConfig",
    "DatasetConfig",
    "RunConfig",
    "load_config",
    "dump_config",
    "DatasetManifest",
    "load_images",
]

TASK_BATCH_SIZE = {"retrieval": 32, "reid": 256, "face": 64}


@dataclass
class ToyTrainConfig:
    epochs: int = 30
    min_epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    accuracy_floor: float = 0.9
    # classifier on raw pooled features; retrieval normalization is set on the target
    normalize_features: bool = False


@dataclass
class TargetConfig:
    backbone: str = "toy"
    checkpoint: str | None = None
    aggregation: AggregationSpec = field(default_factory=AggregationSpec)
    metric: str = "euclidean"
    normalize: bool = False
    mean: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    std: list = field(default_factory=lambda: [0.25, 0.25, 0.25])
    layer: str | None = None
    toy: ToyBackboneSpec = field(default_factory=ToyBackboneSpec)
    toy_training: ToyTrainConfig = field(default_factory=ToyTrainConfig)
    # extra pooling variants on the same backbone, for transfer experiments
    variants: list = field(default_factory=list)


@dataclass
class DatasetConfig:
    manifest: str | None = None
    image_size: int = 64


@dataclass
class RunConfig:
    task: str = "retrieval"
    seed: int = 0
    deterministic: bool = True
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self, check_paths: bool = True) -> "RunConfig":
        if self.task not in PRESETS:
            raise ConfigurationError(f"unknown task {self.task!r}; expected one of {sorted(PRESETS)}")
        self.generator.validate()
        self.discriminator.validate()
        self.train.validate()
        self.target.aggregation.validate()
        for v in self.target.variants:
            v.validate()
        if self.target.backbone != "toy":
            raise ConfigurationError(
                f"backbone {self.target.backbone!r} is not available; only 'toy' backbones are built in")
        if self.generator.epsilon != self.train.epsilon:
            raise ConfigurationError(
                f"generator.epsilon ({self.generator.epsilon}) must equal train.epsilon ({self.train.epsilon})")
        if self.target.metric not in ("euclidean", "cosine"):
            raise ConfigurationError(f"unknown metric {self.target.metric!r}")
        if check_paths:
            if self.dataset.manifest is None:
                raise ConfigurationError("dataset.manifest is required")
            if not Path(self.dataset.manifest).is_file():
                raise ConfigurationError(f"dataset manifest {self.dataset.manifest} does not exist")
        return self

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def variant_names(self):
        names = [self.target.aggregation.method]
        names += [v.method for v in self.target.variants]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"pooling variants must be distinct, got {names}")
        return names

    def aggregation_for(self, name: str) -> AggregationSpec:
        for spec in [self.target.aggregation] + list(self.target.variants):
            if spec.method == name:
                return spec
        raise ConfigurationError(f"no pooling variant named {name!r}; have {self.variant_names()}")

    def fingerprint(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:16]


# nested dataclass fields that are not plain values
_NESTED = {
    (RunConfig, "dataset"): DatasetConfig,
    (RunConfig, "target"): TargetConfig,
    (RunConfig, "generator"): GeneratorSpec,
    (RunConfig, "discriminator"): DiscriminatorSpec,
    (RunConfig, "train"): TrainConfig,
    (TargetConfig, "aggregation"): AggregationSpec,
    (TargetConfig, "toy"): ToyBackboneSpec,
    (TargetConfig, "toy_training"): ToyTrainConfig,
    (TrainConfig, "weights"): LossWeights,
}


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        if sub is not None:
            value = _build(sub, value, f"{where}.{key}")
        elif cls is TargetConfig and key == "variants":
            value = [_build(AggregationSpec, v, f"{where}.variants[{i}]") for i, v in enumerate(value or [])]
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def _apply_preset(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config must be a mapping, got {type(raw).__name__}")
    raw = copy.deepcopy(raw)
    for key in ("train", "generator"):
        if raw.get(key) is not None and not isinstance(raw[key], dict):
            raise ConfigurationError(f"config.{key} must be a mapping, got {type(raw[key]).__name__}")
    if not isinstance((raw.get("train") or {}).get("weights") or {}, dict):
        raise ConfigurationError("config.train.weights must be a mapping")
    task = raw.get("task", "retrieval")
    if task not in PRESETS:
        raise ConfigurationError(f"unknown task {task!r}; expected one of {sorted(PRESETS)}")
    train = raw.setdefault("train", {}) or {}
    raw["train"] = train
    train.setdefault("batch_size", TASK_BATCH_SIZE[task])
    # the run seed drives training unless train.seed is given
    train.setdefault("seed", raw.get("seed", 0))
    weights = train.setdefault("weights", {}) or {}
    train["weights"] = weights
    for k, v in PRESETS[task].items():
        weights.setdefault(k, v)
    # one epsilon for both the architecture block and the training block
    if "epsilon" in train and "epsilon" not in (raw.get("generator") or {}):
        raw.setdefault("generator", {})["epsilon"] = train["epsilon"]
    elif "epsilon" in (raw.get("generator") or {}) and "epsilon" not in train:
        train["epsilon"] = raw["generator"]["epsilon"]
    return raw


def config_from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, _apply_preset({} if raw is None else raw), "config")


def load_config(path, overrides: dict | None = None, check_paths: bool = False) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if overrides:
        raw = _merge(raw, overrides)
    cfg = config_from_dict(raw)
    return cfg.validate(check_paths=check_paths)


def _merge(base, extra):
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def dump_config(cfg: RunConfig, path=None) -> str:
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


@dataclass
class ManifestRow:
    path: Path
    label: int | None
    split: str


class DatasetManifest:
    """Rows of ``(path, label, split)`` read from a CSV file with a header row.

    Paths are resolved relative to the manifest's directory.  Train rows may
    leave ``label`` empty.
    """

    SPLITS = ("train", "query", "gallery")

    def __init__(self, rows, root="."):
        self.rows = list(rows)
        self.root = Path(root)

    @classmethod
    def read(cls, path, validate: bool = True) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise ManifestError(f"manifest {path} does not exist")
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"path", "label", "split"} <= set(reader.fieldnames):
                raise ManifestError(f"{path}: header must contain path,label,split")
            for lineno, r in enumerate(reader, start=2):
                split = r["split"].strip()
                if split not in cls.SPLITS:
                    raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
                label = r["label"].strip()
                if label == "":
                    if split != "train":
                        raise ManifestError(f"{path}:{lineno}: {split} rows need a label")
                    label = None
                else:
                    try:
                        label = int(label)
                    except ValueError:
                        raise ManifestError(f"{path}:{lineno}: label {label!r} is not an integer id")
                rows.append(ManifestRow(path.parent / r["path"].strip(), label, split))
        m = cls(rows, path.parent)
        if validate:
            m.validate()
        return m

    def split(self, name):
        return [r for r in self.rows if r.split == name]

    def validate(self) -> "DatasetManifest":
        missing = [str(r.path) for r in self.rows if not r.path.is_file()]
        if missing:
            more = f" (and {len(missing) - 5} more)" if len(missing) > 5 else ""
            raise ManifestError(f"manifest references missing files: {', '.join(missing[:5])}{more}")
        gallery = {r.label for r in self.split("gallery")}
        for r in self.split("query"):
            if r.label not in gallery:
                raise ManifestError(f"query label {r.label} has no gallery image ({r.path.name})")
        return self

    def ids(self, split):
        return [str(r.path.relative_to(self.root)) for r in self.split(split)]

    def labels(self, split):
        return np.array([-1 if r.label is None else r.label for r in self.split(split)])

    def images(self, split, size: int | None = None):
        return load_images([r.path for r in self.split(split)], size)


def load_images(paths, size: int | None = None) -> np.ndarray:
    """8-bit RGB files as a float32 ``[n, 3, h, w]`` array in [0, 1].

    With ``size`` every image is resized to ``size x size``.
    """
    from PIL import Image

    out = []
    for p in paths:
        with Image.open(p) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            out.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    if not out:
        return np.zeros((0, 3, size or 0, size or 0), dtype=np.float32)
    return np.stack(out)


def seeds_record(cfg: RunConfig) -> str:
    return json.dumps({"seed": cfg.seed, "train_seed": cfg.train.seed,
                       "deterministic": cfg.deterministic, "config_fingerprint": cfg.fingerprint()},
                      indent=1, sort_keys=True)
