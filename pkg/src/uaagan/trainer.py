"""Alternating discriminator/generator training of the perturbation generator.

Each mini-batch does one discriminator update followed by one generator
update.  Hard negatives are mined inside the batch from the target's
embeddings of the clean images.  With ``ablate_discriminator`` the
discriminator is never run and the generator sees only the reconstruction
and metric terms.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .discriminator import Discriminator, DiscriminatorSpec, build_discriminator
from .errors import ConfigurationError, IncompatibleCheckpointError, TrainingError
from .generator import PARAM_SCHEMA_VERSION, Generator, GeneratorSpec, build_generator, perturb
from .losses import (LossRecord, LossWeights, gan_loss_d, gan_loss_g, generator_total_loss,
                     metric_loss, recon_loss)
from .targets import TargetModel, pairwise_distance

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainState",
    "HISTORY_FIELDS",
    "mine_hard_negatives",
    "lr_at_epoch",
    "decay_milestones",
    "init_state",
    "train_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "write_history",
    "read_history",
]

BASE_EPOCHS = 500
BASE_DECAY_EPOCHS = (150, 200)
HISTORY_FIELDS = ("step", "epoch") + LossRecord.FIELDS + ("lr_g", "lr_d")


@dataclass
class TrainConfig:
    epochs: int = BASE_EPOCHS
    batch_size: int = 32
    lr_g: float = 1e-3
    lr_d: float = 4e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    decay_factor: float = 0.9
    # None: 150 and 200 out of 500, rescaled to ``epochs``
    decay_epochs: list | None = None
    epsilon: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    ablate_discriminator: bool = False
    checkpoint_every: int = 0
    flip_augment: bool = False
    recon_mode: str = "rmse"
    straight_through_clip: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.decay_epochs is not None:
            self.decay_epochs = [int(e) for e in self.decay_epochs]

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2: hard-negative mining needs a peer")
        if not (self.lr_g > 0 and self.lr_d > 0):
            raise ConfigurationError("learning rates must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ConfigurationError("decay_factor must lie in (0, 1]")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be > 0")
        if self.epochs > 0 and any(e >= self.epochs or e < 0 for e in decay_milestones(self)):
            raise ConfigurationError(
                f"decay epochs {decay_milestones(self)} must lie inside [0, {self.epochs})")
        if self.recon_mode not in ("rmse", "l2"):
            raise ConfigurationError(f"unknown recon_mode {self.recon_mode!r}")
        self.weights.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def decay_milestones(config: TrainConfig):
    if config.decay_epochs is not None:
        return list(config.decay_epochs)
    return [int(round(e * config.epochs / BASE_EPOCHS)) for e in BASE_DECAY_EPOCHS]


def lr_at_epoch(base: float, epoch: int, config: TrainConfig) -> float:
    passed = sum(1 for m in decay_milestones(config) if epoch >= m)
    return base * config.decay_factor ** passed


def mine_hard_negatives(features, metric: str = "euclidean"):
    """Index of the farthest other sample in the batch, ties to the smallest index."""
    n = features.shape[0]
    if n < 2:
        raise ConfigurationError("hard-negative mining needs a batch of at least 2")
    with torch.no_grad():
        d = pairwise_distance(features, features, metric).double().cpu().numpy()
    np.fill_diagonal(d, -np.inf)
    # np.argmax returns the first maximum
    return torch.as_tensor(np.argmax(d, axis=1), dtype=torch.long)


@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    config: TrainConfig
    rng: torch.Generator
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)


def _adam(params, lr, config):
    return torch.optim.Adam(params, lr=lr, betas=config.betas, eps=config.adam_eps)


def init_state(config: TrainConfig, generator_spec: GeneratorSpec | None = None,
               discriminator_spec: DiscriminatorSpec | None = None,
               dtype: torch.dtype = torch.float32) -> TrainState:
    config.validate()
    generator_spec = generator_spec or GeneratorSpec(epsilon=config.epsilon)
    if generator_spec.epsilon != config.epsilon:
        raise ConfigurationError(
            f"generator epsilon {generator_spec.epsilon} != training epsilon {config.epsilon}")
    gen = build_generator(generator_spec, seed=config.seed, dtype=dtype)
    disc = build_discriminator(discriminator_spec, seed=config.seed + 1, dtype=dtype)
    return TrainState(
        generator=gen.train(),
        discriminator=disc.train(),
        opt_g=_adam(gen.parameters(), config.lr_g, config),
        opt_d=_adam(disc.parameters(), config.lr_d, config),
        config=config,
        rng=torch.Generator().manual_seed(config.seed + 2),
    )


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def train_step(state: TrainState, x: torch.Tensor, target: TargetModel):
    """One discriminator update then one generator update on batch ``x``."""
    cfg = state.config
    w = cfg.weights
    gen, disc = state.generator, state.discriminator
    gen.train()
    disc.train()
    x = x.to(next(gen.parameters()).dtype)

    _, x_adv = perturb(gen, x, cfg.epsilon, cfg.straight_through_clip)

    if cfg.ablate_discriminator:
        loss_d = x.new_zeros(())
    else:
        loss_d = gan_loss_d(disc(x), disc(x_adv.detach()))
        state.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        state.opt_d.step()

    with torch.no_grad():
        f_x = target.embed(x)
    neg = mine_hard_negatives(f_x, target.metric)
    f_adv = target.embed(x_adv)
    recon = recon_loss(x_adv, x, cfg.recon_mode)
    metric = metric_loss(f_x, f_x[neg], f_adv, w.margin, target.metric)
    if cfg.ablate_discriminator:
        loss_g_gan = x.new_zeros(())
    else:
        disc.requires_grad_(False)
        try:
            loss_g_gan = gan_loss_g(disc(x_adv))
        finally:
            disc.requires_grad_(True)
    total_g = generator_total_loss(loss_g_gan, recon, metric, w)
    state.opt_g.zero_grad(set_to_none=True)
    total_g.backward()

    values = [float(v.detach()) for v in (loss_g_gan, loss_d, recon, metric, total_g)]
    if not all(math.isfinite(v) for v in values):
        raise TrainingError(
            f"non-finite loss at step {state.step}",
            dict(zip(("gan_g", "gan_d", "recon", "metric", "total_g"), values),
                 step=state.step, epoch=state.epoch))
    state.opt_g.step()
    state.step += 1
    gan_g, gan_d, rec, met, tot = values
    # recomputed in double so the logged identity is exact to rounding of the logged terms
    return state, LossRecord(gan_g, gan_d, rec, met, gan_g + w.lambda_r * rec + w.lambda_m * met, gan_d)


def _batches(n, batch_size, rng):
    order = torch.randperm(n, generator=rng)
    # incomplete trailing batch is dropped
    for i in range(0, n - batch_size + 1, batch_size):
        yield order[i:i + batch_size]


def train(config: TrainConfig, images, target: TargetModel, state: TrainState | None = None,
          generator_spec: GeneratorSpec | None = None,
          discriminator_spec: DiscriminatorSpec | None = None, checkpoint_dir=None,
          callback=None):
    """Run (or resume) training; returns ``(generator, history)``.

    ``images`` is an ``[n, c, h, w]`` array in [0, 1]; labels are not needed.
    A checkpoint is written every ``config.checkpoint_every`` epochs and at the
    end when ``checkpoint_dir`` is given.
    """
    config.validate()
    images = torch.as_tensor(images)
    if len(images) == 0:
        raise ConfigurationError("training set is empty")
    if config.epochs > 0 and len(images) < config.batch_size:
        raise ConfigurationError(
            f"training set of {len(images)} images is smaller than one batch ({config.batch_size})")
    if state is None:
        state = init_state(config, generator_spec, discriminator_spec)
    target_before = _param_digest(target)
    while state.epoch < config.epochs:
        epoch = state.epoch
        lr_g, lr_d = lr_at_epoch(config.lr_g, epoch, config), lr_at_epoch(config.lr_d, epoch, config)
        _set_lr(state.opt_g, lr_g)
        _set_lr(state.opt_d, lr_d)
        for idx in _batches(len(images), config.batch_size, state.rng):
            x = images[idx]
            if config.flip_augment:
                flip = torch.rand(len(idx), generator=state.rng) < 0.5
                x = torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x)
            step = state.step
            _, rec = train_step(state, x, target)
            state.history.append(dict(step=step, epoch=epoch, **rec.as_dict(), lr_g=lr_g, lr_d=lr_d))
        state.epoch += 1
        if callback is not None:
            callback(state)
        last = state.history[-1] if state.history else {}
        log.info("epoch %d/%d total_g=%.4f recon=%.4f metric=%.4f gan_d=%.4f", state.epoch,
                 config.epochs, last.get("total_g", float("nan")), last.get("recon", float("nan")),
                 last.get("metric", float("nan")), last.get("gan_d", float("nan")))
        if checkpoint_dir is not None and config.checkpoint_every and \
                state.epoch % config.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"epoch_{state.epoch:04d}.ckpt")
    if _param_digest(target) != target_before:
        raise TrainingError("target parameters changed during attack training")
    if checkpoint_dir is not None:
        save_checkpoint(state, Path(checkpoint_dir) / "last.ckpt")
    state.generator.eval()
    return state.generator, state.history


def _param_digest(module):
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _optimizer_arrays(prefix, opt):
    sd = opt.state_dict()
    arrays = {}
    for pid, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"{prefix}/{pid}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()}
              for g in sd["param_groups"]]
    return arrays, groups


def _restore_optimizer(opt, prefix, arrays, groups):
    sd = opt.state_dict()
    state = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, pid, key = name.split("/", 2)
        state.setdefault(int(pid), {})[key] = torch.from_numpy(arr.copy())
    new_groups = []
    for fresh, saved in zip(sd["param_groups"], groups):
        g = dict(fresh)
        g["lr"] = saved["lr"]
        if "initial_lr" in saved:
            g["initial_lr"] = saved["initial_lr"]
        new_groups.append(g)
    opt.load_state_dict({"state": state, "param_groups": new_groups})


def save_checkpoint(state: TrainState, path) -> Path:
    arrays = {}
    for prefix, module in (("generator", state.generator), ("discriminator", state.discriminator)):
        for name, t in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = t.detach().cpu().numpy()
    a_g, groups_g = _optimizer_arrays("opt_g", state.opt_g)
    a_d, groups_d = _optimizer_arrays("opt_d", state.opt_d)
    arrays.update(a_g)
    arrays.update(a_d)
    arrays["rng"] = state.rng.get_state().numpy()
    meta = {
        "param_schema_version": PARAM_SCHEMA_VERSION,
        "generator_spec": state.generator.spec.to_dict(),
        "discriminator_spec": state.discriminator.spec.to_dict(),
        "train_config": state.config.to_dict(),
        "dtype": str(next(state.generator.parameters()).dtype).replace("torch.", ""),
        "epoch": state.epoch,
        "step": state.step,
        "history": state.history,
        "opt_g_groups": groups_g,
        "opt_d_groups": groups_d,
    }
    return ckpt.write_archive(path, "train_state", meta, arrays)


def _check_layers(prefix, module, arrays):
    expected = {f"{prefix}/{k}": tuple(v.shape) for k, v in module.state_dict().items()}
    found = {k: tuple(v.shape) for k, v in arrays.items() if k.startswith(prefix + "/")}
    for name in sorted(set(expected) | set(found)):
        if name not in found:
            raise IncompatibleCheckpointError(f"checkpoint lacks layer {name!r}")
        if name not in expected:
            raise IncompatibleCheckpointError(f"checkpoint has unexpected layer {name!r}")
        if expected[name] != found[name]:
            raise IncompatibleCheckpointError(
                f"layer {name!r} has shape {found[name]} in the checkpoint, {expected[name]} expected")


def load_checkpoint(path, generator_spec: GeneratorSpec | None = None,
                    discriminator_spec: DiscriminatorSpec | None = None) -> TrainState:
    """Rebuild a :class:`TrainState`.

    When specs are given, the archive must match them layer for layer.
    Nothing is returned unless the whole archive loads.
    """
    meta, arrays = ckpt.read_archive(path, kind="train_state")
    if meta.get("param_schema_version") != PARAM_SCHEMA_VERSION:
        raise IncompatibleCheckpointError(
            f"parameter schema version {meta.get('param_schema_version')} != {PARAM_SCHEMA_VERSION}")
    config = TrainConfig(**meta["train_config"])
    gspec = generator_spec or GeneratorSpec.from_dict(meta["generator_spec"])
    dspec = discriminator_spec or DiscriminatorSpec.from_dict(meta["discriminator_spec"])
    dtype = getattr(torch, meta.get("dtype", "float32"))
    state = init_state(config, gspec, dspec, dtype=dtype)
    _check_layers("generator", state.generator, arrays)
    _check_layers("discriminator", state.discriminator, arrays)
    for prefix, module in (("generator", state.generator), ("discriminator", state.discriminator)):
        module.load_state_dict({k.split("/", 1)[1]: torch.from_numpy(v.copy())
                                for k, v in arrays.items() if k.startswith(prefix + "/")})
    _restore_optimizer(state.opt_g, "opt_g", arrays, meta["opt_g_groups"])
    _restore_optimizer(state.opt_d, "opt_d", arrays, meta["opt_d_groups"])
    state.rng.set_state(torch.from_numpy(arrays["rng"].copy()))
    state.epoch = meta["epoch"]
    state.step = meta["step"]
    state.history = meta["history"]
    return state


def load_generator(path) -> Generator:
    """Just the trained generator from a training checkpoint, in eval mode."""
    meta, arrays = ckpt.read_archive(path, kind="train_state")
    gen = build_generator(GeneratorSpec.from_dict(meta["generator_spec"]),
                          dtype=getattr(torch, meta.get("dtype", "float32")))
    _check_layers("generator", gen, arrays)
    gen.load_state_dict({k.split("/", 1)[1]: torch.from_numpy(v.copy())
                         for k, v in arrays.items() if k.startswith("generator/")})
    return gen.eval()


def write_history(history, path):
    """Delimited text table, one row per step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS])
    return path


def read_history(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()} for r in rows]
