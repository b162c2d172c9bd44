"""Gallery indexing, ranking, mAP/CMC scoring and attack evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import ContaminationError, DomainError, ShapeError
from .generator import Generator, compose_adversarial, perturb, representable_bound
from .targets import TargetModel, pairwise_distance

log = logging.getLogger(__name__)

__all__ = [
    "GalleryIndex",
    "QuerySet",
    "EvalReport",
    "TransferMatrix",
    "build_index",
    "rank",
    "average_precision",
    "cmc",
    "matched_gaussian",
    "embed_batched",
    "evaluate",
    "transfer_evaluate",
    "CMC_KS",
]

CMC_KS = (1, 5, 10)


@dataclass
class GalleryIndex:
    ids: list
    labels: np.ndarray
    features: torch.Tensor
    fingerprint: str
    metric: str = "euclidean"

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not (len(self.ids) == len(self.labels) == self.features.shape[0]):
            raise ShapeError("ids, labels and feature rows must have equal length")
        if not bool(torch.isfinite(self.features).all()):
            raise DomainError("gallery features contain non-finite values")
        if not self.fingerprint:
            raise ContaminationError("gallery index has no target fingerprint")
        # position of each row when ids are sorted ascending; the distance tie-breaker
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.ids))
        self._pos = {v: i for i, v in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)


@dataclass
class QuerySet:
    images: torch.Tensor
    labels: np.ndarray
    ids: list
    role: str = "clean"

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not (len(self.ids) == len(self.labels) == len(self.images)):
            raise ShapeError("query images, labels and ids must have equal length")
        if self.role not in ("clean", "adversarial", "gaussian"):
            raise ValueError(f"unknown query role {self.role!r}")

    def check_against(self, index: GalleryIndex):
        missing = sorted(set(self.labels.tolist()) - set(index.labels.tolist()))
        if missing:
            raise ShapeError(f"query labels without any relevant gallery item: {missing}")


@dataclass
class EvalReport:
    mAP: float
    cmc: dict
    per_query_ap: list
    first_hit_rank: list
    query_ids: list
    attack: str = "none"
    noise: dict = field(default_factory=dict)
    target_fingerprint: str = ""
    index_fingerprint: str = ""
    config_fingerprint: str = ""
    wall_clock: float = 0.0

    def to_dict(self):
        d = asdict(self)
        d["cmc"] = {str(k): v for k, v in self.cmc.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["cmc"] = {int(k): v for k, v in d["cmc"].items()}
        return cls(**d)


@dataclass
class TransferMatrix:
    sources: list
    targets: list
    cells: dict  # (source, target) -> attacked mAP, None marks a missing pair
    clean: dict  # target -> unattacked mAP

    def value(self, source, target):
        return self.cells.get((source, target))

    def relative_drop(self, source, target):
        v = self.value(source, target)
        if v is None or not self.clean.get(target):
            return None
        return 1.0 - v / self.clean[target]

    def to_dict(self):
        return {
            "sources": list(self.sources),
            "targets": list(self.targets),
            "clean": dict(self.clean),
            "cells": [{"source": s, "target": t, "mAP": self.cells.get((s, t))}
                      for s in self.sources for t in self.targets],
        }

    def rows(self):
        """Table rows: ``no-attack`` first, then one row per generator source."""
        yield ["no-attack"] + [self.clean.get(t) for t in self.targets]
        for s in self.sources:
            yield [s] + [self.cells.get((s, t)) for t in self.targets]


@torch.no_grad()
def embed_batched(target: TargetModel, images, batch_size: int = 256, ids=None):
    out = []
    for i in range(0, len(images), batch_size):
        chunk = torch.as_tensor(images[i:i + batch_size])
        try:
            out.append(target.embed(chunk))
        except Exception as exc:
            who = ids[i:i + batch_size] if ids is not None else f"rows {i}..{i + len(chunk) - 1}"
            raise type(exc)(f"embedding failed for {who}: {exc}") from exc
    return torch.cat(out) if out else torch.empty(0)


def build_index(target: TargetModel, images, labels, ids=None, batch_size: int = 256) -> GalleryIndex:
    if len(images) == 0:
        raise ShapeError("gallery is empty")
    ids = list(range(len(images))) if ids is None else list(ids)
    feats = embed_batched(target, images, batch_size, ids)
    return GalleryIndex(ids, np.asarray(labels), feats, target.fingerprint(), target.metric)


def _check_fingerprint(index, fingerprint):
    if fingerprint is not None and fingerprint != index.fingerprint:
        raise ContaminationError(
            f"query features come from target {fingerprint}, index was built with {index.fingerprint}")


def _order(index: GalleryIndex, dists: np.ndarray, exclude=None):
    order = np.lexsort((index._id_rank, dists))
    if exclude is not None and exclude in index._pos:
        order = order[order != index._pos[exclude]]
    return order


def rank(index: GalleryIndex, f_query, query_id=None, fingerprint: str | None = None):
    """Gallery ids by ascending distance; ties go to the smaller id."""
    _check_fingerprint(index, fingerprint)
    f_query = torch.as_tensor(f_query).reshape(1, -1)
    d = pairwise_distance(f_query.to(index.features.dtype), index.features, index.metric)[0]
    return [index.ids[i] for i in _order(index, d.numpy(), query_id)]


def average_precision(ranked_relevance, total_relevant: int) -> float:
    """Mean of precision@k over the ranks k of relevant results."""
    if total_relevant < 1:
        raise DomainError("average precision needs at least one relevant item")
    rel = np.asarray(ranked_relevance, dtype=bool)
    if rel.sum() > total_relevant:
        raise DomainError("more hits in the ranking than relevant items")
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        return 0.0
    precision_at_hits = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precision_at_hits.sum() / total_relevant)


def cmc(first_hit_ranks, ks=CMC_KS) -> dict:
    """Fraction of queries whose first relevant result is within the top ``k``."""
    ranks = np.asarray(first_hit_ranks, dtype=float)
    if ranks.size == 0:
        raise DomainError("CMC needs at least one query")
    if (ranks < 1).any():
        raise DomainError("ranks are 1-based")
    return {int(k): float((ranks <= k).mean()) for k in sorted(ks)}


def matched_gaussian(x, delta, epsilon: float, seed: int = 0):
    """Gaussian noise at the per-image RMS of ``delta``, clipped like a real perturbation.

    Returns ``(x_noisy, stats)``; ``stats`` holds the target and achieved RMS.
    """
    if x.shape != delta.shape:
        raise ShapeError(f"image {tuple(x.shape)} and perturbation {tuple(delta.shape)} differ")
    target_rms = delta.reshape(len(delta), -1).pow(2).mean(dim=1).sqrt()
    g = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(x.shape, generator=g, dtype=x.dtype) * target_rms.view(-1, 1, 1, 1)
    bound = representable_bound(epsilon, noise.dtype)
    noise = noise.clamp(-bound, bound)
    x_noisy = compose_adversarial(x, noise)
    achieved = noise.reshape(len(noise), -1).pow(2).mean(dim=1).sqrt()
    return x_noisy, {"target_rms": target_rms, "achieved_rms": achieved,
                     "linf": noise.abs().amax(dim=(1, 2, 3))}


def _noise_stats(delta):
    flat = delta.reshape(len(delta), -1)
    return {
        "rms": float(flat.pow(2).mean(dim=1).sqrt().mean()),
        "linf": float(flat.abs().max()) if flat.numel() else 0.0,
    }


@torch.no_grad()
def attacked_queries(queries: QuerySet, attack: str = "none", generator: Generator | None = None,
                     epsilon: float | None = None, seed: int = 0, batch_size: int = 128):
    """Return ``(images, noise_stats)`` for one attack mode."""
    x = queries.images
    if attack == "none":
        return x, {}
    if generator is None:
        raise ValueError(f"attack {attack!r} needs a trained generator")
    eps = generator.spec.epsilon if epsilon is None else epsilon
    was_training = generator.training
    generator.eval()
    deltas = []
    try:
        for i in range(0, len(x), batch_size):
            d, _ = perturb(generator, x[i:i + batch_size].to(next(generator.parameters()).dtype), eps)
            deltas.append(d.to(x.dtype))
    finally:
        generator.train(was_training)
    delta = torch.cat(deltas)
    if attack == "generator":
        x_adv = compose_adversarial(x, delta)
        # L-inf of the clipped perturbation itself; x_adv - x can differ from
        # it by one float32 rounding of x + delta
        stats = _noise_stats(x_adv - x)
        stats["linf"] = _noise_stats(delta)["linf"]
        stats["raw_rms"] = _noise_stats(delta)["rms"]
        return x_adv, stats
    if attack == "gaussian":
        x_noisy, g = matched_gaussian(x, delta, eps, seed)
        stats = _noise_stats(x_noisy - x)
        stats["linf"] = float(g["linf"].max())
        stats.update(matched_rms=float(g["target_rms"].mean()),
                     achieved_rms=float(g["achieved_rms"].mean()))
        return x_noisy, stats
    raise ValueError(f"unknown attack mode {attack!r}")


def evaluate(target: TargetModel, queries: QuerySet, index: GalleryIndex, attack: str = "none",
             generator: Generator | None = None, epsilon: float | None = None, seed: int = 0,
             ks=CMC_KS, config_fingerprint: str = "") -> EvalReport:
    """Rank (optionally perturbed) queries against ``index`` and score mAP / CMC."""
    t0 = time.perf_counter()
    fp = target.fingerprint()
    _check_fingerprint(index, fp)
    queries.check_against(index)
    images, noise = attacked_queries(queries, attack, generator, epsilon, seed)
    fq = embed_batched(target, images)
    dists = pairwise_distance(fq.to(index.features.dtype), index.features, index.metric).numpy()
    aps, first = [], []
    for qi in range(len(queries.ids)):
        order = _order(index, dists[qi], queries.ids[qi])
        rel = index.labels[order] == queries.labels[qi]
        total = int(rel.sum())
        aps.append(average_precision(rel, total))
        first.append(int(np.argmax(rel)) + 1)
    return EvalReport(
        mAP=float(np.mean(aps)),
        cmc=cmc(first, ks),
        per_query_ap=[float(a) for a in aps],
        first_hit_rank=first,
        query_ids=list(queries.ids),
        attack=attack,
        noise=noise,
        target_fingerprint=fp,
        index_fingerprint=index.fingerprint,
        config_fingerprint=config_fingerprint,
        wall_clock=time.perf_counter() - t0,
    )


def transfer_evaluate(generators: dict, targets: dict, queries: QuerySet, galleries: dict,
                      epsilon: float | None = None) -> TransferMatrix:
    """Attacked mAP of every target under every generator.

    ``galleries`` maps target id to a prebuilt :class:`GalleryIndex`.  Pairs
    that fail to evaluate are recorded as ``None`` and the run continues.
    """
    clean, cells = {}, {}
    for t, target in targets.items():
        try:
            clean[t] = evaluate(target, queries, galleries[t]).mAP
        except Exception as exc:  # keep going; the gap is visible in the matrix
            log.warning("clean evaluation of %s failed: %s", t, exc)
            clean[t] = None
    for s, gen in generators.items():
        for t, target in targets.items():
            if gen is None:
                cells[(s, t)] = None
                continue
            try:
                cells[(s, t)] = evaluate(target, queries, galleries[t], "generator", gen, epsilon).mAP
            except Exception as exc:
                log.warning("transfer %s -> %s failed: %s", s, t, exc)
                cells[(s, t)] = None
    return TransferMatrix(list(generators), list(targets), cells, clean)
