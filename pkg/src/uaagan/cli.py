"""Command-line entry points.

    uaagan gen-data --out data/toy --classes 10 --per-class 200 --seed 3
    uaagan train-target --config run.yaml
    uaagan train-attack --config run.yaml [--variant mac] [--ablate]
    uaagan evaluate --config run.yaml --attack none|generator|gaussian
    uaagan transfer --config run.yaml
    uaagan report runs/toy
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import report as rpt
from . import toydata
from .config import DatasetManifest, RunConfig, dump_config, load_config, seeds_record
from .errors import ConfigurationError, UAAError
from .retrieval import QuerySet, build_index, evaluate, rank, transfer_evaluate
from .targets import (AggregationSpec, TargetModel, load_target, save_target, train_toy_backbone)
from .trainer import load_generator, train, write_history

log = logging.getLogger("uaagan")

RUN_SUBDIRS = ("config", "checkpoints", "history", "reports", "grids")


class MissingArtifacts(UAAError):
    def __init__(self, missing):
        super().__init__("missing required inputs:\n" + "\n".join(f"  - {m}" for m in missing))
        self.missing = missing


@contextlib.contextmanager
def run_lock(out: Path):
    """Exclusive writer lock on a run directory."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UAAError(f"{out} is locked by another process (remove {lock} if it is stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def set_determinism(seed: int, deterministic: bool):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def prepare_run(cfg: RunConfig):
    out = cfg.out
    for d in RUN_SUBDIRS:
        (out / d).mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config" / "config.yaml")
    (out / "config" / "seeds.json").write_text(seeds_record(cfg))
    return out


def target_path(cfg: RunConfig) -> Path:
    return Path(cfg.target.checkpoint) if cfg.target.checkpoint else cfg.out / "checkpoints" / "target.ckpt"


def attack_tag(variant: str, ablate: bool) -> str:
    return f"attack-{variant}" + ("-uaag" if ablate else "")


def attack_path(cfg: RunConfig, variant: str, ablate: bool) -> Path:
    return cfg.out / "checkpoints" / attack_tag(variant, ablate) / "last.ckpt"


def load_variant(cfg: RunConfig, variant: str) -> TargetModel:
    return load_target(target_path(cfg), cfg.aggregation_for(variant), name=f"toy-{variant}")


def _eval_sets(manifest: DatasetManifest, size: int):
    queries = QuerySet(torch.from_numpy(manifest.images("query", size)), manifest.labels("query"),
                       manifest.ids("query"))
    gallery = (manifest.images("gallery", size), manifest.labels("gallery"), manifest.ids("gallery"))
    return queries, gallery


# commands -------------------------------------------------------------------

def cmd_gen_data(args):
    if args.classes < 1 or args.per_class < 1:
        args._parser.error("--classes and --per-class must be positive")
    manifest = toydata.write_dataset(args.out, args.classes, args.per_class, args.seed, args.size)
    print(f"wrote {args.classes * args.per_class} images and {manifest}")


def cmd_train_target(args, cfg: RunConfig):
    manifest = DatasetManifest.read(cfg.dataset.manifest)
    labels = manifest.labels("train")
    if (labels < 0).any():
        raise ConfigurationError("training a toy target needs labels on every train row")
    images = manifest.images("train", cfg.dataset.image_size)
    tt = cfg.target.toy_training
    spec = cfg.target.toy
    backbone, acc = train_toy_backbone(
        spec, images, labels, seed=cfg.seed, epochs=tt.epochs, min_epochs=tt.min_epochs,
        batch_size=tt.batch_size, lr=tt.lr, accuracy_floor=tt.accuracy_floor,
        pooling=cfg.target.aggregation, mean=cfg.target.mean, std=cfg.target.std,
        normalize=tt.normalize_features)
    variant = cfg.target.aggregation.method
    target = TargetModel(backbone, cfg.target.aggregation, cfg.target.metric, cfg.target.normalize,
                         cfg.target.mean, cfg.target.std, name=f"toy-{variant}", layer=cfg.target.layer)
    path = save_target(target, target_path(cfg), extra={"train_accuracy": acc})
    queries, gallery = _eval_sets(manifest, cfg.dataset.image_size)
    index = build_index(target, *gallery)
    clean = evaluate(target, queries, index)
    doc = {"train_accuracy": acc, "clean_mAP": clean.mAP, "fingerprint": target.fingerprint(),
           "checkpoint": str(path)}
    (cfg.out / "reports" / "target.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    print(f"target saved to {path}: train accuracy {acc:.3f}, clean mAP {clean.mAP:.3f}")


def cmd_train_attack(args, cfg: RunConfig):
    variant = args.variant or cfg.target.aggregation.method
    tp = target_path(cfg)
    if not tp.is_file():
        raise MissingArtifacts([f"frozen target checkpoint {tp} (run train-target first)"])
    cfg.aggregation_for(variant)
    ablate = args.ablate or cfg.train.ablate_discriminator
    tcfg = cfg.train
    tcfg.ablate_discriminator = ablate
    target = load_variant(cfg, variant)
    images = DatasetManifest.read(cfg.dataset.manifest).images("train", cfg.dataset.image_size)
    tag = attack_tag(variant, ablate)
    _, history = train(tcfg, images, target, generator_spec=cfg.generator,
                       discriminator_spec=cfg.discriminator,
                       checkpoint_dir=cfg.out / "checkpoints" / tag)
    hist = write_history(history, cfg.out / "history" / f"{tag}.csv")
    print(f"{tag}: {len(history)} steps, history in {hist}")


def _row_name(attack, ablate):
    if attack == "none":
        return "original"
    if attack == "gaussian":
        return "gaussian"
    return "uaa-g" if ablate else "uaa-gan"


def cmd_evaluate(args, cfg: RunConfig):
    variant = args.variant or cfg.target.aggregation.method
    source = args.source or variant
    missing = []
    if not target_path(cfg).is_file():
        missing.append(f"frozen target checkpoint {target_path(cfg)}")
    gen_path = attack_path(cfg, source, args.ablate)
    if args.attack != "none" and not gen_path.is_file():
        missing.append(f"generator checkpoint {gen_path} (run train-attack"
                       + (" --ablate" if args.ablate else "") + f" --variant {source})")
    if missing:
        raise MissingArtifacts(missing)
    target = load_variant(cfg, variant)
    manifest = DatasetManifest.read(cfg.dataset.manifest)
    queries, gallery = _eval_sets(manifest, cfg.dataset.image_size)
    index = build_index(target, *gallery)
    gen = load_generator(gen_path) if args.attack != "none" else None
    rep = evaluate(target, queries, index, args.attack, gen, seed=cfg.seed,
                   config_fingerprint=cfg.fingerprint())
    row = _row_name(args.attack, args.ablate)
    if source != variant:
        row += f"-from-{source}"
    path = rpt.write_eval(rep, cfg.out / "reports" / f"eval-{variant}-{row}.json",
                          {"variant": variant, "source": source, "row": row, "attack": args.attack})
    if gen is not None and args.grid:
        _grid(cfg, target, index, queries, gallery, gen, args.attack, variant, row)
    print(f"{variant}/{row}: mAP {rep.mAP:.4f} "
          + " ".join(f"CMC@{k} {v:.3f}" for k, v in rep.cmc.items()) + f" -> {path}")


def _grid(cfg, target, index, queries, gallery, gen, attack, variant, row, n=4, k=5):
    from .retrieval import attacked_queries

    pick = np.linspace(0, len(queries.ids) - 1, n).astype(int)
    sub = QuerySet(queries.images[pick], queries.labels[pick], [queries.ids[i] for i in pick])
    x_att, _ = attacked_queries(sub, attack, gen, seed=cfg.seed)
    pos = {gid: i for i, gid in enumerate(index.ids)}
    results, correct = [], []
    for i in range(n):
        with torch.no_grad():
            f = target.embed(x_att[i:i + 1])[0]
        top = rank(index, f, sub.ids[i], fingerprint=target.fingerprint())[:k]
        rows = [pos[t] for t in top]
        results.append(gallery[0][rows])
        correct.append(index.labels[rows] == sub.labels[i])
    rpt.save_grid(cfg.out / "grids" / f"{variant}-{row}.png", sub.images.numpy(),
                  (x_att - sub.images).numpy(), x_att.numpy(), np.stack(results), np.array(correct),
                  cfg.generator.epsilon)


def cmd_transfer(args, cfg: RunConfig):
    if not target_path(cfg).is_file():
        raise MissingArtifacts([f"frozen target checkpoint {target_path(cfg)}"])
    names = cfg.variant_names()
    targets = {v: load_variant(cfg, v) for v in names}
    generators = {}
    for v in names:
        p = attack_path(cfg, v, False)
        generators[v] = load_generator(p) if p.is_file() else None
        if generators[v] is None:
            log.warning("no generator trained against %s; its row is left empty", v)
    manifest = DatasetManifest.read(cfg.dataset.manifest)
    queries, gallery = _eval_sets(manifest, cfg.dataset.image_size)
    galleries = {v: build_index(t, *gallery) for v, t in targets.items()}
    matrix = transfer_evaluate(generators, targets, queries, galleries)
    path = rpt.write_transfer(matrix, cfg.out / "reports" / "transfer.json")
    for row in matrix.rows():
        print(row[0].ljust(10), " ".join("   n/a" if v is None else f"{v:.4f}" for v in row[1:]))
    print(f"-> {path}")


def cmd_report(args):
    run_dir = Path(args.run_dir)
    if not (run_dir / "reports").is_dir():
        raise MissingArtifacts([f"{run_dir / 'reports'} (run evaluate first)"])
    text = rpt.render_summary(run_dir)
    out = run_dir / "reports" / "report.md"
    out.write_text(text)
    print(text)


# parser ---------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration (YAML)")
    common.add_argument("--seed", type=int, default=None, help="override the run and training seed")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="force deterministic kernels")
    common.add_argument("--out", type=Path, default=None, help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="uaagan", description=__doc__.split("\n")[0] or None,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write the procedural toy dataset")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--size", type=int, default=64)

    sub.add_parser("train-target", parents=[common], help="train and freeze a toy retrieval target")

    a = sub.add_parser("train-attack", parents=[common], help="train the perturbation generator")
    a.add_argument("--variant", help="pooling variant of the target to attack")
    a.add_argument("--ablate", action="store_true", help="train without the discriminator (UAA-G)")

    e = sub.add_parser("evaluate", parents=[common], help="score clean or attacked queries")
    e.add_argument("--attack", choices=("none", "generator", "gaussian"), default="none")
    e.add_argument("--variant", help="pooling variant used for ranking")
    e.add_argument("--source", help="variant the generator was trained against")
    e.add_argument("--ablate", action="store_true", help="use the UAA-G generator")
    e.add_argument("--no-grid", dest="grid", action="store_false", help="skip the image grid")

    sub.add_parser("transfer", parents=[common], help="cross-variant transfer matrix")

    r = sub.add_parser("report", parents=[common], help="summarize a finished run")
    r.add_argument("run_dir", type=Path)
    for sp in sub.choices.values():
        sp.set_defaults(_parser=sp)
    return p


def _load_run_config(args) -> RunConfig:
    if args.config is None:
        args._parser.error("--config is required for this command")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["train"] = {"seed": args.seed}  # an explicit train.seed would otherwise win
    if args.deterministic:
        overrides["deterministic"] = True
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    return load_config(args.config, overrides, check_paths=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            if args.out is None:
                args._parser.error("--out is required")
            cmd_gen_data(args)
            return 0
        if args.command == "report":
            cmd_report(args)
            return 0
        cfg = _load_run_config(args)
        set_determinism(cfg.seed, cfg.deterministic)
        with run_lock(cfg.out):
            prepare_run(cfg)
            {"train-target": cmd_train_target, "train-attack": cmd_train_attack,
             "evaluate": cmd_evaluate, "transfer": cmd_transfer}[args.command](args, cfg)
        return 0
    except UAAError as exc:
        print(f"uaagan {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
