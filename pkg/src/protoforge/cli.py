"""Command-line driver: train, eval, gradcheck, synth, sample-episode.

Exit codes: 0 success, 1 runtime or check failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import gradcheck as gc
from .config import RunConfig, load_config
from .core import ConfigError
from .data import (Dataset, DatasetError, IndexedDataset, ParseError, SamplingError, Vocabulary, format_episode,
                   load_embeddings, load_fewrel, sample_episode, save_embeddings, save_fewrel)
from .evaluator import evaluate
from .losses import LossError
from .model import Model
from .trainer import CheckpointError, Trainer, TrainingError, load_checkpoint, save_checkpoint

log = logging.getLogger("protoforge")

SYNTH_FILES = ("dataset.json", "names.json", "embeddings.txt")


class UsageError(Exception):
    pass


def _slice(spec: Optional[str], rels: List[str]) -> List[str]:
    if not spec:
        return rels
    try:
        start, _, stop = spec.partition(":")
        return rels[slice(int(start) if start else None, int(stop) if stop else None)]
    except ValueError:
        raise ConfigError(f"relation slice must look like start:stop, got {spec!r}") from None


def _subset(ds: Dataset, spec: Optional[str]) -> Dataset:
    keep = _slice(spec, ds.relation_ids())
    return Dataset({r: ds.instances[r] for r in keep}, {r: ds.relations[r] for r in keep if r in ds.relations},
                   ds.skipped)


def _need(path: Optional[str], what: str) -> str:
    if path is None:
        raise ConfigError(f"no {what} given")
    if not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _overrides(args, mapping: Sequence[Tuple[str, str]]) -> List[Tuple[str, str]]:
    pairs = []
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    for attr, key in mapping:
        v = getattr(args, attr, None)
        if v is not None:
            pairs.append((key, str(v)))
    return pairs


TRAIN_FLAGS = (("episodes", "train.max_episodes"), ("variant", "model.variant"), ("loss", "loss.variant"),
               ("alpha", "loss.alpha"), ("margin", "loss.margin"), ("lr", "train.lr"), ("seed", "seed"),
               ("train_data", "data.train"), ("val_data", "data.val"), ("names", "data.names"),
               ("embeddings", "data.embeddings"), ("out", "out.checkpoint"), ("log", "out.log"))


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args, TRAIN_FLAGS))
    d = cfg.data
    train_path = _need(d.train, "training data (data.train)")
    emb_path = _need(d.embeddings, "embedding file (data.embeddings)")
    names = _need(d.names, "relation name table (data.names)") if d.names else None
    val_path = _need(d.val, "validation data (data.val)") if d.val else None
    if val_path is None and d.val_relations:
        val_path = train_path
    vocab, table = load_embeddings(emb_path, seed=cfg.seed)
    if table.shape[1] != cfg.encoder.d_w:
        raise ConfigError(f"{emb_path} has {table.shape[1]}-d vectors but encoder.d_w={cfg.encoder.d_w}")
    full = load_fewrel(train_path, names)
    train = IndexedDataset(_subset(full, d.train_relations), vocab, d.T, d.max_rel)
    val = None
    if val_path is not None:
        vds = full if val_path == train_path else load_fewrel(val_path, names)
        val = IndexedDataset(_subset(vds, d.val_relations), vocab, d.T, d.max_rel)
    cfg.model.n_positions = train.n_positions
    model = Model.create(cfg.model, table)
    ckpt_path = Path(cfg.out.checkpoint)
    log_path = Path(cfg.out.log or str(ckpt_path) + ".log")
    extra = {"data": {"T": d.T, "max_rel": train.max_rel, "names": names}, "run": dict(cfg.items())}
    trainer = Trainer(model, cfg.train, cfg.loss, vocab.tokens(), extra)
    try:
        for parent in {ckpt_path.parent, log_path.parent}:
            parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot write log {log_path}: {exc}") from None
    with log_fh:
        for line in cfg.dump().splitlines():
            log_fh.write("# " + line + "\n")
        log_fh.write("# episode\tjoint\tce\trep\tval_acc\n")
        best = trainer.train(train, val, log_fh)
    save_checkpoint(best, ckpt_path)
    print(f"checkpoint {ckpt_path} (episode {best.episode}, val acc {best.best_val_acc})")
    print(f"log {log_path}")
    return 0


def _seeds(args) -> List[int]:
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    return list(range(args.seed, args.seed + args.n_seeds))


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    data_cfg = ckpt.config.get("data", {})
    names = args.names or data_cfg.get("names")
    ds = _subset(load_fewrel(_need(args.dataset, "dataset"), names), args.relations)
    vocab = Vocabulary(ckpt.vocab)
    model = ckpt.model()
    data = IndexedDataset(ds, vocab, data_cfg.get("T", model.cfg.encoder.T), data_cfg.get("max_rel"))
    report = evaluate(model, data, args.N, args.K, args.R, args.episodes, _seeds(args), args.balanced,
                      name=args.name or model.cfg.variant)
    print(report.to_json() if args.json else report.table())
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, _overrides(args, (("variant", "model.variant"), ("loss", "loss.variant"),
                                                      ("seed", "seed"))))
    toy = gc.toy_episode(cfg.model.variant, cfg.loss.variant, seed=cfg.seed, mixer_hidden=cfg.model.mixer_hidden,
                         margin=cfg.loss.margin, alpha=cfg.loss.alpha)
    results = gc.check_model(toy, args.scope, args.frozen, args.eps, args.tol, args.coords, cfg.seed)
    print(gc.format_results(results, args.tol))
    failed = [n for n, r in results.items() if not r.passed(args.tol)]
    if failed:
        print(f"FAILED: {', '.join(failed)} exceed {args.tol:g}", file=sys.stderr)
        return 1
    return 0


def cmd_synth(args) -> int:
    cfg = load_config(args.config, _overrides(args, (("seed", "seed"), ("noise", "synth.noise_rate"),
                                                      ("relations", "synth.n_relations"))))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"cannot write to {out}: {exc}") from None
    ds, vocab, table = cfg.synth.generate()
    save_fewrel(ds, out / SYNTH_FILES[0], out / SYNTH_FILES[1])
    save_embeddings(out / SYNTH_FILES[2], vocab, table)
    for f in SYNTH_FILES:
        print(out / f)
    return 0


def cmd_sample_episode(args) -> int:
    ds = _subset(load_fewrel(_need(args.dataset, "dataset"), args.names), args.relations)
    ep = sample_episode(ds, args.N, args.K, args.R, np.random.default_rng(args.seed), args.balanced)
    print(format_episode(ep, ds))
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write the best-validation checkpoint")
    _add_common(p)
    p.add_argument("--episodes", type=int, help="train.max_episodes")
    p.add_argument("--variant", help="model.variant: pronet | apn-lw | apn-ld")
    p.add_argument("--loss", help="loss.variant: none | jrl | pjrl")
    p.add_argument("--alpha", type=float, help="loss.alpha")
    p.add_argument("--margin", type=float, help="loss.margin")
    p.add_argument("--lr", type=float, help="train.lr")
    p.add_argument("--seed", type=int, help="seed (default $PROTOFORGE_SEED or 0)")
    p.add_argument("--train-data", help="data.train")
    p.add_argument("--val-data", help="data.val")
    p.add_argument("--names", help="data.names")
    p.add_argument("--embeddings", help="data.embeddings")
    p.add_argument("--out", help="out.checkpoint")
    p.add_argument("--log", help="out.log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on sampled test episodes")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--names", help="relation name table (default: the one used in training)")
    p.add_argument("--relations", help="start:stop slice of the sorted relation ids")
    p.add_argument("-N", "--N", type=int, default=5)
    p.add_argument("-K", "--K", type=int, default=1)
    p.add_argument("-R", "--R", type=int, default=25)
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0, help="first evaluation seed")
    p.add_argument("--n-seeds", type=int, default=10)
    p.add_argument("--seeds", help="explicit comma-separated seed list")
    p.add_argument("--balanced", action="store_true", help="R/N queries per class")
    p.add_argument("--name")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check on a fixed toy episode")
    _add_common(p)
    p.add_argument("--scope", choices=gc.SCOPES, default="all")
    p.add_argument("--variant")
    p.add_argument("--loss")
    p.add_argument("--seed", type=int)
    p.add_argument("--frozen", action="store_true", help="replay the base point's triplet selection")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=100, help="coordinates sampled per parameter")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset, name table and embeddings")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise", type=float, help="synth.noise_rate")
    p.add_argument("--relations", type=int, help="synth.n_relations")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample-episode", help="print one sampled episode")
    p.add_argument("dataset")
    p.add_argument("--names")
    p.add_argument("--relations", help="start:stop slice of the sorted relation ids")
    p.add_argument("-N", "--N", type=int, default=5)
    p.add_argument("-K", "--K", type=int, default=1)
    p.add_argument("-R", "--R", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--balanced", action="store_true")
    p.set_defaults(func=cmd_sample_episode)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError, DatasetError, CheckpointError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, SamplingError, LossError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
