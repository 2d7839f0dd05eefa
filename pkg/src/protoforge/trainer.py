"""Episodic SGD training, checkpoint I/O and validation-based model selection."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, TextIO

import numpy as np

from . import core
from .core import ConfigError, ParamStore
from .data import IndexedDataset, sample_episode
from .evaluator import episode_accuracy
from .losses import LossBreakdown, LossConfig
from .model import EpisodeBatch, Model, ModelConfig

log = logging.getLogger(__name__)

MAGIC = b"PROTOFORGE-CHECKPOINT 1\n"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    N_train: int = 20
    N_eval: int = 5
    K: int = 1
    R: int = 20  # queries per training episode
    R_eval: int = 25
    lr: float = 0.1
    weight_decay: float = 1e-5
    max_episodes: int = 2000
    val_interval: int = 200
    val_episodes: int = 1000
    seed: int = 0
    lr_schedule: str = "constant"  # constant | step
    lr_step_factor: float = 0.5
    lr_step_every: int = 1000
    episodes_per_step: int = 1
    balanced_queries: bool = False
    grad_clip: Optional[float] = 10.0  # global L2 norm; None disables

    def validate(self) -> None:
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be non-negative")
        if min(self.N_train, self.N_eval, self.K, self.R, self.R_eval, self.episodes_per_step) < 1:
            raise ConfigError("episode sizes must be positive")
        if self.val_interval < 1 or self.max_episodes < 0:
            raise ConfigError("val_interval must be positive and max_episodes non-negative")
        if self.lr_schedule not in ("constant", "step"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, episode: int) -> float:
        if self.lr_schedule == "step":
            return self.lr * self.lr_step_factor ** (episode // self.lr_step_every)
        return self.lr


def clip_gradients(store: ParamStore, max_norm: float) -> float:
    """Rescale trainable gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    names = [n for n in store if store.entry(n).trainable]
    norm = float(np.sqrt(sum(float(np.sum(np.square(store.grad(n), dtype=np.float64))) for n in names)))
    if norm > max_norm:
        scale = max_norm / norm
        for n in names:
            store.grad(n)[...] *= scale
    return norm


def sgd_update(store: ParamStore, lr: float, weight_decay: float) -> None:
    """param <- param - lr * (grad + wd * param) for trainable entries only."""
    for name in store:
        p = store.entry(name)
        if p.trainable:
            p.value -= (lr * (p.grad + weight_decay * p.value)).astype(p.value.dtype, copy=False)


def train_step(model: Model, batches, loss_cfg: LossConfig, lr: float, weight_decay: float,
               rng: Optional[np.random.Generator] = None, grad_clip: Optional[float] = None) -> LossBreakdown:
    """Forward, backward and one SGD update. Several batches have their gradients summed."""
    if isinstance(batches, EpisodeBatch):
        batches = [batches]
    model.store.zero_grad()
    parts = []
    for b in batches:
        bd, cache = model.forward(b, loss_cfg, True, rng)
        bad = bd.finite()
        if bad is not None:
            raise TrainingError(f"non-finite {bad} loss (ce={bd.ce}, rep={bd.rep})")
        model.backward(cache)
        parts.append(bd)
    if grad_clip is not None:
        clip_gradients(model.store, grad_clip)
    sgd_update(model.store, lr, weight_decay)
    if len(parts) == 1:
        return parts[0]
    ce, rep = sum(p.ce for p in parts), sum(p.rep for p in parts)
    return LossBreakdown(ce, rep, ce + loss_cfg.alpha * rep, float(np.mean([p.accuracy for p in parts])))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: ParamStore
    config: dict
    rng_state: dict = field(default_factory=dict)
    episode: int = 0
    best_val_acc: Optional[float] = None
    vocab: List[str] = field(default_factory=list)

    def model(self) -> Model:
        return Model(ModelConfig.from_dict(self.config["model"]), self.params)


def snapshot(model: Model, config: dict, rng_state: dict, episode: int, best: Optional[float],
             vocab: List[str]) -> Checkpoint:
    return Checkpoint(model.store.copy(), json.loads(json.dumps(config)), json.loads(json.dumps(rng_state)),
                      episode, best, list(vocab))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Magic line, one JSON header line, then little-endian raw arrays in header order."""
    entries, blobs, offset = [], [], 0
    for name in ckpt.params:
        p = ckpt.params.entry(name)
        arr = np.asarray(p.value, dtype=p.value.dtype.newbyteorder("<"), order="C")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "trainable": p.trainable, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "entries": entries,
        "dtype": ckpt.params.dtype.str,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "episode": ckpt.episode,
        "best_val_acc": ckpt.best_val_acc,
        "vocab": ckpt.vocab,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    nl = raw.find(b"\n", len(MAGIC))
    if nl < 0:
        raise CheckpointError(f"{path}: missing header")
    try:
        header = json.loads(raw[len(MAGIC):nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from None
    body = raw[nl + 1:]
    store = ParamStore(np.dtype(header["dtype"]).newbyteorder("="))
    expected = 0
    for e in header["entries"]:
        dtype = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dtype.itemsize
        if n != e["nbytes"]:
            raise CheckpointError(f"{path}: entry {e['name']!r} shape {e['shape']} does not match {e['nbytes']} bytes")
        chunk = body[e["offset"]:e["offset"] + n]
        if len(chunk) != n:
            raise CheckpointError(f"{path}: entry {e['name']!r} is truncated ({len(chunk)} of {n} bytes)")
        store.add(e["name"], np.frombuffer(chunk, dtype=dtype).reshape(tuple(e["shape"])), e["trainable"])
        expected = max(expected, e["offset"] + n)
    if len(body) != expected:
        raise CheckpointError(f"{path}: {len(body) - expected} unexpected trailing bytes")
    return Checkpoint(store, header["config"], header["rng_state"], header["episode"],
                      header["best_val_acc"], header["vocab"])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def stream(seed: int, name: str) -> np.random.Generator:
    return core.named_rng(seed, name)


def validation_accuracy(model: Model, data: IndexedDataset, N: int, K: int, R: int, episodes: int,
                        seed: int, balanced: bool = False) -> float:
    rng = stream(seed, "validation")
    accs = [episode_accuracy(model, data, sample_episode(data, N, K, R, rng, balanced))[0]
            for _ in range(episodes)]
    return float(np.mean(accs))


class Trainer:
    def __init__(self, model: Model, cfg: TrainConfig, loss_cfg: LossConfig, vocab: List[str] = (),
                 extra_config: Optional[dict] = None):
        cfg.validate()
        loss_cfg.validate()
        self.model, self.cfg, self.loss_cfg = model, cfg, loss_cfg
        self.vocab = list(vocab)
        self.extra_config = extra_config or {}
        self.sample_rng = stream(cfg.seed, "train-episodes")
        self.dropout_rng = stream(cfg.seed, "dropout")
        self.episode = 0
        self.history: List[dict] = []

    def config_snapshot(self) -> dict:
        return {"model": self.model.cfg.to_dict(), "train": asdict(self.cfg), "loss": asdict(self.loss_cfg),
                **self.extra_config}

    def rng_state(self) -> dict:
        return {"sample": self.sample_rng.bit_generator.state, "dropout": self.dropout_rng.bit_generator.state}

    def restore(self, ckpt: Checkpoint) -> None:
        self.model = ckpt.model()
        self.sample_rng.bit_generator.state = ckpt.rng_state["sample"]
        self.dropout_rng.bit_generator.state = ckpt.rng_state["dropout"]
        self.episode = ckpt.episode

    def checkpoint(self, best: Optional[float]) -> Checkpoint:
        return snapshot(self.model, self.config_snapshot(), self.rng_state(), self.episode, best, self.vocab)

    def step(self, train: IndexedDataset) -> LossBreakdown:
        cfg = self.cfg
        batches = [
            self.model.batch(train, sample_episode(train, cfg.N_train, cfg.K, cfg.R, self.sample_rng,
                                                   cfg.balanced_queries))
            for _ in range(cfg.episodes_per_step)
        ]
        bd = train_step(self.model, batches, self.loss_cfg, cfg.lr_at(self.episode), cfg.weight_decay,
                        self.dropout_rng, cfg.grad_clip)
        self.episode += 1
        return bd

    def train(self, train: IndexedDataset, val: Optional[IndexedDataset] = None,
              log_file: Optional[TextIO] = None,
              on_step: Optional[Callable[[int, LossBreakdown], None]] = None) -> Checkpoint:
        """Run up to ``max_episodes`` steps and return the best-validation checkpoint."""
        cfg = self.cfg
        if val is not None:
            overlap = set(train.relations) & set(val.relations)
            if overlap:
                raise ConfigError(f"train and validation share relations: {sorted(overlap)[:5]}")
        best = self.checkpoint(None)
        best_acc = None
        window: List[LossBreakdown] = []
        while self.episode < cfg.max_episodes:
            bd = self.step(train)
            window.append(bd)
            self.history.append({"episode": self.episode, "joint": bd.joint, "ce": bd.ce, "rep": bd.rep})
            if on_step is not None:
                on_step(self.episode, bd)
            if self.episode % cfg.val_interval == 0 or self.episode == cfg.max_episodes:
                acc = float("nan")
                if val is not None:
                    acc = validation_accuracy(self.model, val, cfg.N_eval, cfg.K, cfg.R_eval,
                                              cfg.val_episodes, cfg.seed, cfg.balanced_queries)
                line = "\t".join([
                    str(self.episode),
                    f"{np.mean([w.joint for w in window]):.6f}",
                    f"{np.mean([w.ce for w in window]):.6f}",
                    f"{np.mean([w.rep for w in window]):.6f}",
                    f"{acc:.6f}",
                ])
                window = []
                log.info(line)
                if log_file is not None:
                    log_file.write(line + "\n")
                    log_file.flush()
                if val is None or best_acc is None or acc > best_acc:
                    best_acc = None if val is None else acc
                    best = self.checkpoint(best_acc)
        return best
