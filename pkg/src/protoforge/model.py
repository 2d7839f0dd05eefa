"""Episode-level forward/backward for prototypical networks and their adaptive variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import encoder as enc
from . import losses, protonet
from .core import ConfigError, ParamStore
from .data import Episode, IndexedDataset
from .encoder import EncoderConfig
from .losses import LossBreakdown, LossConfig

MODEL_VARIANTS = ("pronet", "apn-lw", "apn-ld")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    variant: str = "apn-lw"
    force_lambda: Optional[float] = None
    mixer_hidden: int = 0
    squared_distance: bool = True
    freeze_label_words: bool = False  # stop label-word gradients reaching the word table
    n_positions: int = 81
    seed: int = 0

    def validate(self) -> None:
        self.encoder.validate()
        if self.variant not in MODEL_VARIANTS:
            raise ConfigError(f"model variant must be one of {MODEL_VARIANTS}, got {self.variant!r}")
        if self.force_lambda is not None and not 0.0 <= self.force_lambda <= 1.0:
            raise ConfigError("force_lambda must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        return cls(**d)


@dataclass
class EpisodeBatch:
    word_ids: np.ndarray  # (N*K + R [+ N descriptions], T)
    head_pos: np.ndarray
    tail_pos: np.ndarray
    N: int
    K: int
    R: int
    query_labels: np.ndarray
    label_ids: List[np.ndarray]

    @property
    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.N), self.K)


def make_batch(data: IndexedDataset, ep: Episode, descriptions: bool = False) -> EpisodeBatch:
    refs = ep.support + ep.query
    words = [data.relations[r].word_ids[i] for r, i in refs]
    head = [data.relations[r].head_pos[i] for r, i in refs]
    tail = [data.relations[r].tail_pos[i] for r, i in refs]
    if descriptions:
        # descriptions carry no entities; position index 0 everywhere
        for r in ep.relations:
            words.append(data.relations[r].desc_ids)
            head.append(np.zeros(data.T, dtype=np.int64))
            tail.append(np.zeros(data.T, dtype=np.int64))
    return EpisodeBatch(
        np.stack(words), np.stack(head), np.stack(tail), ep.N, ep.K, len(ep.query),
        np.asarray(ep.query_labels, dtype=np.int64),
        [data.relations[r].label_ids for r in ep.relations],
    )


@dataclass
class _Cache:
    batch: EpisodeBatch
    X: np.ndarray
    enc: enc.EncodeCache
    ps: Optional[protonet.PrototypeSet]
    M: Optional[np.ndarray]
    protos: np.ndarray
    D: np.ndarray
    dscores: np.ndarray
    report: Optional[losses.TripletReport]
    loss_cfg: LossConfig
    rep_scale: float = 1.0

    def signature(self) -> tuple:
        sig = self.enc.signature()
        if self.report is not None:
            sig += (self.report.signature(),)
        if self.ps is not None and self.ps.hidden is not None:
            sig += ((self.ps.hidden > 0).tobytes(),)
        return sig


class Model:
    def __init__(self, cfg: ModelConfig, store: ParamStore):
        cfg.validate()
        self.cfg = cfg
        self.store = store

    @classmethod
    def create(cls, cfg: ModelConfig, word_table: np.ndarray, dtype=np.float32) -> "Model":
        cfg.validate()
        store = ParamStore(dtype)
        enc.init_encoder(store, cfg.encoder, word_table, cfg.n_positions, cfg.seed)
        if cfg.variant == "apn-lw":
            protonet.init_label_projection(store, cfg.encoder.d_w, cfg.encoder.d_h, cfg.seed)
        if cfg.variant != "pronet":
            protonet.init_mixer(store, cfg.encoder.d_h, cfg.mixer_hidden, cfg.seed)
        return cls(cfg, store)

    @property
    def uses_descriptions(self) -> bool:
        return self.cfg.variant == "apn-ld"

    def batch(self, data: IndexedDataset, ep: Episode) -> EpisodeBatch:
        return make_batch(data, ep, self.uses_descriptions)

    def prototypes(self, X: np.ndarray, b: EpisodeBatch):
        p = protonet.prototypes(X[:b.N * b.K], b.N, b.K)
        if self.cfg.variant == "pronet":
            return p, None, None
        if self.cfg.variant == "apn-lw":
            c, M = protonet.label_vectors(self.store, b.label_ids)
        else:
            c, M = X[b.N * b.K + b.R:], None
        ps = protonet.mix(p, c, self.store, self.cfg.force_lambda)
        return ps.adapted, ps, M

    def predict(self, b: EpisodeBatch) -> np.ndarray:
        """Eval-mode class probabilities for the queries, (R, N)."""
        X, _ = enc.encode(self.store, self.cfg.encoder, b.word_ids, b.head_pos, b.tail_pos, train=False)
        protos, _, _ = self.prototypes(X, b)
        Q = X[b.N * b.K:b.N * b.K + b.R]
        return protonet.classify(Q, protos, self.cfg.squared_distance)

    def forward(self, b: EpisodeBatch, loss_cfg: LossConfig, train: bool = True,
                rng: Optional[np.random.Generator] = None, frozen=None):
        """Joint loss for one episode. Returns (LossBreakdown, cache for backward)."""
        NK, R = b.N * b.K, b.R
        if R < 1:
            raise ConfigError("an episode needs at least one query to compute the loss")
        X, ecache = enc.encode(self.store, self.cfg.encoder, b.word_ids, b.head_pos, b.tail_pos, train, rng)
        protos, ps, M = self.prototypes(X, b)
        Q = X[NK:NK + R]
        D = protonet.distances(Q, protos, self.cfg.squared_distance)
        ce, dscores, probs = losses.cross_entropy_from_scores(-D, b.query_labels)
        ce_scale = 1.0 / R if loss_cfg.reduction == "mean" else 1.0
        ce *= ce_scale
        dscores *= ce_scale
        rep, report, rep_scale = 0.0, None, 1.0
        if loss_cfg.variant != "none":
            pool = X[:NK + R]
            labels = np.concatenate([b.support_labels, b.query_labels])
            if loss_cfg.variant == "jrl":
                rep, report = losses.hardest_triplet_loss(pool, labels, loss_cfg.margin, frozen)
            else:
                rep, report = losses.prototype_triplet_loss(pool, protos, labels, loss_cfg.margin, frozen)
            if loss_cfg.reduction == "mean" and report.triplets:
                rep_scale = 1.0 / len(report.triplets)
            rep *= rep_scale
        acc = float((probs.argmax(axis=1) == b.query_labels).mean())
        bd = LossBreakdown(ce, rep, losses.joint_loss(ce, rep, loss_cfg.alpha), acc, report,
                           None if ps is None else ps.lam)
        return bd, _Cache(b, X, ecache, ps, M, protos, D, dscores, report, loss_cfg, rep_scale)

    def backward(self, cache: _Cache) -> None:
        """Accumulate parameter gradients of the joint loss into the store."""
        b, X, cfg = cache.batch, cache.X, cache.loss_cfg
        NK, R = b.N * b.K, b.R
        dX = np.zeros_like(X)
        Q = X[NK:NK + R]
        dQ, dprotos = protonet.distances_backward(-cache.dscores, Q, cache.protos, cache.D,
                                                  self.cfg.squared_distance)
        dX[NK:NK + R] += dQ
        if cache.report is not None and cfg.alpha != 0:
            pool = X[:NK + R]
            if cfg.variant == "jrl":
                dX[:NK + R] += losses.hardest_triplet_backward(pool, cache.report, cfg.alpha * cache.rep_scale)
            else:
                dpool, dp2 = losses.prototype_triplet_backward(pool, cache.protos, cache.report,
                                                                cfg.alpha * cache.rep_scale)
                dX[:NK + R] += dpool
                dprotos = dprotos + dp2
        if cache.ps is None:
            dp = dprotos
        else:
            dp, dc = protonet.mix_backward(dprotos, cache.ps, self.store)
            if self.cfg.variant == "apn-lw":
                protonet.label_vectors_backward(dc, cache.M, b.label_ids, self.store,
                                                word_grads=not self.cfg.freeze_label_words)
            else:
                dX[NK + R:] += dc
        dX[:NK] += protonet.prototypes_backward(dp, b.K)
        enc.encode_backward(dX, cache.enc, self.store, self.cfg.encoder)

    def loss_and_grad(self, b: EpisodeBatch, loss_cfg: LossConfig, train: bool = True,
                      rng: Optional[np.random.Generator] = None, frozen=None):
        self.store.zero_grad()
        bd, cache = self.forward(b, loss_cfg, train, rng, frozen)
        self.backward(cache)
        return bd, cache
