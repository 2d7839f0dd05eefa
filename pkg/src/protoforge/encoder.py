"""CNN sentence encoder: word + two position embeddings -> conv -> max-over-time."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import core
from .core import ConfigError, ParamStore

WORDS, POS_HEAD, POS_TAIL, CONV_W, CONV_B = "word_emb", "pos_head", "pos_tail", "conv_w", "conv_b"


@dataclass
class EncoderConfig:
    d_w: int = 50
    d_p: int = 5
    d_h: int = 230
    u: int = 3
    T: int = 40
    dropout: float = 0.2
    relu: bool = True  # rectifier after pooling; False gives the bare conv + max pipeline
    freeze_words: bool = False
    position_init: float = 0.1

    @property
    def d(self) -> int:
        return self.d_w + 2 * self.d_p

    def validate(self) -> None:
        if self.u < 1 or self.u % 2 == 0:
            raise ConfigError(f"window size u must be odd, got {self.u}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        for k in ("d_w", "d_p", "d_h", "T"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def init_encoder(store: ParamStore, cfg: EncoderConfig, word_table: np.ndarray, n_positions: int,
                 seed: int = 0) -> None:
    cfg.validate()
    if word_table.shape[1] != cfg.d_w:
        raise ConfigError(f"word table has width {word_table.shape[1]}, config says d_w={cfg.d_w}")
    store.add(WORDS, word_table, trainable=not cfg.freeze_words)
    a = cfg.position_init
    store.add(POS_HEAD, core.named_rng(seed, POS_HEAD).uniform(-a, a, (n_positions, cfg.d_p)))
    store.add(POS_TAIL, core.named_rng(seed, POS_TAIL).uniform(-a, a, (n_positions, cfg.d_p)))
    fan_in = cfg.u * cfg.d
    store.add(CONV_W, core.glorot_uniform(core.named_rng(seed, CONV_W), fan_in, cfg.d_h))
    store.add(CONV_B, np.zeros(cfg.d_h))


def embed(store: ParamStore, word_ids: np.ndarray, head_pos: np.ndarray, tail_pos: np.ndarray) -> np.ndarray:
    """(B, T) index arrays -> (B, T, d_w + 2 d_p)."""
    return np.concatenate([
        core.embedding_lookup(store[WORDS], word_ids),
        core.embedding_lookup(store[POS_HEAD], head_pos),
        core.embedding_lookup(store[POS_TAIL], tail_pos),
    ], axis=-1)


def embed_backward(dE: np.ndarray, word_ids, head_pos, tail_pos, store: ParamStore) -> None:
    d_w = store[WORDS].shape[1]
    d_p = store[POS_HEAD].shape[1]
    if store.entry(WORDS).trainable:
        store.accumulate(WORDS, core.embedding_lookup_backward(dE[..., :d_w], word_ids, store[WORDS].shape[0]))
    store.accumulate(POS_HEAD, core.embedding_lookup_backward(
        dE[..., d_w:d_w + d_p], head_pos, store[POS_HEAD].shape[0]))
    store.accumulate(POS_TAIL, core.embedding_lookup_backward(
        dE[..., d_w + d_p:], tail_pos, store[POS_TAIL].shape[0]))


@dataclass
class EncodeCache:
    word_ids: np.ndarray
    head_pos: np.ndarray
    tail_pos: np.ndarray
    cols: np.ndarray
    argmax: np.ndarray
    pooled: np.ndarray
    mask: Optional[np.ndarray]

    def signature(self) -> tuple:
        return (self.argmax.tobytes(), (self.pooled > 0).tobytes())


def encode(store: ParamStore, cfg: EncoderConfig, word_ids, head_pos, tail_pos, train: bool = False,
           rng: Optional[np.random.Generator] = None):
    """Encode a batch of indexed sentences into (B, d_h) vectors."""
    word_ids, head_pos, tail_pos = (np.atleast_2d(np.asarray(a)) for a in (word_ids, head_pos, tail_pos))
    E = embed(store, word_ids, head_pos, tail_pos)
    H, cols = core.conv1d_same(E, store[CONV_W], store[CONV_B], cfg.u)
    pooled, argmax = core.max_over_time(H)
    out = core.relu(pooled) if cfg.relu else pooled
    out, mask = core.dropout(out, cfg.dropout, train, rng)
    return out, EncodeCache(word_ids, head_pos, tail_pos, cols, argmax, pooled, mask)


def encode_backward(dout: np.ndarray, cache: EncodeCache, store: ParamStore, cfg: EncoderConfig) -> None:
    d = core.dropout_backward(dout, cache.mask)
    if cfg.relu:
        d = core.relu_backward(d, cache.pooled)
    dH = core.max_over_time_backward(d, cache.argmax, cache.cols.shape[1])
    dE, dK, db = core.conv1d_same_backward(dH, cache.cols, store[CONV_W], cfg.u)
    store.accumulate(CONV_W, dK)
    store.accumulate(CONV_B, db)
    embed_backward(dE, cache.word_ids, cache.head_pos, cache.tail_pos, store)
