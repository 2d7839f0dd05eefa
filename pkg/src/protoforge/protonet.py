"""Class prototypes, the adaptive label-vector mixture and distance-softmax classification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import core
from .core import ParamStore, ShapeError

PROJ_W, PROJ_B = "label_proj_w", "label_proj_b"
MIX_W, MIX_B = "mix_w", "mix_b"
MIX_HW, MIX_HB = "mix_hidden_w", "mix_hidden_b"


def init_label_projection(store: ParamStore, d_w: int, d_h: int, seed: int = 0) -> None:
    store.add(PROJ_W, core.glorot_uniform(core.named_rng(seed, PROJ_W), d_w, d_h))
    store.add(PROJ_B, np.zeros(d_h))


def init_mixer(store: ParamStore, d_h: int, hidden: int = 0, seed: int = 0) -> None:
    d_in = d_h
    if hidden:
        store.add(MIX_HW, core.glorot_uniform(core.named_rng(seed, MIX_HW), d_h, hidden))
        store.add(MIX_HB, np.zeros(hidden))
        d_in = hidden
    store.add(MIX_W, core.glorot_uniform(core.named_rng(seed, MIX_W), d_in, 1))
    store.add(MIX_B, np.zeros(1))


def prototypes(support: np.ndarray, N: int, K: int) -> np.ndarray:
    """Mean of each class's K support vectors; ``support`` is class-major (N*K, d_h)."""
    if support.shape[0] != N * K:
        raise ShapeError(f"expected {N}x{K}={N * K} support vectors, got {support.shape[0]}")
    # summing each coordinate in sorted order makes the mean exactly independent of support order
    return np.sort(support.reshape(N, K, -1), axis=1).mean(axis=1)


def prototypes_backward(dP: np.ndarray, K: int) -> np.ndarray:
    return np.repeat(dP / K, K, axis=0)


def label_vectors(store: ParamStore, label_ids: Sequence[np.ndarray], words: str = "word_emb"):
    """Mean label-word embedding per class, projected from d_w to d_h.

    Returns (c, mean_embeddings).
    """
    table = store[words]
    M = np.stack([core.embedding_lookup(table, ids).mean(axis=0) for ids in label_ids])
    return core.linear(M, store[PROJ_W], store[PROJ_B]), M


def label_vectors_backward(dc: np.ndarray, M: np.ndarray, label_ids: Sequence[np.ndarray], store: ParamStore,
                           words: str = "word_emb", word_grads: bool = True) -> None:
    dM, dW, db = core.linear_backward(dc, M, store[PROJ_W])
    store.accumulate(PROJ_W, dW)
    store.accumulate(PROJ_B, db)
    if word_grads and store.entry(words).trainable:
        n_rows = store[words].shape[0]
        dtable = np.zeros_like(store[words])
        for i, ids in enumerate(label_ids):
            rows = np.broadcast_to(dM[i] / len(ids), (len(ids), dM.shape[1]))
            dtable += core.embedding_lookup_backward(rows, ids, n_rows)
        store.accumulate(words, dtable)


@dataclass
class PrototypeSet:
    base: np.ndarray  # p, (N, d_h)
    label: Optional[np.ndarray]  # c, (N, d_h)
    lam: np.ndarray  # (N,)
    adapted: np.ndarray  # p', (N, d_h)
    logits: Optional[np.ndarray] = None  # h(c) before the sigmoid
    hidden: Optional[np.ndarray] = None  # pre-activation of the optional hidden layer
    forced: bool = False


def mixing_logits(store: ParamStore, c: np.ndarray):
    hidden = None
    x = c
    if MIX_HW in store:
        hidden = core.linear(c, store[MIX_HW], store[MIX_HB])
        x = core.relu(hidden)
    return core.linear(x, store[MIX_W], store[MIX_B])[:, 0], hidden


def mix(p: np.ndarray, c: np.ndarray, store: ParamStore, force_lambda: Optional[float] = None) -> PrototypeSet:
    """p'_i = lam_i * p_i + (1 - lam_i) * c_i with lam_i = sigmoid(h(c_i))."""
    if p.shape != c.shape:
        raise ShapeError(f"prototype shape {p.shape} does not match label vector shape {c.shape}")
    if force_lambda is not None:
        lam = np.full(p.shape[0], force_lambda, dtype=p.dtype)
        logits = hidden = None
    else:
        logits, hidden = mixing_logits(store, c)
        lam = core.sigmoid(logits).astype(p.dtype, copy=False)
    adapted = lam[:, None] * p + (1 - lam[:, None]) * c
    return PrototypeSet(p, c, lam, adapted, logits, hidden, force_lambda is not None)


def mix_backward(dadapted: np.ndarray, ps: PrototypeSet, store: ParamStore):
    """Returns (dp, dc) and accumulates the mixing-network gradients."""
    lam = ps.lam[:, None]
    dp = lam * dadapted
    dc = (1 - lam) * dadapted
    if ps.forced:
        return dp, dc
    dlam = (dadapted * (ps.base - ps.label)).sum(axis=1)
    dz = core.sigmoid_backward(dlam, ps.lam)[:, None]
    x = ps.label if ps.hidden is None else core.relu(ps.hidden)
    dx, dW, db = core.linear_backward(dz, x, store[MIX_W])
    store.accumulate(MIX_W, dW)
    store.accumulate(MIX_B, db)
    if ps.hidden is not None:
        dh = core.relu_backward(dx, ps.hidden)
        dx, dW, db = core.linear_backward(dh, ps.label, store[MIX_HW])
        store.accumulate(MIX_HW, dW)
        store.accumulate(MIX_HB, db)
    return dp, dc + dx


def distances(queries: np.ndarray, protos: np.ndarray, squared: bool = True) -> np.ndarray:
    D = core.pairwise_sq_euclidean(queries, protos)
    return D if squared else np.sqrt(D)


def distances_backward(dD: np.ndarray, queries: np.ndarray, protos: np.ndarray, D: np.ndarray, squared: bool = True):
    if not squared:
        # sqrt is not differentiable at 0; treat that point's gradient as 0
        safe = np.where(D > 0, D, 1)
        dD = np.where(D > 0, dD / (2 * safe), 0)
    return core.pairwise_sq_euclidean_backward(dD, queries, protos)


def classify(queries: np.ndarray, protos: np.ndarray, squared: bool = True) -> np.ndarray:
    """Softmax over negative distances to each prototype, (R, N)."""
    return np.exp(core.log_softmax(-distances(queries, protos, squared)))
