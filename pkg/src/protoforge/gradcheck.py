"""Gradient checks of the full model on a fixed toy episode."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import core, losses, protonet
from . import encoder as enc
from .core import ConfigError, GradCheckResult, ParamStore
from .data import IndexedDataset, make_synthetic, sample_episode
from .encoder import EncoderConfig
from .losses import LossConfig
from .model import EpisodeBatch, Model, ModelConfig

SCOPES = ("encoder", "protonet", "losses", "all")
ENCODER_PARAMS = (enc.WORDS, enc.POS_HEAD, enc.POS_TAIL, enc.CONV_W, enc.CONV_B)


@dataclass
class ToyEpisode:
    model: Model
    batch: EpisodeBatch
    loss_cfg: LossConfig


def toy_episode(variant: str = "apn-lw", loss: str = "jrl", N: int = 3, K: int = 2, R: int = 3,
                vocab_size: int = 50, d_w: int = 8, d_p: int = 2, d_h: int = 16, T: int = 10,
                seed: int = 0, mixer_hidden: int = 0, margin: float = 0.5, alpha: float = 1.0) -> ToyEpisode:
    """A small float64 model and one fixed N-way K-shot batch. ``vocab_size`` counts every row."""
    rng = np.random.default_rng(seed)
    # the generator adds PAD, UNK and two entity tokens to its word list
    ds, vocab, table = make_synthetic(N, K + R, vocab_size - 4, 2, 0.0, rng, d_w=d_w, signal_slots=2,
                                      length=T - 2, embedding_scale=0.5)
    data = IndexedDataset(ds, vocab, T=T)
    ecfg = EncoderConfig(d_w=d_w, d_p=d_p, d_h=d_h, T=T)
    mcfg = ModelConfig(encoder=ecfg, variant=variant, mixer_hidden=mixer_hidden,
                       n_positions=data.n_positions, seed=seed)
    model = Model.create(mcfg, table, dtype=np.float64)
    ep = sample_episode(data, N, K, R, rng, balanced=R % N == 0)
    return ToyEpisode(model, model.batch(data, ep), LossConfig(margin=margin, alpha=alpha, variant=loss))


def scope_params(store: ParamStore, scope: str) -> List[str]:
    if scope == "all":
        return store.names()
    if scope == "encoder":
        return [n for n in ENCODER_PARAMS if n in store]
    if scope == "protonet":
        return [n for n in store.names() if n not in ENCODER_PARAMS]
    raise ConfigError(f"unknown gradcheck scope {scope!r}; expected one of {SCOPES}")


def check_model(toy: ToyEpisode, scope: str = "all", frozen: bool = False, eps: float = 1e-3,
                tol: float = 1e-4, coords_per_param: int = 100, seed: int = 0) -> Dict[str, GradCheckResult]:
    """Joint-loss gradient check over one parameter scope.

    Dropout stays on with a mask that is redrawn identically on every call.
    ``frozen`` replays the base point's triplet selection.
    """
    model, batch, lcfg = toy.model, toy.batch, toy.loss_cfg
    if scope == "losses":
        return check_losses(model, batch, lcfg, frozen, eps, tol, coords_per_param, seed)
    selection = None
    if frozen and lcfg.variant != "none":
        bd, _ = model.forward(batch, lcfg, True, core.named_rng(seed, "dropout"))
        selection = bd.report.selections()

    def loss_fn(store):
        bd, cache = model.loss_and_grad(batch, lcfg, True, core.named_rng(seed, "dropout"), selection)
        return bd.joint, cache.signature()

    names = scope_params(model.store, scope)
    return core.grad_check(loss_fn, model.store, eps, tol, coords_per_param, names, seed)


def check_losses(model: Model, batch: EpisodeBatch, lcfg: LossConfig, frozen: bool = False, eps: float = 1e-3,
                 tol: float = 1e-4, coords_per_param: int = 100, seed: int = 0) -> Dict[str, GradCheckResult]:
    """Check the loss layer alone: CE, JRL and PJRL gradients w.r.t. encoded vectors and prototypes."""
    X, _ = enc.encode(model.store, model.cfg.encoder, batch.word_ids, batch.head_pos, batch.tail_pos)
    NK, R = batch.N * batch.K, batch.R
    store = ParamStore(np.float64)
    store.add("pool", X[:NK + R])
    store.add("protos", protonet.prototypes(X[:NK], batch.N, batch.K))
    labels = np.concatenate([batch.support_labels, batch.query_labels])
    m, alpha = lcfg.margin, lcfg.alpha
    sel_j = sel_p = None
    if frozen:
        sel_j = losses.hardest_triplet_loss(store["pool"], labels, m)[1].selections()
        sel_p = losses.prototype_triplet_loss(store["pool"], store["protos"], labels, m)[1].selections()

    def loss_fn(params):
        params.zero_grad()
        pool, protos = params["pool"], params["protos"]
        Q = pool[NK:]
        D = protonet.distances(Q, protos)
        ce, dscores, _ = losses.cross_entropy_from_scores(-D, batch.query_labels)
        dQ, dP = protonet.distances_backward(-dscores, Q, protos, D)
        j, rj = losses.hardest_triplet_loss(pool, labels, m, sel_j)
        p, rp = losses.prototype_triplet_loss(pool, protos, labels, m, sel_p)
        dpool = losses.hardest_triplet_backward(pool, rj, alpha)
        dpool2, dP2 = losses.prototype_triplet_backward(pool, protos, rp, alpha)
        dpool[NK:] += dQ
        params.accumulate("pool", dpool + dpool2)
        params.accumulate("protos", dP + dP2)
        return ce + alpha * (j + p), (rj.signature(), rp.signature())

    return core.grad_check(loss_fn, store, eps, tol, coords_per_param, None, seed)


def format_results(results: Dict[str, GradCheckResult], tol: float) -> str:
    width = max([len("parameter")] + [len(n) for n in results])
    lines = [f"{'parameter':<{width}}  {'max rel err':>11}  checked  excluded  status"]
    for name, r in results.items():
        status = "ok" if r.passed(tol) else "FAIL"
        line = f"{name:<{width}}  {r.max_rel_error:11.3e}  {r.checked:7d}  {r.excluded:8d}  {status}"
        if not r.passed(tol):
            line += f"  worst {r.worst_index}: analytic {r.worst[0]:.6e} numeric {r.worst[1]:.6e}"
        lines.append(line)
    return "\n".join(lines)
