"""Cross-entropy, hardest-triplet representation losses and the joint objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import core
from .core import ConfigError

VARIANTS = ("none", "jrl", "pjrl")


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    margin: float = 0.5
    alpha: float = 1.0
    variant: str = "jrl"
    reduction: str = "mean"  # mean: CE over queries, triplet hinge over anchors; sum: plain sums

    def validate(self) -> None:
        if self.margin < 0 or self.alpha < 0:
            raise ConfigError("margin and alpha must be non-negative")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"loss variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass
class Triplet:
    anchor: int
    positive: int
    negative: int
    d_pos: float
    d_neg: float
    hinge: float


@dataclass
class TripletReport:
    triplets: List[Triplet] = field(default_factory=list)
    skipped: List[int] = field(default_factory=list)

    def selections(self) -> List[Tuple[int, int, int]]:
        return [(t.anchor, t.positive, t.negative) for t in self.triplets]

    def signature(self) -> tuple:
        return tuple((t.anchor, t.positive, t.negative, t.hinge > 0) for t in self.triplets)


def cross_entropy(probs: np.ndarray, labels) -> float:
    """-sum log p(true class) from probabilities; zero probabilities are floored at the smallest normal."""
    labels = np.asarray(labels)
    p = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(p, np.finfo(probs.dtype).tiny)).sum())


def cross_entropy_from_scores(scores: np.ndarray, labels):
    """Fused, stable version; returns (loss, dscores, probs)."""
    return core.log_softmax_nll(scores, labels)


def _check_classes(labels: np.ndarray) -> None:
    if len(np.unique(labels)) < 2:
        raise LossError("triplet mining needs at least two classes in the pool")


def mine_hardest(D: np.ndarray, labels: np.ndarray):
    """Per anchor: farthest same-class index (anchor excluded) and nearest other-class index.

    Rows without a positive get -1. Ties resolve to the lowest index.
    """
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(n, dtype=bool)
    pos_mask = same & not_self
    pos = np.argmax(np.where(pos_mask, D, -np.inf), axis=1)
    pos[~pos_mask.any(axis=1)] = -1
    neg = np.argmin(np.where(~same, D, np.inf), axis=1)
    return pos, neg


def _sq(a: np.ndarray, b: np.ndarray) -> float:
    diff = a - b
    return float(diff @ diff)


def hardest_triplet_loss(emb: np.ndarray, labels, margin: float,
                         frozen: Optional[Sequence[Tuple[int, int, int]]] = None):
    """Sum over anchors of max(0, m + D(a, farthest positive) - D(a, nearest negative)).

    Every row of ``emb`` is an anchor; anchors without a same-class partner
    are skipped and reported. ``frozen`` replays a previous selection.
    Returns (loss, TripletReport).
    """
    labels = np.asarray(labels)
    _check_classes(labels)
    report = TripletReport()
    if frozen is None:
        D = core.pairwise_sq_euclidean(emb, emb)
        pos, neg = mine_hardest(D, labels)
        selection = []
        for a in range(len(labels)):
            if pos[a] < 0:
                report.skipped.append(a)
            else:
                selection.append((a, int(pos[a]), int(neg[a])))
    else:
        selection = list(frozen)
    total = 0.0
    for a, p, n in selection:
        dp, dn = _sq(emb[a], emb[p]), _sq(emb[a], emb[n])
        h = max(0.0, margin + dp - dn)
        report.triplets.append(Triplet(a, p, n, dp, dn, h))
        total += h
    return total, report


def hardest_triplet_backward(emb: np.ndarray, report: TripletReport, scale: float = 1.0) -> np.ndarray:
    demb = np.zeros_like(emb)
    for t in report.triplets:
        if t.hinge <= 0:
            continue
        a, p, n = t.anchor, t.positive, t.negative
        gp = 2 * scale * (emb[a] - emb[p])
        gn = 2 * scale * (emb[a] - emb[n])
        demb[a] += gp - gn
        demb[p] -= gp
        demb[n] += gn
    return demb


def prototype_triplet_loss(emb: np.ndarray, protos: np.ndarray, labels, margin: float,
                           frozen: Optional[Sequence[Tuple[int, int, int]]] = None):
    """Triplets whose positive is the anchor's own prototype and negative the nearest other prototype.

    Report indices for positive/negative refer to prototype rows.
    """
    labels = np.asarray(labels)
    if protos.shape[0] < 2:
        raise LossError("prototype triplets need at least two prototypes")
    if labels.size and (labels.min() < 0 or labels.max() >= protos.shape[0]):
        raise LossError("anchor label without a prototype")
    report = TripletReport()
    if frozen is None:
        D = core.pairwise_sq_euclidean(emb, protos)
        D[np.arange(len(labels)), labels] = np.inf
        neg = np.argmin(D, axis=1)
        selection = [(a, int(labels[a]), int(neg[a])) for a in range(len(labels))]
    else:
        selection = list(frozen)
    total = 0.0
    for a, p, n in selection:
        dp, dn = _sq(emb[a], protos[p]), _sq(emb[a], protos[n])
        h = max(0.0, margin + dp - dn)
        report.triplets.append(Triplet(a, p, n, dp, dn, h))
        total += h
    return total, report


def prototype_triplet_backward(emb: np.ndarray, protos: np.ndarray, report: TripletReport, scale: float = 1.0):
    demb = np.zeros_like(emb)
    dprotos = np.zeros_like(protos)
    for t in report.triplets:
        if t.hinge <= 0:
            continue
        a, p, n = t.anchor, t.positive, t.negative
        gp = 2 * scale * (emb[a] - protos[p])
        gn = 2 * scale * (emb[a] - protos[n])
        demb[a] += gp - gn
        dprotos[p] -= gp
        dprotos[n] += gn
    return demb, dprotos


def joint_loss(ce: float, rep: float, alpha: float) -> float:
    return ce + alpha * rep


@dataclass
class LossBreakdown:
    ce: float
    rep: float
    joint: float
    accuracy: float = 0.0
    report: Optional[TripletReport] = None
    lam: Optional[np.ndarray] = None

    def finite(self) -> Optional[str]:
        """Name of the first non-finite term, if any."""
        for name in ("ce", "rep", "joint"):
            if not np.isfinite(getattr(self, name)):
                return name
        return None
