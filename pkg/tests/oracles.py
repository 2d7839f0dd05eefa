"""Slow, loop-based reference implementations used as test oracles."""

import numpy as np


def sq_dist(a, b):
    return float(sum((x - y) ** 2 for x, y in zip(a, b)))


def brute_hardest(emb, labels, margin):
    """Exhaustive O(n^2) scan: farthest same-class, nearest other-class, lowest index on ties."""
    n = len(labels)
    sel, total, skipped = [], 0.0, []
    for a in range(n):
        best_p, best_pd = None, None
        best_n, best_nd = None, None
        for j in range(n):
            if j == a:
                continue
            d = sq_dist(emb[a], emb[j])
            if labels[j] == labels[a]:
                if best_pd is None or d > best_pd:
                    best_p, best_pd = j, d
            else:
                if best_nd is None or d < best_nd:
                    best_n, best_nd = j, d
        if best_p is None:
            skipped.append(a)
            continue
        sel.append((a, best_p, best_n))
        total += max(0.0, margin + best_pd - best_nd)
    return sel, total, skipped


def brute_prototype(emb, protos, labels, margin):
    sel, total = [], 0.0
    for a in range(len(labels)):
        y = int(labels[a])
        best_n, best_nd = None, None
        for j in range(len(protos)):
            if j == y:
                continue
            d = sq_dist(emb[a], protos[j])
            if best_nd is None or d < best_nd:
                best_n, best_nd = j, d
        sel.append((a, y, best_n))
        total += max(0.0, margin + sq_dist(emb[a], protos[y]) - best_nd)
    return sel, total


def random_pool(rng, n, n_classes, d=4, integer=True):
    """Pool with every class present; integer coordinates make distance ties common and exact."""
    labels = np.concatenate([np.arange(n_classes), rng.integers(0, n_classes, n - n_classes)])
    rng.shuffle(labels)
    if integer:
        emb = rng.integers(-2, 3, size=(n, d)).astype(float)
    else:
        emb = rng.normal(size=(n, d))
    return emb, labels
