"""N-way K-shot accuracy over sampled test episodes, and ranking of variant reports."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from . import core
from .core import ConfigError
from .data import Episode, IndexedDataset, sample_episode


class ComparisonError(ValueError):
    pass


def episode_accuracy(model, data: IndexedDataset, ep: Episode) -> Tuple[float, np.ndarray]:
    """Accuracy on one episode's queries and the predicted class indices."""
    probs = model.predict(model.batch(data, ep))
    pred = probs.argmax(axis=1)
    return float((pred == ep.query_labels).mean()), pred


@dataclass
class EvalReport:
    N: int
    K: int
    R: int
    episodes: int
    mean: float
    std: float  # across seeds
    seeds: List[int]
    per_seed: List[float]
    episode_std: float  # spread of single-episode accuracy, pooled over seeds
    confusion: Dict[str, Dict[str, int]] = field(default_factory=dict)
    name: str = ""

    @property
    def total_queries(self) -> int:
        return sum(sum(row.values()) for row in self.confusion.values())

    def stderr(self) -> float:
        """Standard error of ``mean`` from the per-episode spread."""
        return self.episode_std / np.sqrt(self.episodes * len(self.seeds))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def table(self) -> str:
        return (f"{self.N}-way {self.K}-shot ({self.R} queries, {self.episodes} episodes x {len(self.seeds)} seeds)\n"
                f"accuracy  {100 * self.mean:6.2f} +- {100 * self.std:.2f}\n"
                + "\n".join(f"  seed {s:<6d} {100 * a:6.2f}" for s, a in zip(self.seeds, self.per_seed)))


def evaluate(model, data: IndexedDataset, N: int, K: int, R: int, episodes: int = 2000,
             seeds: Sequence[int] = tuple(range(10)), balanced: bool = False, name: str = "") -> EvalReport:
    """Mean accuracy across seeds; each seed draws its own ``episodes`` episodes."""
    if len(data.relations) < N:
        raise ConfigError(f"need {N} relations, test data has {len(data.relations)}")
    confusion: Dict[str, Dict[str, int]] = defaultdict(lambda: defaultdict(int))
    per_seed, all_eps = [], []
    for seed in seeds:
        rng = core.named_rng(seed, "evaluation")
        correct = total = 0
        for _ in range(episodes):
            ep = sample_episode(data, N, K, R, rng, balanced)
            acc, pred = episode_accuracy(model, data, ep)
            all_eps.append(acc)
            correct += int((pred == ep.query_labels).sum())
            total += len(pred)
            for y, p in zip(ep.query_labels, pred):
                confusion[ep.relations[int(y)]][ep.relations[int(p)]] += 1
        per_seed.append(correct / total)
    std = float(np.std(per_seed, ddof=1)) if len(per_seed) > 1 else 0.0
    conf = {t: dict(sorted(row.items())) for t, row in sorted(confusion.items())}
    return EvalReport(N, K, R, episodes, float(np.mean(per_seed)), std, list(seeds), per_seed,
                      float(np.std(all_eps)), conf, name)


def compare(reports: Mapping[str, EvalReport]) -> List[Tuple[str, float, float]]:
    """Rows (name, mean, std) sorted by mean accuracy, best first; ties keep name order."""
    if not reports:
        return []
    settings = {(r.N, r.K, r.R) for r in reports.values()}
    if len(settings) > 1:
        raise ComparisonError(f"reports use different (N, K, R) settings: {sorted(settings)}")
    rows = sorted(((name, r.mean, r.std) for name, r in reports.items()), key=lambda x: x[0])
    return sorted(rows, key=lambda x: -x[1])


def format_table(rows: Sequence[Tuple[str, float, float]]) -> str:
    width = max([len("model")] + [len(r[0]) for r in rows])
    lines = [f"{'model':<{width}}  accuracy (%)"]
    lines += [f"{name:<{width}}  {100 * m:6.2f} +- {100 * s:.2f}" for name, m, s in rows]
    return "\n".join(lines)
