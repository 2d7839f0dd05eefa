"""Vocabulary/embedding loading, FewRel-style datasets, indexing with
relative-position features, episode sampling and synthetic data."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import ConfigError

log = logging.getLogger(__name__)

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"


class ParseError(ValueError):
    pass


class DatasetError(ValueError):
    pass


class SamplingError(ValueError):
    pass


class TruncationError(ValueError):
    """Raised when cutting a sentence to the max length would drop an entity."""


class Vocabulary:
    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: List[str] = [PAD_TOKEN, UNK_TOKEN]
        self.stoi: Dict[str, int] = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        token = token.lower()
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.stoi

    def lookup(self, token: str) -> int:
        return self.stoi.get(token.lower(), UNK)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.lookup(t) for t in tokens]

    def tokens(self) -> List[str]:
        """Content tokens, excluding PAD and UNK."""
        return self.itos[2:]


def unk_row(d_w: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x554E4B])
    return rng.uniform(-0.5 / d_w, 0.5 / d_w, size=d_w)


def load_embeddings(path, dim: Optional[int] = None, seed: int = 0) -> Tuple[Vocabulary, np.ndarray]:
    """Read a GloVe-style text file (``token v1 ... v_dw`` per line).

    Rows 0 and 1 are PAD (zeros) and UNK (seeded uniform in +-0.5/d_w). Tokens
    are lowercased; later duplicates after lowercasing are ignored.
    """
    vocab = Vocabulary()
    rows: List[np.ndarray] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if not parts or parts == [""]:
                continue
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise ParseError(f"{path}:{lineno}: no vector values")
            if len(values) != dim:
                raise ParseError(f"{path}:{lineno}: expected {dim} values, found {len(values)}")
            try:
                vec = np.array([float(v) for v in values])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if token.lower() in vocab:
                continue
            vocab.add(token)
            rows.append(vec)
    if not rows:
        raise ParseError(f"{path}: empty embedding file")
    table = np.zeros((len(vocab), dim))
    table[UNK] = unk_row(dim, seed)
    table[2:] = np.stack(rows)
    return vocab, table


def save_embeddings(path, vocab: Vocabulary, table: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, tok in enumerate(vocab.itos[2:], start=2):
            fh.write(tok + " " + " ".join(repr(float(v)) for v in table[i]) + "\n")


# ---------------------------------------------------------------------------
# instances and datasets
# ---------------------------------------------------------------------------


@dataclass
class Instance:
    tokens: List[str]
    relation: str
    head: Tuple[int, int]  # inclusive token span
    tail: Tuple[int, int]
    head_text: str = ""
    tail_text: str = ""
    head_id: str = ""
    tail_id: str = ""

    def __post_init__(self):
        n = len(self.tokens)
        for name, (s, e) in (("head", self.head), ("tail", self.tail)):
            if not (0 <= s <= e < n):
                raise DatasetError(f"{name} span {(s, e)} outside sentence of {n} tokens")


@dataclass
class RelationInfo:
    relation: str
    label_words: List[str]
    description: List[str] = field(default_factory=list)


@dataclass
class Dataset:
    instances: Dict[str, List[Instance]]
    relations: Dict[str, RelationInfo]
    skipped: int = 0

    def relation_ids(self) -> List[str]:
        return sorted(self.instances)

    def sizes(self) -> Dict[str, int]:
        return {r: len(v) for r, v in self.instances.items()}

    def __len__(self) -> int:
        return sum(len(v) for v in self.instances.values())


def _parse_entity(ent) -> Tuple[str, str, Tuple[int, int]]:
    if not isinstance(ent, (list, tuple)) or len(ent) < 3 or not ent[2] or not ent[2][0]:
        raise DatasetError("entity without token positions")
    span = [int(i) for i in ent[2][0]]
    return str(ent[0]), str(ent[1]), (min(span), max(span))


def _label_info(rel: str, entry) -> RelationInfo:
    if isinstance(entry, dict):
        words = entry.get("label_words") or entry.get("name") or ""
        desc = entry.get("description") or ""
    else:
        words = entry[0]
        desc = entry[1] if len(entry) > 1 else ""
    words_l = str(words).split()
    if not words_l:
        raise DatasetError(f"relation {rel} has no label words")
    return RelationInfo(rel, words_l, str(desc).split())


def load_fewrel(path, names_path=None) -> Dataset:
    """Load the FewRel interchange layout: ``{relation: [{tokens, h, t}, ...]}``.

    ``h``/``t`` are ``[surface, entity_id, [[token indices], ...]]``; the first
    index list is the span. Records without tokens or positions are skipped
    and counted. The optional name table maps relation id to
    ``[label words, description]`` (or a dict with those keys); relations
    missing from it fall back to their id as the single label word.
    """
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    names = {}
    if names_path is not None:
        with open(names_path, encoding="utf-8") as fh:
            names = json.load(fh)
    instances: Dict[str, List[Instance]] = {}
    skipped = 0
    for rel in sorted(raw):
        kept = []
        for k, rec in enumerate(raw[rel]):
            try:
                tokens = [str(t) for t in rec.get("tokens") or []]
                if not tokens:
                    raise DatasetError("empty token list")
                hs, hid, hspan = _parse_entity(rec.get("h"))
                ts, tid, tspan = _parse_entity(rec.get("t"))
                kept.append(Instance(tokens, rel, hspan, tspan, hs, ts, hid, tid))
            except (DatasetError, TypeError, ValueError, IndexError) as exc:
                skipped += 1
                log.warning("skipping %s record %d: %s", rel, k, exc)
        if len(kept) < 2:
            raise DatasetError(f"relation {rel} has {len(kept)} usable instances, need at least 2")
        instances[rel] = kept
    relations = {
        rel: _label_info(rel, names[rel]) if rel in names else RelationInfo(rel, [rel])
        for rel in instances
    }
    if skipped:
        log.warning("%s: skipped %d records", path, skipped)
    return Dataset(instances, relations, skipped)


def dataset_to_json(ds: Dataset) -> Tuple[dict, dict]:
    data = {}
    for rel in ds.relation_ids():
        recs = []
        for inst in ds.instances[rel]:
            recs.append({
                "tokens": list(inst.tokens),
                "h": [inst.head_text, inst.head_id, [list(range(inst.head[0], inst.head[1] + 1))]],
                "t": [inst.tail_text, inst.tail_id, [list(range(inst.tail[0], inst.tail[1] + 1))]],
            })
        data[rel] = recs
    names = {
        rel: [" ".join(info.label_words), " ".join(info.description)]
        for rel, info in sorted(ds.relations.items())
    }
    return data, names


def save_fewrel(ds: Dataset, path, names_path=None) -> None:
    data, names = dataset_to_json(ds)
    Path(path).write_text(json.dumps(data, sort_keys=True) + "\n", encoding="utf-8")
    if names_path is not None:
        Path(names_path).write_text(json.dumps(names, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------


@dataclass
class IndexedInstance:
    word_ids: np.ndarray
    head_pos: np.ndarray
    tail_pos: np.ndarray
    length: int


def relative_positions(T: int, span: Tuple[int, int], max_rel: int, mode: str = "start") -> np.ndarray:
    i = np.arange(T)
    if mode == "start":
        rel = i - span[0]
    elif mode == "nearest":
        rel = np.where(i < span[0], i - span[0], np.where(i > span[1], i - span[1], 0))
    else:
        raise ConfigError(f"unknown position mode {mode!r}")
    return np.clip(rel, -max_rel, max_rel) + max_rel


def index_instance(inst: Instance, vocab: Vocabulary, T: int = 40, max_rel: int = 40,
                   position_mode: str = "start") -> IndexedInstance:
    """Token ids padded/truncated to ``T`` plus clipped head/tail relative positions in [0, 2*max_rel]."""
    if inst.head[1] >= T or inst.tail[1] >= T:
        raise TruncationError(f"entity span beyond max length {T}")
    ids = vocab.encode(inst.tokens[:T])
    length = len(ids)
    ids = np.array(ids + [PAD] * (T - length), dtype=np.int64)
    return IndexedInstance(
        ids,
        relative_positions(T, inst.head, max_rel, position_mode),
        relative_positions(T, inst.tail, max_rel, position_mode),
        length,
    )


def index_tokens(tokens: Sequence[str], vocab: Vocabulary, T: int) -> np.ndarray:
    ids = vocab.encode(list(tokens)[:T])
    return np.array(ids + [PAD] * (T - len(ids)), dtype=np.int64)


@dataclass
class IndexedRelation:
    word_ids: np.ndarray  # (n, T)
    head_pos: np.ndarray
    tail_pos: np.ndarray
    label_ids: np.ndarray  # ids of the label words, OOV words dropped
    desc_ids: np.ndarray  # (T,)


class IndexedDataset:
    """Array form of a Dataset, ready for episode batching."""

    def __init__(self, ds: Dataset, vocab: Vocabulary, T: int = 40, max_rel: Optional[int] = None,
                 position_mode: str = "start"):
        self.T = T
        self.max_rel = T if max_rel is None else max_rel
        self.rejected = 0
        self.relations: Dict[str, IndexedRelation] = {}
        for rel in ds.relation_ids():
            rows = []
            for inst in ds.instances[rel]:
                try:
                    rows.append(index_instance(inst, vocab, T, self.max_rel, position_mode))
                except TruncationError:
                    self.rejected += 1
            if not rows:
                continue
            info = ds.relations.get(rel, RelationInfo(rel, [rel]))
            label = [i for i in vocab.encode(info.label_words) if i != UNK]
            if not label:
                log.warning("relation %s: all label words out of vocabulary, using UNK", rel)
                label = [UNK]
            self.relations[rel] = IndexedRelation(
                np.stack([r.word_ids for r in rows]),
                np.stack([r.head_pos for r in rows]),
                np.stack([r.tail_pos for r in rows]),
                np.array(label, dtype=np.int64),
                index_tokens(info.description, vocab, T),
            )
        if self.rejected:
            log.info("rejected %d instances whose entities fall beyond length %d", self.rejected, T)

    @property
    def n_positions(self) -> int:
        return 2 * self.max_rel + 1

    def relation_ids(self) -> List[str]:
        return sorted(self.relations)

    def sizes(self) -> Dict[str, int]:
        return {r: len(v.word_ids) for r, v in self.relations.items()}


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    relations: List[str]
    support: List[Tuple[str, int]]  # class-major: K entries per relation
    query: List[Tuple[str, int]]
    query_labels: np.ndarray
    K: int

    @property
    def N(self) -> int:
        return len(self.relations)

    @property
    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.N), self.K)


def sample_episode(dataset, N: int, K: int, R: int, rng: np.random.Generator,
                   balanced: bool = False) -> Episode:
    """Draw an N-way K-shot episode with R queries.

    Queries come uniformly from the pooled leftovers of the N relations, or
    R/N per relation when ``balanced``.
    """
    sizes = dataset.sizes()
    rels = sorted(sizes)
    if N < 1 or K < 1 or R < 0:
        raise SamplingError(f"invalid episode shape N={N} K={K} R={R}")
    if len(rels) < N:
        raise SamplingError(f"need {N} relations, dataset has {len(rels)}")
    chosen = [rels[i] for i in rng.choice(len(rels), size=N, replace=False)]
    support, pool = [], []
    for rel in chosen:
        if sizes[rel] < K + 1:
            raise SamplingError(f"relation {rel} has {sizes[rel]} instances, need {K + 1}")
        perm = rng.permutation(sizes[rel])
        support.extend((rel, int(i)) for i in perm[:K])
        pool.append([(rel, int(i)) for i in perm[K:]])
    label_of = {rel: c for c, rel in enumerate(chosen)}
    if balanced:
        if R % N:
            raise SamplingError(f"balanced sampling needs R divisible by N, got R={R}, N={N}")
        per = R // N
        query = []
        for rest in pool:
            if len(rest) < per:
                raise SamplingError(f"relation {rest[0][0]} has too few leftovers for {per} queries")
            query.extend(rest[:per])
    else:
        flat = [x for rest in pool for x in rest]
        if len(flat) < R:
            raise SamplingError(f"only {len(flat)} leftover instances for {R} queries")
        query = [flat[i] for i in rng.choice(len(flat), size=R, replace=False)]
    labels = np.array([label_of[rel] for rel, _ in query], dtype=np.int64)
    return Episode(chosen, support, query, labels, K)


def format_episode(ep: Episode, ds: Dataset) -> str:
    lines = [f"{ep.N}-way {ep.K}-shot, {len(ep.query)} queries"]
    for c, rel in enumerate(ep.relations):
        info = ds.relations.get(rel)
        words = " ".join(info.label_words) if info else rel
        lines.append(f"[{c}] {rel} ({words})")
        for r, i in ep.support[c * ep.K:(c + 1) * ep.K]:
            lines.append("    S  " + " ".join(ds.instances[r][i].tokens))
    lines.append("queries:")
    for (r, i), y in zip(ep.query, ep.query_labels):
        lines.append(f"    Q[{int(y)}] " + " ".join(ds.instances[r][i].tokens))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

HEAD_TOKEN, TAIL_TOKEN = "headent", "tailent"


@dataclass
class SyntheticSpec:
    """Parameters of :func:`make_synthetic`; defaults give 20 train + 5 test relations."""
    n_relations: int = 25
    n_instances: int = 40
    vocab_size: int = 500
    signal_tokens_per_relation: int = 4
    noise_rate: float = 0.0
    signal_slots: int = 3
    length: int = 12
    d_w: int = 50
    seed: int = 0
    prefix: str = "R"
    description_words: int = 3
    embedding_scale: float = 0.4
    layout: str = "between"
    cluster: float = 0.8
    topic_rank: Optional[int] = 8

    def generate(self) -> Tuple["Dataset", Vocabulary, np.ndarray]:
        return make_synthetic(
            self.n_relations, self.n_instances, self.vocab_size, self.signal_tokens_per_relation,
            self.noise_rate, np.random.default_rng(self.seed), d_w=self.d_w, signal_slots=self.signal_slots,
            length=self.length, prefix=self.prefix, description_words=self.description_words,
            embedding_scale=self.embedding_scale, layout=self.layout, cluster=self.cluster,
            topic_rank=self.topic_rank)


def make_synthetic(n_relations: int, n_instances: int, vocab_size: int, signal_tokens_per_relation: int,
                   noise_rate: float, rng: np.random.Generator, d_w: int = 50, signal_slots: int = 3,
                   length: int = 12, prefix: str = "R", description_words: int = 3,
                   embedding_scale: float = 0.4, layout: str = "between", cluster: float = 0.0,
                   topic_rank: Optional[int] = None) -> Tuple[Dataset, Vocabulary, np.ndarray]:
    """Toy relation data where each relation owns disjoint signal tokens.

    Every sentence has ``length`` tokens: a head and a tail entity token,
    ``signal_slots`` slots holding the relation's signal tokens and filler
    elsewhere. With ``layout="between"`` the signal slots sit contiguously
    between the two entities (at a random offset, head and tail order
    random); ``"scattered"`` puts every token at a random position. With
    probability ``noise_rate`` each signal slot is instead filled with a
    filler token, so at 0 the signal tokens determine the class and at 1 the
    sentence carries no class information.

    ``cluster`` > 0 pulls each relation's signal embeddings toward a shared
    per-relation topic vector (the fraction of variance it explains). With
    ``topic_rank`` set, topics are drawn from a random subspace of that
    dimension instead of the whole embedding space.
    """
    if signal_tokens_per_relation < 1:
        raise ConfigError("need at least one signal token per relation")
    if not 0.0 <= noise_rate <= 1.0:
        raise ConfigError(f"noise_rate must be in [0, 1], got {noise_rate}")
    if length < signal_slots + 2:
        raise ConfigError(f"length {length} cannot hold 2 entities and {signal_slots} signal slots")
    if layout not in ("between", "scattered"):
        raise ConfigError(f"unknown layout {layout!r}")
    n_signal = n_relations * signal_tokens_per_relation
    n_filler = vocab_size - n_signal
    if n_filler < max(1, description_words):
        raise ConfigError(f"vocab_size {vocab_size} too small for {n_relations} relations x "
                          f"{signal_tokens_per_relation} disjoint signal tokens plus filler")
    words = [f"w{i}" for i in range(vocab_size)]
    signal = np.arange(n_signal).reshape(n_relations, signal_tokens_per_relation)
    filler = np.arange(n_signal, vocab_size)
    vocab = Vocabulary(words + [HEAD_TOKEN, TAIL_TOKEN])
    table = np.zeros((len(vocab), d_w))
    table[2:] = rng.normal(0.0, embedding_scale, size=(len(vocab) - 2, d_w))
    table[UNK] = rng.uniform(-0.5 / d_w, 0.5 / d_w, size=d_w)
    if cluster > 0:
        if topic_rank is None:
            topics = rng.normal(0.0, embedding_scale, size=(n_relations, 1, d_w))
        else:
            basis = np.linalg.qr(rng.normal(size=(d_w, topic_rank)))[0].T * np.sqrt(d_w / topic_rank)
            topics = (rng.normal(0.0, embedding_scale, size=(n_relations, topic_rank)) @ basis)[:, None, :]
        rows = signal + 2
        table[rows] = np.sqrt(cluster) * topics + np.sqrt(1 - cluster) * table[rows]

    width = len(str(n_relations - 1))
    instances, relations = {}, {}
    for r in range(n_relations):
        rel = f"{prefix}{r:0{width}d}"
        desc = [words[i] for i in rng.choice(filler, size=description_words, replace=False)]
        relations[rel] = RelationInfo(rel, [words[i] for i in signal[r]],
                                      desc + [words[i] for i in signal[r]])
        insts = []
        for _ in range(n_instances):
            if layout == "between":
                start = int(rng.integers(length - signal_slots - 1))
                h, t = start, start + signal_slots + 1
                if rng.random() < 0.5:
                    h, t = t, h
                sig = np.arange(start + 1, start + 1 + signal_slots)
            else:
                slots = rng.permutation(length)
                h, t, sig = slots[0], slots[1], slots[2:2 + signal_slots]
            toks = [words[i] for i in rng.choice(filler, size=length)]
            toks[h], toks[t] = HEAD_TOKEN, TAIL_TOKEN
            for s in sig:
                if rng.random() < noise_rate:
                    toks[s] = words[int(rng.choice(filler))]
                else:
                    toks[s] = words[int(rng.choice(signal[r]))]
            insts.append(Instance(toks, rel, (int(h), int(h)), (int(t), int(t)), HEAD_TOKEN, TAIL_TOKEN, "Qh", "Qt"))
        instances[rel] = insts
    return Dataset(instances, relations), vocab, table


def split_relations(ds: Dataset, counts: Sequence[int]) -> List[Dataset]:
    """Partition a dataset into consecutive groups of relations (disjoint label spaces)."""
    rels = ds.relation_ids()
    if sum(counts) > len(rels):
        raise ConfigError(f"cannot split {len(rels)} relations into {list(counts)}")
    out, start = [], 0
    for c in counts:
        chunk = rels[start:start + c]
        out.append(Dataset({r: ds.instances[r] for r in chunk}, {r: ds.relations[r] for r in chunk}))
        start += c
    return out
