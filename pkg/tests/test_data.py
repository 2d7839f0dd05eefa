import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protoforge import data
from protoforge.core import ConfigError
from protoforge.data import (PAD, UNK, DatasetError, Instance, ParseError, SamplingError, TruncationError,
                             Vocabulary)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def record(tokens, h, t):
    return {"tokens": tokens, "h": [tokens[h[0]], "Qh", [list(h)]], "t": [tokens[t[0]], "Qt", [list(t)]]}


def toy_dataset(n_rel=5, n_inst=4, length=6):
    insts, rels = {}, {}
    for r in range(n_rel):
        rid = f"P{r}"
        insts[rid] = [Instance([f"tok{r}_{i}_{j}" for j in range(length)], rid, (0, 0), (length - 1, length - 1))
                      for i in range(n_inst)]
        rels[rid] = data.RelationInfo(rid, [f"name{r}"])
    return data.Dataset(insts, rels)


# --- embeddings ---------------------------------------------------------------

def test_load_two_token_file(tmp_path):
    vocab, table = data.load_embeddings(write(tmp_path, "e.txt", "Cat 1 2 3\ndog 4 5 6\n"))
    assert len(vocab) == 4 and table.shape == (4, 3)
    np.testing.assert_array_equal(table[PAD], 0)
    assert np.all(np.abs(table[UNK]) <= 0.5 / 3)
    np.testing.assert_array_equal(table[vocab.lookup("CAT")], [1, 2, 3])
    assert vocab.lookup("zebra") == UNK


def test_ragged_line_reports_line_number(tmp_path):
    lines = ["a " + " ".join(["0.1"] * 50), "b " + " ".join(["0.1"] * 49)]
    with pytest.raises(ParseError, match=":2:"):
        data.load_embeddings(write(tmp_path, "e.txt", "\n".join(lines)), dim=50)


def test_empty_embedding_file(tmp_path):
    with pytest.raises(ParseError):
        data.load_embeddings(write(tmp_path, "e.txt", ""))


def test_embedding_load_is_reproducible(tmp_path):
    p = write(tmp_path, "e.txt", "a 1 2\nb 3 4\n")
    v1, t1 = data.load_embeddings(p, seed=7)
    v2, t2 = data.load_embeddings(p, seed=7)
    assert v1.itos == v2.itos
    assert t1.tobytes() == t2.tobytes()


def test_embedding_save_load_round_trip(tmp_path):
    vocab, table = data.load_embeddings(write(tmp_path, "e.txt", "a 0.1 -2.5\nb 3 4e-3\n"))
    data.save_embeddings(tmp_path / "f.txt", vocab, table)
    vocab2, table2 = data.load_embeddings(tmp_path / "f.txt")
    assert vocab.itos == vocab2.itos
    np.testing.assert_array_equal(table[2:], table2[2:])


def test_vocabulary_specials():
    v = Vocabulary(["Hello"])
    assert v.lookup("<pad>") == PAD or v.itos[PAD] != "hello"
    assert v.itos[0:2] == [data.PAD_TOKEN, data.UNK_TOKEN]
    assert v.lookup("hello") == 2 and v.lookup("HELLO") == 2


# --- fewrel loading -------------------------------------------------------------

def fewrel_file(tmp_path, raw, names=None):
    p = write(tmp_path, "d.json", json.dumps(raw))
    n = write(tmp_path, "n.json", json.dumps(names)) if names is not None else None
    return p, n


def test_load_counts(tmp_path):
    raw = {f"P{r}": [record(["a", "b", "c", "d"], (0,), (2, 3)) for _ in range(3)] for r in range(2)}
    ds = data.load_fewrel(*fewrel_file(tmp_path, raw))
    assert ds.sizes() == {"P0": 3, "P1": 3}
    assert ds.instances["P0"][0].tail == (2, 3)


def test_empty_tokens_record_skipped(tmp_path):
    raw = {"P0": [record(["a", "b"], (0,), (1,))] * 2 + [{"tokens": [], "h": ["", "", [[0]]], "t": ["", "", [[0]]]}],
           "P1": [record(["a", "b"], (0,), (1,))] * 2}
    ds = data.load_fewrel(*fewrel_file(tmp_path, raw))
    assert ds.skipped == 1 and ds.sizes()["P0"] == 2


def test_missing_positions_skipped(tmp_path):
    raw = {"P0": [record(["a", "b"], (0,), (1,))] * 2 + [{"tokens": ["a"], "h": ["a", "x", []], "t": ["a", "y", [[0]]]}],
           "P1": [record(["a", "b"], (0,), (1,))] * 2}
    assert data.load_fewrel(*fewrel_file(tmp_path, raw)).skipped == 1


def test_relation_with_one_instance_rejected(tmp_path):
    raw = {"P0": [record(["a", "b"], (0,), (1,))], "P1": [record(["a", "b"], (0,), (1,))] * 2}
    with pytest.raises(DatasetError, match="P0"):
        data.load_fewrel(*fewrel_file(tmp_path, raw))


def test_name_table_formats(tmp_path):
    raw = {r: [record(["a", "b"], (0,), (1,))] * 2 for r in ("P0", "P1")}
    names = {"P0": ["country of citizenship", "the country"], "P1": {"label_words": "mother", "description": ""}}
    ds = data.load_fewrel(*fewrel_file(tmp_path, raw, names))
    assert ds.relations["P0"].label_words == ["country", "of", "citizenship"]
    assert ds.relations["P0"].description == ["the", "country"]
    assert ds.relations["P1"].description == []


def test_fewrel_round_trip(tmp_path):
    ds = toy_dataset(3, 3)
    data.save_fewrel(ds, tmp_path / "d.json", tmp_path / "n.json")
    ds2 = data.load_fewrel(tmp_path / "d.json", tmp_path / "n.json")
    assert ds2.relation_ids() == ds.relation_ids()
    for r in ds.relation_ids():
        for a, b in zip(ds.instances[r], ds2.instances[r]):
            assert (a.tokens, a.head, a.tail) == (b.tokens, b.head, b.tail)
        assert ds2.relations[r].label_words == ds.relations[r].label_words
    assert data.dataset_to_json(ds) == data.dataset_to_json(ds2)


# --- indexing ------------------------------------------------------------------

def test_head_relative_positions_at_start():
    inst = Instance(list("abcde"), "r", (0, 0), (4, 4))
    idx = data.index_instance(inst, Vocabulary(), T=5, max_rel=40)
    np.testing.assert_array_equal(idx.head_pos[:3], [40, 41, 42])


def test_position_clipping():
    pos = data.relative_positions(200, (150, 150), 40)
    assert pos[50] == 0  # distance -100
    assert pos.min() == 0 and pos.max() == 80


def test_short_sentence_padding():
    v = Vocabulary(["a", "b", "c"])
    idx = data.index_instance(Instance(["a", "b", "c"], "r", (0, 0), (2, 2)), v, T=5)
    np.testing.assert_array_equal(idx.word_ids[-2:], [PAD, PAD])
    assert idx.length == 3


def test_truncation_dropping_entity_rejected():
    inst = Instance(list("abcdefg"), "r", (0, 0), (6, 6))
    with pytest.raises(TruncationError):
        data.index_instance(inst, Vocabulary(), T=5)
    ds = data.Dataset({"r": [inst, Instance(list("ab"), "r", (0, 0), (1, 1))]}, {})
    indexed = data.IndexedDataset(ds, Vocabulary(), T=5)
    assert indexed.rejected == 1 and indexed.sizes() == {"r": 1}


def test_nearest_mode_is_zero_inside_span():
    pos = data.relative_positions(8, (2, 4), 10, mode="nearest") - 10
    np.testing.assert_array_equal(pos, [-2, -1, 0, 0, 0, 1, 2, 3])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 30), st.integers(1, 50), st.data())
def test_indexing_length_exact_and_in_range(n_tokens, T, d):
    h = d.draw(st.integers(0, n_tokens - 1))
    t = d.draw(st.integers(0, n_tokens - 1))
    max_rel = d.draw(st.integers(1, 45))
    inst = Instance([f"w{i}" for i in range(n_tokens)], "r", (h, h), (t, t))
    v = Vocabulary(inst.tokens[: n_tokens // 2])
    if max(h, t) >= T:
        with pytest.raises(TruncationError):
            data.index_instance(inst, v, T, max_rel)
        return
    a = data.index_instance(inst, v, T, max_rel)
    b = data.index_instance(inst, v, T, max_rel)
    for arr in (a.word_ids, a.head_pos, a.tail_pos):
        assert arr.shape == (T,)
    for arr in (a.head_pos, a.tail_pos):
        assert arr.min() >= 0 and arr.max() <= 2 * max_rel
    np.testing.assert_array_equal(a.word_ids, b.word_ids)


# --- episodes ------------------------------------------------------------------

def test_episode_shapes_and_disjointness():
    ds = toy_dataset(5, 4)
    ep = data.sample_episode(ds, 3, 2, 1, np.random.default_rng(0))
    assert (len(ep.relations), len(ep.support), len(ep.query)) == (3, 6, 1)
    assert not set(ep.support) & set(ep.query)
    assert len(set(ep.relations)) == 3
    for c, rel in enumerate(ep.relations):
        assert [r for r, _ in ep.support[2 * c:2 * c + 2]] == [rel, rel]
    for (rel, _), y in zip(ep.query, ep.query_labels):
        assert ep.relations[y] == rel


def test_episode_determinism():
    ds = toy_dataset(5, 4)
    a = data.sample_episode(ds, 3, 2, 3, np.random.default_rng(11))
    b = data.sample_episode(ds, 3, 2, 3, np.random.default_rng(11))
    assert (a.relations, a.support, a.query) == (b.relations, b.support, b.query)


def test_too_few_instances():
    ds = toy_dataset(3, 2)
    with pytest.raises(SamplingError):
        data.sample_episode(ds, 3, 2, 1, np.random.default_rng(0))


def test_relation_selection_frequency_binomial():
    ds = toy_dataset(20, 3, length=2)
    rng = np.random.default_rng(3)
    n = 10_000
    counts = Counter()
    for _ in range(n):
        counts.update(data.sample_episode(ds, 5, 1, 1, rng).relations)
    p = 5 / 20
    sigma = np.sqrt(n * p * (1 - p))
    for rel in ds.relation_ids():
        assert abs(counts[rel] - n * p) < 3 * sigma


def test_no_support_query_overlap_over_many_episodes():
    ds = toy_dataset(8, 5, length=2)
    rng = np.random.default_rng(5)
    for _ in range(10_000):
        ep = data.sample_episode(ds, 4, 2, 6, rng)
        assert not set(ep.support) & set(ep.query)


def test_balanced_queries():
    ds = toy_dataset(5, 6)
    ep = data.sample_episode(ds, 3, 2, 6, np.random.default_rng(1), balanced=True)
    assert sorted(Counter(ep.query_labels.tolist()).values()) == [2, 2, 2]


# --- synthetic data --------------------------------------------------------------

def centroid_oracle_accuracy(ds, vocab, n_signal):
    """Nearest centroid over bag-of-signal-token counts, fitted on all instances."""
    rels = ds.relation_ids()
    feats, ys = [], []
    for y, r in enumerate(rels):
        for inst in ds.instances[r]:
            ids = np.array(vocab.encode(inst.tokens)) - 2
            feats.append(np.bincount(ids[(ids >= 0) & (ids < n_signal)], minlength=n_signal))
            ys.append(y)
    X, ys = np.array(feats, dtype=float), np.array(ys)
    centroids = np.stack([X[ys == y].mean(axis=0) for y in range(len(rels))])
    d = ((X[:, None, :] - centroids[None]) ** 2).sum(-1)
    return float((d.argmin(axis=1) == ys).mean())


def test_synthetic_sizes_and_label_words():
    ds, vocab, table = data.make_synthetic(20, 50, 400, 4, 0.0, np.random.default_rng(0))
    assert ds.sizes() == {r: 50 for r in ds.relation_ids()}
    assert table.shape == (len(vocab), 50)
    owned = [set(ds.relations[r].label_words) for r in ds.relation_ids()]
    assert all(len(s) == 4 for s in owned)
    assert len(set().union(*owned)) == 80  # disjoint


def test_synthetic_noise_free_tokens_determine_class():
    ds, vocab, _ = data.make_synthetic(10, 30, 200, 3, 0.0, np.random.default_rng(1))
    owner = {w: r for r in ds.relation_ids() for w in ds.relations[r].label_words}
    for r in ds.relation_ids():
        for inst in ds.instances[r]:
            assert {owner[w] for w in inst.tokens if w in owner} == {r}


def test_synthetic_centroid_oracle_perfect_at_zero_noise():
    ds, vocab, _ = data.make_synthetic(20, 50, 400, 4, 0.0, np.random.default_rng(2))
    assert centroid_oracle_accuracy(ds, vocab, 80) == 1.0


def test_synthetic_full_noise_has_no_signal():
    ds, vocab, _ = data.make_synthetic(5, 20, 100, 2, 1.0, np.random.default_rng(3))
    signal = {w for r in ds.relation_ids() for w in ds.relations[r].label_words}
    assert not any(w in signal for r in ds.relation_ids() for inst in ds.instances[r] for w in inst.tokens)


def test_synthetic_vocab_too_small():
    with pytest.raises(ConfigError):
        data.make_synthetic(20, 5, 60, 4, 0.0, np.random.default_rng(0))


def test_synthetic_seeded_reproducible():
    a = data.SyntheticSpec(seed=4).generate()
    b = data.SyntheticSpec(seed=4).generate()
    assert data.dataset_to_json(a[0]) == data.dataset_to_json(b[0])
    assert a[2].tobytes() == b[2].tobytes()


def test_split_relations_disjoint():
    ds, _, _ = data.SyntheticSpec().generate()
    tr, te = data.split_relations(ds, [20, 5])
    assert len(tr.relations) == 20 and len(te.relations) == 5
    assert not set(tr.instances) & set(te.instances)
