import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from oracles import brute_hardest, brute_prototype, random_pool
from protoforge import core, losses
from protoforge.core import ConfigError, ParamStore
from protoforge.losses import LossConfig, LossError


# --- cross-entropy -----------------------------------------------------------------

def test_one_hot_truth_is_zero():
    assert losses.cross_entropy(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1]) == 0.0


def test_uniform_five_way_two_queries():
    probs = np.full((2, 5), 0.2)
    assert losses.cross_entropy(probs, [1, 4]) == pytest.approx(2 * np.log(5), rel=1e-14)
    ce, _, _ = losses.cross_entropy_from_scores(np.zeros((2, 5)), [1, 4])
    assert ce == pytest.approx(2 * np.log(5), rel=1e-14)


def test_random_matches_direct_oracle():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(3, 4))
    labels = [2, 0, 3]
    p = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    direct = -sum(np.log(p[i, y]) for i, y in enumerate(labels))
    assert losses.cross_entropy(p, labels) == pytest.approx(direct, rel=1e-13)
    assert losses.cross_entropy_from_scores(s, labels)[0] == pytest.approx(direct, rel=1e-13)


def test_zero_probability_guarded():
    assert np.isfinite(losses.cross_entropy(np.array([[1.0, 0.0]]), [1]))
    ce, _, _ = losses.cross_entropy_from_scores(np.array([[0.0, -1e5]]), [1])
    assert ce == pytest.approx(1e5)


# --- hardest triplets ----------------------------------------------------------------

def test_far_apart_classes_zero_loss():
    emb = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]])
    loss, rep = losses.hardest_triplet_loss(emb, [0, 0, 1, 1], 0.5)
    assert loss == 0.0 and len(rep.triplets) == 4


def test_coincident_duplicates_hinge_equals_margin():
    emb = np.zeros((4, 2))
    loss, rep = losses.hardest_triplet_loss(emb, [0, 0, 1, 1], 0.5)
    assert [t.hinge for t in rep.triplets] == [0.5] * 4
    assert loss == 2.0


def test_anchor_without_positive_skipped():
    emb = np.array([[0.0], [1.0], [2.0]])
    loss, rep = losses.hardest_triplet_loss(emb, [0, 1, 1], 0.5)
    assert rep.skipped == [0]
    assert [t.anchor for t in rep.triplets] == [1, 2]


def test_single_class_rejected():
    with pytest.raises(LossError):
        losses.hardest_triplet_loss(np.zeros((3, 2)), [1, 1, 1], 0.5)


def test_random_pool_matches_brute_force():
    rng = np.random.default_rng(1)
    emb, labels = random_pool(rng, 30, 5, integer=False)
    loss, rep = losses.hardest_triplet_loss(emb, labels, 0.5)
    sel, total, skipped = brute_hardest(emb, labels, 0.5)
    assert rep.selections() == sel and rep.skipped == skipped
    assert loss == pytest.approx(total, rel=1e-12)


def test_mining_oracle_with_ties():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(4, 40))
        k = int(rng.integers(2, min(10, n) + 1))
        emb, labels = random_pool(rng, n, k, d=2)
        _, rep = losses.hardest_triplet_loss(emb, labels, 0.5)
        assert rep.selections() == brute_hardest(emb, labels, 0.5)[0]


def test_report_invariants():
    rng = np.random.default_rng(3)
    emb, labels = random_pool(rng, 20, 4, integer=False)
    _, rep = losses.hardest_triplet_loss(emb, labels, 0.3)
    for t in rep.triplets:
        assert labels[t.positive] == labels[t.anchor] and labels[t.negative] != labels[t.anchor]
        assert t.hinge == max(0.0, 0.3 + t.d_pos - t.d_neg)


pools = st.integers(0, 2**31).map(lambda s: random_pool(np.random.default_rng(s), 12, 3, integer=False))


@settings(max_examples=200, deadline=None)
@given(pools, hnp.arrays(np.float64, 4, elements=st.floats(-100, 100)))
def test_triplet_translation_invariance(pool, shift):
    emb, labels = pool
    a, ra = losses.hardest_triplet_loss(emb, labels, 0.5)
    b, rb = losses.hardest_triplet_loss(emb + shift, labels, 0.5)
    assert b == pytest.approx(a, rel=1e-6, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(pools, st.floats(0, 5), st.floats(0, 5))
def test_triplet_nonnegative_and_monotone_in_margin(pool, m1, m2):
    emb, labels = pool
    lo, hi = sorted((m1, m2))
    a, _ = losses.hardest_triplet_loss(emb, labels, lo)
    b, _ = losses.hardest_triplet_loss(emb, labels, hi)
    assert 0.0 <= a <= b


@settings(max_examples=200, deadline=None)
@given(pools, st.floats(0, 2))
def test_triplet_zero_iff_margin_separated(pool, m):
    emb, labels = pool
    loss, rep = losses.hardest_triplet_loss(emb, labels, m)
    separated = all(t.d_neg >= t.d_pos + m for t in rep.triplets)
    assert (loss == 0.0) == separated


# --- prototype triplets ------------------------------------------------------------------

def test_anchor_on_own_prototype_far_from_others():
    protos = np.array([[0.0, 0.0], [1.0, 0.0]])
    loss, rep = losses.prototype_triplet_loss(np.array([[0.0, 0.0]]), protos, [0], 0.5)
    assert loss == 0.0 and rep.selections() == [(0, 0, 1)]


def test_anchor_midway_hinge_is_margin():
    protos = np.array([[-1.0, 0.0], [1.0, 0.0]])
    loss, _ = losses.prototype_triplet_loss(np.zeros((1, 2)), protos, [0], 0.5)
    assert loss == 0.5


def test_prototype_triplets_match_scan():
    rng = np.random.default_rng(4)
    emb, labels = random_pool(rng, 15, 5, integer=False)
    protos = rng.normal(size=(5, 4))
    loss, rep = losses.prototype_triplet_loss(emb, protos, labels, 0.5)
    sel, total = brute_prototype(emb, protos, labels, 0.5)
    assert rep.selections() == sel
    assert loss == pytest.approx(total, rel=1e-12)


def test_prototype_triplets_need_two_prototypes():
    with pytest.raises(LossError):
        losses.prototype_triplet_loss(np.zeros((2, 2)), np.zeros((1, 2)), [0, 0], 0.5)


# --- joint loss ------------------------------------------------------------------------------

def test_joint_loss_arithmetic():
    assert losses.joint_loss(1.2, 0.7, 0.0) == 1.2
    assert losses.joint_loss(1.2, 0.0, 1.0) == 1.2
    assert losses.joint_loss(1.2, 0.3, 1.0) == pytest.approx(1.5)


def test_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(margin=-1).validate()
    with pytest.raises(ConfigError):
        LossConfig(alpha=-0.1).validate()
    with pytest.raises(ConfigError):
        LossConfig(variant="facenet").validate()


@pytest.mark.parametrize("frozen", [False, True])
def test_joint_gradient_superposes(frozen):
    rng = np.random.default_rng(5)
    emb, labels = random_pool(rng, 10, 3, integer=False)
    store = ParamStore(np.float64)
    store.add("emb", emb)
    store.add("protos", rng.normal(size=(3, 4)))
    alpha = 0.7
    sel_j = losses.hardest_triplet_loss(emb, labels, 0.5)[1].selections() if frozen else None
    sel_p = losses.prototype_triplet_loss(emb, store["protos"], labels, 0.5)[1].selections() if frozen else None

    def loss(params):
        params.zero_grad()
        e, P = params["emb"], params["protos"]
        D = core.pairwise_sq_euclidean(e, P)
        ce, ds, _ = losses.cross_entropy_from_scores(-D, labels)
        de, dP = core.pairwise_sq_euclidean_backward(-ds, e, P)
        j, rj = losses.hardest_triplet_loss(e, labels, 0.5, sel_j)
        p, rp = losses.prototype_triplet_loss(e, P, labels, 0.5, sel_p)
        de2, dP2 = losses.prototype_triplet_backward(e, P, rp, alpha)
        params.accumulate("emb", de + losses.hardest_triplet_backward(e, rj, alpha) + de2)
        params.accumulate("protos", dP + dP2)
        return losses.joint_loss(ce, j + p, alpha), (rj.signature(), rp.signature())

    for res in core.grad_check(loss, store).values():
        assert res.max_rel_error < 1e-4
