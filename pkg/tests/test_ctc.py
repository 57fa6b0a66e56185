import numpy as np
import pytest

from avcpl import tensor as tn
from avcpl.ctc import (InfeasibleTarget, TokenSet, ctc_brute_force, ctc_greedy_decode, ctc_loss,
                       ctc_loss_batch, ctc_loss_op)
from instances import ctc_instance, log_softmax


def test_matches_enumeration():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(300):
        lat, tgt = ctc_instance(rng)
        nll, _ = ctc_loss(lat, tgt)
        worst = max(worst, abs(nll - ctc_brute_force(lat, tgt)))
    assert worst <= 1e-9


def test_single_frame_single_label():
    lat = np.log(np.array([[0.2, 0.5, 0.3]]))
    nll, g = ctc_loss(lat, [1])
    assert nll == pytest.approx(-np.log(0.5))
    assert np.allclose(g, [[0.0, -1.0, 0.0]])


def test_two_frames_hand_count():
    # target [1] over 2 frames: paths 1-1, 0-1, 1-0
    p = np.array([[0.6, 0.4], [0.3, 0.7]])
    nll, _ = ctc_loss(np.log(p), [1])
    assert nll == pytest.approx(-np.log(0.4 * 0.7 + 0.6 * 0.7 + 0.4 * 0.3))


def test_empty_target_is_all_blank():
    lat = log_softmax(np.random.default_rng(1).normal(size=(4, 3)))
    nll, _ = ctc_loss(lat, [])
    assert nll == pytest.approx(-lat[:, 0].sum())


def test_gradient_is_negative_occupancy():
    rng = np.random.default_rng(2)
    for _ in range(50):
        lat, tgt = ctc_instance(rng)
        _, g = ctc_loss(lat, tgt)
        assert np.all(g <= 1e-12)
        assert np.allclose(g.sum(axis=1), -1.0)


def test_gradient_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(40):
        lat, tgt = ctc_instance(rng)
        _, g = ctc_loss(lat, tgt)
        fd = tn.finite_diff_grad(lambda x: ctc_loss(x, tgt)[0], lat, eps=1e-6)
        assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8) <= 1e-4


def test_repeat_needs_blank_between():
    lat = np.log(np.full((2, 3), 1 / 3))
    with pytest.raises(InfeasibleTarget):
        ctc_loss(lat, [1, 1])
    with pytest.raises(InfeasibleTarget):
        ctc_loss(lat, [1, 2, 1])
    ctc_loss(lat, [1, 2])


def test_batch_matches_single_with_padding():
    rng = np.random.default_rng(4)
    items = [ctc_instance(rng) for _ in range(5)]
    T = max(l.shape[0] for l, _ in items)
    V = 5
    batch = np.full((5, T, V), -50.0)
    lens, tgts = [], []
    singles = []
    for b, (lat, tgt) in enumerate(items):
        full = log_softmax(rng.normal(size=(lat.shape[0], V)))
        batch[b, : lat.shape[0]] = full
        lens.append(lat.shape[0])
        tgts.append(tgt)
        singles.append(ctc_loss(full, tgt))
    nll, g = ctc_loss_batch(batch, lens, tgts)
    for b, (n1, g1) in enumerate(singles):
        assert nll[b] == pytest.approx(n1, abs=1e-10)
        assert np.allclose(g[b, : lens[b]], g1)
        assert np.all(g[b, lens[b]:] == 0)


def test_loss_op_backward_through_log_softmax():
    rng = np.random.default_rng(5)
    x = tn.parameter(rng.normal(size=(1, 5, 4)))
    with tn.Tape() as tape:
        loss = tn.sum_all(ctc_loss_op(tn.log_softmax(x), np.array([5]), [[1, 2]]))
    g = tn.backprop(loss, tape)[x]
    # softmax - occupancy rows sum to zero
    assert np.allclose(g.sum(axis=-1), 0.0)


def test_greedy_decode_collapses():
    ids = [0, 3, 3, 0, 3, 1, 1, 4, 0]
    lat = np.full((len(ids), 5), -9.0)
    lat[np.arange(len(ids)), ids] = 0.0
    assert ctc_greedy_decode(lat) == [3, 3, 1, 4]


def test_tokenset_roundtrip():
    ts = TokenSet()
    ids = ts.encode_text("it's a cat")
    assert ts.decode_ids(ids) == "it's a cat"
    assert ids.count(ts.boundary_id) == 2
    assert len(ts) == 39
    with pytest.raises(ValueError):
        ts.encode_text("x|y")
