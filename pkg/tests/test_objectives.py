import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from matr.autodiff import Tensor
from matr.model import Batch, MATRNetwork, ModelConfig
from matr.objectives import (LossWeights, MomentLabels, fg_loss, giou_1d, loss_terms,
                             overall_loss, pretrain_loss, seg_loss, smooth_l1_value)
from oracles import central_difference

TINY = ModelConfig(input_dim=5, d=8, k=1, n_queries=2, heads=2, ffn_mult=2,
                   dropout_transformer=0.0, dropout_projection=0.0)


def tiny_batch(seed=0, lengths=((7, 3), (5, 2))):
    rng = np.random.default_rng(seed)
    pairs = [(rng.normal(size=(m, 5)), rng.normal(size=(n, 5))) for m, n in lengths]
    labels = [MomentLabels.from_span(1, m - 3, m) for m, _ in lengths]
    return Batch.from_pairs(pairs), labels


# ---------------------------------------------------------------- labels

def test_labels_from_span():
    lab = MomentLabels.from_span(2, 4, 10)
    assert np.flatnonzero(lab.fg).tolist() == [2, 3, 4]
    assert lab.offsets[3].tolist() == [1.0, 1.0]
    assert lab.span == (2, 4)


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(fg=-1.0)


# ---------------------------------------------------------------- fg loss

def test_fg_loss_examples():
    one = MomentLabels.from_span(0, 0, 1)
    assert fg_loss(Tensor([1.0]), one).item() < 1e-6
    assert abs(fg_loss(Tensor([0.5]), one).item() - math.log(2)) < 1e-12
    zero = MomentLabels(np.array([False, True]), np.zeros((2, 2)))
    assert abs(fg_loss(Tensor([0.5, 0.5]), zero).item() - math.log(2)) < 1e-12


def test_fg_loss_clamps_extremes():
    lab = MomentLabels.from_span(0, 0, 2)
    assert np.isfinite(fg_loss(Tensor([0.0, 1.0]), lab).item())


# ---------------------------------------------------------------- seg loss

def test_smooth_l1_examples():
    assert smooth_l1_value(0.5) == 0.125
    assert smooth_l1_value(2.0) == 1.5


def test_giou_example():
    assert abs(giou_1d((0, 1), (2, 3)) - (-1 / 3)) < 1e-15
    assert abs((1 - giou_1d((0, 1), (2, 3))) - 4 / 3) < 1e-15


def test_seg_loss_zero_for_exact_offsets():
    lab = MomentLabels.from_span(3, 6, 10)
    assert abs(seg_loss(Tensor(lab.offsets), lab).item()) < 1e-8


def test_seg_loss_matches_scalar_formula():
    rng = np.random.default_rng(0)
    lab = MomentLabels.from_span(2, 6, 9)
    off = rng.uniform(0, 4, size=(9, 2))
    total = 0.0
    for i in np.flatnonzero(lab.fg):
        l1 = sum(smooth_l1_value(off[i, k] - lab.offsets[i, k]) for k in range(2))
        g = giou_1d((i - off[i, 0], i + off[i, 1]), (i - lab.offsets[i, 0], i + lab.offsets[i, 1]))
        total += l1 + 1 - g
    expected = total / lab.fg.sum()
    assert abs(seg_loss(Tensor(off), lab).item() - expected) < 1e-8


def test_seg_loss_ignores_background_offsets():
    rng = np.random.default_rng(1)
    lab = MomentLabels.from_span(2, 4, 8)
    off = rng.uniform(0, 3, size=(8, 2))
    other = off.copy()
    other[~lab.fg] = rng.uniform(0, 30, size=((~lab.fg).sum(), 2))
    assert seg_loss(Tensor(off), lab).item() == seg_loss(Tensor(other), lab).item()


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_loss_components_are_bounded(seed):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, 12))
    s = int(rng.integers(0, M))
    e = int(rng.integers(s, M))
    lab = MomentLabels.from_span(s, e, M)
    p = rng.uniform(0, 1, size=M)
    assert fg_loss(Tensor(p), lab).item() >= 0
    w = LossWeights(l1=0.0)
    iou_part = seg_loss(Tensor(rng.uniform(0, 5, size=(M, 2))), lab, w).item()
    assert -1e-9 <= iou_part <= 2 + 1e-9


def test_seg_and_fg_gradients():
    rng = np.random.default_rng(2)
    lab = MomentLabels.from_span(1, 4, 6)
    off = rng.uniform(0.2, 3, size=(6, 2))
    probs = rng.uniform(0.1, 0.9, size=6)
    for fn, x in ((lambda v: seg_loss(v, lab), off), (lambda v: fg_loss(v, lab), probs)):
        t = Tensor(x, requires_grad=True)
        fn(t).backward()
        fd = central_difference(lambda v: fn(Tensor(v)).item(), x)
        assert np.max(np.abs(t.grad - fd)) <= 1e-4 * max(1, np.abs(fd).max())


# ---------------------------------------------------------------- totals

def test_overall_zero_weights():
    net = MATRNetwork(TINY, seed=0)
    batch, labels = tiny_batch()
    out = net.forward(batch)
    assert overall_loss(out, labels, LossWeights(0, 0, 0, 0, 0, 0)).item() == 0.0


def test_overall_fg_only_equals_fg_loss():
    net = MATRNetwork(TINY, seed=0)
    batch, labels = tiny_batch()
    out = net.forward(batch)
    w = LossWeights(fg=1, seg=0, align_pre=0, align_post=0)
    assert overall_loss(out, labels, w).item() == fg_loss(out.fg_probs, labels).mean().item()


def test_overall_is_linear_in_each_weight():
    net = MATRNetwork(TINY, seed=0)
    batch, labels = tiny_batch()
    out = net.forward(batch)
    terms = {k: v.data.mean() for k, v in loss_terms(out, labels).items()}
    for name in ("fg", "seg", "align_pre", "align_post"):
        vals = []
        for lam in (0.5, 1.5, 2.5):
            kw = {"fg": 1.0, "seg": 1.0, "align_pre": 1.0, "align_post": 1.0, name: lam}
            vals.append(overall_loss(out, labels, LossWeights(**kw)).item())
        assert abs((vals[1] - vals[0]) - terms[name]) < 1e-9
        assert abs((vals[2] - vals[1]) - terms[name]) < 1e-9


def test_pretrain_loss_matches_overall_with_equal_weights():
    net = MATRNetwork(TINY, seed=0)
    batch, labels = tiny_batch()
    out = net.forward(batch)
    assert pretrain_loss(out, labels).item() == overall_loss(out, labels).item()


def test_zero_alignment_weights_make_loss_independent_of_gamma():
    batch, labels = tiny_batch()
    w = LossWeights(align_pre=0, align_post=0)
    vals = []
    for g in (0.01, 1.0):
        cfg = ModelConfig(**{**TINY.to_dict(), "gamma": g})
        out = MATRNetwork(cfg, seed=0).forward(batch)
        vals.append(pretrain_loss(out, labels, w).item())
    # span routing uses hard DTW, which does not depend on gamma
    assert vals[0] == vals[1]


def test_identical_samples_average_to_single_loss():
    rng = np.random.default_rng(3)
    t, q = rng.normal(size=(6, 5)), rng.normal(size=(3, 5))
    lab = MomentLabels.from_span(2, 3, 6)
    net = MATRNetwork(TINY, seed=0)
    one = overall_loss(net.forward(Batch.from_pairs([(t, q)])), [lab]).item()
    four = overall_loss(net.forward(Batch.from_pairs([(t, q)] * 4)), [lab] * 4).item()
    assert abs(one - four) < 1e-12


def test_loss_is_permutation_invariant_over_batch():
    net = MATRNetwork(TINY, seed=0)
    rng = np.random.default_rng(4)
    pairs = [(rng.normal(size=(m, 5)), rng.normal(size=(2, 5))) for m in (4, 6, 5)]
    labels = [MomentLabels.from_span(0, 1, len(t)) for t, _ in pairs]
    a = overall_loss(net.forward(Batch.from_pairs(pairs)), labels).item()
    perm = [2, 0, 1]
    b = overall_loss(net.forward(Batch.from_pairs([pairs[i] for i in perm])),
                     [labels[i] for i in perm]).item()
    assert abs(a - b) < 1e-12


def test_overall_gradient_wrt_projection():
    net = MATRNetwork(TINY, seed=0)
    batch, labels = tiny_batch(lengths=((6, 3),))
    w = net.params["proj.0.w"]

    def f(v):
        old = w.data
        w.data = v
        try:
            return overall_loss(net.forward(batch), labels).item()
        finally:
            w.data = old

    overall_loss(net.forward(batch), labels).backward()
    fd = central_difference(f, w.data.copy())
    assert np.max(np.abs(w.grad - fd)) <= 1e-4 * max(1, np.abs(fd).max())
