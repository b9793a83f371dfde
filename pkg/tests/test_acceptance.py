"""End-to-end acceptance checks; each prints a single PASS/FAIL line.

The training criteria (6, 7) share one set of runs through a module fixture:
three seeds of the full pipeline plus the two no-pre-training ablations, all
using ``configs/desk.json``.
"""
import functools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from matr.alignment import alignment_loss, hard_dtw, soft_dtw, soft_dtw_value
from matr.autodiff import Tensor
from matr.cli import load_config, main, make_estimator
from matr.datakit import AUGMENTATIONS, SyntheticConfig, augment, gen_synthetic, sample_pretrain
from matr.decoding import Segment, nms_1d
from matr.metrics import evaluate
from matr.model import Batch, MATRNetwork, ModelConfig
from matr.objectives import MomentLabels, fg_loss, overall_loss, seg_loss
from oracles import iou_1d, monotone_paths, nms_reference
from test_autodiff import OPS

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.json"
SEEDS = (0, 1, 2)


@functools.lru_cache(maxsize=None)
def path_index(M, N):
    """All standard monotone paths as a padded (n_paths, M+N-1) flat-index array."""
    paths = monotone_paths(M, N)
    width = M + N - 1
    idx = np.full((len(paths), width), M * N, dtype=np.int64)   # M*N -> padded zero cell
    for k, p in enumerate(paths):
        idx[k, :len(p)] = [i * N + j for i, j in p]
    return idx


def enum_costs(C):
    """Path costs summed cell by cell in path order, like the DP."""
    M, N = C.shape
    flat = np.append(C.ravel(), 0.0)
    idx = path_index(M, N)
    total = np.zeros(len(idx))
    for t in range(idx.shape[1]):
        total = total + flat[idx[:, t]]
    return total


def enum_soft(C, gamma):
    costs = enum_costs(C)
    m = costs.min()
    return m - gamma * np.log(np.sum(np.exp(-(costs - m) / gamma)))


# ---------------------------------------------------------------- 1

def test_c1_soft_dtw_matches_path_enumeration():
    soft_dtw(np.ones((2, 2)), 0.1)           # JIT warm-up outside the timer
    rng = np.random.default_rng(101)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(200):
        M, N = (int(v) for v in rng.integers(1, 7, size=2))
        C = rng.uniform(0.0, 2.0, size=(M, N))
        for gamma in (0.01, 0.1, 1.0):
            worst = max(worst, abs(soft_dtw(C, gamma).soft_cost - enum_soft(C, gamma)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 5.0
    record("C1 soft-DTW == path enumeration", ok,
           f"max |diff| {worst:.2e} (<= 1e-9) over 200 matrices x 3 gammas in {elapsed:.2f}s (< 5s)")
    assert ok


# ---------------------------------------------------------------- 2

def test_c2_hard_dtw_limit_and_bruteforce():
    rng = np.random.default_rng(202)
    worst_gap, mismatches = 0.0, 0
    for _ in range(200):
        C = rng.uniform(0.0, 2.0, size=(8, 8))
        hard, path = hard_dtw(C)
        worst_gap = max(worst_gap, abs(soft_dtw(C, 1e-3).soft_cost - hard))
        costs = enum_costs(C)
        best = costs.min()
        cells = set(np.flatnonzero(path.ravel()).tolist())
        argmins = [set(r[r < 64].tolist()) for r in path_index(8, 8)[costs == best]]
        if hard != best or cells not in argmins:
            mismatches += 1
    ok = worst_gap <= 0.01 and mismatches == 0
    record("C2 hard-DTW limit + brute force", ok,
           f"max |soft(1e-3) - hard| {worst_gap:.2e} (<= 0.01); {mismatches}/200 brute-force mismatches")
    assert ok


# ---------------------------------------------------------------- 3

def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def _directional(loss_fn, params, rng, h=1e-5):
    """Worst relative error of d/dt L(theta + t v) along a random v per tensor."""
    worst, where = 0.0, None
    loss_fn().backward()
    grads = {k: p.grad.copy() for k, p in params.items()}
    for name, p in params.items():
        v = rng.normal(size=p.shape)
        base = p.data.copy()
        p.data = base + h * v
        up = loss_fn().item()
        p.data = base - h * v
        down = loss_fn().item()
        p.data = base
        fd = (up - down) / (2 * h)
        err = _rel(float((grads[name] * v).sum()), fd)
        if err > worst:
            worst, where = err, name
    return worst, where


def test_c3_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    worst = {}

    def check(label, fn, shapes):
        xs = [rng.uniform(-2, 2, size=s) for s in shapes]
        ts = {f"x{i}": Tensor(x, requires_grad=True) for i, x in enumerate(xs)}
        w = rng.normal(size=fn(*[Tensor(x) for x in xs]).shape)
        err, _ = _directional(lambda: (fn(*ts.values()) * w).sum(), ts, rng)
        worst[label] = err

    for name, (fn, shapes) in sorted(OPS.items()):
        check(name, fn, shapes)
    for mode in ("standard", "subsequence"):
        check(f"soft_dtw[{mode}]", lambda c, mode=mode: soft_dtw_value(c * c, 0.1, mode), [(5, 4)])
        check(f"alignment_loss[{mode}]",
              lambda a, b, mode=mode: alignment_loss(a, b, 0.1, mode), [(6, 3), (3, 3)])
    lab = MomentLabels.from_span(1, 4, 7)
    check("fg_loss", lambda p: fg_loss(p * 0.2 + 0.5, lab), [(7,)])
    check("seg_loss", lambda o: seg_loss(o * o + 0.1, lab), [(7, 2)])

    cfg = ModelConfig(input_dim=4, d=16, k=1, n_queries=2, heads=2,
                      dropout_transformer=0.0, dropout_projection=0.0)
    net = MATRNetwork(cfg, seed=0)
    drng = np.random.default_rng(0)
    batch = Batch.from_pairs([(drng.normal(size=(6, 4)), drng.normal(size=(3, 4)))])
    labels = [MomentLabels.from_span(1, 3, 6)]

    def loss():
        return overall_loss(net.forward(batch), labels)

    err, where = _directional(loss, net.params, rng)
    worst[f"tiny model ({len(net.params)} tensors, worst {where})"] = err
    coord = 0.0
    for name, p in net.params.items():
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-5
            up = loss().item()
            flat[i] = old - 1e-5
            down = loss().item()
            flat[i] = old
            fd = (up - down) / 2e-5
            coord = max(coord, abs(p.grad.reshape(-1)[i] - fd) / max(abs(fd), 1.0))
    worst["tiny model, 3 coordinates per tensor"] = coord

    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = max(worst.values()) <= 1e-4 and elapsed < 60.0
    record("C3 finite-difference gradients", ok,
           f"{len(worst)} checks, worst rel err {worst[top]:.2e} at {top} (<= 1e-4) in {elapsed:.1f}s (< 60s)")
    assert ok, {k: v for k, v in worst.items() if v > 1e-4}


# ---------------------------------------------------------------- 4

def test_c4_nms_and_metrics_match_references():
    rng = np.random.default_rng(404)
    nms_bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        starts = rng.integers(0, 40, size=n).astype(float)
        lens = rng.integers(0, 12, size=n).astype(float)
        scores = rng.integers(0, 6, size=n) / 5.0
        segs = [Segment(float(s), float(s + l), float(p)) for s, l, p in zip(starts, lens, scores)]
        if nms_1d(segs, 0.7) != nms_reference(segs, 0.7):
            nms_bad += 1

    gt, pred = {}, {}
    for i in range(1000):
        s = float(rng.uniform(0, 60))
        gt[(f"t{i}", f"q{i}")] = (s, s + float(rng.uniform(1, 30)))
        if rng.uniform() < 0.97:
            p = float(rng.uniform(0, 60))
            pred[(f"t{i}", f"q{i}")] = (p, p + float(rng.uniform(0, 30)))
    rep = evaluate(pred, gt)
    total, hits = 0.0, 0
    for k, g in gt.items():
        p = pred.get(k)
        iou = iou_1d(p, g) if p is not None and p[1] > p[0] else 0.0
        total += iou
        hits += iou >= 0.5
    exact = rep.miou == total / len(gt) and rep.recall_at_1 == hits / len(gt)
    ok = nms_bad == 0 and exact
    record("C4 NMS + metrics vs references", ok,
           f"{nms_bad}/1000 NMS mismatches; mIoU/R@1 exact match: {exact}")
    assert ok


# ---------------------------------------------------------------- 5

def test_c5_pretrain_samples_are_consistent():
    ds = gen_synthetic(SyntheticConfig(n_train=1, n_val=1, n_test=1, n_pretrain=200))
    tags = ("none",) + AUGMENTATIONS
    bad, counts = 0, dict.fromkeys(tags, 0)
    for k in range(10_000):
        video = ds.pretrain[k % len(ds.pretrain)]
        tag = tags[k % len(tags)]
        smp = sample_pretrain(video, [5, k], tag=tag)
        counts[smp.augmentation_tag] += 1
        s, e = smp.span
        fg = np.flatnonzero(smp.labels.fg)
        ok = fg.size > 0 and np.array_equal(fg, np.arange(fg[0], fg[-1] + 1))
        ok &= (fg[0], fg[-1]) == (s, e)
        ok &= bool(np.all(fg - smp.labels.offsets[fg, 0] == s))
        ok &= bool(np.all(fg + smp.labels.offsets[fg, 1] == e))
        clip = video.features[s:e + 1]
        if tag == "gaussian_noise":
            ok &= smp.query.features.shape == clip.shape
        else:
            ok &= np.array_equal(smp.query.features, augment(clip, tag))
        bad += not ok
    ok = bad == 0
    record("C5 pre-training sample invariants", ok,
           f"{10_000 - bad}/10000 valid; per tag {counts}")
    assert ok


# ---------------------------------------------------------------- 6 and 7

def _run(seed, variant):
    cfg = load_config(DESK, seed)
    ds = gen_synthetic(SyntheticConfig(seed=seed, **cfg["data"]))
    X = [(e.target, e.query) for e in ds.splits["train"]]
    y = [e.annotation.moment for e in ds.splits["train"]]
    Xt = [(e.target, e.query) for e in ds.splits["test"]]
    yt = [e.annotation.moment for e in ds.splits["test"]]
    est = make_estimator(cfg)
    t0 = time.perf_counter()
    if variant == "full":
        est.pretrain(ds.pretrain)
        est.set_params(warm_start=True)
    elif variant == "no_align":
        est.set_params(lambda_align_pre=0.0, lambda_align_post=0.0)
    est.fit(X, y)
    rep = est.evaluate(Xt, yt)
    return {"miou": rep.miou, "r1": rep.recall_at_1, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def runs():
    return {(s, v): _run(s, v) for s in SEEDS for v in ("full", "dual_scratch", "no_align")}


def _mean(runs, variant, key):
    return float(np.mean([runs[(s, variant)][key] for s in SEEDS]))


def test_c6_end_to_end_synthetic(runs):
    miou, r1 = _mean(runs, "full", "miou"), _mean(runs, "full", "r1")
    slowest = max(runs[(s, "full")]["seconds"] for s in SEEDS)
    ok = miou >= 0.75 and r1 >= 0.70 and slowest <= 15 * 60
    per = ", ".join(f"seed {s}: {runs[(s, 'full')]['miou']:.3f}/{runs[(s, 'full')]['r1']:.2f}" for s in SEEDS)
    record("C6 end-to-end synthetic", ok,
           f"mean mIoU {miou:.3f} (>= 0.75), R@1 {r1:.3f} (>= 0.70), slowest run {slowest:.0f}s "
           f"(<= 900s) [{per}]")
    assert ok


def test_c7_ablation_ordering(runs):
    dual, none = _mean(runs, "dual_scratch", "miou"), _mean(runs, "no_align", "miou")
    full = _mean(runs, "full", "miou")
    ok = dual >= none and full >= dual
    record("C7 ablation ordering", ok,
           f"(a) dual {dual:.3f} >= none {none:.3f} without pre-training; "
           f"(b) pre-trained {full:.3f} >= scratch {dual:.3f}")
    assert ok


# ---------------------------------------------------------------- 8

PIPE = {
    "version": 1,
    "data": {"n_train": 48, "n_val": 4, "n_test": 16, "n_pretrain": 24, "dim": 16},
    "model": {"d": 16, "k": 1, "n_queries": 4, "heads": 2, "dropout_projection": 0.0},
    "optim": {"learning_rate": 0.001, "batch_size": 16},
    "pretrain": {"epochs": 3, "augment": True, "align_warmup_epochs": 1},
    "train": {"epochs": 2},
}


def _pipeline(root, seed):
    root.mkdir(parents=True)
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(PIPE))
    common = ["--config", str(cfg), "--seed", str(seed)]
    steps = [
        ["gen-data", *common, "--out", str(root / "data")],
        ["pretrain", *common, "--data", str(root / "data"), "--out", str(root / "pt.ckpt")],
        ["train", *common, "--data", str(root / "data"), "--checkpoint", str(root / "pt.ckpt"),
         "--out", str(root / "ft.ckpt")],
        ["eval", *common, "--data", str(root / "data"), "--checkpoint", str(root / "ft.ckpt"),
         "--out", str(root / "eval.json")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return {name: (root / name).read_bytes()
            for name in ("pt.ckpt", "ft.ckpt", "eval.json", "eval.predictions.jsonl")}


def test_c8_pipeline_is_bit_reproducible(tmp_path):
    a = _pipeline(tmp_path / "a", seed=7)
    b = _pipeline(tmp_path / "b", seed=7)
    same = {k: a[k] == b[k] for k in a}
    ok = all(same.values())
    record("C8 bit-identical reruns", ok, ", ".join(f"{k}: {'identical' if v else 'DIFFERS'}"
                                                    for k, v in same.items()))
    assert ok
