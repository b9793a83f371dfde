"""Training objectives: foreground BCE, boundary regression and the weighted total."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_EPS = 1e-7
_DIV_EPS = 1e-9


@dataclass
class LossWeights:
    fg: float = 1.0
    seg: float = 1.0
    align_pre: float = 1.0
    align_post: float = 1.0
    l1: float = 1.0
    iou: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative, got {v}")

    def to_dict(self):
        return asdict(self)


@dataclass
class MomentLabels:
    """Per-frame foreground flags and offsets (frames) to the moment ends."""

    fg: np.ndarray        # (M,) bool
    offsets: np.ndarray   # (M, 2) float; zero on background

    @classmethod
    def from_span(cls, start, end, length):
        if not 0 <= start <= end < length:
            raise ValueError(f"span ({start}, {end}) outside [0, {length - 1}]")
        idx = np.arange(length)
        fg = (idx >= start) & (idx <= end)
        off = np.zeros((length, 2))
        off[fg, 0] = idx[fg] - start
        off[fg, 1] = end - idx[fg]
        return cls(fg, off)

    @property
    def span(self):
        rows = np.flatnonzero(self.fg)
        if rows.size == 0:
            raise ValueError("labels have no foreground frames")
        return int(rows[0]), int(rows[-1])

    def __len__(self):
        return len(self.fg)


def _stack(labels, M):
    B = len(labels)
    fg = np.zeros((B, M))
    off = np.zeros((B, M, 2))
    valid = np.zeros((B, M))
    for b, lab in enumerate(labels):
        m = len(lab)
        if m > M:
            raise ValueError(f"labels for sample {b} longer ({m}) than predictions ({M})")
        fg[b, :m] = lab.fg
        off[b, :m] = lab.offsets
        valid[b, :m] = 1.0
    return fg, off, valid


def _as_batch(pred, labels):
    single = isinstance(labels, MomentLabels)
    if single:
        labels = [labels]
        pred = ad.reshape(pred, (1,) + pred.shape)
    return pred, list(labels), single


def smooth_l1_value(residual, beta=1.0):
    r = abs(residual)
    return 0.5 * r * r / beta if r < beta else r - 0.5 * beta


def giou_1d(a, b):
    """Generalized IoU of two intervals ``(start, end)``."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    hull = max(a[1], b[1]) - min(a[0], b[0])
    iou = inter / union if union > 0 else 0.0
    return iou - ((hull - union) / hull if hull > 0 else 0.0)


def fg_loss(probs, labels):
    """Mean binary cross-entropy over the frames of each sample.

    ``probs`` is (M,) with one ``MomentLabels`` or (B, M) with a list of them;
    returns a scalar or a (B,) tensor respectively.
    """
    probs, labels, single = _as_batch(ad.as_tensor(probs), labels)
    fg, _, valid = _stack(labels, probs.shape[1])
    p = ad.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    bce = -(ad.log(p) * fg + ad.log(1.0 - p) * (1.0 - fg))
    per = (bce * valid).sum(axis=1) * (1.0 / valid.sum(axis=1))
    return per[0] if single else per


def seg_loss(offsets, labels, weights=None):
    """Smooth-L1 plus GIoU boundary loss averaged over foreground frames.

    Segments are rebuilt as ``[i - left, i + right]`` in frame units.
    """
    w = weights or LossWeights()
    offsets, labels, single = _as_batch(ad.as_tensor(offsets), labels)
    B, M, _ = offsets.shape
    fg, gt, _ = _stack(labels, M)
    pos = np.arange(M, dtype=np.float64)[None, :]

    l1 = ad.smooth_l1(offsets - gt).sum(axis=-1)
    left, right = offsets[..., 0], offsets[..., 1]
    ps, pe = pos - left, pos + right
    gs, ge = pos - gt[..., 0], pos + gt[..., 1]
    inter = ad.relu(ad.minimum(pe, ge) - ad.maximum(ps, gs))
    union = (left + right) + (gt[..., 0] + gt[..., 1]) - inter
    hull = ad.maximum(pe, ge) - ad.minimum(ps, gs)
    giou = inter / (union + _DIV_EPS) - (hull - union) / (hull + _DIV_EPS)
    per_pos = l1 * w.l1 + (1.0 - giou) * w.iou
    n_fg = fg.sum(axis=1)
    per = (per_pos * fg).sum(axis=1) * (1.0 / np.maximum(n_fg, 1.0))
    return per[0] if single else per


def loss_terms(output, labels, weights=None):
    """Per-sample (B,) tensors for each loss component."""
    w = weights or LossWeights()
    return {
        "fg": fg_loss(output.fg_probs, labels),
        "seg": seg_loss(output.offsets, labels, w),
        "align_pre": output.pre_loss,
        "align_post": output.post_loss,
    }


def overall_loss(output, labels, weights=None, return_components=False):
    """Batch mean of the weighted sum of all four components."""
    w = weights or LossWeights()
    terms = loss_terms(output, labels, w)
    total = None
    for name, t in terms.items():
        lam = getattr(w, name)
        if lam == 0.0:
            continue
        part = t * lam
        total = part if total is None else total + part
    if total is None:
        total = Tensor(np.zeros(len(labels)))
    loss = total.mean()
    if return_components:
        comps = {k: float(v.data.mean()) for k, v in terms.items()}
        return loss, comps
    return loss


def pretrain_loss(output, labels, weights=None, return_components=False):
    """Self-supervised clip-localisation loss; same form, pre-training weights."""
    return overall_loss(output, labels, weights, return_components)
