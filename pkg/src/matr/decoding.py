"""Turning per-frame head outputs into scored moments."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple

import numpy as np

NMS_THRESHOLD = 0.7


class Segment(NamedTuple):
    start_sec: float
    end_sec: float
    score: float = 1.0

    @property
    def length(self):
        return self.end_sec - self.start_sec

    def to_dict(self):
        return {"start_sec": self.start_sec, "end_sec": self.end_sec, "score": self.score}


@dataclass
class Prediction:
    fg_probs: np.ndarray   # (M,)
    offsets: np.ndarray    # (M, 2)

    def __post_init__(self):
        self.fg_probs = np.asarray(self.fg_probs, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.offsets.shape != (len(self.fg_probs), 2):
            raise ValueError(f"offsets shape {self.offsets.shape} does not match {len(self.fg_probs)} positions")


def predict_heads(network, fused, target_len=None):
    """Run the network's heads over ``fused`` (L, d) and keep the first M rows."""
    from .autodiff import Tensor, sigmoid

    fused = np.asarray(getattr(fused, "data", fused), dtype=np.float64)
    M = int(target_len) if target_len is not None else fused.shape[0] - network.config.n_queries
    logits, offsets = network.heads(Tensor(fused[None]))
    return Prediction(sigmoid(logits).data[0, :M], offsets.data[0, :M])


def temporal_iou(a, b):
    """Intersection over union of two time intervals; 0 for an empty union."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def decode_segments(pred: Prediction, frame_period_sec=2.0, frame_extent=True):
    """One candidate segment per frame position.

    With ``frame_extent`` the end of the moment is the end of frame
    ``i + right`` (each frame covers one sampling period), which makes decoded
    segments directly comparable to annotated timestamps. Without it, frame
    indices are mapped to their sampling instants.
    """
    if not frame_period_sec > 0:
        raise ValueError("frame_period_sec must be positive")
    M = len(pred.fg_probs)
    idx = np.arange(M, dtype=np.float64)
    ext = 1.0 if frame_extent else 0.0
    hi = (M if frame_extent else M - 1) * frame_period_sec
    starts = np.clip((idx - pred.offsets[:, 0]) * frame_period_sec, 0.0, hi)
    ends = np.clip((idx + pred.offsets[:, 1] + ext) * frame_period_sec, 0.0, hi)
    return [Segment(float(s), float(max(s, e)), float(p))
            for s, e, p in zip(starts, ends, pred.fg_probs)]


def _order(segments):
    return sorted(range(len(segments)),
                  key=lambda k: (-segments[k][2], segments[k][0], segments[k][1] - segments[k][0], k))


def nms_1d(segments, iou_threshold=NMS_THRESHOLD) -> List[Segment]:
    """Greedy 1-D non-maximum suppression.

    Candidates are visited by descending score (ties: earlier start, then
    shorter). A candidate is dropped if its IoU with any kept segment is
    strictly greater than the threshold.
    """
    if not segments:
        return []
    arr = np.asarray([(s[0], s[1]) for s in segments], dtype=np.float64)
    order = _order(segments)
    kept = []
    for k in order:
        if kept:
            ks = arr[kept]
            inter = np.clip(np.minimum(ks[:, 1], arr[k, 1]) - np.maximum(ks[:, 0], arr[k, 0]), 0.0, None)
            union = (ks[:, 1] - ks[:, 0]) + (arr[k, 1] - arr[k, 0]) - inter
            iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
            if np.any(iou > iou_threshold):
                continue
        kept.append(k)
    return [Segment(*segments[k]) for k in kept]


def select_top1(segments) -> Segment:
    """Highest-scoring segment; ties go to the earliest start."""
    if not segments:
        raise ValueError("no candidate segments to choose from")
    return Segment(*segments[_order(segments)[0]])
