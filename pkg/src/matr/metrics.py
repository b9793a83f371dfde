"""mIoU and Recall@1 over (target, query) pairs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Mapping, Tuple

from .decoding import temporal_iou

RECALL_IOU = 0.5

PairId = Tuple[str, str]


@dataclass
class EvalReport:
    miou: float
    recall_at_1: float
    records: List[dict] = field(default_factory=list)

    @property
    def n_pairs(self):
        return len(self.records)

    def to_dict(self):
        return {"mIoU": self.miou, "R@1": self.recall_at_1, "n_pairs": self.n_pairs,
                "records": self.records}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self):
        lines = [
            f"{'pairs':<8}{'mIoU':>10}{'R@1 (IoU>=0.5)':>18}",
            f"{self.n_pairs:<8d}{100 * self.miou:>10.2f}{100 * self.recall_at_1:>18.2f}",
        ]
        return "\n".join(lines)


def _key(pid):
    return tuple(pid) if not isinstance(pid, str) else (pid, "")


def evaluate(predictions: Mapping, ground_truth: Mapping) -> EvalReport:
    """Score top-1 predictions against ground-truth moments.

    Both mappings are keyed by pair id; values are ``(start_sec, end_sec)``
    (extra tuple fields are ignored). Pairs with no prediction score 0.
    """
    unknown = [k for k in predictions if k not in ground_truth]
    if unknown:
        raise KeyError(f"predictions for unknown pair ids: {sorted(map(str, unknown))}")
    records = []
    for pid, gt in ground_truth.items():
        gt = (float(gt[0]), float(gt[1]))
        if not gt[1] > gt[0]:
            raise ValueError(f"ground truth for {pid} has zero or negative length: {gt}")
        pred = predictions.get(pid)
        if pred is None:
            iou, pseg = 0.0, None
        else:
            pseg = (float(pred[0]), float(pred[1]))
            iou = temporal_iou(pseg, gt) if pseg[1] > pseg[0] else 0.0
        records.append({"id": list(_key(pid)), "gt": list(gt),
                        "pred": None if pseg is None else list(pseg), "iou": iou})
    if not records:
        return EvalReport(0.0, 0.0, [])
    n = len(records)
    miou = sum(r["iou"] for r in records) / n
    hits = sum(1 for r in records if r["iou"] >= RECALL_IOU)
    return EvalReport(miou, hits / n, records)
