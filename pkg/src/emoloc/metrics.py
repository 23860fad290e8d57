"""Temporal localization metrics: recall@IoU (top-1), mean IoU, and mAP.

Intervals are inclusive segment-index pairs, so ``[2, 2]`` covers one segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RECALL_THRESHOLDS = (0.5, 0.7)
MAP_THRESHOLDS = (0.1, 0.3, 0.5, 0.7)


def temporal_iou(a, b) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def ground_truth_of(episodes) -> dict[tuple[str, int], list[tuple[int, int]]]:
    gt = {}
    for ep in episodes:
        for e, spans in (ep.gt_intervals or {}).items():
            gt[(ep.episode_id, e)] = list(spans)
    return gt


def _rank_key(det):
    # confidence first; the rest only makes ties order-independent
    return (-det.confidence, det.episode_id, det.emotion, det.start, det.end)


@dataclass
class EvalReport:
    recall_at: dict[float, float] = field(default_factory=dict)
    mean_iou: float = 0.0
    mean_ap: float = 0.0
    per_class_ap: dict[int, dict[float, float]] = field(default_factory=dict)
    n_instances: int = 0
    n_intervals: int = 0
    n_detections: int = 0

    def text(self) -> str:
        lines = [f"R@{t:g}={v:.4f}" for t, v in sorted(self.recall_at.items())]
        lines += [
            f"mIoU={self.mean_iou:.4f}",
            f"mAP={self.mean_ap:.4f}",
            f"gt_instances={self.n_instances}",
            f"gt_intervals={self.n_intervals}",
            f"detections={self.n_detections}",
        ]
        return "\n".join(lines) + "\n"

    def class_table(self) -> str:
        ths = sorted({t for row in self.per_class_ap.values() for t in row})
        lines = ["class," + ",".join(f"AP@{t:g}" for t in ths) + ",mean"]
        for e in sorted(self.per_class_ap):
            row = self.per_class_ap[e]
            vals = [row[t] for t in ths]
            lines.append(f"{e}," + ",".join(f"{v:.4f}" for v in vals) + f",{np.mean(vals):.4f}")
        return "\n".join(lines) + "\n"


def recall_and_miou(detections, ground_truth, thresholds=RECALL_THRESHOLDS) -> EvalReport:
    """Top-1 protocol: each (episode, emotion) instance is scored by its single
    most confident detection; the IoU is the best over that instance's intervals."""
    best = {}
    for det in sorted(detections, key=_rank_key):
        best.setdefault((det.episode_id, det.emotion), det)
    ious = []
    for key, spans in ground_truth.items():
        det = best.get(key)
        if det is None:
            ious.append(0.0)
        else:
            ious.append(max(temporal_iou((det.start, det.end), s) for s in spans))
    ious = np.asarray(ious)
    rep = EvalReport(n_instances=len(ground_truth),
                     n_intervals=sum(len(s) for s in ground_truth.values()),
                     n_detections=len(detections))
    for t in thresholds:
        rep.recall_at[t] = 100.0 * float(np.mean(ious >= t)) if ious.size else 0.0
    rep.mean_iou = 100.0 * float(ious.mean()) if ious.size else 0.0
    return rep


def average_precision(detections, ground_truth, emotion: int, threshold: float) -> float:
    """Ranked-list AP for one class with greedy matching at one IoU threshold."""
    gts = {ep: list(spans) for (ep, e), spans in ground_truth.items() if e == emotion}
    n_gt = sum(len(s) for s in gts.values())
    if n_gt == 0:
        return 0.0
    used = {ep: [False] * len(spans) for ep, spans in gts.items()}
    tp = 0
    total = 0.0
    dets = sorted((d for d in detections if d.emotion == emotion), key=_rank_key)
    for rank, det in enumerate(dets, start=1):
        spans = gts.get(det.episode_id, [])
        best_j, best_iou = -1, -1.0
        for j, span in enumerate(spans):
            if used[det.episode_id][j]:
                continue
            iou = temporal_iou((det.start, det.end), span)
            if iou >= threshold and iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            used[det.episode_id][best_j] = True
            tp += 1
            total += tp / rank
    return total / n_gt


def mean_ap(detections, ground_truth, thresholds=MAP_THRESHOLDS) -> tuple[float, dict]:
    classes = sorted({e for (_, e) in ground_truth})
    table = {
        e: {t: average_precision(detections, ground_truth, e, t) for t in thresholds}
        for e in classes
    }
    if not table:
        return 0.0, table
    per_class = [np.mean(list(row.values())) for row in table.values()]
    return 100.0 * float(np.mean(per_class)), table


def evaluate(detections, ground_truth) -> EvalReport:
    rep = recall_and_miou(detections, ground_truth)
    rep.mean_ap, rep.per_class_ap = mean_ap(detections, ground_truth)
    return rep
