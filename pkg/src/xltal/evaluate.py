"""Temporal detection metrics: tIoU, AP / mAP over tIoU thresholds, Recall@kx."""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .data import AnnotationSet
from .postprocess import Detection

THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)


def tiou(a, b) -> float:
    """Temporal IoU of intervals ``a = (start, end)`` and ``b``."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def _tiou_matrix(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    s = np.maximum(dets[:, None, 0], gts[None, :, 0])
    e = np.minimum(dets[:, None, 1], gts[None, :, 1])
    inter = np.clip(e - s, 0.0, None)
    union = (dets[:, 1] - dets[:, 0])[:, None] + (gts[:, 1] - gts[:, 0])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def greedy_match(det_iv, gt_iv, thr: float) -> np.ndarray:
    """Score-ordered greedy one-to-one matching.

    ``det_iv`` must already be sorted by descending score. Each detection
    takes the unmatched ground truth with the highest tIoU, if that tIoU
    reaches ``thr``. Returns a bool array marking true positives.
    """
    det_iv = np.asarray(det_iv, dtype=np.float64).reshape(-1, 2)
    gt_iv = np.asarray(gt_iv, dtype=np.float64).reshape(-1, 2)
    ious = _tiou_matrix(det_iv, gt_iv)
    taken = np.zeros(len(gt_iv), dtype=bool)
    tp = np.zeros(len(det_iv), dtype=bool)
    for i in range(len(det_iv)):
        if not len(gt_iv):
            break
        cand = np.where(taken, -1.0, ious[i])
        j = int(cand.argmax())
        if cand[j] >= thr:
            taken[j] = True
            tp[i] = True
    return tp


def oracle_match(det_iv, gt_iv, thr: float) -> tuple[int, float]:
    """Exhaustive best injective assignment: (max TP count, total tIoU of that assignment).

    Only for tiny instances (at most 5 detections and 3 ground truths).
    """
    det_iv = np.asarray(det_iv, dtype=np.float64).reshape(-1, 2)
    gt_iv = np.asarray(gt_iv, dtype=np.float64).reshape(-1, 2)
    if len(det_iv) > 5 or len(gt_iv) > 3:
        raise ValueError("oracle_match handles at most 5 detections and 3 ground truths")
    ious = _tiou_matrix(det_iv, gt_iv)
    best = (0, 0.0)
    # each detection picks a ground truth index or -1 (unmatched)
    for assign in itertools.product(range(-1, len(gt_iv)), repeat=len(det_iv)):
        used = [j for j in assign if j >= 0]
        if len(used) != len(set(used)):
            continue
        tp, total = 0, 0.0
        for i, j in enumerate(assign):
            if j >= 0 and ious[i, j] >= thr:
                tp += 1
                total += ious[i, j]
        if (tp, total) > best:
            best = (tp, total)
    return best


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """Area under the all-point interpolated precision-recall curve."""
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / num_gt
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mprec = np.maximum.accumulate(mprec[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mprec[steps]))


def average_precision(dets: list[Detection], gts: dict[str, list], thr: float) -> float:
    """AP for one class pooled over videos.

    ``gts`` maps video id to a list of (start, end) ground truths of this
    class. Detections are ranked by score across all videos; matching is
    per video.
    """
    num_gt = sum(len(v) for v in gts.values())
    if num_gt == 0:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].start_s))
    ranked = [dets[i] for i in order]
    tp = np.zeros(len(ranked), dtype=bool)
    by_video = defaultdict(list)
    for rank, d in enumerate(ranked):
        by_video[d.video_id].append(rank)
    for vid, ranks in by_video.items():
        iv = [(ranked[r].start_s, ranked[r].end_s) for r in ranks]
        tp[ranks] = greedy_match(iv, gts.get(vid, []), thr)
    return interpolated_ap(tp, num_gt)


@dataclass
class EvalReport:
    map_at: dict[float, float]
    average_map: float
    recall_1x: float
    per_class_ap: dict[int, dict[float, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        pct = lambda v: round(100.0 * v, 2)  # noqa: E731
        return {
            "mAP@0.1": pct(self.map_at[0.1]),
            "mAP@0.3": pct(self.map_at[0.3]),
            "mAP@0.5": pct(self.map_at[0.5]),
            "avg_mAP": pct(self.average_map),
            "recall@1x_tiou0.5": pct(self.recall_1x),
        }


def _group(dets: dict[str, list[Detection]], anns: dict[str, AnnotationSet]):
    det_by_class = defaultdict(list)
    for vid, items in dets.items():
        for d in items:
            det_by_class[d.label].append(d)
    gt_by_class = defaultdict(lambda: defaultdict(list))
    for vid, ann in anns.items():
        for inst in ann.instances:
            gt_by_class[inst.label][vid].append((inst.start_s, inst.end_s))
    return det_by_class, gt_by_class


def mean_ap(
    dets: dict[str, list[Detection]],
    anns: dict[str, AnnotationSet],
    thresholds=THRESHOLDS,
) -> tuple[dict[float, float], float, dict[int, dict[float, float]]]:
    """Per-threshold mAP over classes that have ground truth, and their mean."""
    det_by_class, gt_by_class = _group(dets, anns)
    classes = sorted(k for k, g in gt_by_class.items() if any(g.values()))
    per_class = {k: {} for k in classes}
    maps = {}
    for thr in thresholds:
        aps = [average_precision(det_by_class.get(k, []), gt_by_class[k], thr) for k in classes]
        for k, ap in zip(classes, aps):
            per_class[k][thr] = ap
        maps[thr] = float(np.mean(aps)) if aps else 0.0
    return maps, float(np.mean(list(maps.values()))), per_class


def recall_at_kx(
    dets: dict[str, list[Detection]],
    anns: dict[str, AnnotationSet],
    k: float = 1,
    thr: float = 0.5,
    pooling: str = "group",
) -> float:
    """Fraction of ground truths recovered with a budget of k detections per ground truth.

    ``pooling="group"`` applies the budget per (video, class); ``"video"``
    applies it per video across classes, still matching only equal labels.
    """
    if pooling not in ("group", "video"):
        raise ValueError(f"unknown pooling {pooling!r}")
    recalled = total = 0
    for vid, ann in anns.items():
        vdets = dets.get(vid, [])
        if pooling == "video":
            budget = int(round(k * len(ann.instances)))
            kept = sorted(vdets, key=lambda d: (-d.score, d.start_s))[:budget]
        labels = sorted({i.label for i in ann.instances})
        for label in labels:
            gts = [(i.start_s, i.end_s) for i in ann.instances if i.label == label]
            total += len(gts)
            if pooling == "group":
                cand = [d for d in vdets if d.label == label]
                cand = sorted(cand, key=lambda d: (-d.score, d.start_s))[: int(round(k * len(gts)))]
            else:
                cand = [d for d in kept if d.label == label]
            tp = greedy_match([(d.start_s, d.end_s) for d in cand], gts, thr)
            recalled += int(tp.sum())
    return recalled / total if total else 0.0


def evaluate(
    dets: dict[str, list[Detection]],
    anns: dict[str, AnnotationSet],
    thresholds=THRESHOLDS,
    recall_pooling: str = "group",
) -> EvalReport:
    maps, avg, per_class = mean_ap(dets, anns, thresholds)
    rec = recall_at_kx(dets, anns, 1, 0.5, recall_pooling)
    return EvalReport(maps, avg, rec, per_class)
