"""Decoding per-location predictions into detections, Soft-NMS and top-k."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FeatureSequence, index_to_time
from .model import RawPredictions
from .numerics import stable_sigmoid


@dataclass(frozen=True)
class Detection:
    video_id: str
    start_s: float
    end_s: float
    label: int
    score: float

    def __post_init__(self):
        if not self.start_s < self.end_s:
            raise ValueError(f"empty detection interval [{self.start_s}, {self.end_s}]")
        if not 0.0 < self.score <= 1.0:
            raise ValueError(f"score {self.score} outside (0, 1]")


@dataclass(frozen=True)
class PostprocessConfig:
    score_floor: float = 0.001
    pre_nms_topk: int = 2000
    sigma: float = 0.5
    hard_iou: float | None = None
    final_floor: float = 1e-3
    max_detections: int = 1000

    @classmethod
    def from_dict(cls, d: dict) -> "PostprocessConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown postprocess config keys: {sorted(unknown)}")
        return cls(**d)


def interval_iou(a_start, a_end, b_start, b_end):
    inter = np.maximum(0.0, np.minimum(a_end, b_end) - np.maximum(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def decode(
    raw: RawPredictions, seq: FeatureSequence, score_floor: float = 0.001
) -> list[Detection]:
    """Turn every (level, location, class) above ``score_floor`` into a detection.

    Location i on level l with offsets (b, e) covers level-0 indices
    [(i - b) * 2^l, (i + e) * 2^l], clipped to the sequence.
    """
    T = seq.length
    out = []
    for l, (logit, off) in enumerate(zip(raw.logits, raw.offsets)):
        stride = 2**l
        scores = stable_sigmoid(np.asarray(logit.data if hasattr(logit, "data") else logit))
        off = np.asarray(off.data if hasattr(off, "data") else off)
        centre = np.arange(scores.shape[0]) * stride
        start = np.clip(centre - off[:, 0] * stride, 0, T - 1)
        end = np.clip(centre + off[:, 1] * stride, 0, T - 1)
        loc, cls = np.nonzero(scores > score_floor)
        for i, k in zip(loc, cls):
            s, e = index_to_time(seq, start[i]), index_to_time(seq, end[i])
            if s < e:
                out.append(Detection(seq.video_id, s, e, int(k), float(scores[i, k])))
    return out


def sort_detections(dets: list[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (-d.score, d.start_s))


def top_k(dets: list[Detection], k: int = 1000) -> list[Detection]:
    return sort_detections(dets)[:k]


def soft_nms(
    dets: list[Detection],
    sigma: float = 0.5,
    hard_iou: float | None = None,
    final_floor: float = 1e-3,
) -> list[Detection]:
    """Class-agnostic Gaussian Soft-NMS.

    Repeatedly takes the highest remaining score and multiplies the others by
    exp(-tiou^2 / sigma). ``sigma == 0`` is the limit: any overlap removes the
    box. With ``hard_iou`` set, plain NMS is run instead, removing boxes whose
    tIoU with a selected one exceeds it. Boxes whose score falls below
    ``final_floor`` are dropped.
    """
    if not dets:
        return []
    starts = np.array([d.start_s for d in dets])
    ends = np.array([d.end_s for d in dets])
    scores = np.array([d.score for d in dets], dtype=np.float64)
    alive = np.ones(len(dets), dtype=bool)
    keep = []
    while alive.any():
        cand = np.nonzero(alive)[0]
        # highest score first, earlier start on ties, then input order
        best = cand[np.lexsort((cand, starts[cand], -scores[cand]))[0]]
        if scores[best] < final_floor:
            break
        keep.append((best, scores[best]))
        alive[best] = False
        rest = np.nonzero(alive)[0]
        if not len(rest):
            break
        iou = interval_iou(starts[best], ends[best], starts[rest], ends[rest])
        if hard_iou is not None:
            weight = np.where(iou > hard_iou, 0.0, 1.0)
        elif sigma == 0:
            weight = np.where(iou > 0, 0.0, 1.0)
        else:
            weight = np.exp(-(iou * iou) / sigma)
        scores[rest] = scores[rest] * weight
        alive[rest] &= scores[rest] >= final_floor
    return [
        Detection(dets[i].video_id, dets[i].start_s, dets[i].end_s, dets[i].label, float(s))
        for i, s in keep
    ]


def postprocess(raw: RawPredictions, seq: FeatureSequence, cfg: PostprocessConfig) -> list[Detection]:
    dets = top_k(decode(raw, seq, cfg.score_floor), cfg.pre_nms_topk)
    dets = soft_nms(dets, cfg.sigma, cfg.hard_iou, cfg.final_floor)
    return top_k(dets, cfg.max_detections)


# predictions file --------------------------------------------------------------------------


def predictions_to_json(preds: dict[str, list[Detection]]) -> dict:
    return {
        vid: [
            {"segment": [d.start_s, d.end_s], "label": d.label, "score": d.score}
            for d in dets
        ]
        for vid, dets in preds.items()
    }


def write_predictions(path, preds: dict[str, list[Detection]]) -> None:
    Path(path).write_text(json.dumps(predictions_to_json(preds), indent=1) + "\n")


def read_predictions(path) -> dict[str, list[Detection]]:
    doc = json.loads(Path(path).read_text())
    out = {}
    for vid, items in doc.items():
        if len(items) > 1000:
            raise ValueError(f"{vid}: {len(items)} detections exceeds the 1000 cap")
        out[vid] = [
            Detection(vid, float(d["segment"][0]), float(d["segment"][1]), int(d["label"]), float(d["score"]))
            for d in items
        ]
    return out
