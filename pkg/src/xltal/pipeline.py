"""Glue between data, model, post-processing and metrics."""

from __future__ import annotations

from .data import AnnotationSet, FeatureSequence, clip_annotations, resize_sequence
from .evaluate import EvalReport, evaluate
from .model import Model, forward
from .postprocess import Detection, PostprocessConfig, postprocess


def prepare(dataset, input_len: int) -> list[tuple[FeatureSequence, AnnotationSet]]:
    """Resize every sequence to ``input_len`` and clip annotations to the new span."""
    out = []
    for seq, ann in dataset:
        r = resize_sequence(seq, input_len)
        out.append((r, clip_annotations(ann, r)))
    return out


def predict(model: Model, sequences, cfg: PostprocessConfig | None = None) -> dict[str, list[Detection]]:
    cfg = cfg or PostprocessConfig()
    out = {}
    for seq in sequences:
        raw = forward(model, seq, training=False)
        out[seq.video_id] = postprocess(raw, seq, cfg)
    return out


def evaluate_model(model: Model, dataset, cfg: PostprocessConfig | None = None) -> EvalReport:
    preds = predict(model, [s for s, _ in dataset], cfg)
    return evaluate(preds, {a.video_id: a for _, a in dataset})
