import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xltal.data import FeatureSequence
from xltal.model import RawPredictions
from xltal.numerics import Array
from xltal.postprocess import (
    Detection,
    PostprocessConfig,
    decode,
    postprocess,
    read_predictions,
    soft_nms,
    top_k,
    write_predictions,
)
from xltal.verify import hard_nms_reference


def unit_seq(T):
    return FeatureSequence("v", np.zeros((T, 1)), fps=1.0, window=0.0, stride_frames=1.0)


def one_hot_raw(lengths, level, i, b, e, K=1):
    logits, offsets = [], []
    for l, n in enumerate(lengths):
        lg = np.full((n, K), -30.0)
        off = np.ones((n, 2))
        if l == level:
            lg[i, 0] = 30.0
            off[i] = (b, e)
        logits.append(Array(lg))
        offsets.append(Array(off))
    return RawPredictions(logits, offsets)


@pytest.mark.parametrize("level, i, b, e, expect", [(0, 10, 3, 5, (7, 15)), (2, 2, 1, 1, (4, 12))])
def test_decode_examples(level, i, b, e, expect):
    dets = decode(one_hot_raw((32, 16, 8), level, i, b, e), unit_seq(32), score_floor=0.5)
    assert [(d.start_s, d.end_s) for d in dets] == [expect]


def test_decode_floor_one_is_empty():
    assert decode(one_hot_raw((32,), 0, 4, 1, 1), unit_seq(32), score_floor=1.0) == []


def test_decode_clips_to_sequence():
    (d,) = decode(one_hot_raw((32,), 0, 2, 10, 50), unit_seq(32), score_floor=0.5)
    assert (d.start_s, d.end_s) == (0.0, 31.0)


# soft-NMS ---------------------------------------------------------------------------


def test_duplicate_decay():
    dets = [Detection("v", 1.0, 5.0, 0, 0.9), Detection("v", 1.0, 5.0, 0, 0.8)]
    out = soft_nms(dets, sigma=0.5)
    assert out[0].score == 0.9
    assert abs(out[1].score - 0.8 * math.exp(-2.0)) < 1e-12


def test_disjoint_unchanged():
    dets = [Detection("v", 0.0, 1.0, 0, 0.9), Detection("v", 2.0, 3.0, 1, 0.4)]
    assert soft_nms(dets) == dets


def test_class_agnostic():
    dets = [Detection("v", 0.0, 4.0, 0, 0.9), Detection("v", 0.0, 4.0, 1, 0.8)]
    assert len(soft_nms(dets, sigma=0.0)) == 1


def test_hard_iou_threshold():
    dets = [Detection("v", 0.0, 4.0, 0, 0.9), Detection("v", 2.0, 6.0, 0, 0.8), Detection("v", 0.0, 3.9, 0, 0.7)]
    kept = soft_nms(dets, hard_iou=0.5)
    assert [d.score for d in kept] == [0.9, 0.8]


def test_final_floor_drops():
    dets = [Detection("v", 0.0, 4.0, 0, 0.9), Detection("v", 0.0, 4.0, 0, 0.002)]
    assert len(soft_nms(dets, sigma=0.5, final_floor=1e-3)) == 1


detections = st.lists(
    st.tuples(st.integers(0, 40), st.integers(1, 12), st.integers(0, 2), st.floats(0.01, 1.0)),
    max_size=15,
).map(lambda xs: [Detection("v", float(s), float(s + d), k, p) for s, d, k, p in xs])


@settings(max_examples=80)
@given(detections)
def test_hard_limit_matches_reference_and_is_idempotent(dets):
    once = soft_nms(dets, sigma=0.0)
    ref = hard_nms_reference(dets)
    assert {(d.start_s, d.end_s, d.score) for d in once} == {(d.start_s, d.end_s, d.score) for d in ref}
    assert soft_nms(once, sigma=0.0) == once


@given(detections)
def test_soft_nms_never_raises_scores(dets):
    out = soft_nms(dets, sigma=0.5)
    assert len(out) <= len(dets)
    for d in out:
        same = [x.score for x in dets if (x.start_s, x.end_s, x.label) == (d.start_s, d.end_s, d.label)]
        assert d.score <= max(same)
    assert all(d.score >= 1e-3 for d in out)


# top-k ---------------------------------------------------------------------------


def test_top_k():
    dets = [Detection("v", float(i), float(i + 1), 0, s) for i, s in enumerate([0.2, 0.9, 0.5])]
    assert top_k(dets, 1000) == sorted(dets, key=lambda d: -d.score)
    assert top_k(dets, 1) == [dets[1]]


def test_top_k_ties_by_start():
    dets = [Detection("v", 5.0, 6.0, 0, 0.5), Detection("v", 1.0, 2.0, 0, 0.5)]
    assert [d.start_s for d in top_k(dets, 2)] == [1.0, 5.0]


def test_postprocess_caps():
    lg = np.full((64, 2), 5.0)
    off = np.ones((64, 2)) * 0.4
    raw = RawPredictions([Array(lg)], [Array(off)])
    out = postprocess(raw, unit_seq(64), PostprocessConfig(max_detections=10))
    assert len(out) <= 10
    assert [d.score for d in out] == sorted((d.score for d in out), reverse=True)


# predictions file -------------------------------------------------------------------


def test_predictions_round_trip(tmp_path):
    preds = {"a": [Detection("a", 0.5, 2.25, 1, 0.75)], "b": []}
    write_predictions(tmp_path / "p.json", preds)
    assert read_predictions(tmp_path / "p.json") == preds


def test_predictions_cap(tmp_path):
    preds = {"a": [Detection("a", float(i), float(i) + 1, 0, 0.5) for i in range(1001)]}
    write_predictions(tmp_path / "p.json", preds)
    with pytest.raises(ValueError):
        read_predictions(tmp_path / "p.json")


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection("v", 2.0, 2.0, 0, 0.5)
    with pytest.raises(ValueError):
        Detection("v", 1.0, 2.0, 0, 0.0)
