import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xltal.data import AnnotationSet, Instance
from xltal.evaluate import (
    average_precision,
    evaluate,
    greedy_match,
    mean_ap,
    oracle_match,
    recall_at_kx,
    tiou,
)
from xltal.postprocess import Detection


def det(s, e, score, label=0, vid="v"):
    return Detection(vid, float(s), float(e), label, score)


def ann(*items, K=2, vid="v"):
    return AnnotationSet(vid, [Instance(float(s), float(e), k) for s, e, k in items], K)


def test_tiou_examples():
    assert tiou((1, 3), (1, 3)) == 1.0
    assert tiou((0, 1), (2, 3)) == 0.0
    assert tiou((2, 6), (4, 8)) == pytest.approx(1 / 3)


@given(st.floats(0, 10), st.floats(0.1, 5), st.floats(0, 10), st.floats(0.1, 5))
def test_tiou_symmetric_bounded(a, la, b, lb):
    x, y = (a, a + la), (b, b + lb)
    assert tiou(x, y) == pytest.approx(tiou(y, x))
    assert 0.0 <= tiou(x, y) <= 1.0


# AP -----------------------------------------------------------------------------------


def test_ap_examples():
    gts = {"v": [(0.0, 10.0)]}
    assert average_precision([det(0, 6, 0.9)], gts, 0.5) == 1.0
    assert average_precision([det(20, 30, 0.9), det(0, 10, 0.8)], gts, 0.5) == 0.5
    assert average_precision([], gts, 0.5) == 0.0


def brute_force_ap(dets, gts, thr):
    """PR curve by explicit loops; AP = sum of recall steps times the best precision to the right."""
    order = sorted(dets, key=lambda d: -d[2])
    taken = set()
    points = []
    tp = 0
    for rank, (s, e, _) in enumerate(order, 1):
        best, best_j = -1.0, None
        for j, g in enumerate(gts):
            if j in taken:
                continue
            v = tiou((s, e), g)
            if v > best:
                best, best_j = v, j
        if best_j is not None and best >= thr:
            taken.add(best_j)
            tp += 1
        points.append((tp / len(gts), tp / rank))
    ap, prev_r = 0.0, 0.0
    for r, _ in points:
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in points if rr >= r)
            prev_r = r
    return ap


@settings(max_examples=200)
@given(
    st.lists(st.tuples(st.floats(0, 10), st.floats(0.5, 4)), min_size=3, max_size=3),
    st.lists(st.tuples(st.floats(0, 10), st.floats(0.5, 4)), min_size=2, max_size=2),
    st.permutations([0.9, 0.6, 0.3]),
    st.sampled_from([0.1, 0.3, 0.5]),
)
def test_ap_matches_brute_force(d, g, scores, thr):
    dets = [(s, s + l, p) for (s, l), p in zip(d, scores)]
    gts = [(s, s + l) for s, l in g]
    got = average_precision([det(s, e, p) for s, e, p in dets], {"v": gts}, thr)
    assert got == pytest.approx(brute_force_ap(dets, gts, thr), abs=1e-12)


def test_ap_pools_across_videos():
    dets = [det(0, 5, 0.9, vid="a"), det(0, 5, 0.8, vid="b")]
    assert average_precision(dets, {"a": [(0.0, 5.0)], "b": [(10.0, 15.0)]}, 0.5) == 0.5


# mAP --------------------------------------------------------------------------------


def test_map_perfect_and_half():
    anns = {"v": ann((0, 5, 0), (10, 15, 1))}
    perfect = {"v": [det(0, 5, 1.0, 0), det(10, 15, 1.0, 1)]}
    maps, avg, _ = mean_ap(perfect, anns)
    assert all(v == 1.0 for v in maps.values()) and avg == 1.0
    maps, avg, _ = mean_ap({"v": [det(0, 5, 1.0, 0)]}, anns)
    assert avg == 0.5


def test_map_ignores_classes_without_gt():
    anns = {"v": ann((0, 5, 0), K=3)}
    _, avg, per_class = mean_ap({"v": [det(0, 5, 0.9, 0), det(20, 25, 0.9, 2)]}, anns)
    assert avg == 1.0 and set(per_class) == {0}


@settings(max_examples=40)
@given(st.lists(st.floats(0.01, 0.99), min_size=3, max_size=3, unique=True))
def test_map_invariant_to_monotone_score_transform(scores):
    anns = {"v": ann((0, 5, 0), (8, 12, 0))}
    dets = [det(0, 4, scores[0]), det(8, 12, scores[1]), det(20, 22, scores[2])]
    squashed = [Detection(d.video_id, d.start_s, d.end_s, d.label, d.score**3) for d in dets]
    assert mean_ap({"v": dets}, anns)[1] == mean_ap({"v": squashed}, anns)[1]


# Recall@kx ------------------------------------------------------------------------


def test_recall_examples():
    anns = {"v": ann((0, 10, 0))}
    assert recall_at_kx({"v": [det(0, 6, 0.9)]}, anns) == 1.0
    assert recall_at_kx({"v": [det(0, 4, 0.9), det(0, 9, 0.5)]}, anns) == 0.0
    two = {"v": ann((0, 10, 0), (20, 30, 0))}
    assert recall_at_kx({"v": [det(0, 10, 0.9), det(20, 30, 0.8)]}, two) == 1.0


def test_recall_pooling_modes():
    anns = {"v": ann((0, 10, 0), (20, 30, 1))}
    dets = {"v": [det(40, 50, 0.95, 0), det(0, 10, 0.9, 0), det(20, 30, 0.8, 1)]}
    # per (video, class) budget: class 0 keeps only its best (a miss)
    assert recall_at_kx(dets, anns, pooling="group") == 0.5
    # per-video budget of 2 keeps the miss and the class-0 hit
    assert recall_at_kx(dets, anns, pooling="video") == 0.5
    with pytest.raises(ValueError):
        recall_at_kx(dets, anns, pooling="bogus")


def test_recall_requires_matching_label():
    anns = {"v": ann((0, 10, 0))}
    assert recall_at_kx({"v": [det(0, 10, 0.9, label=1)]}, anns) == 0.0


# matching ---------------------------------------------------------------------------


def test_oracle_examples():
    assert oracle_match(np.zeros((0, 2)), [(0, 1)], 0.5) == (0, 0.0)
    tp, _ = oracle_match([(0.0, 10.0)], [(0.0, 5.0), (5.0, 10.0)], 0.3)
    assert tp == 1
    with pytest.raises(ValueError):
        oracle_match(np.zeros((6, 2)), [], 0.5)


def test_greedy_suboptimal_case():
    # the first detection grabs the GT the second needs
    dets = [(0.0, 6.0), (3.0, 6.0)]
    gts = [(0.0, 5.0), (3.0, 6.5)]
    assert greedy_match(dets, gts, 0.5).sum() <= oracle_match(dets, gts, 0.5)[0]


def test_metric_oracle_suite():
    from xltal.verify import metric_oracle_ok

    ok, n = metric_oracle_ok(instances=300, seed=5)
    assert ok and n > 0


# report ------------------------------------------------------------------------------


def test_evaluate_report_json():
    anns = {"v": ann((0, 5, 0))}
    report = evaluate({"v": [det(0, 5, 1.0)]}, anns).to_json()
    assert report == {
        "mAP@0.1": 100.0, "mAP@0.3": 100.0, "mAP@0.5": 100.0, "avg_mAP": 100.0, "recall@1x_tiou0.5": 100.0,
    }
    assert all(v == 0.0 for v in evaluate({}, anns).to_json().values())
