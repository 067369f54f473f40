"""End-to-end acceptance checks. Each test records one PASS/FAIL line (see conftest)."""

import time

import numpy as np
import pytest

from xltal import model as mdl
from xltal import verify
from xltal.cli import main
from xltal.data import SyntheticSpec, generate_synthetic
from xltal.evaluate import average_precision
from xltal.model import Model, ModelConfig
from xltal.numerics import Array
from xltal.pipeline import evaluate_model, prepare
from xltal.postprocess import Detection
from xltal.training import TrainConfig, train


def test_gradient_suite(report):
    t0 = time.perf_counter()
    prim = verify.check_primitives()
    worst_prim = max(prim.values())
    model_errs = verify.check_model_gradients("recurrence")
    worst_model = max(model_errs.values())
    seconds = time.perf_counter() - t0
    ok = worst_prim < 1e-5 and worst_model < 1e-4 and seconds < 120
    report(
        "gradient suite", ok,
        f"primitives {worst_prim:.2e}, total_loss {worst_model:.2e}, {seconds:.0f}s",
    )
    assert worst_prim < 1e-5
    assert worst_model < 1e-4
    assert seconds < 120


def test_recurrence_equivalence_and_receptive_field(report):
    err = verify.recurrence_equivalence(T=64, L=32)
    deltas = verify.receptive_field_deltas(layers=3)
    outside = max(v for (n, s), v in deltas.items() if s > n)
    seg3_moves = deltas[(3, 3)] > 0
    ok = err < 1e-10 and outside < 1e-12 and seg3_moves
    report(
        "recurrence equivalence", ok,
        f"max abs err {err:.1e}, outside-field delta {outside:.1e}, "
        f"segment-3 delta at 3 layers {deltas[(3, 3)]:.2e}",
    )
    assert err < 1e-10
    assert outside < 1e-12
    assert seg3_moves


def test_permutation_mask_fixture(report):
    m = mdl.build_permutation_masks([2, 1, 3, 0], 0)
    expect_q = np.zeros((4, 4), dtype=bool)
    expect_q[0, [1, 2, 3]] = True  # x1 sees x2, x3, x4
    expect_q[1, [2]] = True  # x2 sees x3
    expect_q[3, [1, 2]] = True  # x4 sees x3, x2
    expect_c = expect_q | np.eye(4, dtype=bool)
    ok = np.array_equal(m.query_visible, expect_q) and np.array_equal(m.content_visible, expect_c)
    report("permutation mask fixture", ok, "x3 -> x2 -> x4 -> x1")
    assert ok


def test_pyramid_shape_law(report):
    cfg = ModelConfig(input_len=1024, fpn_levels=8)
    lengths = list(mdl.PyramidGeometry.for_config(cfg).lengths)
    ok = lengths == [1024, 512, 256, 128, 64, 32, 16, 8]
    report("pyramid shape law", ok, str(lengths))
    assert ok


def _level0_scores(mode: str, T: int, L: int, layers: int) -> int:
    cfg = ModelConfig(
        input_len=T, in_channels=4, embed_dim=8, num_heads=1, fpn_levels=1,
        encoder_mode=mode, segment_len=L, encoder_layers=layers, head_layers=1,
        num_classes=2,
    )
    x = Array(np.random.default_rng(0).standard_normal((T, 4)))
    with mdl.count_scores() as meter:
        mdl.forward(Model(cfg), x)
    return meter.counts[0]


def test_attention_memory_direction(report):
    T, L = 1024, 256
    base = _level0_scores("base", T, L, 1)
    split = _level0_scores("split", T, L, 1)
    rec = _level0_scores("recurrence", T, L, 1)
    rec_deep = _level0_scores("recurrence", T, L, 2) / 2
    bound = 2 * T * L
    ok = base == T * T and split <= bound and rec <= bound and bound == base // 2
    report(
        "attention memory direction", ok,
        f"base {base}, split {split}, recurrence {rec}, bound {bound}; "
        f"per layer in a 2-layer recurrence stack {rec_deep:.0f}",
    )
    assert base == T * T
    assert bound == base // 2
    assert split <= bound
    assert rec <= bound


def test_soft_nms_limits(report):
    ok, err = verify.nms_limit_ok(instances=100)
    report("soft-NMS limits", ok, f"hard-NMS set equality on 100 instances, duplicate decay err {err:.1e}")
    assert ok


def test_metric_oracle(report):
    ok, n_equal = verify.metric_oracle_ok(instances=500)
    gts = {"v": [(0.0, 10.0)]}
    ap_one = average_precision([Detection("v", 0.0, 6.0, 0, 0.9)], gts, 0.5)
    ap_half = average_precision(
        [Detection("v", 20.0, 30.0, 0, 0.9), Detection("v", 0.0, 10.0, 0, 0.8)], gts, 0.5
    )
    ok = ok and ap_one == 1.0 and ap_half == 0.5
    report(
        "metric oracle", ok,
        f"500 instances, equality on {n_equal} single-overlap cases; AP fixtures {ap_one}, {ap_half}",
    )
    assert ok


OVERFIT_SPEC = SyntheticSpec(num_videos=20, feature_len=128, channels=16, num_classes=3, snr=4.0, seed=7)


@pytest.mark.slow
@pytest.mark.parametrize("mode", ["recurrence", "base"])
def test_synthetic_overfit(mode, report):
    t0 = time.perf_counter()
    dataset = prepare(generate_synthetic(OVERFIT_SPEC), 256)
    cfg = ModelConfig(
        input_len=256, in_channels=16, embed_dim=32, num_heads=4, fpn_levels=2,
        encoder_mode=mode, segment_len=64, encoder_layers=2, head_layers=2,
        num_classes=3, seed=7,
    )
    model = Model(cfg)
    result = train(model, dataset, TrainConfig(lr=3e-3, epochs=150, seed=7))
    rep = evaluate_model(model, dataset)
    seconds = time.perf_counter() - t0
    first, last = result.log[0]["total"], result.log[-1]["total"]
    ok = rep.average_map >= 0.90 and rep.recall_1x >= 0.90 and seconds < 900
    report(
        f"synthetic overfit ({mode})", ok,
        f"avg mAP {rep.average_map:.4f}, recall@1x {rep.recall_1x:.4f}, "
        f"loss {first:.3f} -> {last:.3f}, {seconds:.0f}s",
    )
    assert rep.average_map >= 0.90
    assert rep.recall_1x >= 0.90
    assert seconds < 900


def test_determinism(tmp_path, report):
    spec = tmp_path / "spec.json"
    spec.write_text('{"num_videos": 3, "feature_len": 32, "channels": 4, "num_classes": 2, "duration_range": [2, 10], "seed": 1}')
    assert main(["synth", str(spec), str(tmp_path / "data")]) == 0
    args = [
        "--set", "model.input_len=32", "--set", "model.embed_dim=8", "--set", "model.num_heads=2",
        "--set", "model.fpn_levels=2", "--set", "model.segment_len=16",
        "--set", "model.encoder_layers=1", "--set", "model.head_layers=1",
        "--set", "train.epochs=2", "--set", "seed=5",
    ]
    blobs, preds = [], []
    for run in ("a", "b"):
        ckpt = tmp_path / f"{run}.ckpt"
        assert main(["train", *args, str(tmp_path / "data"), str(ckpt)]) == 0
        blobs.append(ckpt.read_bytes())
        out = tmp_path / f"{run}.json"
        assert main(["predict", str(tmp_path / "a.ckpt"), str(tmp_path / "data"), str(out)]) == 0
        preds.append(out.read_bytes())
    ok = blobs[0] == blobs[1] and preds[0] == preds[1]
    report("determinism", ok, f"checkpoint {len(blobs[0])} bytes, predictions {len(preds[0])} bytes")
    assert blobs[0] == blobs[1]
    assert preds[0] == preds[1]
