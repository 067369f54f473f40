import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xltal import data as D
from xltal.data import AnnotationSet, FeatureSequence, Instance, SyntheticSpec


def seq(T=8, C=2, **kw):
    return FeatureSequence("v", np.arange(T * C, dtype=float).reshape(T, C), **kw)


# time mapping ---------------------------------------------------------------


def test_index_to_time_example():
    s = seq(fps=30, window=32, stride_frames=16)
    assert D.index_to_time(s, 0) == pytest.approx(16 / 30)


@given(st.floats(-50, 500, allow_nan=False))
def test_time_round_trip(i):
    s = seq()
    assert D.time_to_index(s, D.index_to_time(s, i)) == pytest.approx(i, abs=1e-9)


# transforms -----------------------------------------------------------------


def test_concat_channelwise():
    a = FeatureSequence("v", np.zeros((64, 4)))
    b = FeatureSequence("v", np.ones((64, 3)))
    assert D.concat_channelwise(a, b).channels == 7
    empty = FeatureSequence("v", np.zeros((64, 0)))
    np.testing.assert_array_equal(D.concat_channelwise(a, empty).features, a.features)
    with pytest.raises(ValueError):
        D.concat_channelwise(a, FeatureSequence("v", np.zeros((65, 3))))


def test_resize_examples():
    s = FeatureSequence("v", np.array([[0.0], [2.0]]))
    np.testing.assert_allclose(D.resize_sequence(s, 3).features.ravel(), [0, 1, 2])
    s = seq(T=10)
    np.testing.assert_array_equal(D.resize_sequence(s, 10).features, s.features)


@given(st.integers(2, 40), st.integers(2, 80), st.floats(-3, 3))
def test_resize_constant_and_endpoints(T, target, c):
    s = FeatureSequence("v", np.full((T, 2), c))
    r = D.resize_sequence(s, target)
    assert r.length == target
    np.testing.assert_allclose(r.features, c)
    # first and last timestamps are preserved
    assert D.index_to_time(r, 0) == pytest.approx(D.index_to_time(s, 0))
    assert D.index_to_time(r, target - 1) == pytest.approx(D.index_to_time(s, T - 1))


def test_clip_annotations_warns(caplog):
    # feature timestamps span [2, 11] seconds
    s = seq(T=10, fps=1.0, window=4.0, stride_frames=1.0)
    ann = AnnotationSet("v", [Instance(0.5, 3.0, 0), Instance(20.0, 30.0, 1)], 2)
    out = D.clip_annotations(ann, s)
    assert out.instances == [Instance(2.0, 3.0, 0)]
    assert "clipped" in caplog.text


# validation -------------------------------------------------------------------


def test_annotation_validation():
    with pytest.raises(ValueError):
        AnnotationSet("v", [Instance(3.0, 3.0, 0)], 2)
    with pytest.raises(ValueError):
        AnnotationSet("v", [Instance(1.0, 3.0, 2)], 2)


def test_feature_sequence_rejects_nan():
    with pytest.raises(ValueError):
        FeatureSequence("v", np.array([[np.nan]]))


# file formats ----------------------------------------------------------------


def write_manifest(tmp_path, T=64, C=8, rows=None):
    D.write_features(tmp_path / "a.bin", np.ones((T if rows is None else rows, C)))
    entry = dict(video_id="a", feature_file="a.bin", fps=30.0, window=32.0, stride_frames=16.0, T_f=T, C=C)
    (tmp_path / "manifest.json").write_text(json.dumps([entry]))
    (tmp_path / "annotations.json").write_text(json.dumps({"num_classes": 2, "videos": {}}))
    return tmp_path / "manifest.json"


def test_load_dataset_shape(tmp_path):
    pairs = D.load_dataset(write_manifest(tmp_path))
    assert len(pairs) == 1
    assert pairs[0][0].features.shape == (64, 8)
    assert pairs[0][1].instances == []


def test_load_dataset_empty(tmp_path):
    (tmp_path / "manifest.json").write_text("[]")
    assert D.load_dataset(tmp_path / "manifest.json") == []


def test_load_dataset_shape_mismatch(tmp_path):
    with pytest.raises(ValueError):
        D.load_dataset(write_manifest(tmp_path, rows=63))


def test_feature_file_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal((5, 3)).astype(np.float32)
    D.write_features(tmp_path / "f.bin", x)
    np.testing.assert_array_equal(D.read_features(tmp_path / "f.bin"), x)
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "g.bin").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        D.read_features(tmp_path / "g.bin")


def test_dataset_round_trip(tmp_path):
    spec = SyntheticSpec(num_videos=3, feature_len=40, channels=4, duration_range=(2, 8), seed=2)
    ds = D.generate_synthetic(spec)
    D.save_dataset(tmp_path, ds, spec.num_classes)
    back = D.load_dataset(tmp_path / "manifest.json")
    for (s0, a0), (s1, a1) in zip(ds, back):
        np.testing.assert_array_equal(s0.features.astype(np.float32), s1.features)
        assert a0.instances == a1.instances


# synthetic data -------------------------------------------------------------------


def test_synthetic_count_and_determinism():
    spec = SyntheticSpec(num_videos=10, feature_len=64, channels=4, seed=3)
    a, b = D.generate_synthetic(spec), D.generate_synthetic(spec)
    assert len(a) == 10
    for (sa, aa), (sb, ab) in zip(a, b):
        assert sa.features.tobytes() == sb.features.tobytes()
        assert aa.instances == ab.instances


def test_synthetic_zero_snr_is_noise():
    spec = SyntheticSpec(num_videos=2, feature_len=64, channels=4, snr=0.0, seed=3)
    noisy = SyntheticSpec(num_videos=2, feature_len=64, channels=4, snr=5.0, seed=3)
    for (s0, a0), (s1, a1) in zip(D.generate_synthetic(spec), D.generate_synthetic(noisy)):
        assert a0.instances
        assert a0.instances == a1.instances
        assert not np.array_equal(s0.features, s1.features)


def test_synthetic_signal_inside_intervals():
    spec = SyntheticSpec(num_videos=1, feature_len=128, channels=8, snr=50.0, seed=4)
    (s, a), = D.generate_synthetic(spec)
    dirs = D.class_directions(spec)
    inst = a.instances[0]
    mid = int(round((D.time_to_index(s, inst.start_s) + D.time_to_index(s, inst.end_s)) / 2))
    assert s.features[mid] @ dirs[inst.label] > 25.0


@pytest.mark.parametrize(
    "bad",
    [{"num_videos": -1}, {"channels": 0}, {"bogus": 1}, {"duration_range": [10, 2]}],
)
def test_synthetic_spec_validation(bad):
    with pytest.raises((ValueError, TypeError)):
        SyntheticSpec.from_dict(bad)
