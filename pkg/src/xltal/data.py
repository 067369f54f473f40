"""Clip-feature sequences, annotations, on-disk formats and synthetic data."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"MLFT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class FeatureSequence:
    """Per-video (T_f, C) feature matrix; row i is centred on frame i*stride + window/2."""

    video_id: str
    features: np.ndarray
    fps: float = 30.0
    window: float = 32.0
    stride_frames: float = 16.0

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if feats.shape[0] < 1:
            raise ValueError("feature sequence needs at least one row")
        if not np.isfinite(feats).all():
            raise ValueError(f"{self.video_id}: non-finite feature values")
        if self.fps <= 0 or self.stride_frames <= 0:
            raise ValueError("fps and stride_frames must be positive")
        object.__setattr__(self, "features", feats)

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def duration(self) -> float:
        """Seconds covered by the first and last feature timestamps."""
        return index_to_time(self, self.length - 1)


@dataclass(frozen=True, order=True)
class Instance:
    start_s: float
    end_s: float
    label: int


@dataclass
class AnnotationSet:
    video_id: str
    instances: list[Instance]
    num_classes: int

    def __post_init__(self):
        for inst in self.instances:
            if not 0 <= inst.start_s < inst.end_s:
                raise ValueError(f"bad instance interval {inst}")
            if not 0 <= inst.label < self.num_classes:
                raise ValueError(f"label {inst.label} outside [0, {self.num_classes})")


@dataclass(frozen=True)
class SyntheticSpec:
    num_videos: int = 20
    feature_len: int = 128
    channels: int = 16
    num_classes: int = 3
    instances_per_video: tuple[int, int] = (1, 4)
    duration_range: tuple[int, int] = (4, 32)
    snr: float = 4.0
    seed: int = 0
    fps: float = 30.0
    window: float = 32.0
    stride_frames: float = 16.0

    def __post_init__(self):
        lo, hi = self.instances_per_video
        dlo, dhi = self.duration_range
        if min(self.num_videos, self.feature_len, self.channels, self.num_classes) < 1:
            raise ValueError("synthetic counts must be positive")
        if not 1 <= lo <= hi:
            raise ValueError(f"bad instances_per_video {self.instances_per_video}")
        if not 1 <= dlo <= dhi < self.feature_len:
            raise ValueError(f"duration_range {self.duration_range} must lie within feature_len")
        if self.snr < 0:
            raise ValueError("snr must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("instances_per_video", "duration_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# coordinates -------------------------------------------------------------------


def index_to_time(seq: FeatureSequence, i: float) -> float:
    return (i * seq.stride_frames + seq.window / 2) / seq.fps


def time_to_index(seq: FeatureSequence, t: float, warn: bool = False) -> float:
    """Fractional feature index for time ``t``; values outside [0, T_f-1] are extrapolated."""
    i = (t * seq.fps - seq.window / 2) / seq.stride_frames
    if warn and not 0 <= i <= seq.length - 1:
        log.warning("%s: time %.3fs extrapolates to index %.3f", seq.video_id, t, i)
    return i


# transforms ----------------------------------------------------------------------


def concat_channelwise(a: FeatureSequence, b: FeatureSequence) -> FeatureSequence:
    if a.video_id != b.video_id:
        raise ValueError(f"video id mismatch: {a.video_id} vs {b.video_id}")
    if a.length != b.length:
        raise ValueError(f"length mismatch: {a.length} vs {b.length}")
    if (a.fps, a.window, a.stride_frames) != (b.fps, b.window, b.stride_frames):
        raise ValueError("timing metadata mismatch")
    return replace(a, features=np.concatenate([a.features, b.features], axis=1))


def resize_sequence(seq: FeatureSequence, target_len: int) -> FeatureSequence:
    """Linearly interpolate to ``target_len`` rows keeping first/last timestamps fixed."""
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    T = seq.length
    if target_len == T:
        return replace(seq, features=seq.features.copy())
    if T == 1 or target_len == 1:
        feats = np.repeat(seq.features[:1], target_len, axis=0)
        return replace(seq, features=feats)
    pos = np.arange(target_len) * ((T - 1) / (target_len - 1))
    lo = np.minimum(np.floor(pos).astype(int), T - 2)
    frac = (pos - lo)[:, None]
    feats = seq.features[lo] * (1.0 - frac) + seq.features[lo + 1] * frac
    stride = seq.stride_frames * (T - 1) / (target_len - 1)
    return replace(seq, features=feats, stride_frames=stride)


def clip_annotations(ann: AnnotationSet, seq: FeatureSequence) -> AnnotationSet:
    """Clip instances to the feature time span; instances that vanish are dropped."""
    lo, hi = index_to_time(seq, 0), index_to_time(seq, seq.length - 1)
    kept = []
    for inst in ann.instances:
        s, e = max(inst.start_s, lo), min(inst.end_s, hi)
        if (s, e) != (inst.start_s, inst.end_s):
            log.warning(
                "%s: clipped [%.3f, %.3f] to feature span [%.3f, %.3f]",
                ann.video_id, inst.start_s, inst.end_s, lo, hi,
            )
        if s < e:
            kept.append(Instance(s, e, inst.label))
    return AnnotationSet(ann.video_id, kept, ann.num_classes)


# file formats ----------------------------------------------------------------------


def write_features(path, features: np.ndarray) -> None:
    features = np.asarray(features)
    T, C = features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, T, C))
        fh.write(features.astype("<f4").tobytes())


def read_features(path, expect_shape: tuple[int, int] | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, T, C = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise ValueError(f"{path}: not a version-{FORMAT_VERSION} feature file")
    if expect_shape is not None and (T, C) != tuple(expect_shape):
        raise ValueError(f"{path}: header shape {(T, C)} != declared {tuple(expect_shape)}")
    body = raw[_HEADER.size :]
    if len(body) != 4 * T * C:
        raise ValueError(f"{path}: payload holds {len(body) // 4} floats, expected {T * C}")
    return np.frombuffer(body, dtype="<f4").reshape(T, C).astype(np.float64)


def annotations_to_json(anns: list[AnnotationSet], num_classes: int) -> dict:
    return {
        "num_classes": num_classes,
        "videos": {
            a.video_id: [
                {"start_s": i.start_s, "end_s": i.end_s, "label": i.label} for i in a.instances
            ]
            for a in anns
        },
    }


def load_annotations(path) -> tuple[int, dict[str, AnnotationSet]]:
    doc = json.loads(Path(path).read_text())
    K = int(doc["num_classes"])
    out = {}
    for vid, items in doc["videos"].items():
        insts = [Instance(float(d["start_s"]), float(d["end_s"]), int(d["label"])) for d in items]
        out[vid] = AnnotationSet(vid, insts, K)
    return K, out


def load_dataset(manifest_path, annotations_path=None) -> list[tuple[FeatureSequence, AnnotationSet]]:
    """Load every video in a manifest together with its (clipped) annotations.

    The annotation file defaults to ``annotations.json`` next to the manifest.
    Videos without annotations get an empty instance list.
    """
    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text())
    if not entries:
        return []
    if annotations_path is None:
        annotations_path = manifest_path.parent / "annotations.json"
    K, anns = load_annotations(annotations_path)
    out = []
    for e in entries:
        feat_path = manifest_path.parent / e["feature_file"]
        if not feat_path.exists():
            raise FileNotFoundError(feat_path)
        feats = read_features(feat_path, (int(e["T_f"]), int(e["C"])))
        seq = FeatureSequence(
            e["video_id"], feats, float(e["fps"]), float(e["window"]), float(e["stride_frames"])
        )
        ann = anns.get(seq.video_id, AnnotationSet(seq.video_id, [], K))
        out.append((seq, clip_annotations(ann, seq)))
    return out


def save_dataset(out_dir, dataset: list[tuple[FeatureSequence, AnnotationSet]], num_classes: int) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    manifest = []
    for seq, _ in dataset:
        rel = f"features/{seq.video_id}.bin"
        write_features(out_dir / rel, seq.features)
        manifest.append(
            {
                "video_id": seq.video_id,
                "feature_file": rel,
                "fps": seq.fps,
                "window": seq.window,
                "stride_frames": seq.stride_frames,
                "T_f": seq.length,
                "C": seq.channels,
            }
        )
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    ann_doc = annotations_to_json([a for _, a in dataset], num_classes)
    (out_dir / "annotations.json").write_text(json.dumps(ann_doc, indent=1))
    return out_dir / "manifest.json"


# synthesis ---------------------------------------------------------------------------


def class_directions(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    dirs = rng.standard_normal((spec.num_classes, spec.channels))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec) -> list[tuple[FeatureSequence, AnnotationSet]]:
    """Unit Gaussian noise with class directions (scaled by ``snr``) planted inside intervals.

    Interval ``[a, b]`` in feature rows is annotated as
    ``[index_to_time(a), index_to_time(b)]`` with ``b - a`` drawn from
    ``duration_range``. Video ``v`` uses its own generator seeded by
    ``(seed, 1, v)``.
    """
    dirs = class_directions(spec)
    out = []
    for v in range(spec.num_videos):
        rng = np.random.default_rng([spec.seed, 1, v])
        T = spec.feature_len
        feats = rng.standard_normal((T, spec.channels))
        n = int(rng.integers(spec.instances_per_video[0], spec.instances_per_video[1] + 1))
        planted = []
        for _ in range(n):
            dur = int(rng.integers(spec.duration_range[0], spec.duration_range[1] + 1))
            a = int(rng.integers(0, T - dur))
            label = int(rng.integers(0, spec.num_classes))
            feats[a : a + dur + 1] += spec.snr * dirs[label]
            planted.append((a, a + dur, label))
        seq = FeatureSequence(f"video_{v:04d}", feats, spec.fps, spec.window, spec.stride_frames)
        insts = sorted(
            Instance(index_to_time(seq, a), index_to_time(seq, b), k) for a, b, k in planted
        )
        out.append((seq, AnnotationSet(seq.video_id, insts, spec.num_classes)))
    return out
