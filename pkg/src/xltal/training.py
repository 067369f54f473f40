"""Target assignment across pyramid levels, focal + interval-IoU loss, optimisation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import AnnotationSet, FeatureSequence, time_to_index
from .model import Model, PyramidGeometry, RawPredictions, forward
from .numerics import Array, GradTape

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.1
    epochs: int = 15
    batch_size: int = 1
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_frac: float = 0.05
    schedule: str = "cosine"
    clip_norm: float = 1.0
    # (lo, hi) per level in level-0 index units; None -> geometric default
    regression_ranges: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.epochs < 0 or self.batch_size != 1:
            raise ValueError("epochs must be >= 0 and batch_size is fixed at 1 video")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if d.get("regression_ranges") is not None:
            d["regression_ranges"] = tuple(tuple(r) for r in d["regression_ranges"])
        return cls(**d)


def default_regression_ranges(num_levels: int) -> list[tuple[float, float]]:
    """Level l takes max offsets in [2^(l+1), 2^(l+3)); the ends are left open."""
    ranges = [(2.0 ** (l + 1), 2.0 ** (l + 3)) for l in range(num_levels)]
    ranges[0] = (0.0, ranges[0][1])
    ranges[-1] = (ranges[-1][0], math.inf)
    return ranges


@dataclass
class AssignedTargets:
    cls: np.ndarray  # (P, K) in {0, 1}
    offsets: np.ndarray  # (P, 2) level-stride units, zero for background
    positive: np.ndarray  # (P,) bool

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def assign_targets(
    annotations: AnnotationSet,
    geometry: PyramidGeometry,
    seq: FeatureSequence,
    regression_ranges=None,
) -> AssignedTargets:
    """Label every pyramid location against the ground-truth instances.

    Location i on level l sits at level-0 index g = i * stride. It is positive
    for an instance [B, E] (converted to fractional indices) when B <= g <= E
    and max(g - B, E - g) lies in the level's range. A location matching
    several instances regresses to the shortest one; its class vector marks
    every matched label.
    """
    K = annotations.num_classes
    if regression_ranges is None:
        regression_ranges = default_regression_ranges(len(geometry.lengths))
    spans = np.array(
        [
            (time_to_index(seq, inst.start_s), time_to_index(seq, inst.end_s), inst.label)
            for inst in annotations.instances
        ]
    ).reshape(-1, 3)
    cls_parts, off_parts, pos_parts = [], [], []
    for n, stride, (lo, hi) in zip(geometry.lengths, geometry.strides, regression_ranges):
        g = np.arange(n, dtype=np.float64) * stride
        cls_t = np.zeros((n, K))
        off_t = np.zeros((n, 2))
        if len(spans):
            B, E, lab = spans[:, 0], spans[:, 1], spans[:, 2].astype(int)
            left = g[:, None] - B[None, :]
            right = E[None, :] - g[:, None]
            reach = np.maximum(left, right)
            match = (left >= 0) & (right >= 0) & (reach >= lo) & (reach < hi)
            for k in range(K):
                cls_t[:, k] = (match & (lab[None, :] == k)).any(axis=1)
            dur = np.where(match, (E - B)[None, :], np.inf)
            best = dur.argmin(axis=1)
            rows = match.any(axis=1)
            idx = np.nonzero(rows)[0]
            off_t[idx, 0] = left[idx, best[idx]] / stride
            off_t[idx, 1] = right[idx, best[idx]] / stride
        cls_parts.append(cls_t)
        off_parts.append(off_t)
        pos_parts.append(cls_t.any(axis=1))
    return AssignedTargets(
        np.concatenate(cls_parts), np.concatenate(off_parts), np.concatenate(pos_parts)
    )


# losses -------------------------------------------------------------------------------

_LOG_FLOOR = math.log(1e-12)


def focal_loss(logits, targets, alpha: float = 0.25, gamma: float = 2.0) -> Array:
    """Elementwise binary focal loss -alpha_t (1 - p_t)^gamma log p_t, p = sigmoid(logit)."""
    x = nx.as_array(logits)
    t = np.asarray(targets, dtype=np.float64)
    # log p_t = -softplus(-x) for positives, -softplus(x) for negatives
    sign = 2.0 * t - 1.0
    log_pt = nx.maximum(-nx.softplus(-(x * sign)), _LOG_FLOOR)
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    loss = -(log_pt * alpha_t)
    if gamma:
        one_minus = 1.0 - nx.exp(log_pt)
        loss = loss * nx.power(nx.maximum(one_minus, 0.0), gamma)
    return loss


def iou_loss(pred, target) -> Array:
    """1 - |A n B| / |A u B| for intervals given as (left, right) offsets from a shared point.

    Inputs are (..., 2) non-negative offsets.
    """
    pred = nx.as_array(pred)
    target = nx.as_array(target)
    pb, pe = pred[..., 0], pred[..., 1]
    tb, te = target[..., 0], target[..., 1]
    inter = nx.minimum(pb, tb) + nx.minimum(pe, te)
    union = (pb + pe) + (tb + te) - inter
    return 1.0 - inter / nx.maximum(union, 1e-12)


def total_loss(
    raw: RawPredictions, targets: AssignedTargets, alpha: float = 0.25, gamma: float = 2.0
) -> tuple[Array, dict[str, float]]:
    """Focal loss over every location and class plus IoU loss over positives, both / N."""
    logits = nx.concat(raw.logits, axis=0)
    offsets = nx.concat(raw.offsets, axis=0)
    if logits.shape != targets.cls.shape:
        raise ValueError(f"logits {logits.shape} vs targets {targets.cls.shape}")
    N = max(targets.num_positive, 1)
    l_cls = focal_loss(logits, targets.cls, alpha, gamma).sum() * (1.0 / N)
    pos = np.nonzero(targets.positive)[0]
    if len(pos):
        l_reg = iou_loss(offsets[pos], targets.offsets[pos]).sum() * (1.0 / N)
    else:
        l_reg = nx.as_array(0.0)
    total = l_cls + l_reg
    return total, {"l_cls": l_cls.item(), "l_reg": l_reg.item(), "total": total.item()}


# optimisation -----------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay applied to matrices and conv kernels only."""

    def __init__(self, names_shapes: dict[str, tuple], cfg: TrainConfig, total_steps: int):
        self.cfg = cfg
        self.m = {k: np.zeros(s) for k, s in names_shapes.items()}
        self.v = {k: np.zeros(s) for k, s in names_shapes.items()}
        self.step_count = 0
        self.total = max(1, total_steps)
        self.warmup = max(1, int(round(cfg.warmup_frac * total_steps)))

    def lr_at(self, step: int) -> float:
        """Linear warmup, then constant or cosine decay to zero at the last step."""
        if step <= self.warmup:
            return self.cfg.lr * step / self.warmup
        if self.cfg.schedule == "constant":
            return self.cfg.lr
        frac = (step - self.warmup) / max(1, self.total - self.warmup)
        return self.cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict:
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        lr = self.lr_at(t)
        b1, b2 = c.betas
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**t)
            vhat = self.v[k] / (1 - b2**t)
            new = p - lr * mhat / (np.sqrt(vhat) + c.eps)
            if p.ndim >= 2 and c.weight_decay:
                new = new - lr * c.weight_decay * p
            out[k] = new
        return out


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def loss_and_grads(
    model: Model, seq: FeatureSequence, targets: AssignedTargets, cfg: TrainConfig, rng=None
) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    names = model.names()
    with GradTape() as tape:
        raw = forward(model, seq, training=True, rng=rng)
        loss, parts = total_loss(raw, targets, cfg.focal_alpha, cfg.focal_gamma)
    if not math.isfinite(parts["total"]):
        raise NumericalError(f"{seq.video_id}: non-finite loss {parts}")
    grads = dict(zip(names, tape.gradient(loss, [model[k] for k in names])))
    bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise NumericalError(f"{seq.video_id}: non-finite gradient in {bad[:3]}")
    return parts, grads


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)


def train(
    model: Model,
    dataset: list[tuple[FeatureSequence, AnnotationSet]],
    cfg: TrainConfig,
    log_path=None,
    on_epoch=None,
) -> TrainResult:
    """Optimise ``model`` in place, one video per step, in a seeded shuffled order.

    ``dataset`` sequences must already be resized to ``model.config.input_len``.
    ``on_epoch(epoch, record)`` may return True to stop early.
    """
    if not dataset:
        raise ValueError("empty dataset")
    geometry = PyramidGeometry.for_config(model.config)
    targets = [assign_targets(a, geometry, s, cfg.regression_ranges) for s, a in dataset]
    rng = np.random.default_rng([cfg.seed, 11])
    opt = AdamW({k: p.shape for k, p in model.params.items()}, cfg, cfg.epochs * len(dataset))
    result = TrainResult()
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            sums = {"l_cls": 0.0, "l_reg": 0.0, "total": 0.0}
            for i in rng.permutation(len(dataset)):
                seq, _ = dataset[i]
                parts, grads = loss_and_grads(model, seq, targets[i], cfg, rng)
                clip_by_global_norm(grads, cfg.clip_norm)
                model.set_params(opt.step(model.state(), grads))
                for k in sums:
                    sums[k] += parts[k]
            rec = {"epoch": epoch + 1}
            rec.update({k: v / len(dataset) for k, v in sums.items()})
            rec["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 1)
            result.log.append(rec)
            log.info(
                "epoch %d  l_cls %.4f  l_reg %.4f  total %.4f",
                rec["epoch"], rec["l_cls"], rec["l_reg"], rec["total"],
            )
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if on_epoch is not None and on_epoch(epoch + 1, rec):
                break
    finally:
        if fh:
            fh.close()
    return result
