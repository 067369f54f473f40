"""Self-checks run by ``xltal verify``: gradients, recurrence cache, masks, NMS, metrics."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import model as mdl
from . import numerics as nx
from .data import AnnotationSet, FeatureSequence, Instance
from .evaluate import greedy_match, oracle_match
from .model import Model, ModelConfig
from .numerics import Array, GradTape
from .postprocess import Detection, soft_nms
from .training import assign_targets, total_loss


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# primitive gradient checks ---------------------------------------------------------------


def _rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def primitive_cases(rng) -> dict:
    """Scalar functions of one input, each exercising one primitive's backward."""
    w = _rand(rng, 4, 3)
    g, b = _rand(rng, 5), _rand(rng, 5)
    kern = _rand(rng, 3, 3, 2)
    mask = np.where(rng.random((4, 5)) < 0.3, -np.inf, 0.0)
    mask[:, 0] = 0.0
    proj = lambda shape: Array(_rand(np.random.default_rng(99), *shape))  # noqa: E731

    def wsum(y):
        return (y * proj(y.shape)).sum()

    return {
        "matmul": ((3, 4), lambda x: wsum(x @ Array(w))),
        "batched_matmul": ((2, 3, 4), lambda x: wsum(x @ nx.transpose(x, (0, 2, 1)))),
        "add_broadcast": ((3, 4), lambda x: wsum(x + x[0:1])),
        "mul_div": ((3, 4), lambda x: wsum(x * x / (x * x + 2.0))),
        "exp_log": ((3, 4), lambda x: wsum(nx.log(nx.exp(x) + 1.0))),
        "tanh": ((6,), lambda x: wsum(nx.tanh(x))),
        "sigmoid": ((6,), lambda x: wsum(nx.sigmoid(x))),
        "softplus": ((6,), lambda x: wsum(nx.softplus(x))),
        "relu": ((6,), lambda x: wsum(nx.relu(x + 0.05))),
        "gelu": ((6,), lambda x: wsum(nx.gelu(x))),
        "power": ((6,), lambda x: wsum(nx.power(x * x + 0.5, 1.5))),
        "maximum_minimum": ((6,), lambda x: wsum(nx.maximum(x, 0.1) + nx.minimum(x, -0.1))),
        "sum_mean": ((3, 4), lambda x: wsum(x.sum(axis=0)) + wsum(x.mean(axis=1, keepdims=True))),
        "reshape_transpose": ((3, 4), lambda x: wsum(nx.transpose(x.reshape(2, 6), (1, 0)))),
        "getitem": ((5, 4), lambda x: wsum(x[1:4, ::2])),
        "concat": ((3, 4), lambda x: wsum(nx.concat([x, x * x], axis=1))),
        "take_columns": ((2, 5), lambda x: wsum(nx.take_columns(x, np.array([[0, 4, 4], [2, 1, 0]])))),
        "masked_softmax": ((4, 5), lambda x: wsum(nx.masked_softmax(x, mask))),
        "layer_norm": ((4, 5), lambda x: wsum(nx.layer_norm(x, Array(g), Array(b)))),
        "temporal_conv1d_x": ((7, 3), lambda x: wsum(nx.temporal_conv1d(x, Array(kern), stride=2))),
        "temporal_conv1d_kernel": (
            (3, 3, 2),
            lambda k: wsum(nx.temporal_conv1d(Array(_rand(np.random.default_rng(5), 8, 3)), k, stride=1)),
        ),
    }


def check_primitives(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    errs = {}
    for name, (shape, f) in primitive_cases(rng).items():
        x = _rand(rng, *shape)
        errs[name] = nx.check_gradient(f, x)
    return errs


# model-level gradient check ---------------------------------------------------------------


def tiny_config(mode: str = "recurrence", **kw) -> ModelConfig:
    base = dict(
        input_len=16, in_channels=3, embed_dim=16, num_heads=2, fpn_levels=2,
        encoder_mode=mode, segment_len=8, encoder_layers=1, head_layers=2,
        num_classes=2, attn_window=None, seed=3,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_problem(mode: str = "recurrence"):
    cfg = tiny_config(mode)
    model = Model(cfg)
    rng = np.random.default_rng(17)
    # perturb zero-initialised tensors so every path carries gradient
    model.set_params({k: v.data + 0.05 * rng.standard_normal(v.shape) for k, v in model.params.items()})
    seq = FeatureSequence("tiny", rng.uniform(-1, 1, (16, 3)), fps=1.0, window=0.0, stride_frames=1.0)
    ann = AnnotationSet("tiny", [Instance(2.3, 9.6, 0), Instance(5.2, 14.7, 1)], 2)
    targets = assign_targets(ann, mdl.PyramidGeometry.for_config(cfg), seq)
    return model, seq, targets


TINY_ORDERS = [np.array([3, 0, 6, 1, 7, 2, 5, 4]), np.array([5, 2, 0, 7, 1, 4, 6, 3])]


def loss_fn(model: Model, seq, targets, name: str, memory_store: dict):
    """Loss as a function of one parameter tensor, other parameters held fixed.

    The recurrence cache is replayed from ``memory_store`` so that it is a
    constant for finite differences, matching the blocked tape gradient.
    """

    def f(p):
        saved = model.params[name]
        model.params[name] = p
        try:
            raw = mdl.forward(model, seq, orders=TINY_ORDERS, memory_store=memory_store)
            loss, _ = total_loss(raw, targets)
        finally:
            model.params[name] = saved
        return loss

    return f


def check_model_gradients(mode: str = "recurrence", max_coords: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error of tape vs central-difference gradients for every parameter tensor.

    ``max_coords`` limits finite differences to a random subset of coordinates
    per tensor (None checks all of them).
    """
    model, seq, targets = tiny_problem(mode)
    names = model.names()
    store: dict = {}
    f_all = loss_fn(model, seq, targets, names[0], store)
    with GradTape() as tape:
        loss = f_all(model.params[names[0]])
    analytic = dict(zip(names, tape.gradient(loss, [model[k] for k in names])))
    rng = np.random.default_rng(seed)
    errs = {}
    h = 1e-6
    for name in names:
        f = loss_fn(model, seq, targets, name, store)
        base = np.array(model[name].data)
        flat = base.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        num = np.zeros(len(coords))
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Array._wrap(base.copy())).item()
            flat[i] = orig - h
            fm = f(Array._wrap(base.copy())).item()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * h)
        errs[name] = nx.relative_error(analytic[name].reshape(-1)[coords], num)
    return errs


# recurrence checks ------------------------------------------------------------------------


def recurrence_equivalence(T: int = 64, L: int = 32, seed: int = 0) -> float:
    """Max |content stream - masked full-sequence layer| for one layer, identity order."""
    cfg = ModelConfig(
        input_len=T, in_channels=8, embed_dim=16, num_heads=2, fpn_levels=1,
        encoder_mode="recurrence", segment_len=L, encoder_layers=1, head_layers=1,
        num_classes=2, attn_window=None, seed=seed,
    )
    model = Model(cfg)
    rng = np.random.default_rng(seed + 1)
    model.set_params({k: v.data + 0.1 * rng.standard_normal(v.shape) for k, v in model.params.items()})
    x = Array(rng.standard_normal((T, cfg.embed_dim)))
    _, content = mdl.recurrent_encode(model, x, return_content=True)
    full = mdl.transformer_layer(model, "enc0", x, None, mdl.additive(recurrence_visibility(T, L)))
    return float(np.abs(content.data - full.data).max())


def recurrence_visibility(T: int, L: int) -> np.ndarray:
    """Row i sees the whole previous segment and positions <= i of its own segment."""
    seg = np.arange(T) // L
    i, j = np.arange(T)[:, None], np.arange(T)[None, :]
    return ((seg[j] == seg[i]) & (j <= i)) | (seg[j] == seg[i] - 1)


def receptive_field_deltas(layers: int = 3, L: int = 16, seed: int = 0) -> dict:
    """Perturb segment 0 and measure the change of every later segment per layer count.

    Returns {(num_layers, segment): max abs change of the content stream}.
    """
    T = (layers + 1) * L
    rng = np.random.default_rng(seed + 2)
    x0 = rng.standard_normal((T, 16))
    x1 = x0.copy()
    x1[:L] += rng.standard_normal((L, 16))
    out = {}
    for n_layers in range(1, layers + 1):
        cfg = ModelConfig(
            input_len=T, in_channels=8, embed_dim=16, num_heads=2, fpn_levels=1,
            encoder_mode="recurrence", segment_len=L, encoder_layers=n_layers,
            head_layers=1, num_classes=2, attn_window=None, seed=seed,
        )
        model = Model(cfg)
        model.set_params({k: v.data + 0.1 * rng.standard_normal(v.shape) for k, v in model.params.items()})
        _, h0 = mdl.recurrent_encode(model, Array(x0), return_content=True)
        _, h1 = mdl.recurrent_encode(model, Array(x1), return_content=True)
        d = np.abs(h0.data - h1.data)
        for s in range(T // L):
            out[(n_layers, s)] = float(d[s * L : (s + 1) * L].max())
    return out


# masks, NMS, metrics ------------------------------------------------------------------------


def example_masks_ok() -> bool:
    # x3 -> x2 -> x4 -> x1, written 0-based
    m = mdl.build_permutation_masks([2, 1, 3, 0], 0)
    q, c = m.query_visible, m.content_visible
    return (
        set(np.nonzero(q[0])[0]) == {1, 2, 3}
        and set(np.nonzero(c[0])[0]) == {0, 1, 2, 3}
        and not q[2].any()
        and set(np.nonzero(c[2])[0]) == {2}
    )


def mask_algebra_ok(trials: int = 200, seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        n, m = int(rng.integers(1, 9)), int(rng.integers(0, 5))
        masks = mdl.build_permutation_masks(rng.permutation(n), m)
        q, c = masks.query_visible, masks.content_visible
        diag = np.zeros_like(c)
        diag[np.arange(n), m + np.arange(n)] = True
        if not (np.array_equal(q, c & ~diag) and c[:, :m].all() and q[:, :m].all()):
            return False
        if not c[np.arange(n), m + np.arange(n)].all() or q[np.arange(n), m + np.arange(n)].any():
            return False
    return True


def hard_nms_reference(dets: list[Detection]) -> list[Detection]:
    """Plain greedy NMS dropping every box that overlaps a kept one at all."""
    order = sorted(dets, key=lambda d: (-d.score, d.start_s))
    kept = []
    for d in order:
        if all(min(d.end_s, k.end_s) - max(d.start_s, k.start_s) <= 0 for k in kept):
            kept.append(d)
    return kept


def random_detections(rng, n: int, vid: str = "v") -> list[Detection]:
    out = []
    for _ in range(n):
        s = int(rng.integers(0, 50))
        e = s + int(rng.integers(1, 15))
        out.append(Detection(vid, float(s), float(e), int(rng.integers(0, 3)), float(rng.uniform(0.05, 1.0))))
    return out


def nms_limit_ok(instances: int = 100, seed: int = 0) -> tuple[bool, float]:
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        dets = random_detections(rng, int(rng.integers(1, 25)))
        ref = {(d.start_s, d.end_s, d.score) for d in hard_nms_reference(dets)}
        for sigma in (0.0, 1e-9):
            got = {(d.start_s, d.end_s, d.score) for d in soft_nms(dets, sigma=sigma)}
            if got != ref:
                return False, float("nan")
    dup = [Detection("v", 1.0, 5.0, 0, 0.9), Detection("v", 1.0, 5.0, 0, 0.8)]
    decayed = soft_nms(dup, sigma=0.5)[1].score
    err = abs(decayed - 0.8 * np.exp(-2.0))
    return err < 1e-12, err


def random_micro_instance(rng):
    nd, ng = int(rng.integers(0, 6)), int(rng.integers(0, 4))
    dets = []
    for _ in range(nd):
        s = rng.uniform(0, 10)
        dets.append((s, s + rng.uniform(0.5, 4)))
    gts = []
    for _ in range(ng):
        s = rng.uniform(0, 10)
        gts.append((s, s + rng.uniform(0.5, 4)))
    return np.array(dets).reshape(-1, 2), np.array(gts).reshape(-1, 2)


def metric_oracle_ok(instances: int = 500, seed: int = 0, thr: float = 0.3) -> tuple[bool, int]:
    """Greedy <= exhaustive TP count everywhere; equal where no det overlaps 2+ GTs at thr."""
    from .evaluate import _tiou_matrix

    rng = np.random.default_rng(seed)
    n_equal_cases = 0
    for _ in range(instances):
        dets, gts = random_micro_instance(rng)
        greedy = int(greedy_match(dets, gts, thr).sum())
        best, _ = oracle_match(dets, gts, thr)
        if greedy > best:
            return False, n_equal_cases
        if (_tiou_matrix(dets, gts) >= thr).sum(axis=1).max(initial=0) <= 1:
            n_equal_cases += 1
            if greedy != best:
                return False, n_equal_cases
    return True, n_equal_cases


# driver -----------------------------------------------------------------------------------


@contextmanager
def corrupted_gradient():
    """Negative control: make gelu's backward 10% too large."""
    original = nx.gelu

    def bad(a):
        out = original(a)
        stack = nx._local.__dict__.get("stack")
        if stack and stack[-1].entries and stack[-1].entries[-1][0] is out:
            o, parents, vjp = stack[-1].entries[-1]
            stack[-1].entries[-1] = (o, parents, lambda g: tuple(1.1 * t for t in vjp(g)))
        return out

    nx.gelu = bad
    try:
        yield
    finally:
        nx.gelu = original


def _timed(name, fn) -> SuiteResult:
    t0 = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # a crashing suite is a failing suite
        passed, detail = False, f"error: {exc!r}"
    return SuiteResult(name, passed, detail, time.perf_counter() - t0)


def run_suites(level: str = "quick") -> list[SuiteResult]:
    full = level == "full"

    def grads_primitives():
        errs = check_primitives()
        worst = max(errs, key=errs.get)
        return errs[worst] < 1e-5, f"max rel err {errs[worst]:.2e} ({worst})"

    def grads_model():
        worst_all = 0.0
        parts = []
        for mode in ("recurrence", "base", "split") if full else ("recurrence",):
            errs = check_model_gradients(mode, None if full else 4)
            worst = max(errs.values())
            worst_all = max(worst_all, worst)
            parts.append(f"{mode} {worst:.2e}")
        return worst_all < 1e-4, "max rel err " + ", ".join(parts)

    def cache():
        err = recurrence_equivalence()
        return err < 1e-10, f"max abs err {err:.2e}"

    def receptive():
        d = receptive_field_deltas()
        inside = max(v for (n, s), v in d.items() if s > n)
        reach = min(v for (n, s), v in d.items() if s == n)
        return inside < 1e-12 and reach > 1e-6, f"outside-field delta {inside:.1e}, edge delta {reach:.1e}"

    def masks():
        return example_masks_ok() and mask_algebra_ok(), "x3 -> x2 -> x4 -> x1 fixture and random mask algebra"

    def nms():
        ok, err = nms_limit_ok()
        return ok, f"hard-limit set equality on 100 instances; duplicate decay err {err:.1e}"

    def metrics():
        ok, n = metric_oracle_ok(500 if full else 200)
        return ok, f"greedy <= oracle; equality on {n} single-overlap instances"

    return [
        _timed("gradients/primitives", grads_primitives),
        _timed("gradients/total_loss", grads_model),
        _timed("recurrence/cache_equivalence", cache),
        _timed("recurrence/receptive_field", receptive),
        _timed("masks/permutation", masks),
        _timed("postprocess/nms_limits", nms),
        _timed("eval/metric_oracle", metrics),
    ]
