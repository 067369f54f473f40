"""Multi-scale transformer encoder with base / split / recurrence level-0 modes.

Level 0 is the longest sequence. In ``recurrence`` mode it is processed in
segments: each segment attends to a gradient-blocked cache of the previous
segment's layer inputs, and every layer runs two streams over the same keys
and values. The content stream sees itself and the positions preceding it in
a per-segment permutation; the query stream starts from a learned vector and
never sees its own position. Deeper levels are a stride-2 convolution
followed by a windowed transformer layer, regardless of mode.
"""

from __future__ import annotations

import json
import math
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Array

NEG_INF = -np.inf
ENCODER_MODES = ("base", "split", "recurrence")


@dataclass(frozen=True)
class ModelConfig:
    input_len: int = 1024
    in_channels: int = 16
    embed_dim: int = 256
    num_heads: int = 4
    fpn_levels: int = 8
    encoder_mode: str = "recurrence"
    segment_len: int = 256
    encoder_layers: int = 2
    head_layers: int = 3
    num_classes: int = 3
    # local attention width per level (odd); None means full attention
    attn_window: int | None = 19
    mlp_ratio: int = 2
    prior_prob: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.encoder_mode not in ENCODER_MODES:
            raise ValueError(f"encoder_mode must be one of {ENCODER_MODES}")
        if self.fpn_levels < 1:
            raise ValueError("fpn_levels must be >= 1")
        if self.input_len % 2 ** (self.fpn_levels - 1):
            raise ValueError(
                f"input_len {self.input_len} not divisible by 2^{self.fpn_levels - 1}"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.encoder_mode != "base" and self.input_len % self.segment_len:
            raise ValueError(f"segment_len {self.segment_len} must divide {self.input_len}")
        if self.attn_window is not None and self.attn_window % 2 == 0:
            raise ValueError("attn_window must be odd")
        if self.head_layers < 1 or self.encoder_layers < 1:
            raise ValueError("layer counts must be >= 1")

    @property
    def rel_clip(self) -> int:
        return self.segment_len

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PyramidGeometry:
    lengths: tuple[int, ...]
    strides: tuple[int, ...]

    @classmethod
    def for_config(cls, config: ModelConfig) -> "PyramidGeometry":
        L = config.fpn_levels
        return cls(
            tuple(config.input_len // 2**l for l in range(L)), tuple(2**l for l in range(L))
        )

    @property
    def num_locations(self) -> int:
        return sum(self.lengths)


@dataclass
class PyramidFeatures:
    levels: list[Array]

    @property
    def geometry(self) -> PyramidGeometry:
        return PyramidGeometry(
            tuple(x.shape[0] for x in self.levels), tuple(2**l for l in range(len(self.levels)))
        )


@dataclass
class RawPredictions:
    logits: list[Array]  # per level (n_l, K)
    offsets: list[Array]  # per level (n_l, 2), level-stride units

    @property
    def geometry(self) -> PyramidGeometry:
        return PyramidGeometry(
            tuple(x.shape[0] for x in self.logits), tuple(2**l for l in range(len(self.logits)))
        )


@dataclass
class RecurrenceState:
    """Per-layer content-stream inputs of the previous segment, cut from the tape."""

    memory: list[Array | None]
    start: int = 0  # global position of the cached segment's first row

    @property
    def memory_len(self) -> int:
        m = self.memory[0]
        return 0 if m is None else m.shape[0]


@dataclass
class PermutationMasks:
    order: np.ndarray
    content_visible: np.ndarray  # bool (n, m + n)
    query_visible: np.ndarray  # bool (n, m + n)

    @property
    def content_mask(self) -> np.ndarray:
        return additive(self.content_visible)

    @property
    def query_mask(self) -> np.ndarray:
        return additive(self.query_visible)


def additive(visible: np.ndarray) -> np.ndarray:
    return np.where(visible, 0.0, NEG_INF)


# attention-score accounting ---------------------------------------------------------


@dataclass
class ScoreMeter:
    """Counts attention-score elements materialised per pyramid level."""

    counts: dict[int, int] = field(default_factory=dict)

    def add(self, level: int, n: int) -> None:
        self.counts[level] = self.counts.get(level, 0) + n


_meters: list[ScoreMeter] = []


@contextmanager
def count_scores():
    meter = ScoreMeter()
    _meters.append(meter)
    try:
        yield meter
    finally:
        _meters.remove(meter)


def _count(level: int, n: int) -> None:
    for m in _meters:
        m.add(level, n)


# masks -------------------------------------------------------------------------------


def window_visible(n: int, window: int | None) -> np.ndarray:
    if window is None:
        return np.ones((n, n), dtype=bool)
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]) <= window // 2


def build_permutation_masks(order, memory_len: int = 0) -> PermutationMasks:
    """Content/query visibility for a factorisation order over ``n`` positions.

    ``order`` lists positions (0-based) in the order they are "generated".
    Row ``i`` may see column ``m + j`` when ``j`` comes before ``i`` in the
    order; the content stream additionally sees ``i`` itself. All ``m``
    memory columns are visible to every row.
    """
    order = np.asarray(order, dtype=int)
    n = order.size
    if sorted(order.tolist()) != list(range(n)):
        raise ValueError(f"invalid permutation: {order.tolist()}")
    rank = np.empty(n, dtype=int)
    rank[order] = np.arange(n)
    before = rank[None, :] < rank[:, None]
    mem = np.ones((n, memory_len), dtype=bool)
    query = np.concatenate([mem, before], axis=1)
    content = np.concatenate([mem, before | np.eye(n, dtype=bool)], axis=1)
    return PermutationMasks(order, content, query)


def segment_split(x: Array, segment_len: int) -> list[Array]:
    T = x.shape[0]
    if segment_len < 1 or T % segment_len:
        raise ValueError(f"segment_len {segment_len} does not divide {T}")
    return [x[s : s + segment_len] for s in range(0, T, segment_len)]


# parameters --------------------------------------------------------------------------


class Model:
    """Parameter registry plus the forward computation."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        init = init_params(config) if params is None else params
        expected = init_params_shapes(config)
        if set(init) != set(expected):
            missing = sorted(set(expected) ^ set(init))
            raise ValueError(f"parameter registry mismatch: {missing[:5]}")
        self.params: dict[str, Array] = {}
        for name, shape in expected.items():
            value = np.asarray(init[name], dtype=np.float64)
            if value.shape != shape:
                raise ValueError(f"{name}: shape {value.shape} != {shape}")
            self.params[name] = Array(value, requires_grad=True)

    def __getitem__(self, name: str) -> Array:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        for name, v in values.items():
            self.params[name] = Array(v, requires_grad=True)

    def state(self) -> dict[str, np.ndarray]:
        return {k: np.array(v.data) for k, v in self.params.items()}

    def forward(self, features, training: bool = False, rng=None) -> RawPredictions:
        return forward(self, features, training=training, rng=rng)


def _attn_shapes(prefix: str, d: int, H: int, clip: int) -> dict:
    return {
        f"{prefix}.ln1.g": (d,),
        f"{prefix}.ln1.b": (d,),
        f"{prefix}.wq": (d, d),
        f"{prefix}.wk": (d, d),
        f"{prefix}.wv": (d, d),
        f"{prefix}.wo": (d, d),
        f"{prefix}.bo": (d,),
        f"{prefix}.rel": (H, 2 * clip + 1),
    }


def _mlp_shapes(prefix: str, d: int, hidden: int) -> dict:
    return {
        f"{prefix}.ln2.g": (d,),
        f"{prefix}.ln2.b": (d,),
        f"{prefix}.w1": (d, hidden),
        f"{prefix}.b1": (hidden,),
        f"{prefix}.w2": (hidden, d),
        f"{prefix}.b2": (d,),
    }


def _layer_shapes(prefix: str, c: ModelConfig) -> dict:
    d = c.embed_dim
    out = _attn_shapes(prefix, d, c.num_heads, c.rel_clip)
    out.update(_mlp_shapes(prefix, d, c.mlp_ratio * d))
    return out


def init_params_shapes(c: ModelConfig) -> dict[str, tuple]:
    d, K = c.embed_dim, c.num_classes
    dh = d // c.num_heads
    shapes: dict[str, tuple] = {"proj.w": (c.in_channels, d), "proj.b": (d,)}
    for i in range(c.encoder_layers):
        shapes.update(_layer_shapes(f"enc{i}", c))
        if c.encoder_mode == "recurrence":
            shapes[f"enc{i}.null_k"] = (c.num_heads, 1, dh)
            shapes[f"enc{i}.null_v"] = (c.num_heads, 1, dh)
    if c.encoder_mode == "recurrence":
        shapes["query_init"] = (d,)
    for l in range(1, c.fpn_levels):
        shapes[f"down{l}.k"] = (3, d, d)
        shapes[f"down{l}.b"] = (d,)
        shapes.update(_layer_shapes(f"lvl{l}", c))
    shapes["neck.g"] = (d,)
    shapes["neck.b"] = (d,)
    for head, out_dim in (("cls", K), ("reg", 2)):
        for j in range(c.head_layers):
            last = j == c.head_layers - 1
            shapes[f"{head}{j}.k"] = (3, d, out_dim if last else d)
            shapes[f"{head}{j}.b"] = (out_dim if last else d,)
    return shapes


def init_params(c: ModelConfig) -> dict[str, np.ndarray]:
    """Gaussian weights scaled by 1/sqrt(fan_in), zero biases, unit norm gains."""
    rng = np.random.default_rng([c.seed, 7])
    params = {}
    for name, shape in init_params_shapes(c).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            value = np.ones(shape)
        elif leaf in ("b", "bo", "b1", "b2", "rel"):
            value = np.zeros(shape)
        elif leaf == "k" and len(shape) == 3:
            value = rng.standard_normal(shape) / math.sqrt(shape[0] * shape[1])
        elif len(shape) == 2:
            value = rng.standard_normal(shape) / math.sqrt(shape[0])
        else:
            value = rng.standard_normal(shape) * 0.02
        params[name] = value
    last = f"cls{c.head_layers - 1}.b"
    params[last] = np.full(c.num_classes, -math.log((1 - c.prior_prob) / c.prior_prob))
    return params


# building blocks ---------------------------------------------------------------------


def project_input(model: Model, features) -> Array:
    c = model.config
    x = nx.as_array(features)
    if x.shape[0] != c.input_len:
        raise ValueError(f"expected {c.input_len} time steps, got {x.shape[0]}")
    if x.shape[1] != c.in_channels:
        raise ValueError(f"expected {c.in_channels} channels, got {x.shape[1]}")
    return x @ model["proj.w"] + model["proj.b"]


def _heads(x: Array, H: int) -> Array:
    n, d = x.shape
    return nx.transpose(x.reshape(n, H, d // H), (1, 0, 2))


def _merge(x: Array) -> Array:
    H, n, dh = x.shape
    return nx.transpose(x, (1, 0, 2)).reshape(n, H * dh)


def _rel_bias(model: Model, prefix: str, q_pos: np.ndarray, k_pos: np.ndarray) -> Array:
    clip = model.config.rel_clip
    idx = np.clip(k_pos[None, :] - q_pos[:, None], -clip, clip) + clip
    return nx.take_columns(model[f"{prefix}.rel"], idx)


def _attend(q, k, v, bias, mask, level: int) -> Array:
    """softmax(q k^T / sqrt(dh) + bias + mask) v for (H, n, dh) inputs."""
    dh = q.shape[-1]
    scores = (q @ nx.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh)) + bias
    _count(level, scores.size)
    return nx.masked_softmax(scores, mask) @ v


def self_attention(
    model: Model,
    prefix: str,
    x: Array,
    memory: Array | None,
    mask: np.ndarray,
    positions: np.ndarray,
    mem_positions: np.ndarray | None = None,
    level: int = 0,
) -> Array:
    """Multi-head attention of already-normalised ``x`` over ``[memory ; x]``.

    ``positions`` are global coordinates of the rows of ``x`` within the
    level; they index the learned relative-position bias.
    """
    c = model.config
    H = c.num_heads
    n = x.shape[0]
    m = 0 if memory is None else memory.shape[0]
    if mask.shape != (n, m + n):
        raise ValueError(f"mask shape {mask.shape} != {(n, m + n)}")
    kv_in = x if memory is None else nx.concat([memory, x], axis=0)
    k_pos = positions if memory is None else np.concatenate([mem_positions, positions])
    q = _heads(x @ model[f"{prefix}.wq"], H)
    k = _heads(kv_in @ model[f"{prefix}.wk"], H)
    v = _heads(kv_in @ model[f"{prefix}.wv"], H)
    out = _attend(q, k, v, _rel_bias(model, prefix, positions, k_pos), mask, level)
    return _merge(out) @ model[f"{prefix}.wo"] + model[f"{prefix}.bo"]


def _ln(model: Model, name: str, x: Array) -> Array:
    return nx.layer_norm(x, model[f"{name}.g"], model[f"{name}.b"])


def _mlp(model: Model, prefix: str, x: Array) -> Array:
    h = _ln(model, f"{prefix}.ln2", x)
    h = nx.gelu(h @ model[f"{prefix}.w1"] + model[f"{prefix}.b1"])
    return x + (h @ model[f"{prefix}.w2"] + model[f"{prefix}.b2"])


def transformer_layer(
    model: Model,
    prefix: str,
    x: Array,
    memory: Array | None,
    mask: np.ndarray,
    positions: np.ndarray | None = None,
    mem_positions: np.ndarray | None = None,
    level: int = 0,
) -> Array:
    """Pre-norm block: x + attn(ln(x)), then + mlp(ln(.)). ``memory`` is un-normalised."""
    if positions is None:
        positions = np.arange(x.shape[0])
    ln = f"{prefix}.ln1"
    mem_n = None if memory is None else _ln(model, ln, memory)
    a = x + self_attention(
        model, prefix, _ln(model, ln, x), mem_n, mask, positions, mem_positions, level
    )
    return _mlp(model, prefix, a)


def two_stream_layer(
    model: Model,
    prefix: str,
    h: Array,
    g: Array,
    memory: Array | None,
    masks: PermutationMasks,
    positions: np.ndarray,
    mem_positions: np.ndarray | None,
    need_content: bool = True,
) -> tuple[Array | None, Array]:
    """One layer of content (``h``) and query (``g``) streams sharing keys/values.

    The query stream gets an extra learned null key/value column when there is
    no memory, so its first-in-order row always has something to attend to.
    With ``need_content=False`` the content-stream update is skipped and
    ``None`` is returned in its place (keys and values still come from ``h``).
    """
    c = model.config
    H = c.num_heads
    ln = f"{prefix}.ln1"
    h_n = _ln(model, ln, h)
    g_n = _ln(model, ln, g)
    kv_in = h_n if memory is None else nx.concat([_ln(model, ln, memory), h_n], axis=0)
    k_pos = positions if memory is None else np.concatenate([mem_positions, positions])
    k = _heads(kv_in @ model[f"{prefix}.wk"], H)
    v = _heads(kv_in @ model[f"{prefix}.wv"], H)
    bias = _rel_bias(model, prefix, positions, k_pos)
    wq, wo, bo = model[f"{prefix}.wq"], model[f"{prefix}.wo"], model[f"{prefix}.bo"]

    if need_content:
        qh = _heads(h_n @ wq, H)
        h_att = _attend(qh, k, v, bias, masks.content_mask, 0)
        h = _mlp(model, prefix, h + (_merge(h_att) @ wo + bo))
    else:
        h = None

    qg = _heads(g_n @ wq, H)
    q_mask = masks.query_mask
    if memory is None:
        n = g.shape[0]
        k = nx.concat([model[f"{prefix}.null_k"], k], axis=1)
        v = nx.concat([model[f"{prefix}.null_v"], v], axis=1)
        bias = nx.concat([nx.as_array(np.zeros((H, n, 1))), bias], axis=2)
        q_mask = np.concatenate([np.zeros((n, 1)), q_mask], axis=1)
    g_att = _attend(qg, k, v, bias, q_mask, 0)
    g = _mlp(model, prefix, g + (_merge(g_att) @ wo + bo))
    return h, g


# level-0 encoders ------------------------------------------------------------------------


def encode_base(model: Model, x: Array) -> Array:
    c = model.config
    mask = additive(window_visible(x.shape[0], c.attn_window))
    for i in range(c.encoder_layers):
        x = transformer_layer(model, f"enc{i}", x, None, mask)
    return x


def encode_split(model: Model, x: Array) -> Array:
    c = model.config
    L = c.segment_len
    mask = additive(window_visible(L, None))
    outs = []
    for s, seg in enumerate(segment_split(x, L)):
        pos = np.arange(s * L, (s + 1) * L)
        for i in range(c.encoder_layers):
            seg = transformer_layer(model, f"enc{i}", seg, None, mask, pos)
        outs.append(seg)
    return nx.concat(outs, axis=0)


def recurrent_encode(
    model: Model,
    x: Array,
    training: bool = False,
    rng: np.random.Generator | None = None,
    return_content: bool = False,
    orders: list | None = None,
    memory_store: dict | None = None,
):
    """Segment-level recurrent two-stream encoding of level 0.

    Returns the concatenated query-stream output (and the content stream
    when ``return_content``). During training each segment gets a fresh
    uniformly random order drawn from ``rng``; otherwise the identity order
    is used. ``orders`` overrides both.

    ``memory_store`` records the cached values on first use (when empty) and
    replays them afterwards. Replaying turns the cache into a true constant,
    which is what a finite-difference check of the blocked gradient needs.
    """
    c = model.config
    L = c.segment_len
    segments = segment_split(x, L)
    state = RecurrenceState([None] * c.encoder_layers)
    q_out, h_out = [], []
    for s, seg in enumerate(segments):
        if orders is not None:
            order = orders[s]
        elif training:
            if rng is None:
                raise ValueError("training mode needs an rng for permutations")
            order = rng.permutation(L)
        else:
            order = np.arange(L)
        masks = build_permutation_masks(order, state.memory_len)
        pos = np.arange(s * L, (s + 1) * L)
        mem_pos = np.arange(state.start, state.start + state.memory_len)
        h = seg
        g = nx.add(nx.as_array(np.zeros((L, 1))), model["query_init"])
        new_memory = []
        for i in range(c.encoder_layers):
            if memory_store is not None and (s, i) in memory_store:
                new_memory.append(Array._wrap(memory_store[(s, i)]))
            else:
                new_memory.append(nx.stop_gradient(h))
                if memory_store is not None:
                    memory_store[(s, i)] = h.data
            # the last content update feeds neither the output nor the cache
            need = return_content or i < c.encoder_layers - 1
            h, g = two_stream_layer(
                model, f"enc{i}", h, g, state.memory[i], masks, pos, mem_pos, need
            )
        state = RecurrenceState(new_memory, s * L)
        q_out.append(g)
        if return_content:
            h_out.append(h)
    q = nx.concat(q_out, axis=0)
    if return_content:
        return q, nx.concat(h_out, axis=0)
    return q


def encode_level0(
    model: Model, x: Array, training: bool = False, rng=None, orders=None, memory_store=None
) -> Array:
    mode = model.config.encoder_mode
    if mode == "base":
        return encode_base(model, x)
    if mode == "split":
        return encode_split(model, x)
    return recurrent_encode(
        model, x, training=training, rng=rng, orders=orders, memory_store=memory_store
    )


def build_pyramid(
    model: Model, x: Array, training: bool = False, rng=None, orders=None, memory_store=None
) -> PyramidFeatures:
    c = model.config
    if x.shape[0] != c.input_len:
        raise ValueError(f"expected {c.input_len} rows, got {x.shape[0]}")
    levels = [encode_level0(model, x, training, rng, orders, memory_store)]
    for l in range(1, c.fpn_levels):
        prev = levels[-1]
        if prev.shape[0] % 2:
            raise ValueError(f"level {l - 1} length {prev.shape[0]} is odd")
        y = nx.temporal_conv1d(prev, model[f"down{l}.k"], stride=2) + model[f"down{l}.b"]
        mask = additive(window_visible(y.shape[0], c.attn_window))
        levels.append(transformer_layer(model, f"lvl{l}", y, None, mask, level=l))
    return PyramidFeatures(levels)


def _head(model: Model, name: str, x: Array) -> Array:
    n = model.config.head_layers
    for j in range(n):
        x = nx.temporal_conv1d(x, model[f"{name}{j}.k"]) + model[f"{name}{j}.b"]
        if j < n - 1:
            x = nx.relu(x)
    return x


def forward(
    model: Model, features, training: bool = False, rng=None, orders=None, memory_store=None
) -> RawPredictions:
    """Projection, level-0 encoder, pyramid, then shared heads at every level.

    ``orders`` fixes the per-segment permutations in recurrence mode;
    ``memory_store`` is passed to :func:`recurrent_encode`.
    """
    if hasattr(features, "features"):
        features = features.features
    x = project_input(model, features)
    pyramid = build_pyramid(model, x, training, rng, orders, memory_store)
    logits, offsets = [], []
    for feat in pyramid.levels:
        f = _ln(model, "neck", feat)
        logits.append(_head(model, "cls", f))
        offsets.append(nx.softplus(_head(model, "reg", f)))
    return RawPredictions(logits, offsets)


# checkpoints -------------------------------------------------------------------------------

_CKPT_MAGIC = b"XLTALCK1"


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    """JSON header (config + parameter registry) followed by float64 LE payload."""
    registry = [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()]
    header = {"config": asdict(model.config), "params": registry}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in model.params.values():
            fh.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (n,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16 : 16 + n])
    config = ModelConfig.from_dict(header["config"])
    offset = 16 + n
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=int))
        chunk = raw[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ValueError(f"{path}: truncated payload at {entry['name']}")
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after payload")
    return Model(config, params), header.get("extra", {})
