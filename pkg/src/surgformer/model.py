"""Multiresolution gated transformer over a fixed mesh hierarchy."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import diff as D
from .diff import ParamStore, Tensor
from .hierarchy import MeshHierarchy

__all__ = [
    "BRANCHES",
    "ModelConfig",
    "NodeFeatures",
    "SurgFormer",
    "GraphOps",
    "graph_ops",
    "init_weights",
    "raw_features",
    "adapter_forward",
    "local_branch",
    "global_branch",
    "ff_branch",
    "gated_fusion",
    "block_forward",
    "cut_embed",
    "model_forward",
    "parameter_count",
]

BRANCHES = ("local", "global", "ff")


@dataclass
class ModelConfig:
    levels: int = 3
    width: int = 64
    heads: int = 4
    ff_hidden: int = 128
    cut_dim: int = 8
    d_in: int = 7
    global_levels: tuple[int, ...] = (2, 3)
    level_ratios: tuple[float, ...] = (0.25, 0.25, 0.25)
    ln_eps: float = 1e-5
    leaky_slope: float = 0.2
    blocks_per_level: int = 1
    branches: tuple[str, ...] = BRANCHES
    gating: str = "learned"  # "learned" or "uniform"
    cut_enabled: bool = False
    # fixed affine normalisation of the raw [p | s | c_bc] channels, and of the output
    input_shift: tuple[float, ...] = (0.0,) * 7
    input_scale: tuple[float, ...] = (1.0,) * 7
    output_scale: float = 1.0

    def __post_init__(self):
        self.global_levels = tuple(int(l) for l in self.global_levels)
        self.level_ratios = tuple(float(r) for r in self.level_ratios)
        self.branches = tuple(self.branches)
        self.input_shift = tuple(float(v) for v in self.input_shift)
        self.input_scale = tuple(float(v) for v in self.input_scale)
        self.validate()

    def validate(self) -> None:
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if len(self.level_ratios) != self.levels:
            raise ValueError(f"need {self.levels} level ratios, got {len(self.level_ratios)}")
        if not set(self.global_levels) <= set(range(self.levels + 1)):
            raise ValueError(f"global levels {self.global_levels} outside 0..{self.levels}")
        if not self.branches or not set(self.branches) <= set(BRANCHES):
            raise ValueError(f"branches must be a nonempty subset of {BRANCHES}")
        empty = [l for l in range(self.levels + 1) if not self.active_branches(l)]
        if empty:
            raise ValueError(f"levels {empty} have no active branch (global runs only on {self.global_levels})")
        if self.gating not in ("learned", "uniform"):
            raise ValueError(f"unknown gating {self.gating!r}")
        if len(self.input_shift) != self.d_in or len(self.input_scale) != self.d_in:
            raise ValueError("input normalisation must have d_in entries")
        if self.blocks_per_level < 1:
            raise ValueError("blocks_per_level must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def adapter_in(self) -> int:
        return self.d_in + (self.cut_dim if self.cut_enabled else 0)

    def active_branches(self, level: int) -> tuple[str, ...]:
        return tuple(
            b for b in BRANCHES if b in self.branches and (b != "global" or level in self.global_levels)
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class NodeFeatures:
    """Raw node inputs; signal/c_bc/c_cut optionally carry a leading batch axis."""

    positions: np.ndarray  # (N, 3)
    signal: np.ndarray  # ([B,] N, 3)
    c_bc: np.ndarray  # ([B,] N)
    c_cut: np.ndarray | None = None  # ([B,] N), zeros if None

    def batched(self) -> "NodeFeatures":
        sig = self.signal if self.signal.ndim == 3 else self.signal[None]
        bc = self.c_bc if self.c_bc.ndim == 2 else self.c_bc[None]
        cut = np.zeros(bc.shape, dtype=np.int64) if self.c_cut is None else np.asarray(self.c_cut)
        cut = cut if cut.ndim == 2 else cut[None]
        return NodeFeatures(self.positions, sig, bc, cut)


def raw_features(features: NodeFeatures, dtype=np.float32) -> np.ndarray:
    """Stack ``[p | s | c_bc]`` into (B, N, 7)."""
    f = features.batched()
    b, n = f.c_bc.shape
    p = np.broadcast_to(features.positions, (b, n, 3))
    return np.concatenate([p, f.signal, f.c_bc[..., None]], axis=-1).astype(dtype)


class GraphOps:
    """Per-level index structures for the differentiable graph primitives."""

    def __init__(self, hierarchy: MeshHierarchy):
        self.segments, self.senders, self.receivers, self.layouts = [], [], [], {}
        self._levels = hierarchy.levels
        for lv in hierarchy.levels:
            seg = D.SegmentIndex(lv.edges.indptr)
            self.segments.append(seg)
            self.senders.append(D.RowIndex(lv.edges.senders, lv.size))
            self.receivers.append(D.RowIndex(seg.ids, lv.size))
        self.pools = [D.PoolIndex(o, hierarchy.levels[l + 1].size) for l, o in enumerate(hierarchy.owners)]
        self.unpools = [D.RowIndex(o, hierarchy.levels[l + 1].size) for l, o in enumerate(hierarchy.owners)]
        self.sizes = hierarchy.sizes

    def layout(self, level: int, heads: int) -> D.EdgeHeads:
        key = (level, heads)
        if key not in self.layouts:
            e = self._levels[level].edges
            self.layouts[key] = D.EdgeHeads(e.indptr, e.senders, e.n, heads)
        return self.layouts[key]


def graph_ops(hierarchy: MeshHierarchy) -> GraphOps:
    ops = getattr(hierarchy, "_graph_ops", None)
    if ops is None:
        ops = GraphOps(hierarchy)
        hierarchy._graph_ops = ops
    return ops


# ---------------------------------------------------------------- weights


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _block_params(store: ParamStore, rng, prefix: str, cfg: ModelConfig, level: int) -> None:
    w, h, d = cfg.width, cfg.heads, cfg.head_dim
    store.add(f"{prefix}.ln.gain", np.ones(w))
    store.add(f"{prefix}.ln.bias", np.zeros(w))
    active = cfg.active_branches(level)
    if "local" in active:
        store.add(f"{prefix}.local.W", _uniform(rng, w, (w, w)))
        store.add(f"{prefix}.local.a_src", _uniform(rng, d, (h, d)))
        store.add(f"{prefix}.local.a_dst", _uniform(rng, d, (h, d)))
    if "global" in active:
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            store.add(f"{prefix}.global.{name}", _uniform(rng, w, (w, w)))
    if "ff" in active:
        store.add(f"{prefix}.ff.W1", _uniform(rng, w, (w, cfg.ff_hidden)))
        store.add(f"{prefix}.ff.a1", np.zeros(cfg.ff_hidden))
        store.add(f"{prefix}.ff.W2", _uniform(rng, cfg.ff_hidden, (cfg.ff_hidden, w)))
        store.add(f"{prefix}.ff.a2", np.zeros(w))
    if cfg.gating == "learned":
        nb = len(active)
        store.add(f"{prefix}.gate.W", _uniform(rng, w, (w, nb * w)))
        store.add(f"{prefix}.gate.a", np.zeros(nb * w))


def block_prefixes(cfg: ModelConfig) -> list[tuple[str, int]]:
    out = []
    for l in range(cfg.levels):
        out += [(f"enc{l}.{k}", l) for k in range(cfg.blocks_per_level)]
    for l in range(cfg.levels, -1, -1):
        out += [(f"dec{l}.{k}", l) for k in range(cfg.blocks_per_level)]
    return out


def init_weights(cfg: ModelConfig, rng_seed: int = 0, dtype=np.float32) -> ParamStore:
    rng = np.random.default_rng(rng_seed)
    store = ParamStore(rng_seed, dtype)
    w = cfg.width
    store.add("adapter.W1", _uniform(rng, cfg.adapter_in, (cfg.adapter_in, w)))
    store.add("adapter.b1", np.zeros(w))
    store.add("adapter.W2", _uniform(rng, w, (w, w)))
    store.add("adapter.b2", np.zeros(w))
    if cfg.cut_enabled:
        store.add("cut.emb", rng.normal(0.0, 0.02, size=(2, cfg.cut_dim)))
    for prefix, level in block_prefixes(cfg):
        _block_params(store, rng, prefix, cfg, level)
    store.add("head.W", _uniform(rng, w, (w, 3)))
    store.add("head.b", np.zeros(3))
    return store


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count."""
    w, dh = cfg.width, cfg.ff_hidden
    total = cfg.adapter_in * w + w + w * w + w + 3 * w + 3
    if cfg.cut_enabled:
        total += 2 * cfg.cut_dim
    for _, level in block_prefixes(cfg):
        active = cfg.active_branches(level)
        total += 2 * w
        total += ("local" in active) * (w * w + 2 * w)
        total += ("global" in active) * 4 * w * w
        total += ("ff" in active) * (2 * w * dh + dh + w)
        if cfg.gating == "learned":
            total += len(active) * (w * w + w)
    return total


# ---------------------------------------------------------------- forward pieces


def adapter_forward(f: Tensor, params: ParamStore) -> Tensor:
    w1 = params["adapter.W1"]
    if f.shape[-1] != w1.shape[0]:
        raise D.DiffError(f"adapter expects width {w1.shape[0]}, got {f.shape[-1]}")
    h = D.relu(D.add_bias(D.matmul(f, w1), params["adapter.b1"]))
    return D.add_bias(D.matmul(h, params["adapter.W2"]), params["adapter.b2"])


def local_branch(xbar: Tensor, ops: GraphOps, level: int, params: ParamStore, prefix: str, cfg: ModelConfig) -> Tensor:
    psi = D.matmul(xbar, params[f"{prefix}.local.W"])
    src = D.head_dot(psi, params[f"{prefix}.local.a_src"])
    dst = D.head_dot(psi, params[f"{prefix}.local.a_dst"])
    senders = ops.senders[level]
    score = D.leaky_relu(D.add(D.gather_rows(src, senders), D.gather_rows(dst, ops.receivers[level])), cfg.leaky_slope)
    alpha = D.segment_softmax(score, ops.segments[level])
    if psi.ndim == 3:
        return D.edge_aggregate(alpha, psi, ops.layout(level, cfg.heads))
    msg = D.mul(D.gather_rows(psi, senders), D.head_repeat(alpha, cfg.head_dim))
    return D.segment_sum(msg, ops.segments[level])


def global_branch(xbar: Tensor, params: ParamStore, prefix: str, cfg: ModelConfig, level: int | None = None) -> Tensor:
    if level is not None and level not in cfg.global_levels:
        raise ValueError(f"global branch is inactive at level {level}")
    q = D.matmul(xbar, params[f"{prefix}.global.W_Q"])
    k = D.matmul(xbar, params[f"{prefix}.global.W_K"])
    v = D.matmul(xbar, params[f"{prefix}.global.W_V"])
    y = D.scaled_dot_attention(q, k, v, cfg.heads)
    return D.matmul(y, params[f"{prefix}.global.W_O"])


def ff_branch(xbar: Tensor, params: ParamStore, prefix: str) -> Tensor:
    h = D.relu(D.add_bias(D.matmul(xbar, params[f"{prefix}.ff.W1"]), params[f"{prefix}.ff.a1"]))
    return D.add_bias(D.matmul(h, params[f"{prefix}.ff.W2"]), params[f"{prefix}.ff.a2"])


def gate_weights(xbar: Tensor, params: ParamStore, prefix: str, n_branches: int) -> Tensor:
    """Branch weights Gamma, shape (..., N, n_branches * D), normalised per node and channel."""
    g = D.add_bias(D.matmul(xbar, params[f"{prefix}.gate.W"]), params[f"{prefix}.gate.a"])
    return D.group_softmax(g, n_branches)


def gated_fusion(xbar: Tensor, proposals: list[Tensor], params: ParamStore, prefix: str, cfg: ModelConfig) -> Tensor:
    nb = len(proposals)
    if cfg.gating == "uniform":
        total = proposals[0]
        for p in proposals[1:]:
            total = D.add(total, p)
        return D.scale(total, 1.0 / nb)
    w = params[f"{prefix}.gate.W"]
    if w.shape[1] != nb * cfg.width:
        raise ValueError(f"gate expects {w.shape[1] // cfg.width} proposals, got {nb}")
    gamma = gate_weights(xbar, params, prefix, nb)
    width = cfg.width
    fused = None
    for b, p in enumerate(proposals):
        term = D.mul(D.slice_channels(gamma, b * width, (b + 1) * width), p)
        fused = term if fused is None else D.add(fused, term)
    return fused


def block_forward(x: Tensor, ops: GraphOps, level: int, params: ParamStore, prefix: str, cfg: ModelConfig) -> Tensor:
    xbar = D.layer_norm(x, params[f"{prefix}.ln.gain"], params[f"{prefix}.ln.bias"], cfg.ln_eps)
    proposals = []
    for branch in cfg.active_branches(level):
        if branch == "local":
            proposals.append(local_branch(xbar, ops, level, params, prefix, cfg))
        elif branch == "global":
            proposals.append(global_branch(xbar, params, prefix, cfg))
        else:
            proposals.append(ff_branch(xbar, params, prefix))
    return D.add(x, gated_fusion(xbar, proposals, params, prefix, cfg))


def cut_embed(c_cut, table: Tensor) -> Tensor:
    c = np.asarray(c_cut)
    if c.size and not np.isin(c, (0, 1)).all():
        raise ValueError("cut indicator entries must be 0 or 1")
    return D.embedding(table, c.astype(np.int64))


def _normalise(f: Tensor, cfg: ModelConfig) -> Tensor:
    shift = np.asarray(cfg.input_shift, dtype=f.dtype)
    inv = (1.0 / np.asarray(cfg.input_scale, dtype=np.float64)).astype(f.dtype)
    if not shift.any() and (inv == 1).all():
        return f
    return D.mul(D.sub(f, D.constant(shift)), D.constant(inv))


def forward_raw(
    f_raw: Tensor,
    c_cut,
    hierarchy: MeshHierarchy,
    params: ParamStore,
    cfg: ModelConfig,
    return_states: bool = False,
):
    """Forward pass from a raw (B, N, 7) feature tensor; returns (B, N, 3) displacements."""
    ops = graph_ops(hierarchy)
    if hierarchy.depth != cfg.levels:
        raise ValueError(f"hierarchy has {hierarchy.depth} levels, config expects {cfg.levels}")
    if f_raw.shape[-1] != cfg.d_in or f_raw.shape[-2] != ops.sizes[0]:
        raise ValueError(f"raw features {f_raw.shape} do not match d_in={cfg.d_in}, N0={ops.sizes[0]}")
    f = _normalise(f_raw, cfg)
    if cfg.cut_enabled:
        cut = np.zeros(f.shape[:-1], dtype=np.int64) if c_cut is None else np.broadcast_to(c_cut, f.shape[:-1])
        f = D.concat_channels([f, cut_embed(cut, params["cut.emb"])])
    x = adapter_forward(f, params)
    skips = []
    for l in range(cfg.levels):
        for k in range(cfg.blocks_per_level):
            x = block_forward(x, ops, l, params, f"enc{l}.{k}", cfg)
        skips.append(x)
        x = D.scatter_max(x, ops.pools[l])
    for k in range(cfg.blocks_per_level):
        x = block_forward(x, ops, cfg.levels, params, f"dec{cfg.levels}.{k}", cfg)
    for l in range(cfg.levels - 1, -1, -1):
        x = D.add(D.gather_rows(x, ops.unpools[l]), skips[l])
        for k in range(cfg.blocks_per_level):
            x = block_forward(x, ops, l, params, f"dec{l}.{k}", cfg)
    out = D.add_bias(D.matmul(x, params["head.W"]), params["head.b"])
    if cfg.output_scale != 1.0:
        out = D.scale(out, cfg.output_scale)
    if return_states:
        return out, x
    return out


def model_forward(features: NodeFeatures, hierarchy: MeshHierarchy, params: ParamStore, cfg: ModelConfig) -> Tensor:
    f = features.batched()
    raw = D.constant(raw_features(f, dtype=params.dtype))
    return forward_raw(raw, f.c_cut, hierarchy, params, cfg)


@dataclass
class SurgFormer:
    """Config, parameters and hierarchy bundled for convenience."""

    config: ModelConfig
    params: ParamStore
    hierarchy: MeshHierarchy
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: ModelConfig, hierarchy: MeshHierarchy, seed: int = 0, dtype=np.float32) -> "SurgFormer":
        return cls(cfg, init_weights(cfg, seed, dtype), hierarchy)

    def forward(self, features: NodeFeatures) -> Tensor:
        return model_forward(features, self.hierarchy, self.params, self.config)

    def predict(self, features: NodeFeatures) -> np.ndarray:
        with self.params.frozen():
            out = self.forward(features)
        return out.value

    def forward_raw(self, f_raw: Tensor, c_cut=None) -> Tensor:
        return forward_raw(f_raw, c_cut, self.hierarchy, self.params, self.config)
