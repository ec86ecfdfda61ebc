"""Smoothness stress test: Dirichlet roughness, surface bump signals, PGA adversary."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import diff as D
from .diff import Tape, Tensor
from .elasticity import Dataset
from .mesh import SurfaceInfo, TetMesh, build_edges, extract_surface, graph_laplacian, surface_edges
from .model import SurgFormer
from .train import TrainConfig, TrainResult, batch_features, train_loop

__all__ = [
    "AdvConfig",
    "AdvSignal",
    "AdvSet",
    "AdversaryError",
    "dirichlet_roughness",
    "roughness_tensor",
    "mesh_laplacian",
    "surface_hops",
    "build_adv_kernel",
    "adv_signal",
    "project_ball",
    "generate_adv_q",
    "generate_adv_set",
    "mean_roughness",
    "adv_finetune",
]

ROUGHNESS_EPS = 1e-8


class AdversaryError(RuntimeError):
    pass


@dataclass
class AdvConfig:
    alpha: float = 0.2
    steps: int = 10
    step_size: float | None = None  # defaults to alpha / 4
    radius: int = 2
    kappa: float = 4.0
    lam: float = 0.1
    m: int = 256
    seed: int = 0
    batch: int = 32

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.radius < 0:
            raise ValueError("radius must be >= 0")

    @property
    def eta(self) -> float:
        return self.alpha / 4 if self.step_size is None else float(self.step_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdvConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown adversary config keys {sorted(unknown)}")
        return cls(**d)


def dirichlet_roughness(U, L, eps: float = ROUGHNESS_EPS) -> float:
    """tr(U^T L U) / (mean_i |u_i|^2 + eps).

    The numerator is summed as weighted edge differences, so it is exactly zero
    for a constant field.
    """
    U = np.asarray(U, dtype=np.float64)
    C = sp.triu(L, k=1).tocoo()
    diff = U[C.row] - U[C.col]
    num = float(np.sum(-C.data * np.sum(diff * diff, axis=1)))
    den = float(np.sum(U * U)) / U.shape[0] + eps
    return num / den


def roughness_tensor(U: Tensor, L, eps: float = ROUGHNESS_EPS) -> Tensor:
    """Per-sample roughness of a (B, N, 3) tensor, shape (B,)."""
    n = U.shape[-2]
    LU = D.sparse_matmul(L, U)
    num = D.sum(D.mul(U, LU), axis=(1, 2))
    den = D.add(D.scale(D.sum(D.mul(U, U), axis=(1, 2)), 1.0 / n), D.constant(np.asarray(eps, dtype=U.dtype)))
    return D.div(num, den)


def mesh_laplacian(mesh: TetMesh) -> sp.csr_matrix:
    return graph_laplacian(build_edges(mesh)).astype(np.float64)


def surface_hops(surface: SurfaceInfo, n: int, anchor: int, radius: int) -> np.ndarray:
    """Surface nodes within ``radius`` hops of ``anchor`` on the surface triangle graph."""
    if not surface.contains(anchor):
        raise ValueError(f"node {anchor} is not on the surface")
    adj = surface_edges(surface, n).adjacency()
    seen = np.zeros(n, dtype=bool)
    seen[anchor] = True
    frontier = seen.copy()
    for _ in range(radius):
        nxt = (adj @ frontier.astype(np.int64)) > 0
        frontier = nxt & ~seen
        if not frontier.any():
            break
        seen |= frontier
    return np.flatnonzero(seen)


def build_adv_kernel(anchor: int, surface: SurfaceInfo, n: int, cfg: AdvConfig) -> np.ndarray:
    """vMF-style weights exp(kappa <n_i, n_anchor>) over the r-hop surface patch, summing to 1."""
    omega = surface_hops(surface, n, anchor, cfg.radius)
    n_a = surface.normal_of(anchor)
    normals = surface.normals[np.searchsorted(surface.nodes, omega)]
    w = np.exp(cfg.kappa * (normals @ n_a - 1.0))  # shifted for stability
    kappa = np.zeros(n)
    kappa[omega] = w / w.sum()
    return kappa


def adv_signal(kappa, q) -> np.ndarray:
    """Rank-one tool signal kappa q^T, (N, 3)."""
    return np.outer(np.asarray(kappa, dtype=np.float64), np.asarray(q, dtype=np.float64))


def project_ball(q, alpha: float) -> np.ndarray:
    """Project the last axis onto the L2 ball of radius ``alpha``."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    factor = np.where(norm > alpha, alpha / np.maximum(norm, 1e-300), 1.0)
    return q * factor


@dataclass
class AdvSignal:
    anchor: int
    q: np.ndarray
    kappa: np.ndarray
    base_index: int = -1
    history: list[float] = field(default_factory=list)


def _adv_objective(model: SurgFormer, positions, kappa, q, c_bc, c_cut, L):
    """Roughness per anchor and its gradient w.r.t. q; parameters receive nothing."""
    dtype = model.params.dtype
    b, n = kappa.shape
    qt = Tensor(np.asarray(q, dtype=dtype).reshape(b, 1, 3), requires_grad=True)
    with model.params.frozen(), Tape() as tape:
        S = D.mul(D.constant(kappa.astype(dtype)[..., None]), qt)
        P = D.constant(np.broadcast_to(positions, (b, n, 3)).astype(dtype))
        bc = D.constant(np.asarray(c_bc, dtype=dtype)[..., None])
        raw = D.concat_channels([P, S, bc])
        pred = model.forward_raw(raw, c_cut)
        r = roughness_tensor(pred, L)
        total = D.sum(r)
        tape.backward(total)
    return r.value.astype(np.float64), qt.grad.reshape(b, 3).astype(np.float64)


def generate_adv_q(
    model: SurgFormer,
    mesh: TetMesh,
    anchors,
    c_bc,
    c_cut,
    cfg: AdvConfig,
    surface: SurfaceInfo | None = None,
    L=None,
) -> list[AdvSignal]:
    """Batched projected gradient ascent on roughness, one independent q per anchor.

    Starts at alpha * n / 2, moves along the normalised gradient, halves the step
    when the objective would drop, and keeps every iterate inside the alpha-ball.
    """
    anchors = np.atleast_1d(np.asarray(anchors, dtype=np.int64))
    b, n = anchors.size, mesh.n_nodes
    c_bc = np.broadcast_to(np.asarray(c_bc), (b, n))
    c_cut = np.broadcast_to(np.asarray(c_cut), (b, n))
    surface = extract_surface(mesh) if surface is None else surface
    L = mesh_laplacian(mesh) if L is None else L
    kappa = np.stack([build_adv_kernel(int(a), surface, n, cfg) for a in anchors])
    normals = np.stack([surface.normal_of(int(a)) for a in anchors])
    q = project_ball(cfg.alpha * normals / 2, cfg.alpha)
    if cfg.steps == 0:
        return [AdvSignal(int(a), q[i].copy(), kappa[i]) for i, a in enumerate(anchors)]
    f, g = _adv_objective(model, mesh.vertices, kappa, q, c_bc, c_cut, L)
    history = [f.copy()]
    step = np.full(b, cfg.eta)
    for it in range(cfg.steps):
        if not (np.isfinite(g).all() and np.isfinite(f).all()):
            bad = np.flatnonzero(~np.isfinite(g).all(axis=1) | ~np.isfinite(f))
            raise AdversaryError(f"non-finite objective or gradient at step {it} for anchors {anchors[bad].tolist()}")
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.where(gn > 0, g / np.maximum(gn, 1e-300), 0.0)
        pending = (gn[:, 0] > 0)
        trial_step = step.copy()
        for _ in range(6):
            if not pending.any():
                break
            cand = project_ball(q + trial_step[:, None] * direction, cfg.alpha)
            fc, gc = _adv_objective(model, mesh.vertices, kappa, cand, c_bc, c_cut, L)
            accept = pending & (fc >= f)
            q[accept], f[accept], g[accept] = cand[accept], fc[accept], gc[accept]
            pending &= ~accept
            trial_step[pending] *= 0.5
        norms = np.linalg.norm(q, axis=1)
        assert (norms <= cfg.alpha * (1 + 1e-12)).all(), "iterate left the alpha-ball"
        history.append(f.copy())
    hist = np.stack(history, axis=1)
    return [AdvSignal(int(a), q[i].copy(), kappa[i], history=hist[i].tolist()) for i, a in enumerate(anchors)]


def interaction_nodes(ds: Dataset) -> np.ndarray:
    """Tool node of each sample: the boundary node carrying a nonzero signal."""
    active = ds.c_bc.astype(bool) & (np.abs(ds.signal).sum(axis=-1) > 0)
    has = active.any(axis=1)
    nodes = np.where(has, active.argmax(axis=1), -1)
    if "nodes" in ds.meta and len(ds.meta["nodes"]) == len(ds):
        nodes = np.where(has, nodes, np.asarray(ds.meta["nodes"]))
    return nodes


@dataclass
class AdvSet:
    """Pre-generated adversarial inputs; targets do not exist and are stored as zeros."""

    signal: np.ndarray  # (M, N, 3)
    c_bc: np.ndarray
    c_cut: np.ndarray
    anchors: np.ndarray
    q: np.ndarray  # (M, 3)
    base_index: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.anchors.size)

    def to_dataset(self) -> Dataset:
        meta = dict(self.meta)
        meta.update(
            adversarial=True,
            anchors=self.anchors.tolist(),
            q=self.q.tolist(),
            base_index=self.base_index.tolist(),
        )
        return Dataset(
            self.signal.astype(np.float32),
            self.c_bc.astype(np.uint8),
            self.c_cut.astype(np.uint8),
            np.zeros(self.signal.shape, dtype=np.float32),
            meta,
        )

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "AdvSet":
        if not ds.meta.get("adversarial"):
            raise ValueError("dataset is not flagged adversarial")
        meta = {k: v for k, v in ds.meta.items() if k not in ("adversarial", "anchors", "q", "base_index")}
        return cls(
            ds.signal, ds.c_bc, ds.c_cut,
            np.asarray(ds.meta["anchors"], dtype=np.int64), np.asarray(ds.meta["q"], dtype=np.float64),
            np.asarray(ds.meta["base_index"], dtype=np.int64), meta,
        )

    def features_dataset(self) -> Dataset:
        return self.to_dataset()


def generate_adv_set(model: SurgFormer, mesh: TetMesh, base: Dataset, cfg: AdvConfig, threads: int = 1) -> AdvSet:
    """Attack ``cfg.m`` clean samples at their own interaction nodes (drawn without replacement when possible)."""
    rng = np.random.default_rng(cfg.seed)
    idx = rng.choice(len(base), size=cfg.m, replace=cfg.m > len(base))
    nodes = interaction_nodes(base)[idx]
    surface = extract_surface(mesh)
    ok = np.array([n >= 0 and surface.contains(int(n)) for n in nodes])
    idx, nodes = idx[ok], nodes[ok]
    L = mesh_laplacian(mesh)
    chunks = [np.arange(s, min(s + cfg.batch, idx.size)) for s in range(0, idx.size, cfg.batch)]

    def run(ch):
        return generate_adv_q(model, mesh, nodes[ch], base.c_bc[idx[ch]], base.c_cut[idx[ch]], cfg, surface, L)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(ch) for ch in chunks]
    signals = [s for part in parts for s in part]
    q = np.stack([s.q for s in signals])
    S = np.stack([adv_signal(s.kappa, s.q) for s in signals])
    meta = {
        "config": cfg.to_dict(),
        "roughness_init": [s.history[0] if s.history else None for s in signals],
        "roughness_final": [s.history[-1] if s.history else None for s in signals],
    }
    return AdvSet(S, base.c_bc[idx].copy(), base.c_cut[idx].copy(), nodes.astype(np.int64), q, idx.astype(np.int64), meta)


def mean_roughness(model: SurgFormer, mesh: TetMesh, ds: Dataset, batch_size: int = 32, L=None) -> float:
    """Mean roughness of the model's predictions over a dataset or adversarial set."""
    L = mesh_laplacian(mesh) if L is None else L
    vals = []
    for s in range(0, len(ds), batch_size):
        idx = np.arange(s, min(s + batch_size, len(ds)))
        pred = model.predict(batch_features(mesh.vertices, ds, idx)).astype(np.float64)
        vals.extend(dirichlet_roughness(p, L) for p in pred)
    return float(np.mean(vals))


def adv_finetune(
    model: SurgFormer,
    mesh: TetMesh,
    dataset: Dataset,
    adv: AdvSet,
    train_cfg: TrainConfig,
    cfg: AdvConfig,
    adv_batch: int | None = None,
) -> TrainResult:
    """Continue training on clean data plus lam * mean roughness over a fixed adversarial set.

    With lam = 0 the adversarial term is skipped entirely, so the run matches
    plain training continuation.
    """
    L = mesh_laplacian(mesh)
    adv_ds = adv.to_dataset()
    rng = np.random.default_rng([cfg.seed, 1])
    k = adv_batch or train_cfg.batch_size

    def extra(m: SurgFormer, step: int):
        if cfg.lam == 0 or len(adv_ds) == 0:
            return None
        idx = np.sort(rng.choice(len(adv_ds), size=min(k, len(adv_ds)), replace=False))
        pred = m.forward(batch_features(mesh.vertices, adv_ds, idx))
        return D.scale(D.mean(roughness_tensor(pred, L)), cfg.lam)

    return train_loop(model, mesh, dataset, train_cfg, extra_loss=extra)
