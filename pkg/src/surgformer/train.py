"""Supervised training, evaluation metrics, Adam, and transfer staging."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diff as D
from .diff import ParamStore, Tape, Tensor
from .elasticity import Dataset, active_node_mask
from .mesh import MeshSymmetry, TetMesh, mesh_symmetries
from .model import ModelConfig, NodeFeatures, SurgFormer, init_weights

log = logging.getLogger(__name__)

__all__ = [
    "FREEZE_POLICIES",
    "TrainConfig",
    "TrainResult",
    "EvalReport",
    "TrainingError",
    "UndefinedMetricWarning",
    "mse_loss",
    "mse_loss_tensor",
    "relative_weights",
    "augmented_batch",
    "sample_metrics",
    "metric_suite",
    "AdamState",
    "adam_step",
    "cosine_lr",
    "apply_freeze",
    "batch_features",
    "dataset_masks",
    "fit_normalisation",
    "train_loop",
    "predict_dataset",
    "evaluate",
    "transfer_model",
    "run_transfer_stages",
]

METRIC_EPS = 1e-8
FREEZE_POLICIES = ("none", "adapter_and_embedding_only", "all")


class TrainingError(RuntimeError):
    pass


class UndefinedMetricWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    cut_enabled: bool = False
    freeze: str = "none"
    loss_mask: str = "active"  # "active" excludes removed nodes, "all" keeps every node
    grad_clip: float | None = 1.0
    max_steps: int | None = None
    loss_weighting: str = "uniform"  # "relative" divides each sample by its mean squared target
    relative_floor: float = 0.0  # added to that mean square (output-scale units) before dividing
    symmetry_augment: bool = False  # random exact mesh symmetry per training sample
    scale_augment: float = 0.0  # a > 0 scales signal and target by +-U(1 - a, 1 + a) per sample

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.lr < 0 or self.lr_min < 0:
            raise ValueError("learning rates must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.freeze not in FREEZE_POLICIES:
            raise ValueError(f"freeze policy must be one of {FREEZE_POLICIES}")
        if self.loss_mask not in ("active", "all"):
            raise ValueError("loss_mask must be 'active' or 'all'")
        if self.loss_weighting not in ("uniform", "relative"):
            raise ValueError("loss_weighting must be 'uniform' or 'relative'")
        if self.relative_floor < 0:
            raise ValueError("relative_floor must be non-negative")
        if not 0.0 <= self.scale_augment < 1.0:
            raise ValueError("scale_augment must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- loss and metrics


def mse_loss(pred, target, mask=None) -> float:
    """Mean over masked nodes of the squared displacement error norm."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    m = np.ones(pred.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("loss mask is empty")
    return float(((pred - target) ** 2).sum(axis=-1)[m].sum() / m.sum())


def _loss_weights(mask: np.ndarray, dtype, sample_weight=None) -> np.ndarray:
    """Per-node weights averaging within each sample, then over the batch."""
    counts = mask.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("loss mask is empty for at least one sample")
    w = mask / (counts * mask.shape[0])
    if sample_weight is not None:
        w = w * np.asarray(sample_weight, dtype=np.float64)[:, None]
    return w.astype(dtype)[..., None]


def relative_weights(target: np.ndarray, mask: np.ndarray, scale: float = 1.0, floor: float = 0.0) -> np.ndarray:
    """1 / (mean squared target + floor) per sample, in output-scale units; 1 where that vanishes."""
    t = np.asarray(target, dtype=np.float64) / scale
    mask = np.asarray(mask, dtype=bool)
    ms = ((t * t).sum(-1) * mask).sum(1) / np.maximum(mask.sum(1), 1) + floor
    return np.where(ms > 0, 1.0 / np.where(ms > 0, ms, 1.0), 1.0)


def mse_loss_tensor(pred: Tensor, target: np.ndarray, mask: np.ndarray, scale: float = 1.0, sample_weight=None) -> Tensor:
    """Batched tape version; ``pred`` and ``target`` are divided by ``scale`` first."""
    mask = np.asarray(mask, dtype=bool)
    diff = D.sub(pred, D.constant(np.asarray(target, dtype=pred.dtype)))
    if scale != 1.0:
        diff = D.scale(diff, 1.0 / scale)
    sq = D.mul(diff, diff)
    return D.sum(D.mul(sq, D.constant(_loss_weights(mask, pred.dtype, sample_weight))))


def sample_metrics(pred, target, mask=None) -> tuple[float, float, float] | None:
    """(nRMSE, nMaxErr, DCM) for one sample, or None when undefined."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    m = np.ones(pred.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    err = np.linalg.norm(pred[m] - target[m], axis=1)
    ref = np.linalg.norm(target[m], axis=1)
    if not ref.any():
        return None
    nrmse = math.sqrt(np.mean(err**2)) / (math.sqrt(np.mean(ref**2)) + METRIC_EPS)
    nmax = err.max() / (ref.max() + METRIC_EPS)
    dcm = 100.0 * max(0.0, 1.0 - err.sum() / (ref.sum() + METRIC_EPS))
    return float(nrmse), float(nmax), float(dcm)


def metric_suite(pred, target, mask=None) -> tuple[float, float, float]:
    """Per-sample metrics averaged over the batch axis (2-D inputs are one sample)."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
        mask = None if mask is None else np.asarray(mask)[None]
    rows, undefined = [], 0
    for b in range(pred.shape[0]):
        r = sample_metrics(pred[b], target[b], None if mask is None else mask[b])
        if r is None:
            undefined += 1
        else:
            rows.append(r)
    if undefined:
        warnings.warn(f"{undefined} samples have all-zero targets; excluded from metrics", UndefinedMetricWarning, stacklevel=2)
    if not rows:
        raise ValueError("no sample with a nonzero target")
    a = np.asarray(rows)
    return float(a[:, 0].mean()), float(a[:, 1].mean()), float(a[:, 2].mean())


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParamStore, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, grads=None) -> None:
    """One bias-corrected Adam update of every parameter that requires grad.

    ``grads`` defaults to each tensor's ``.grad``; missing gradients count as zero.
    """
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params:
        if not p.requires_grad:
            continue
        g = grads[name] if grads is not None and name in grads else p.grad
        if g is None:
            g = np.zeros_like(p.value)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        if lr:
            p.value = p.value - (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.value.dtype)


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    if total <= 1 or lr == 0:
        return lr
    frac = min(step, total - 1) / (total - 1)
    return lr_min + 0.5 * (lr - lr_min) * (1 + math.cos(math.pi * frac))


def _trainable(name: str, policy: str) -> bool:
    if policy == "none":
        return True
    if policy == "all":
        return False
    return name.startswith("adapter.") or name.startswith("cut.")


def apply_freeze(params: ParamStore, policy: str) -> list[str]:
    """Set requires_grad per the freeze policy; returns the trainable names."""
    if policy not in FREEZE_POLICIES:
        raise ValueError(f"unknown freeze policy {policy!r}")
    names = []
    for name, p in params:
        p.requires_grad = _trainable(name, policy)
        if p.requires_grad:
            names.append(name)
    return names


# ---------------------------------------------------------------- data plumbing


def batch_features(positions: np.ndarray, ds: Dataset, idx) -> NodeFeatures:
    idx = np.asarray(idx)
    return NodeFeatures(positions, ds.signal[idx], ds.c_bc[idx], ds.c_cut[idx])


def augmented_batch(positions, ds: Dataset, idx, masks, syms: list[MeshSymmetry], rng, scale_range: float = 0.0):
    """Features, targets and masks with each sample sent through a random symmetry (or none).

    With ``scale_range`` a > 0 each sample is also multiplied by a random sign
    times U(1 - a, 1 + a), which linear elasticity maps to another exact sample.
    """
    idx = np.asarray(idx)
    signal, c_bc, c_cut = ds.signal[idx].copy(), ds.c_bc[idx].copy(), ds.c_cut[idx].copy()
    U, mask = ds.U[idx].copy(), masks[idx].copy()
    if syms:
        pick = rng.integers(0, len(syms) + 1, size=idx.size)
        for b in np.flatnonzero(pick):
            s = syms[pick[b] - 1]
            signal[b], U[b] = s.apply_field(signal[b]), s.apply_field(U[b])
            c_bc[b], c_cut[b], mask[b] = s.apply_nodes(c_bc[b]), s.apply_nodes(c_cut[b]), s.apply_nodes(mask[b])
    if scale_range > 0:
        lam = rng.uniform(1 - scale_range, 1 + scale_range, size=idx.size) * rng.choice([-1.0, 1.0], size=idx.size)
        lam = lam.astype(signal.dtype)[:, None, None]
        signal, U = signal * lam, U * lam
    return NodeFeatures(positions, signal, c_bc, c_cut), U, mask


def dataset_masks(mesh: TetMesh, ds: Dataset, policy: str = "active") -> np.ndarray:
    if policy == "all":
        return np.ones(ds.c_cut.shape, dtype=bool)
    return active_node_mask(mesh, ds.c_cut)


def fit_normalisation(mesh: TetMesh, ds: Dataset, mask=None) -> dict:
    """Fixed input shift/scale (bbox centre and half-extent, signal RMS) and output RMS."""
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    centre, half = (lo + hi) / 2, np.maximum((hi - lo) / 2, 1e-12)
    tool = ds.signal[ds.c_bc.astype(bool) & (np.abs(ds.signal).sum(-1) > 0)]
    s_scale = float(np.sqrt(np.mean(tool**2))) if tool.size else 1.0
    m = np.ones(ds.c_cut.shape, bool) if mask is None else np.asarray(mask, bool)
    u = ds.U[m]
    u_scale = float(np.sqrt(np.mean(u.astype(np.float64) ** 2))) if u.size else 1.0
    return {
        "input_shift": tuple(float(v) for v in (*centre, 0.0, 0.0, 0.0, 0.0)),
        "input_scale": tuple(float(v) for v in (*half, s_scale, s_scale, s_scale, 1.0)),
        "output_scale": u_scale if u_scale > 0 else 1.0,
    }


@dataclass
class TrainResult:
    losses: list[float]
    steps: int
    trainable: list[str]
    seconds: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for i, v in enumerate(self.losses):
                w.writerow([i, repr(float(v))])


ExtraLoss = Callable[[SurgFormer, int], "Tensor | None"]


def train_loop(
    model: SurgFormer,
    mesh: TetMesh,
    dataset: Dataset,
    cfg: TrainConfig,
    loss_csv=None,
    extra_loss: ExtraLoss | None = None,
    time_budget: float | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Shuffled mini-batch Adam with cosine decay; loss in units of the output scale.

    ``extra_loss(model, step)`` may add a differentiable term to every batch.
    Parameters outside the freeze policy are never touched.
    """
    if dataset.n_nodes != model.hierarchy.sizes[0]:
        raise ValueError(f"dataset has {dataset.n_nodes} nodes, hierarchy expects {model.hierarchy.sizes[0]}")
    params = model.params
    flags = {name: p.requires_grad for name, p in params}
    trainable = apply_freeze(params, cfg.freeze)
    masks = dataset_masks(mesh, dataset, cfg.loss_mask)
    n = len(dataset)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    rng = np.random.default_rng(cfg.seed)
    # separate stream so enabling augmentation leaves the batch order unchanged
    aug_rng = np.random.default_rng([cfg.seed, 1])
    syms = mesh_symmetries(mesh) if cfg.symmetry_augment else []
    state = AdamState()
    losses: list[float] = []
    scale = float(model.config.output_scale)
    t0 = time.perf_counter()
    step = 0
    try:
        if not trainable or total == 0:
            return TrainResult(losses, 0, trainable, 0.0)
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for b in range(per_epoch):
                if step >= total:
                    break
                idx = np.sort(order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
                for _, p in params:
                    p.grad = None
                feats, target, mask = augmented_batch(mesh.vertices, dataset, idx, masks, syms, aug_rng, cfg.scale_augment)
                weight = None
                if cfg.loss_weighting == "relative":
                    # batch mean 1 keeps the loss on the uniform scale, so clipping behaves alike
                    weight = relative_weights(target, mask, scale, cfg.relative_floor)
                    weight = weight / weight.mean()
                with Tape() as tape:
                    pred = model.forward(feats)
                    loss = mse_loss_tensor(pred, target, mask, scale, weight)
                    if extra_loss is not None:
                        extra = extra_loss(model, step)
                        if extra is not None:
                            loss = D.add(loss, extra)
                value = float(loss.value)
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
                tape.backward(loss)
                if cfg.grad_clip is not None:
                    _clip(params, cfg.grad_clip)
                adam_step(params, state, cosine_lr(step, total, cfg.lr, cfg.lr_min), cfg.beta1, cfg.beta2, cfg.eps)
                losses.append(value)
                step += 1
                if progress is not None:
                    progress(step, value)
                if time_budget is not None and time.perf_counter() - t0 > time_budget:
                    log.warning("time budget exhausted after %d steps", step)
                    total = step
            if step >= total:
                break
    finally:
        for name, p in params:
            p.requires_grad = flags[name]
            p.grad = None
    return TrainResult(losses, step, trainable, time.perf_counter() - t0)


def _clip(params: ParamStore, max_norm: float) -> None:
    grads = [p.grad for _, p in params if p.requires_grad and p.grad is not None]
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if total > max_norm:
        for _, p in params:
            if p.requires_grad and p.grad is not None:
                p.grad = p.grad * (max_norm / total)


# ---------------------------------------------------------------- evaluation


def predict_dataset(model: SurgFormer, mesh: TetMesh, ds: Dataset, batch_size: int = 32) -> np.ndarray:
    out = np.zeros(ds.U.shape, dtype=np.float32)
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        out[idx] = model.predict(batch_features(mesh.vertices, ds, idx))
    return out


@dataclass
class EvalReport:
    nrmse: float
    nmaxerr: float
    dcm: float
    time_ms_median: float
    time_ms_mean: float
    params: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "nrmse": self.nrmse,
            "nmaxerr": self.nmaxerr,
            "dcm": self.dcm,
            "time_ms_median": self.time_ms_median,
            "time_ms_mean": self.time_ms_mean,
            "params": self.params,
        }
        d.update(self.extra)
        return d


def evaluate(
    model: SurgFormer,
    mesh: TetMesh,
    ds: Dataset,
    batch_size: int = 32,
    timing_samples: int = 16,
    targets=None,
    mask_policy: str = "active",
) -> EvalReport:
    """Metric suite over ``ds`` plus per-sample single-forward wall time."""
    pred = predict_dataset(model, mesh, ds, batch_size)
    target = ds.U if targets is None else np.asarray(targets)
    masks = dataset_masks(mesh, ds, mask_policy)
    nrmse, nmax, dcm = metric_suite(pred, target, masks)
    times = []
    for k in range(min(timing_samples, len(ds))):
        feats = batch_features(mesh.vertices, ds, [k])
        t0 = time.perf_counter()
        model.predict(feats)
        times.append((time.perf_counter() - t0) * 1e3)
    times = times or [0.0]
    return EvalReport(nrmse, nmax, dcm, float(np.median(times)), float(np.mean(times)), model.params.count())


# ---------------------------------------------------------------- transfer


def transfer_model(
    source: SurgFormer, target_cfg: ModelConfig, seed: int = 0, pad_widened: bool = False
) -> tuple[SurgFormer, list[str]]:
    """Copy source weights into a fresh model.

    Tensors whose shape changed, or that are new, stay freshly initialised and
    their names are returned alongside the model. With ``pad_widened`` a widened
    adapter input instead keeps the source rows and gets zero rows for the new
    cut-embedding channels, so the model starts out predicting what the source did.
    """
    fresh = init_weights(target_cfg, seed, source.params.dtype)
    src = dict(source.params)
    reinit = []
    for name, p in fresh:
        old = src.get(name)
        if old is not None and old.value.shape == p.value.shape:
            p.value = old.value.copy()
        elif pad_widened and name == "adapter.W1" and old is not None and old.value.shape[1] == p.value.shape[1]:
            rows = min(old.value.shape[0], p.value.shape[0])
            w = np.zeros_like(p.value)
            w[:rows] = old.value[:rows]
            p.value = w
        else:
            reinit.append(name)
    return SurgFormer(target_cfg, fresh, source.hierarchy, dict(source.meta)), reinit


def run_transfer_stages(
    source: SurgFormer,
    mesh: TetMesh,
    train_ds: Dataset,
    eval_ds: Dataset,
    adapter_cfg: TrainConfig,
    full_cfg: TrainConfig,
    seed: int = 0,
    stages=("zeroshot", "adapter", "full"),
) -> dict:
    """Zero-shot, then adapter + cut embedding only, then full fine-tuning, chained.

    Returns per-stage EvalReports and the models.
    """
    target_cfg = dataclasses.replace(source.config, cut_enabled=True)
    model, reinit = transfer_model(source, target_cfg, seed)
    out = {"reinitialised": reinit, "reports": {}, "models": {}}
    for stage in stages:
        if stage == "adapter":
            train_loop(model, mesh, train_ds, dataclasses.replace(adapter_cfg, freeze="adapter_and_embedding_only"))
        elif stage == "full":
            train_loop(model, mesh, train_ds, dataclasses.replace(full_cfg, freeze="none"))
        elif stage != "zeroshot":
            raise ValueError(f"unknown transfer stage {stage!r}")
        out["reports"][stage] = evaluate(model, mesh, eval_ds, timing_samples=0)
        out["models"][stage] = SurgFormer(model.config, model.params.copy(), model.hierarchy, dict(model.meta))
    return out
